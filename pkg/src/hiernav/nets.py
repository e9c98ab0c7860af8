"""Attention decision networks: masked self-attention viewpoint encoder,
beacon and waypoint pointer decoders, and the joint two-stage critic.

All modules are plain single-head attention so the arithmetic matches the
hand-checkable form: a_ij = softmax_j(q_i . k_j / sqrt(d)) with exact zeros
at masked positions.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .graph import Observation


class DegenerateMaskError(ValueError):
    """A query row has every key masked out."""


class NoBeaconError(ValueError):
    """Beacon decoding requested with an empty beacon candidate list."""


class NoActionError(ValueError):
    """Waypoint decoding requested for a node with no graph neighbors."""


class CheckpointError(ValueError):
    """Checkpoint file malformed or incompatible with the network."""


@dataclass
class NetConfig:
    feature_dim: int
    d_model: int = 128
    num_layers: int = 6
    ff_dim: int = 512
    pointer_clip: float = 10.0


def masked_attention(
    queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention with a {0,1} mask; mask[i, j] == 1 hides
    key j from query i and forces its weight to exactly 0.

    Returns (outputs n x d, weights n x m). Raises DegenerateMaskError when
    a query row has no unmasked key.
    """
    d = queries.shape[-1]
    masked = mask.to(torch.bool)
    if bool(masked.all(dim=-1).any()):
        raise DegenerateMaskError("attention row with every key masked")
    logits = queries @ keys.transpose(-1, -2) / math.sqrt(d)
    logits = logits.masked_fill(masked, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return weights @ values, weights


class SelfAttentionBlock(nn.Module):
    """One encoder layer: masked self-attention and a feed-forward stage,
    each wrapped in a residual connection and layer norm."""

    def __init__(self, d_model: int, ff_dim: int):
        super().__init__()
        self.wq = nn.Linear(d_model, d_model, bias=False)
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model, bias=False)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        # GELU keeps the block smooth, so finite-difference gradient checks
        # hold at every parameter point
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_dim), nn.GELU(), nn.Linear(ff_dim, d_model)
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        att, _ = masked_attention(self.wq(x), self.wk(x), self.wv(x), mask)
        x = self.norm1(x + att)
        return self.norm2(x + self.ff(x))


class CrossAttention(nn.Module):
    """Attention of query rows over a memory of encoded features. Supports
    leading batch dimensions; key_mask hides memory rows (True = hidden)."""

    def __init__(self, d_model: int):
        super().__init__()
        self.wq = nn.Linear(d_model, d_model, bias=False)
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model, bias=False)

    def forward(
        self, queries: torch.Tensor, memory: torch.Tensor, key_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        if key_mask is None:
            mask = torch.zeros(
                *queries.shape[:-1], memory.shape[-2], dtype=torch.bool, device=queries.device
            )
        else:
            mask = key_mask[..., None, :].expand(*queries.shape[:-1], memory.shape[-2])
        out, _ = masked_attention(self.wq(queries), self.wk(memory), self.wv(memory), mask)
        return out


class PointerHead(nn.Module):
    """Attention scores over candidates used directly as an action
    distribution; logits are clip * tanh(q . k / sqrt(d)). key_mask hides
    candidates (True = hidden), giving them exactly zero probability."""

    def __init__(self, d_model: int, clip: float = 10.0):
        super().__init__()
        self.wq = nn.Linear(d_model, d_model, bias=False)
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.clip = clip

    def forward(
        self, query: torch.Tensor, keys: torch.Tensor, key_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        d = query.shape[-1]
        logits = self.wq(query) @ self.wk(keys).transpose(-1, -2) / math.sqrt(d)
        logits = self.clip * torch.tanh(logits)
        if key_mask is not None:
            logits = logits.masked_fill(
                key_mask[..., None, :].expand_as(logits), float("-inf")
            )
        return torch.softmax(logits, dim=-1)


class _EncoderCore(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.feature_dim, cfg.d_model)
        self.layers = nn.ModuleList(
            SelfAttentionBlock(cfg.d_model, cfg.ff_dim) for _ in range(cfg.num_layers)
        )

    def encode(self, features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.embed(features)
        for layer in self.layers:
            x = layer(x, mask)
        return x


class PolicyNet(_EncoderCore):
    """Hierarchical policy: beacon pointer over beacon candidates, then a
    waypoint pointer over the current node's neighbors."""

    def __init__(self, cfg: NetConfig):
        super().__init__(cfg)
        self.beacon_cross = CrossAttention(cfg.d_model)
        self.beacon_pointer = PointerHead(cfg.d_model, cfg.pointer_clip)
        self.waypoint_cross = CrossAttention(cfg.d_model)
        self.waypoint_pointer = PointerHead(cfg.d_model, cfg.pointer_clip)

    def decode_beacon(
        self, encoded: torch.Tensor, current_index: int, beacon_indices: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Distribution over beacon candidates plus the decoded feature of
        the robot's position."""
        if len(beacon_indices) == 0:
            raise NoBeaconError("no beacon candidates")
        h_p = encoded[current_index : current_index + 1]
        h_p_dec = self.beacon_cross(h_p, encoded)[0]
        probs = self.beacon_pointer(h_p_dec[None, :], encoded[beacon_indices])[0]
        return probs, h_p_dec

    def decode_waypoint(
        self, encoded: torch.Tensor, beacon_index: int, neighbor_indices: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Distribution over the current node's neighbors given the selected
        beacon, the decoded beacon feature, and the decoded per-candidate
        features used by the contrastive objective."""
        if len(neighbor_indices) == 0:
            raise NoActionError("current node has no neighbors")
        h_b = encoded[beacon_index : beacon_index + 1]
        h_b_dec = self.waypoint_cross(h_b, encoded)[0]
        cand = encoded[neighbor_indices]
        probs = self.waypoint_pointer(h_b_dec[None, :], cand)[0]
        cand_dec = self.waypoint_cross(cand, encoded)
        return probs, h_b_dec, cand_dec


class CriticNet(_EncoderCore):
    """Joint action-value network: decodes the selected beacon and waypoint
    against the encoded graph and maps their concatenation to a scalar."""

    def __init__(self, cfg: NetConfig):
        super().__init__(cfg)
        self.beacon_cross = CrossAttention(cfg.d_model)
        self.waypoint_cross = CrossAttention(cfg.d_model)
        self.head = nn.Linear(2 * cfg.d_model, 1)

    def q_values(
        self, encoded: torch.Tensor, beacon_indices: torch.Tensor, neighbor_indices: torch.Tensor
    ) -> torch.Tensor:
        """Q for every (beacon, waypoint) candidate pair, shape (B, A)."""
        if len(beacon_indices) == 0:
            raise NoBeaconError("no beacon candidates")
        if len(neighbor_indices) == 0:
            raise NoActionError("no waypoint candidates")
        dec_b = self.beacon_cross(encoded[beacon_indices], encoded)
        dec_a = self.waypoint_cross(encoded[neighbor_indices], encoded)
        nb, na, d = dec_b.shape[0], dec_a.shape[0], dec_b.shape[1]
        joint = torch.cat(
            [
                dec_b[:, None, :].expand(nb, na, d),
                dec_a[None, :, :].expand(nb, na, d),
            ],
            dim=-1,
        )
        return self.head(joint).squeeze(-1)


def obs_tensors(obs: Observation, dtype: torch.dtype = torch.float32):
    """Observation arrays as torch tensors (features, mask, beacons, neighbors)."""
    return (
        torch.from_numpy(obs.features).to(dtype),
        torch.from_numpy(obs.mask),
        torch.from_numpy(obs.beacon_indices),
        torch.from_numpy(obs.neighbor_indices),
    )


def policy_distributions(
    policy: PolicyNet, obs: Observation, dtype: torch.dtype = torch.float32
):
    """Forward an observation through the policy: beacon distribution and the
    per-beacon-candidate waypoint distributions, plus candidate features."""
    feats, mask, beacons, neighbors = obs_tensors(obs, dtype)
    enc = policy.encode(feats, mask)
    beacon_probs, _ = policy.decode_beacon(enc, obs.current_index, beacons)
    waypoint_probs = []
    cand_feats = None
    for b in beacons.tolist():
        probs, _, cand = policy.decode_waypoint(enc, b, neighbors)
        waypoint_probs.append(probs)
        cand_feats = cand
    return beacon_probs, waypoint_probs, cand_feats


def critic_q(
    critic: CriticNet,
    obs: Observation,
    beacon_pos: int,
    waypoint_pos: int,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scalar Q(o, (beacon, waypoint)) plus the per-waypoint Q vector for the
    fixed beacon, produced in one pass."""
    feats, mask, beacons, neighbors = obs_tensors(obs, dtype)
    enc = critic.encode(feats, mask)
    q = critic.q_values(enc, beacons, neighbors)
    return q[beacon_pos, waypoint_pos], q[beacon_pos]


# --- checkpoint format -------------------------------------------------------
# magic (8 bytes) | manifest length (uint64 LE) | manifest JSON | raw payload
# The manifest carries name/dtype/shape/offset per tensor plus free-form meta.

_MAGIC = b"HNAVCKP1"
_FORMAT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        entries.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes())
    manifest = json.dumps(
        {"format_version": _FORMAT_VERSION, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        fh.write(payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (manifest_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        if manifest.get("format_version") != _FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {manifest.get('format_version')}")
        payload = fh.read()
    arrays = {}
    for ent in manifest["tensors"]:
        raw = payload[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(raw, dtype=np.dtype(ent["dtype"])).reshape(
            ent["shape"]
        ).copy()
    return arrays, manifest["meta"]


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{name}": tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = module.state_dict()
    tensors = {}
    for name, tensor in state.items():
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for {key}: checkpoint {tuple(arr.shape)} vs net {tuple(tensor.shape)}"
            )
        tensors[name] = torch.from_numpy(arr).to(tensor.dtype)
    module.load_state_dict(tensors)


def save_policy_checkpoint(path, policy: PolicyNet, critic: CriticNet | None,
                           target: CriticNet | None, log_alpha: float, cfg: NetConfig,
                           extra_meta: dict | None = None) -> None:
    arrays = module_arrays(policy, "policy")
    if critic is not None:
        arrays.update(module_arrays(critic, "critic"))
    if target is not None:
        arrays.update(module_arrays(target, "target"))
    arrays["log_alpha"] = np.array([log_alpha], dtype=np.float64)
    meta = {"net_config": asdict(cfg)}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, arrays, meta)


def load_policy_checkpoint(path) -> tuple[PolicyNet, NetConfig, dict]:
    arrays, meta = load_checkpoint(path)
    if "net_config" not in meta:
        raise CheckpointError("checkpoint missing net_config meta")
    cfg = NetConfig(**meta["net_config"])
    policy = PolicyNet(cfg)
    load_module_arrays(policy, arrays, "policy")
    policy.eval()
    return policy, cfg, meta
