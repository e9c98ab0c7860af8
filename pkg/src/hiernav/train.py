"""Off-policy trainer: soft actor-critic losses over the hierarchical action,
contrastive triplet optimization, target-network updates, replay buffer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .graph import Observation
from .nets import CriticNet, PolicyNet, obs_tensors


@dataclass
class Transition:
    """One stored interaction. Actions are positions into the observation's
    beacon and neighbor candidate lists. next_obs is None on terminal
    transitions (no bootstrap)."""

    obs: Observation
    beacon_pos: int
    waypoint_pos: int
    reward: float
    next_obs: Observation | None
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform without-replacement sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def sample(self, rng: np.random.Generator, n: int) -> list[Transition]:
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[int(i)] for i in idx]


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    batch_size: int = 64
    buffer_capacity: int = 10000
    lr_policy: float = 1e-4
    lr_critic: float = 1e-4
    lr_alpha: float = 1e-4
    alpha_init: float = 0.1
    target_entropy_scale: float = 0.1
    tau_soft: float = 0.005
    margin: float = 1.0
    epsilon: float = 0.5
    lambda_contrastive: float = 0.1
    clamp_contrastive: bool = True
    iterations_per_episode: int = 4
    grad_clip: float = 0.0  # max grad norm per update; 0 disables


@dataclass
class TrainReport:
    critic_loss: float
    policy_loss: float
    temperature_loss: float
    contrastive_loss: float
    alpha: float
    buffer_size: int


def _safe_log(probs: torch.Tensor) -> torch.Tensor:
    # clamp keeps the unselected branch's local gradient finite at p == 0;
    # 1e-38 stays representable (and differentiable) in float32
    return torch.where(probs > 0, torch.log(probs.clamp_min(1e-38)), torch.zeros_like(probs))


def soft_value(q: torch.Tensor, probs: torch.Tensor, alpha: float) -> torch.Tensor:
    """Entropy-regularized expected value over a discrete candidate set:
    V = sum_a pi(a) (Q(a) - alpha * log pi(a)), as an exact expectation."""
    return (probs * (q - alpha * _safe_log(probs))).sum()


def policy_head_loss(probs: torch.Tensor, q: torch.Tensor, alpha: float) -> torch.Tensor:
    """sum_a pi(a) (alpha * log pi(a) - Q(a)); Q is treated as constant."""
    return (probs * (alpha * _safe_log(probs) - q.detach())).sum()


def entropy(probs: torch.Tensor) -> torch.Tensor:
    return -(probs * _safe_log(probs)).sum()


def temperature_loss(
    alpha: torch.Tensor, policy_entropy: float, target_entropy: float
) -> torch.Tensor:
    """-alpha * (target - entropy): descent raises alpha while the policy is
    less random than the target and lowers it otherwise."""
    return -alpha * (target_entropy - policy_entropy)


def contrastive_loss(
    f_anchor: torch.Tensor,
    f_pos: torch.Tensor,
    f_neg: torch.Tensor,
    margin: float,
    clamp: bool = True,
) -> torch.Tensor:
    """Triplet margin over action features: ||f+ - f^|| - ||f- - f^|| + m,
    clamped at zero unless raw mode is requested."""
    raw = (f_pos - f_anchor).norm() - (f_neg - f_anchor).norm() + margin
    return torch.clamp(raw, min=0.0) if clamp else raw


def soft_update_target(src: torch.nn.Module, dst: torch.nn.Module, tau: float) -> None:
    """dst <- tau * src + (1 - tau) * dst, elementwise over parameters."""
    src_state = src.state_dict()
    dst_state = dst.state_dict()
    if set(src_state) != set(dst_state):
        raise ValueError("source and target parameter sets differ")
    with torch.no_grad():
        for name, sp in src_state.items():
            dp = dst_state[name]
            if sp.shape != dp.shape:
                raise ValueError(f"shape mismatch for {name}")
            dp.mul_(1.0 - tau).add_(sp, alpha=tau)


@dataclass
class _PaddedBatch:
    """Observations padded to common sizes for batched forwards.

    Index pads point at node 0 so every gather stays in range; validity
    masks zero the padded entries out of all reductions.
    """

    feats: torch.Tensor       # (S, N, F)
    mask: torch.Tensor        # (S, N, N) uint8; padded rows self-attend
    node_valid: torch.Tensor  # (S, N) bool
    current: torch.Tensor     # (S,) long
    b_idx: torch.Tensor       # (S, B) long
    b_valid: torch.Tensor     # (S, B) bool
    a_idx: torch.Tensor       # (S, A) long
    a_valid: torch.Tensor     # (S, A) bool


def pad_observations(obs_list: list[Observation], dtype: torch.dtype) -> _PaddedBatch:
    s = len(obs_list)
    n_max = max(o.n for o in obs_list)
    b_max = max(len(o.beacon_indices) for o in obs_list)
    a_max = max(len(o.neighbor_indices) for o in obs_list)
    f_dim = obs_list[0].features.shape[1]
    feats = torch.zeros(s, n_max, f_dim, dtype=dtype)
    mask = torch.ones(s, n_max, n_max, dtype=torch.uint8)
    node_valid = torch.zeros(s, n_max, dtype=torch.bool)
    current = torch.zeros(s, dtype=torch.long)
    b_idx = torch.zeros(s, b_max, dtype=torch.long)
    b_valid = torch.zeros(s, b_max, dtype=torch.bool)
    a_idx = torch.zeros(s, a_max, dtype=torch.long)
    a_valid = torch.zeros(s, a_max, dtype=torch.bool)
    diag = torch.arange(n_max)
    for i, o in enumerate(obs_list):
        n = o.n
        feats[i, :n] = torch.from_numpy(o.features).to(dtype)
        mask[i, :n, :n] = torch.from_numpy(o.mask)
        node_valid[i, :n] = True
        current[i] = o.current_index
        nb, na = len(o.beacon_indices), len(o.neighbor_indices)
        b_idx[i, :nb] = torch.from_numpy(o.beacon_indices)
        b_valid[i, :nb] = True
        a_idx[i, :na] = torch.from_numpy(o.neighbor_indices)
        a_valid[i, :na] = True
    mask[:, diag, diag] = 0  # padded rows attend to themselves
    return _PaddedBatch(feats, mask, node_valid, current, b_idx, b_valid, a_idx, a_valid)


def _gather_rows(enc: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """enc (S, N, d), idx (S, L) -> (S, L, d)."""
    d = enc.shape[-1]
    return torch.gather(enc, 1, idx[:, :, None].expand(*idx.shape, d))


def policy_forward_batch(policy: PolicyNet, pb: _PaddedBatch):
    """Batched policy forward: beacon distribution (S, B), per-beacon
    waypoint distributions (S, B, A), and per-candidate decoded features
    (S, A, d). Padded candidates carry exactly zero probability."""
    enc = policy.encode(pb.feats, pb.mask)
    key_mask = ~pb.node_valid
    s = enc.shape[0]
    cur = enc[torch.arange(s), pb.current][:, None, :]
    h_p = policy.beacon_cross(cur, enc, key_mask)
    b_enc = _gather_rows(enc, pb.b_idx)
    beacon_probs = policy.beacon_pointer(h_p, b_enc, ~pb.b_valid).squeeze(1)
    h_b = policy.waypoint_cross(b_enc, enc, key_mask)
    a_enc = _gather_rows(enc, pb.a_idx)
    waypoint_probs = policy.waypoint_pointer(h_b, a_enc, ~pb.a_valid)
    cand_feats = policy.waypoint_cross(a_enc, enc, key_mask)
    return beacon_probs, waypoint_probs, cand_feats


def q_matrix_batch(critic: CriticNet, pb: _PaddedBatch) -> torch.Tensor:
    """Batched joint Q over every (beacon, waypoint) candidate pair: (S, B, A)."""
    enc = critic.encode(pb.feats, pb.mask)
    key_mask = ~pb.node_valid
    dec_b = critic.beacon_cross(_gather_rows(enc, pb.b_idx), enc, key_mask)
    dec_a = critic.waypoint_cross(_gather_rows(enc, pb.a_idx), enc, key_mask)
    s, nb, d = dec_b.shape
    na = dec_a.shape[1]
    joint = torch.cat(
        [
            dec_b[:, :, None, :].expand(s, nb, na, d),
            dec_a[:, None, :, :].expand(s, nb, na, d),
        ],
        dim=-1,
    )
    return critic.head(joint).squeeze(-1)


def build_triplet(
    probs: np.ndarray,
    q_live: np.ndarray,
    q_target: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
    max_resample: int = 64,
) -> tuple[int, int, int] | None:
    """Contrastive triplet (sampled action, best-Q action, distinct random
    action) over a candidate set; None (skip) when fewer than 3 candidates.

    With probability epsilon the positive comes from the live Q estimates,
    otherwise from the target ones. The negative is drawn from the policy
    until distinct from both; after max_resample rejections it falls back to
    a uniform draw over the remaining candidates.
    """
    n = len(probs)
    if n < 3:
        return None
    p = np.asarray(probs, dtype=np.float64)
    p = p / p.sum()
    a_hat = int(rng.choice(n, p=p))
    source = q_live if rng.random() < epsilon else q_target
    a_pos = int(np.argmax(source))
    a_neg = None
    for _ in range(max_resample):
        cand = int(rng.choice(n, p=p))
        if cand != a_hat and cand != a_pos:
            a_neg = cand
            break
    if a_neg is None:
        remaining = [i for i in range(n) if i != a_hat and i != a_pos]
        a_neg = int(remaining[rng.integers(len(remaining))])
    return a_hat, a_pos, a_neg


class Trainer:
    """One gradient step each on critic, policy (+contrastive), and the
    temperature per call, then a soft target update."""

    def __init__(
        self,
        policy: PolicyNet,
        critic: CriticNet,
        target: CriticNet,
        cfg: TrainerConfig,
        rng: np.random.Generator,
        dtype: torch.dtype = torch.float32,
    ):
        self.policy = policy
        self.critic = critic
        self.target = target
        self.cfg = cfg
        self.rng = rng
        self.dtype = dtype
        target.load_state_dict(critic.state_dict())
        for p in target.parameters():
            p.requires_grad_(False)
        self.log_alpha = torch.tensor(
            math.log(cfg.alpha_init), dtype=torch.float64, requires_grad=True
        )
        self.policy_opt = torch.optim.Adam(policy.parameters(), lr=cfg.lr_policy)
        self.critic_opt = torch.optim.Adam(critic.parameters(), lr=cfg.lr_critic)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], lr=cfg.lr_alpha)

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.detach().exp())

    def _clip(self, params) -> None:
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)

    # -- forward helpers ------------------------------------------------------

    def _policy_forward(self, obs: Observation):
        feats, mask, beacons, neighbors = obs_tensors(obs, self.dtype)
        enc = self.policy.encode(feats, mask)
        beacon_probs, _ = self.policy.decode_beacon(enc, obs.current_index, beacons)
        waypoint_probs = [
            self.policy.decode_waypoint(enc, int(b), neighbors)[0] for b in beacons
        ]
        cand_feats = self.policy.waypoint_cross(enc[neighbors], enc)
        return beacon_probs, waypoint_probs, cand_feats

    def _q_matrix(self, net: CriticNet, obs: Observation) -> torch.Tensor:
        feats, mask, beacons, neighbors = obs_tensors(obs, self.dtype)
        enc = net.encode(feats, mask)
        return net.q_values(enc, beacons, neighbors)

    def joint_value(self, obs: Observation, alpha: float) -> torch.Tensor:
        """Soft value of the joint hierarchical action under the current
        policy and the target critic."""
        with torch.no_grad():
            beacon_probs, waypoint_probs, _ = self._policy_forward(obs)
            q = self._q_matrix(self.target, obs)
            inner = torch.stack(
                [soft_value(q[i], waypoint_probs[i], alpha) for i in range(len(waypoint_probs))]
            )
            logs = _safe_log(beacon_probs)
            return (beacon_probs * (inner - alpha * logs)).sum()

    # -- losses ---------------------------------------------------------------

    def critic_loss(self, batch: list[Transition], alpha: float) -> torch.Tensor:
        errs = []
        for tr in batch:
            feats, mask, beacons, neighbors = obs_tensors(tr.obs, self.dtype)
            enc = self.critic.encode(feats, mask)
            q_pred = self.critic.q_values(enc, beacons, neighbors)[
                tr.beacon_pos, tr.waypoint_pos
            ]
            if tr.done or tr.next_obs is None:
                y = torch.tensor(tr.reward, dtype=self.dtype)
            else:
                v_next = self.joint_value(tr.next_obs, alpha)
                y = (tr.reward + self.cfg.gamma * v_next).detach().to(self.dtype)
            errs.append((q_pred - y) ** 2)
        return torch.stack(errs).mean()

    def policy_losses(self, batch: list[Transition], alpha: float):
        """Per-batch policy objective, contrastive objective, and the
        entropy/target pairs feeding the temperature update."""
        head_losses = []
        contrastive_terms = []
        entropies: list[float] = []
        targets: list[float] = []
        for tr in batch:
            obs = tr.obs
            beacon_probs, waypoint_probs, cand_feats = self._policy_forward(obs)
            with torch.no_grad():
                q = self._q_matrix(self.critic, obs)
            nb = len(waypoint_probs)
            q_per_beacon = torch.stack(
                [soft_value(q[i], waypoint_probs[i].detach(), alpha) for i in range(nb)]
            )
            loss_b = policy_head_loss(beacon_probs, q_per_beacon, alpha)
            pb_const = beacon_probs.detach()
            loss_a = sum(
                pb_const[i] * policy_head_loss(waypoint_probs[i], q[i], alpha)
                for i in range(nb)
            )
            head_losses.append(loss_b + loss_a)

            ent = float(
                sum(pb_const[i] * entropy(waypoint_probs[i]).detach() for i in range(nb))
            )
            entropies.append(ent)
            targets.append(self.cfg.target_entropy_scale * math.log(len(obs.neighbor_indices)))

            if len(obs.neighbor_indices) >= 3:
                b_hat = int(
                    self.rng.choice(nb, p=_normalized(pb_const.numpy()))
                )
                with torch.no_grad():
                    q_target = self._q_matrix(self.target, obs)
                triplet = build_triplet(
                    waypoint_probs[b_hat].detach().numpy(),
                    q[b_hat].numpy(),
                    q_target[b_hat].numpy(),
                    self.cfg.epsilon,
                    self.rng,
                )
                if triplet is not None:
                    a_hat, a_pos, a_neg = triplet
                    contrastive_terms.append(
                        contrastive_loss(
                            cand_feats[a_hat],
                            cand_feats[a_pos],
                            cand_feats[a_neg],
                            self.cfg.margin,
                            self.cfg.clamp_contrastive,
                        )
                    )
        policy_loss = torch.stack(head_losses).mean()
        if contrastive_terms:
            con_loss = torch.stack(contrastive_terms).mean()
        else:
            con_loss = torch.zeros((), dtype=self.dtype)
        return policy_loss, con_loss, entropies, targets

    # -- batched losses (same math as the per-sample reference above) ----------

    def joint_value_batch(self, obs_list: list[Observation], alpha: float) -> torch.Tensor:
        with torch.no_grad():
            pb = pad_observations(obs_list, self.dtype)
            beacon_probs, waypoint_probs, _ = policy_forward_batch(self.policy, pb)
            q = q_matrix_batch(self.target, pb)
            inner = (waypoint_probs * (q - alpha * _safe_log(waypoint_probs))).sum(-1)
            return (beacon_probs * (inner - alpha * _safe_log(beacon_probs))).sum(-1)

    def critic_loss_batched(self, batch: list[Transition], alpha: float) -> torch.Tensor:
        pb = pad_observations([tr.obs for tr in batch], self.dtype)
        q_all = q_matrix_batch(self.critic, pb)
        s = len(batch)
        b_pos = torch.tensor([tr.beacon_pos for tr in batch])
        a_pos = torch.tensor([tr.waypoint_pos for tr in batch])
        q_pred = q_all[torch.arange(s), b_pos, a_pos]
        rewards = torch.tensor([tr.reward for tr in batch], dtype=self.dtype)
        not_done = torch.tensor(
            [0.0 if (tr.done or tr.next_obs is None) else 1.0 for tr in batch],
            dtype=self.dtype,
        )
        next_obs = [tr.next_obs if tr.next_obs is not None else tr.obs for tr in batch]
        v_next = self.joint_value_batch(next_obs, alpha).to(self.dtype)
        y = rewards + self.cfg.gamma * not_done * v_next
        return ((q_pred - y.detach()) ** 2).mean()

    def policy_losses_batched(self, batch: list[Transition], alpha: float):
        pb = pad_observations([tr.obs for tr in batch], self.dtype)
        beacon_probs, waypoint_probs, cand_feats = policy_forward_batch(self.policy, pb)
        with torch.no_grad():
            q = q_matrix_batch(self.critic, pb)
            q_t = q_matrix_batch(self.target, pb)
        log_wp = _safe_log(waypoint_probs)
        sv = (waypoint_probs.detach() * (q - alpha * log_wp.detach())).sum(-1)  # (S, B)
        loss_b = (beacon_probs * (alpha * _safe_log(beacon_probs) - sv)).sum(-1)
        loss_a = (
            beacon_probs.detach() * (waypoint_probs * (alpha * log_wp - q)).sum(-1)
        ).sum(-1)
        policy_loss = (loss_b + loss_a).mean()

        ent_per_beacon = -(waypoint_probs * log_wp).sum(-1)
        entropies = (beacon_probs.detach() * ent_per_beacon.detach()).sum(-1).tolist()
        n_actions = pb.a_valid.sum(-1).tolist()
        targets = [self.cfg.target_entropy_scale * math.log(n) for n in n_actions]

        contrastive_terms = []
        pb_np = beacon_probs.detach().numpy()
        for i, tr in enumerate(batch):
            na = int(n_actions[i])
            if na < 3:
                continue
            nb = int(pb.b_valid[i].sum())
            b_hat = int(self.rng.choice(nb, p=_normalized(pb_np[i, :nb])))
            triplet = build_triplet(
                waypoint_probs[i, b_hat, :na].detach().numpy(),
                q[i, b_hat, :na].numpy(),
                q_t[i, b_hat, :na].numpy(),
                self.cfg.epsilon,
                self.rng,
            )
            if triplet is not None:
                a_hat, a_pos, a_neg = triplet
                contrastive_terms.append(
                    contrastive_loss(
                        cand_feats[i, a_hat],
                        cand_feats[i, a_pos],
                        cand_feats[i, a_neg],
                        self.cfg.margin,
                        self.cfg.clamp_contrastive,
                    )
                )
        if contrastive_terms:
            con_loss = torch.stack(contrastive_terms).mean()
        else:
            con_loss = torch.zeros((), dtype=self.dtype)
        return policy_loss, con_loss, entropies, targets

    # -- the step -------------------------------------------------------------

    def train_step(self, buffer: ReplayBuffer, batched: bool = True) -> TrainReport | None:
        """One gradient step on critic, policy (+contrastive), and log-alpha,
        then a soft target update. None when the buffer is too small."""
        if len(buffer) < self.cfg.batch_size:
            return None
        batch = buffer.sample(self.rng, self.cfg.batch_size)
        alpha = self.alpha

        self.critic_opt.zero_grad()
        c_loss = (
            self.critic_loss_batched(batch, alpha)
            if batched
            else self.critic_loss(batch, alpha)
        )
        c_loss.backward()
        self._clip(self.critic.parameters())
        self.critic_opt.step()

        self.policy_opt.zero_grad()
        p_loss, con_loss, entropies, targets = (
            self.policy_losses_batched(batch, alpha)
            if batched
            else self.policy_losses(batch, alpha)
        )
        (p_loss + self.cfg.lambda_contrastive * con_loss).backward()
        self._clip(self.policy.parameters())
        self.policy_opt.step()

        self.alpha_opt.zero_grad()
        a = self.log_alpha.exp()
        t_loss = torch.stack(
            [temperature_loss(a, e, t) for e, t in zip(entropies, targets)]
        ).mean()
        t_loss.backward()
        self.alpha_opt.step()

        soft_update_target(self.critic, self.target, self.cfg.tau_soft)
        return TrainReport(
            critic_loss=float(c_loss.detach()),
            policy_loss=float(p_loss.detach()),
            temperature_loss=float(t_loss.detach()),
            contrastive_loss=float(con_loss.detach()),
            alpha=self.alpha,
            buffer_size=len(buffer),
        )


def _normalized(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p / p.sum()
