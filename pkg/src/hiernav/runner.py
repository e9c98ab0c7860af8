"""Episode execution: decision -> move -> sense -> reward loops for learned
and classical planners, benchmarking, and the training driver."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from . import baselines
from .graph import StepContext, build_step_context
from .kernels import FREE
from .nets import (
    CriticNet,
    NetConfig,
    PolicyNet,
    obs_tensors,
    save_policy_checkpoint,
)
from .train import ReplayBuffer, Trainer, TrainerConfig, Transition
from .world import (
    BeliefMap,
    GroundTruthMap,
    Pose,
    coverage_fraction,
    load_map,
    sense_and_update,
)

Cell = tuple[int, int]


class Task(str, Enum):
    EXPLORATION = "exploration"
    NAVIGATION = "navigation"


class EpisodeFailure(Exception):
    """A planner could not produce an action; the episode records a failure."""


@dataclass
class EpisodeConfig:
    task: Task = Task.EXPLORATION
    sensor_range: float = 20.0
    max_steps: int = 128
    lattice: tuple[int, int] = (40, 30)
    k: int = 20
    d_th: float | None = None            # default: sensor_range / 2
    coverage_threshold: float = 0.99
    step_cost: float = 0.5
    done_bonus: float = 20.0
    area_scale: float | None = None      # default: sensor_range ** 2
    nav_scale: float | None = None       # default: sensor_range
    timing: bool = True

    @property
    def d_th_value(self) -> float:
        return self.d_th if self.d_th is not None else self.sensor_range / 2.0

    @property
    def area_scale_value(self) -> float:
        return self.area_scale if self.area_scale is not None else self.sensor_range**2

    @property
    def nav_scale_value(self) -> float:
        return self.nav_scale if self.nav_scale is not None else self.sensor_range


@dataclass
class StepRecord:
    t: int
    pose: tuple[float, float]            # position after the step, meters
    beacon: tuple[float, float] | None   # chosen beacon position
    waypoint: tuple[float, float]        # chosen waypoint position
    reward: float
    distance_increment: float
    compute_s: float = 0.0


@dataclass
class EpisodeMetrics:
    distance: float
    steps: int
    success: bool
    coverage: float
    mean_compute_s: float


@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    records: list[StepRecord]
    start: tuple[float, float]
    target: tuple[float, float] | None
    belief: BeliefMap
    transitions: list[Transition] = field(default_factory=list)
    replans: int = 0


def reward(
    task: Task,
    cfg: EpisodeConfig,
    *,
    newly_free: int = 0,
    geodesic_drop: float = 0.0,
    completed: bool = False,
) -> float:
    """Per-step reward. Exploration pays for newly revealed free area;
    navigation pays for geodesic progress toward the target; both charge a
    flat step cost and grant a completion bonus."""
    if task == Task.EXPLORATION:
        r = newly_free / cfg.area_scale_value - cfg.step_cost
    else:
        r = geodesic_drop / cfg.nav_scale_value - cfg.step_cost
    if completed:
        r += cfg.done_bonus
    return r


def _mean_compute(records: list[StepRecord]) -> float:
    return sum(r.compute_s for r in records) / len(records) if records else 0.0


class LearnedDecider:
    """Wraps a policy network; samples during training, argmax at eval."""

    kind = "graph"

    def __init__(self, policy: PolicyNet, sample: bool = False, dtype: torch.dtype = torch.float32):
        self.policy = policy
        self.sample = sample
        self.dtype = dtype

    def decide(self, obs, rng: np.random.Generator) -> tuple[int, int]:
        with torch.no_grad():
            feats, mask, beacons, neighbors = obs_tensors(obs, self.dtype)
            enc = self.policy.encode(feats, mask)
            pb, _ = self.policy.decode_beacon(enc, obs.current_index, beacons)
            pb_np = pb.numpy().astype(np.float64)
            if self.sample:
                b_pos = int(rng.choice(len(pb_np), p=pb_np / pb_np.sum()))
            else:
                b_pos = int(np.argmax(pb_np))
            pa, _, _ = self.policy.decode_waypoint(enc, int(beacons[b_pos]), neighbors)
            pa_np = pa.numpy().astype(np.float64)
            if self.sample:
                a_pos = int(rng.choice(len(pa_np), p=pa_np / pa_np.sum()))
            else:
                a_pos = int(np.argmax(pa_np))
        return b_pos, a_pos


class RandomDecider:
    """Uniform over beacon candidates and over the current node's neighbors."""

    kind = "graph"

    def decide(self, obs, rng: np.random.Generator) -> tuple[int, int]:
        b_pos = int(rng.integers(len(obs.beacon_indices)))
        a_pos = int(rng.integers(len(obs.neighbor_indices)))
        return b_pos, a_pos


def _exploration_done(belief: BeliefMap, truth: GroundTruthMap, ctx: StepContext, cfg: EpisodeConfig):
    cov = coverage_fraction(belief, truth)
    if cov >= cfg.coverage_threshold:
        return True, cov
    if ctx.frontiers.n == 0 or not ctx.planning.beacon.any():
        return True, cov
    return False, cov


def _arrived(pose_cell: Cell, target: Cell) -> bool:
    return max(abs(pose_cell[0] - target[0]), abs(pose_cell[1] - target[1])) <= 1


def _run_graph_episode(
    truth: GroundTruthMap,
    decider,
    cfg: EpisodeConfig,
    rng: np.random.Generator,
    collect: bool = False,
    dump: list | None = None,
) -> EpisodeResult:
    task = cfg.task
    belief = BeliefMap.unknown_like(truth)
    pose_cell = truth.start
    pose = truth.center(pose_cell)
    start_xy = (pose.x, pose.y)
    sense_and_update(pose, truth, belief, cfg.sensor_range)
    visited: set[int] = {pose_cell[1] * truth.width + pose_cell[0]}

    target_pose = None
    geo = None
    if task == Task.NAVIGATION:
        if truth.target is None:
            raise ValueError("navigation episode requires a map with a target")
        target_pose = truth.center(truth.target)
        geo = baselines.dijkstra_field(
            [truth.target], baselines.traversable_truth(truth), truth.cell_size
        )
        if math.isinf(geo[pose_cell[1], pose_cell[0]]):
            raise baselines.NoPathError("target unreachable from start")

    def build() -> StepContext:
        return build_step_context(
            belief,
            pose,
            visited,
            lattice=cfg.lattice,
            k=cfg.k,
            sensor_range=cfg.sensor_range,
            d_th=cfg.d_th_value,
            map_diagonal=truth.diagonal,
            target=target_pose,
        )

    records: list[StepRecord] = []
    transitions: list[Transition] = []
    distance = 0.0
    success = False
    ctx = build()
    failed = False
    for t in range(cfg.max_steps):
        if task == Task.EXPLORATION:
            done, cov = _exploration_done(belief, truth, ctx, cfg)
            if done:
                success = cov >= cfg.coverage_threshold
                break
        else:
            if _arrived(pose_cell, truth.target):
                success = True
                break
        obs = ctx.observation
        if len(obs.neighbor_indices) == 0:
            failed = True
            break
        t0 = time.perf_counter() if cfg.timing else 0.0
        b_pos, a_pos = decider.decide(obs, rng)
        dt = (time.perf_counter() - t0) if cfg.timing else 0.0

        beacon_node = int(obs.beacon_indices[b_pos])
        waypoint_node = int(obs.neighbor_indices[a_pos])
        beacon_xy = tuple(obs.positions[beacon_node])
        new_xy = obs.positions[waypoint_node]
        prev_cell = pose_cell
        step_len = math.hypot(new_xy[0] - pose.x, new_xy[1] - pose.y)
        pose = Pose(float(new_xy[0]), float(new_xy[1]))
        pose_cell = truth.cell_of(pose.x, pose.y)
        distance += step_len
        newly = sense_and_update(pose, truth, belief, cfg.sensor_range)
        newly_free = sum(1 for c, r in newly if truth.cells[r, c] == FREE)
        visited.add(pose_cell[1] * truth.width + pose_cell[0])

        next_ctx = build()
        if task == Task.EXPLORATION:
            done_now, _ = _exploration_done(belief, truth, next_ctx, cfg)
            r = reward(task, cfg, newly_free=newly_free, completed=done_now)
        else:
            done_now = _arrived(pose_cell, truth.target)
            drop = float(geo[prev_cell[1], prev_cell[0]] - geo[pose_cell[1], pose_cell[0]])
            r = reward(task, cfg, geodesic_drop=drop, completed=done_now)

        records.append(
            StepRecord(
                t=t,
                pose=(pose.x, pose.y),
                beacon=beacon_xy,
                waypoint=(float(new_xy[0]), float(new_xy[1])),
                reward=r,
                distance_increment=step_len,
                compute_s=dt,
            )
        )
        if collect:
            transitions.append(
                Transition(
                    obs=obs,
                    beacon_pos=b_pos,
                    waypoint_pos=a_pos,
                    reward=r,
                    next_obs=None if done_now else next_ctx.observation,
                    done=done_now,
                )
            )
        if dump is not None:
            dump.append(_step_dump_line(t, records[-1], ctx))
        ctx = next_ctx

    cov = coverage_fraction(belief, truth)
    if task == Task.EXPLORATION:
        success = success or cov >= cfg.coverage_threshold
    else:
        success = success or _arrived(pose_cell, truth.target)
    if failed:
        success = False
    metrics = EpisodeMetrics(
        distance=distance,
        steps=len(records),
        success=success,
        coverage=cov,
        mean_compute_s=_mean_compute(records),
    )
    return EpisodeResult(
        metrics=metrics,
        records=records,
        start=start_xy,
        target=(target_pose.x, target_pose.y) if target_pose else None,
        belief=belief,
        transitions=transitions,
    )


def _run_frontier_episode(
    truth: GroundTruthMap, cfg: EpisodeConfig, dump: list | None = None
) -> EpisodeResult:
    belief = BeliefMap.unknown_like(truth)
    pose_cell = truth.start
    pose = truth.center(pose_cell)
    start_xy = (pose.x, pose.y)
    sense_and_update(pose, truth, belief, cfg.sensor_range)
    records: list[StepRecord] = []
    distance = 0.0
    cap = int(truth.reachable_free().sum()) * 8
    t = 0
    while t < cap:
        if coverage_fraction(belief, truth) >= cfg.coverage_threshold:
            break
        t0 = time.perf_counter() if cfg.timing else 0.0
        nxt = baselines.nearest_frontier_step(belief, pose_cell)
        dt = (time.perf_counter() - t0) if cfg.timing else 0.0
        if nxt is None:
            break
        new_pose = truth.center(nxt)
        step_len = pose.distance_to(new_pose)
        pose, pose_cell = new_pose, nxt
        distance += step_len
        sense_and_update(pose, truth, belief, cfg.sensor_range)
        records.append(
            StepRecord(
                t=t,
                pose=(pose.x, pose.y),
                beacon=None,
                waypoint=(pose.x, pose.y),
                reward=0.0,
                distance_increment=step_len,
                compute_s=dt,
            )
        )
        if dump is not None:
            dump.append(_step_dump_line(t, records[-1], None))
        t += 1
    cov = coverage_fraction(belief, truth)
    metrics = EpisodeMetrics(
        distance=distance,
        steps=len(records),
        success=cov >= cfg.coverage_threshold,
        coverage=cov,
        mean_compute_s=_mean_compute(records),
    )
    return EpisodeResult(metrics, records, start_xy, None, belief)


def _run_replan_episode(
    truth: GroundTruthMap, cfg: EpisodeConfig, dump: list | None = None
) -> EpisodeResult:
    if truth.target is None:
        raise ValueError("navigation episode requires a map with a target")
    belief = BeliefMap.unknown_like(truth)
    t0 = time.perf_counter() if cfg.timing else 0.0
    res = baselines.replan_navigate(
        truth, truth.start, truth.target, cfg.sensor_range, belief=belief
    )
    elapsed = (time.perf_counter() - t0) if cfg.timing else 0.0
    records = []
    pose_prev = truth.center(res.trajectory[0])
    per_step = elapsed / max(res.steps, 1)
    for t, cell in enumerate(res.trajectory[1:]):
        p = truth.center(cell)
        records.append(
            StepRecord(
                t=t,
                pose=(p.x, p.y),
                beacon=None,
                waypoint=(p.x, p.y),
                reward=0.0,
                distance_increment=pose_prev.distance_to(p),
                compute_s=per_step,
            )
        )
        if dump is not None:
            dump.append(_step_dump_line(t, records[-1], None))
        pose_prev = p
    start = truth.center(truth.start)
    target = truth.center(truth.target)
    metrics = EpisodeMetrics(
        distance=res.distance,
        steps=res.steps,
        success=res.success,
        coverage=coverage_fraction(belief, truth),
        mean_compute_s=per_step,
    )
    return EpisodeResult(
        metrics, records, (start.x, start.y), (target.x, target.y), belief, replans=res.replans
    )


PLANNERS = ("learned", "frontier", "replan", "random")


def run_episode(
    truth: GroundTruthMap,
    planner: str,
    cfg: EpisodeConfig,
    rng: np.random.Generator | None = None,
    policy: PolicyNet | None = None,
    sample: bool = False,
    collect: bool = False,
    dump_path=None,
) -> EpisodeResult:
    """Run one episode with the named planner; deterministic given the seed.

    A planner that cannot act (isolated node) yields a failure result rather
    than raising.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    dump: list | None = [] if dump_path is not None else None
    if planner == "frontier":
        if cfg.task != Task.EXPLORATION:
            raise ValueError("frontier planner only explores")
        result = _run_frontier_episode(truth, cfg, dump)
    elif planner == "replan":
        if cfg.task != Task.NAVIGATION:
            raise ValueError("replan planner only navigates")
        result = _run_replan_episode(truth, cfg, dump)
    elif planner == "random":
        result = _run_graph_episode(truth, RandomDecider(), cfg, rng, collect, dump)
    elif planner == "learned":
        if policy is None:
            raise ValueError("learned planner needs a policy network")
        decider = LearnedDecider(policy, sample=sample)
        result = _run_graph_episode(truth, decider, cfg, rng, collect, dump)
    else:
        raise ValueError(f"unknown planner {planner!r}; expected one of {PLANNERS}")
    if dump_path is not None:
        dump.append(_summary_dump_line(truth, result))
        with open(dump_path, "w", encoding="utf-8") as fh:
            for line in dump:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
    return result


# --- step dump (JSON lines consumed by the plot tool) -------------------------


def _step_dump_line(t: int, rec: StepRecord, ctx: StepContext | None) -> dict:
    line = {
        "type": "step",
        "t": t,
        "pose": [rec.pose[0], rec.pose[1]],
        "beacon": list(rec.beacon) if rec.beacon else None,
        "waypoint": list(rec.waypoint),
        "reward": rec.reward,
        "distance_increment": rec.distance_increment,
    }
    if ctx is not None:
        line["nodes"] = [[float(x), float(y)] for x, y in ctx.graph.positions]
        line["edges"] = [[int(i), int(j)] for i, j in ctx.graph.undirected_edges()]
        line["utility"] = [int(u) for u in ctx.planning.utility]
        line["beacon_nodes"] = [int(i) for i in np.nonzero(ctx.planning.beacon)[0]]
    return line


_BELIEF_CHARS = {0: "f", 1: "o", 2: "u"}


def _summary_dump_line(truth: GroundTruthMap, result: EpisodeResult) -> dict:
    belief_rows = [
        "".join(_BELIEF_CHARS[int(v)] for v in row) for row in result.belief.cells
    ]
    return {
        "type": "summary",
        "width": truth.width,
        "height": truth.height,
        "cell_size": truth.cell_size,
        "start": list(result.start),
        "target": list(result.target) if result.target else None,
        "belief": belief_rows,
        "distance": result.metrics.distance,
        "steps": result.metrics.steps,
        "success": result.metrics.success,
        "coverage": result.metrics.coverage,
    }


# --- benchmark ----------------------------------------------------------------

CSV_COLUMNS = ("planner", "map", "task", "distance_m", "steps", "success", "compute_s")


@dataclass
class BenchRow:
    planner: str
    map_name: str
    task: str
    distance: float
    steps: int
    success: bool
    compute_s: float


def bench_episode(
    map_path: Path,
    planner: str,
    cfg: EpisodeConfig,
    seed: int,
    map_index: int,
    planner_index: int,
    policy: PolicyNet | None = None,
) -> BenchRow:
    truth = load_map(Path(map_path).read_text(encoding="utf-8"))
    rng = np.random.default_rng([seed, map_index, planner_index])
    try:
        result = run_episode(truth, planner, cfg, rng, policy=policy)
        m = result.metrics
        return BenchRow(
            planner, Path(map_path).name, cfg.task.value, m.distance, m.steps, m.success,
            m.mean_compute_s,
        )
    except Exception:
        return BenchRow(planner, Path(map_path).name, cfg.task.value, 0.0, 0, False, 0.0)


def benchmark(
    map_paths: list[Path],
    planners: list[str],
    cfg: EpisodeConfig,
    seed: int = 0,
    policy: PolicyNet | None = None,
    workers: int = 1,
) -> list[BenchRow]:
    """Run every (map, planner) pair; failures become failure rows. Rows come
    back sorted by (map, planner) regardless of execution order."""
    paths = sorted(map_paths, key=lambda p: Path(p).name)
    jobs = [
        (path, planner, mi, pi)
        for mi, path in enumerate(paths)
        for pi, planner in enumerate(planners)
    ]
    if workers <= 1:
        rows = [
            bench_episode(path, planner, cfg, seed, mi, pi, policy)
            for path, planner, mi, pi in jobs
        ]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(bench_episode, path, planner, cfg, seed, mi, pi, policy)
                for path, planner, mi, pi in jobs
            ]
            rows = [f.result() for f in futures]
    rows.sort(key=lambda r: (r.map_name, r.planner))
    return rows


def write_results_csv(rows: list[BenchRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.planner,
                    r.map_name,
                    r.task,
                    f"{r.distance:.6f}",
                    r.steps,
                    int(r.success),
                    f"{r.compute_s:.6f}",
                ]
            )


def summarize(rows: list[BenchRow]) -> str:
    """Human-readable per-planner table: distance mean/std, steps, success
    rate, compute time."""
    by_planner: dict[str, list[BenchRow]] = {}
    for r in rows:
        by_planner.setdefault(r.planner, []).append(r)
    lines = [
        f"{'planner':<12} {'episodes':>8} {'success%':>9} {'dist_mean':>10} "
        f"{'dist_std':>9} {'steps':>7} {'compute_s':>10}"
    ]
    for name in sorted(by_planner):
        rs = by_planner[name]
        dists = np.array([r.distance for r in rs])
        lines.append(
            f"{name:<12} {len(rs):>8} {100.0 * np.mean([r.success for r in rs]):>9.1f} "
            f"{dists.mean():>10.3f} {dists.std():>9.3f} "
            f"{np.mean([r.steps for r in rs]):>7.1f} "
            f"{np.mean([r.compute_s for r in rs]):>10.6f}"
        )
    return "\n".join(lines) + "\n"


# --- training driver ------------------------------------------------------------


def feature_dim_for(task: Task) -> int:
    return 5 if task == Task.EXPLORATION else 8


TRAIN_LOG_COLUMNS = (
    "step",
    "critic_loss",
    "policy_loss",
    "temp_loss",
    "contrastive_loss",
    "alpha",
    "buffer_size",
)


def _selection_score(policy: PolicyNet, truths: list[GroundTruthMap], cfg: EpisodeConfig) -> float:
    """Mean eval distance over the training corpus, with a heavy penalty for
    episodes that fail to finish; lower is better."""
    total = 0.0
    for i, truth in enumerate(truths):
        res = run_episode(truth, "learned", cfg, np.random.default_rng([7, i]), policy=policy)
        total += res.metrics.distance + (0.0 if res.metrics.success else 500.0)
    return total / len(truths)


def train_policy(
    map_texts: list[str],
    episodes: int,
    cfg: EpisodeConfig,
    tcfg: TrainerConfig,
    net_cfg: NetConfig | None = None,
    seed: int = 0,
    out_dir: Path | None = None,
    checkpoint_every: int = 100,
    select_best_every: int = 0,
    progress: bool = False,
) -> tuple[PolicyNet, list[dict]]:
    """Collect-then-train loop: one episode of experience, then the configured
    number of gradient iterations, repeated. Fully seeded.

    With select_best_every > 0, the policy is scored on the training corpus
    every that many episodes and the best-scoring parameters are what the
    driver returns and checkpoints as final.
    """
    torch.manual_seed(seed)
    if net_cfg is None:
        net_cfg = NetConfig(feature_dim=feature_dim_for(cfg.task))
    if net_cfg.feature_dim != feature_dim_for(cfg.task):
        raise ValueError("net feature_dim does not match the task")
    policy = PolicyNet(net_cfg)
    critic = CriticNet(net_cfg)
    target = CriticNet(net_cfg)
    trainer = Trainer(policy, critic, target, tcfg, np.random.default_rng([seed, 1]))
    buffer = ReplayBuffer(tcfg.buffer_capacity)
    truths = [load_map(t) for t in map_texts]
    log_rows: list[dict] = []
    step_counter = 0
    best_score = math.inf
    best_state = None
    best_episode = 0
    for ep in range(episodes):
        truth = truths[ep % len(truths)]
        rng = np.random.default_rng([seed, 2, ep])
        result = run_episode(
            truth, "learned", cfg, rng, policy=policy, sample=True, collect=True
        )
        for tr in result.transitions:
            buffer.push(tr)
        for _ in range(tcfg.iterations_per_episode):
            report = trainer.train_step(buffer)
            if report is None:
                continue
            step_counter += 1
            log_rows.append(
                {
                    "step": step_counter,
                    "critic_loss": report.critic_loss,
                    "policy_loss": report.policy_loss,
                    "temp_loss": report.temperature_loss,
                    "contrastive_loss": report.contrastive_loss,
                    "alpha": report.alpha,
                    "buffer_size": report.buffer_size,
                }
            )
        if select_best_every > 0 and (ep + 1) % select_best_every == 0:
            score = _selection_score(policy, truths, cfg)
            if score < best_score:
                best_score = score
                best_state = {k: v.clone() for k, v in policy.state_dict().items()}
                best_episode = ep + 1
            if progress:
                print(
                    f"episode {ep + 1}/{episodes} selection_score={score:.1f} "
                    f"best={best_score:.1f}@{best_episode}",
                    flush=True,
                )
        elif progress and (ep + 1) % 20 == 0:
            print(
                f"episode {ep + 1}/{episodes} dist={result.metrics.distance:.1f} "
                f"steps={result.metrics.steps} buffer={len(buffer)}",
                flush=True,
            )
        if out_dir is not None and (ep + 1) % checkpoint_every == 0:
            save_policy_checkpoint(
                Path(out_dir) / f"checkpoint_ep{ep + 1:05d}.ckpt",
                policy, critic, target, float(trainer.log_alpha.detach()), net_cfg,
                extra_meta={"task": cfg.task.value, "episodes": ep + 1},
            )
    meta = {"task": cfg.task.value, "episodes": episodes}
    if best_state is not None:
        policy.load_state_dict(best_state)
        meta["selected_episode"] = best_episode
        meta["selection_score"] = best_score
    if out_dir is not None:
        save_policy_checkpoint(
            Path(out_dir) / "checkpoint_final.ckpt",
            policy, critic, target, float(trainer.log_alpha.detach()), net_cfg,
            extra_meta=meta,
        )
        with open(Path(out_dir) / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRAIN_LOG_COLUMNS)
            writer.writeheader()
            for row in log_rows:
                writer.writerow(row)
    return policy, log_rows
