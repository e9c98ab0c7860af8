"""Acceptance suite: one test per criterion, each printing a PASS line.

The training-smoke test is the long pole (tens of minutes on a small CPU);
everything else completes in a few minutes total.
"""
import math
import subprocess
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch

from fd_check import analytic_gradients, fd_gradients, max_relative_error
from test_baselines import dijkstra_cost
from test_nets import rand_obs
from hiernav.baselines import astar, replan_navigate, traversable_truth
from hiernav.graph import (
    aggregate_beacons,
    build_step_context,
    compute_utilities,
    detect_frontiers,
    sample_viewpoints,
)
from hiernav.kernels import FREE
from hiernav.mapgen import generate_map, generate_maps
from hiernav.nets import (
    CriticNet,
    CrossAttention,
    NetConfig,
    PointerHead,
    PolicyNet,
    SelfAttentionBlock,
    masked_attention,
)
from hiernav.runner import EpisodeConfig, RandomDecider, Task, run_episode, train_policy
from hiernav.train import (
    Trainer,
    TrainerConfig,
    Transition,
    build_triplet,
    contrastive_loss,
    soft_value,
    temperature_loss,
)
from hiernav.world import (
    BeliefMap,
    Pose,
    coverage_fraction,
    line_of_sight,
    load_map,
    sense_and_update,
)


def _announce(name: str) -> None:
    print(f"\nACCEPTANCE {name}: PASS", flush=True)


def _mixed_corpus(count: int, seed0: int, dims=(20, 20), with_target=False):
    styles = ("rooms", "cave", "corridor")
    return [
        generate_map(seed0 + i, styles[i % 3], dims, with_target=with_target)
        for i in range(count)
    ]


class TestGraphSoundness:
    """Criterion 1: across 100 generated maps x full episodes, no built edge
    violates conservative-belief line of sight and no traversed edge violates
    ground-truth line of sight."""

    def test_graph_soundness_100_maps(self):
        edge_checks = 0
        traversals = 0
        decider = RandomDecider()
        for mi, world in enumerate(_mixed_corpus(100, 31000)):
            rng = np.random.default_rng([10, mi])
            belief = BeliefMap.unknown_like(world)
            pose_cell = world.start
            pose = world.center(pose_cell)
            sense_and_update(pose, world, belief, 20.0)
            visited = {pose_cell[1] * world.width + pose_cell[0]}
            for _ in range(128):
                ctx = build_step_context(
                    belief, pose, visited, lattice=(40, 30), k=20,
                    sensor_range=20.0, d_th=10.0, map_diagonal=world.diagonal,
                )
                if ctx.frontiers.n == 0 or not ctx.planning.beacon.any():
                    break
                for i, nbrs in enumerate(ctx.graph.neighbors):
                    a = Pose(*ctx.graph.positions[i])
                    for j in nbrs:
                        if j > i:
                            assert line_of_sight(a, Pose(*ctx.graph.positions[j]), belief)
                            edge_checks += 1
                obs = ctx.observation
                if len(obs.neighbor_indices) == 0:
                    break
                _, a_pos = decider.decide(obs, rng)
                node = int(obs.neighbor_indices[a_pos])
                new_pose = Pose(*ctx.graph.positions[node])
                assert line_of_sight(pose, new_pose, world)
                traversals += 1
                pose = new_pose
                pose_cell = world.cell_of(pose.x, pose.y)
                visited.add(pose_cell[1] * world.width + pose_cell[0])
                sense_and_update(pose, world, belief, 20.0)
        assert edge_checks > 10000
        assert traversals > 500
        _announce(f"graph soundness ({edge_checks} edge checks, {traversals} traversals)")


class TestBeaconCover:
    """Criterion 2: 1000 random (U, map, d_th) instances; every nonzero-utility
    node is covered by a beacon within d_th and line of sight; the beacon set
    matches a brute-force greedy re-trace exactly."""

    def test_beacon_cover_1000_instances(self):
        from test_graph import _greedy_retrace

        checked = 0
        instances = 0
        i = 0
        while instances < 1000:
            rng = np.random.default_rng([20, i])
            i += 1
            world = generate_map(32000 + i, ("rooms", "cave", "corridor")[i % 3], (14, 14))
            belief = BeliefMap.unknown_like(world)
            sense_and_update(world.center(world.start), world, belief, float(rng.uniform(3, 10)))
            cells = sample_viewpoints(belief, (14, 14))
            if len(cells) == 0:
                continue
            frontiers = detect_frontiers(belief)
            utility = compute_utilities(cells, frontiers, belief, float(rng.uniform(4, 12)))
            cand = np.nonzero(utility > 0)[0].astype(np.int64)
            if len(cand) == 0:
                continue
            d_th = float(rng.uniform(1.0, 10.0))
            beacons = aggregate_beacons(cells, cand, belief, d_th)
            assert set(beacons.tolist()) <= set(cand.tolist())
            assert beacons.tolist() == _greedy_retrace(cells, cand, belief, d_th)
            for j in cand.tolist():
                b = belief.center((int(cells[j][0]), int(cells[j][1])))
                covered = any(
                    belief.center((int(cells[k][0]), int(cells[k][1]))).distance_to(b) <= d_th
                    and line_of_sight(
                        belief.center((int(cells[k][0]), int(cells[k][1]))), b, belief
                    )
                    for k in beacons.tolist()
                )
                assert covered
                checked += 1
            instances += 1
        _announce(f"beacon cover (1000 instances, {checked} coverage checks)")


class TestAttentionCorrectness:
    """Criterion 3: attention rows sum to 1 +- 1e-6 with exact zeros at masked
    positions; a 2x3 hand case matches manual arithmetic to 1e-9."""

    def test_attention_correctness(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, m, d = int(rng.integers(1, 6)), int(rng.integers(1, 7)), 8
            q = torch.from_numpy(rng.normal(size=(n, d)))
            k = torch.from_numpy(rng.normal(size=(m, d)))
            v = torch.from_numpy(rng.normal(size=(m, d)))
            mask = (rng.random((n, m)) < 0.4).astype(np.uint8)
            mask[:, 0] = 0
            out, w = masked_attention(q, k, v, torch.from_numpy(mask))
            assert np.allclose(w.sum(dim=-1).numpy(), 1.0, atol=1e-6)
            assert (w.numpy()[mask.astype(bool)] == 0.0).all()

        q = torch.tensor([[1.0, 0.5], [-0.5, 2.0]], dtype=torch.float64)
        k = torch.tensor([[0.2, -1.0], [1.5, 0.3], [-0.7, 0.9]], dtype=torch.float64)
        v = torch.tensor([[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]], dtype=torch.float64)
        mask = torch.tensor([[0, 0, 1], [0, 0, 0]], dtype=torch.uint8)
        out, w = masked_attention(q, k, v, mask)
        logits = (q.numpy() @ k.numpy().T) / math.sqrt(2)
        mb = mask.numpy().astype(bool)
        e = np.exp(logits)
        e[mb] = 0.0
        probs = e / e.sum(axis=1, keepdims=True)
        assert np.abs(w.numpy() - probs).max() < 1e-9
        assert np.abs(out.numpy() - probs @ v.numpy()).max() < 1e-9
        _announce("attention correctness")


class TestGradientChecks:
    """Criterion 4: analytic gradients vs central finite differences
    (step 1e-5) with relative error < 1e-4 over >= 10 seeds, covering every
    layer type and both full networks."""

    TOL = 1e-4

    def test_gradient_checks_ten_seeds(self):
        worst = 0.0
        for seed in range(10):
            torch.manual_seed(seed)
            rng = np.random.default_rng(seed)

            block = SelfAttentionBlock(6, 10).double()
            x = torch.from_numpy(rng.normal(size=(4, 6)))
            mask = torch.zeros(4, 4, dtype=torch.uint8)
            wm = torch.from_numpy(rng.normal(size=(4, 6)))
            loss = lambda: (block(x, mask) * wm).sum()
            worst = max(worst, max_relative_error(
                analytic_gradients(block, loss), fd_gradients(block, loss)))

            cross = CrossAttention(6).double()
            qx = torch.from_numpy(rng.normal(size=(2, 6)))
            mem = torch.from_numpy(rng.normal(size=(5, 6)))
            wc = torch.from_numpy(rng.normal(size=(2, 6)))
            loss = lambda: (cross(qx, mem) * wc).sum()
            worst = max(worst, max_relative_error(
                analytic_gradients(cross, loss), fd_gradients(cross, loss)))

            pointer = PointerHead(6, clip=10.0).double()
            pq = torch.from_numpy(rng.normal(size=(1, 6)))
            keys = torch.from_numpy(rng.normal(size=(4, 6)))
            wp = torch.from_numpy(rng.normal(size=(1, 4)))
            loss = lambda: (pointer(pq, keys) * wp).sum()
            worst = max(worst, max_relative_error(
                analytic_gradients(pointer, loss), fd_gradients(pointer, loss)))

            obs = rand_obs(rng, n=4)
            feats = torch.from_numpy(obs.features)
            fmask = torch.from_numpy(obs.mask)
            beacons = torch.from_numpy(obs.beacon_indices)
            neighbors = torch.from_numpy(obs.neighbor_indices)

            policy = PolicyNet(NetConfig(5, d_model=6, num_layers=2, ff_dim=10)).double()
            wcand = torch.from_numpy(rng.normal(size=(len(neighbors), 6)))

            def policy_loss():
                enc = policy.encode(feats, fmask)
                pb, _ = policy.decode_beacon(enc, obs.current_index, beacons)
                pa, _, cand = policy.decode_waypoint(enc, int(beacons[0]), neighbors)
                return torch.log(pb[0]) + torch.log(pa[0]) + 0.1 * (cand * wcand).sum()

            worst = max(worst, max_relative_error(
                analytic_gradients(policy, policy_loss), fd_gradients(policy, policy_loss)))

            critic = CriticNet(NetConfig(5, d_model=6, num_layers=2, ff_dim=10)).double()

            def critic_loss():
                return critic.q_values(critic.encode(feats, fmask), beacons, neighbors)[0, 0]

            worst = max(worst, max_relative_error(
                analytic_gradients(critic, critic_loss), fd_gradients(critic, critic_loss)))

        assert worst < self.TOL, f"worst relative error {worst}"
        _announce(f"gradient checks (worst rel err {worst:.2e})")


class TestLossIdentities:
    """Criterion 5: exact loss identities at 1e-9."""

    def test_loss_identities(self):
        t64 = lambda x: torch.tensor(x, dtype=torch.float64)

        # V(o) = Q(o, a*) for a deterministic policy
        v = soft_value(t64([2.0, -1.0, 5.5]), t64([0.0, 0.0, 1.0]), 0.37)
        assert abs(float(v) - 5.5) < 1e-9

        # uniform over two actions with equal q
        v = soft_value(t64([3.0, 3.0]), t64([0.5, 0.5]), 0.25)
        assert abs(float(v) - (3.0 + 0.25 * math.log(2))) < 1e-9

        # critic loss vanishes when predictions equal targets
        torch.manual_seed(0)
        ncfg = NetConfig(5, d_model=8, num_layers=1, ff_dim=16)
        policy, critic, target = PolicyNet(ncfg).double(), CriticNet(ncfg).double(), CriticNet(ncfg).double()
        trainer = Trainer(policy, critic, target, TrainerConfig(batch_size=2),
                          np.random.default_rng(0), dtype=torch.float64)
        rng = np.random.default_rng(1)
        batch = []
        for _ in range(2):
            obs = rand_obs(rng, n=5)
            from hiernav.nets import critic_q

            q = float(critic_q(critic, obs, 0, 0, torch.float64)[0].detach())
            batch.append(Transition(obs, 0, 0, q, None, True))
        assert abs(float(trainer.critic_loss(batch, trainer.alpha).detach())) < 1e-9

        # terminal transitions bootstrap to exactly r
        tr = Transition(batch[0].obs, 0, 0, batch[0].reward + 1.0, None, True)
        loss = float(trainer.critic_loss([tr], trainer.alpha).detach())
        assert abs(loss - 1.0) < 1e-9

        # temperature gradient sign equals sign(entropy - target)
        for ent, tgt in ((0.0, 0.5), (math.log(4), 0.5 * math.log(4)), (0.3, 0.3)):
            alpha = torch.tensor(0.2, dtype=torch.float64, requires_grad=True)
            temperature_loss(alpha, ent, tgt).backward()
            g = float(alpha.grad)
            if abs(ent - tgt) < 1e-15:
                assert abs(g) < 1e-9
            else:
                assert math.copysign(1, g) == math.copysign(1, ent - tgt)

        # contrastive loss at coincident features equals the margin
        f = t64([1.0, -2.0, 0.5])
        assert abs(float(contrastive_loss(f, f, f, margin=1.25)) - 1.25) < 1e-9
        _announce("loss identities")


class TestTripletProperty:
    """Criterion 6: 10^4 sampled triplets, zero violations of the negative
    being distinct from the anchor and the positive."""

    def test_triplet_property_10k(self):
        rng = np.random.default_rng(60)
        violations = 0
        for _ in range(10_000):
            n = int(rng.integers(3, 9))
            probs = rng.dirichlet(np.full(n, 0.3))
            q_live = rng.normal(size=n)
            q_target = rng.normal(size=n)
            res = build_triplet(probs, q_live, q_target, float(rng.random()), rng)
            assert res is not None
            a_hat, a_pos, a_neg = res
            if a_neg == a_hat or a_neg == a_pos:
                violations += 1
        assert violations == 0
        _announce("triplet property (10000 samples, 0 violations)")


class TestOracleOptimality:
    """Criterion 7: A* equals Dijkstra on 50 random 30x30 grids exactly;
    replanning on a fully revealed belief equals the truth-optimal cost."""

    def test_astar_equals_dijkstra_50_grids(self):
        from conftest import random_world

        checked = 0
        for seed in range(50):
            rng = np.random.default_rng([70, seed])
            world = random_world(rng, 30, 30, p_occ=0.3)
            open_mask = traversable_truth(world)
            free_rows, free_cols = np.nonzero(open_mask)
            i, j = rng.integers(len(free_rows)), rng.integers(len(free_rows))
            start = (int(free_cols[i]), int(free_rows[i]))
            goal = (int(free_cols[j]), int(free_rows[j]))
            want = dijkstra_cost(start, goal, open_mask)
            if math.isinf(want):
                continue
            got = astar(start, goal, open_mask, world.cell_size)
            assert got.cost == pytest.approx(want, abs=1e-12)
            checked += 1
        assert checked >= 30

        replan_checked = 0
        for seed in range(10):
            world = generate_map(33000 + seed, "rooms", (24, 24), with_target=True)
            belief = BeliefMap.fully_known(world)
            res = replan_navigate(world, world.start, world.target, 20.0, belief=belief)
            opt = astar(world.start, world.target, traversable_truth(world), world.cell_size)
            assert res.distance == pytest.approx(opt.cost, abs=1e-12)
            replan_checked += 1
        _announce(f"oracle optimality ({checked} A* grids, {replan_checked} replans)")


class TestNavigationSuccess:
    """Criterion 8: the optimistic replanning navigator succeeds on 100% of
    100 solvable generated maps."""

    def test_replan_success_100_maps(self):
        styles = ("rooms", "cave", "corridor")
        successes = 0
        for i in range(100):
            world = generate_map(34000 + i, styles[i % 3], (24, 24), with_target=True)
            res = replan_navigate(world, world.start, world.target, 20.0)
            assert res.success, f"map {i} failed"
            successes += 1
        assert successes == 100
        _announce("navigation success (100/100)")


class TestTrainingSmoke:
    """Criterion 9: train on 20 generated 20x20 exploration maps for 500
    episodes with buffer 10000, batch 64, gamma 0.99, 4 iterations/episode;
    the trained policy's mean held-out exploration distance must be at most
    0.6x the random-walk policy and 1.15x the nearest-frontier baseline."""

    SEED = 7
    TRAIN_MAP_SEED = 1000
    HELDOUT_MAP_SEED = 2000

    def test_training_smoke(self):
        train_texts = generate_maps(self.TRAIN_MAP_SEED, 20, "rooms", (20, 20))
        held = [load_map(t) for t in generate_maps(self.HELDOUT_MAP_SEED, 20, "rooms", (20, 20))]
        cfg = EpisodeConfig(task=Task.EXPLORATION, timing=False)
        ncfg = NetConfig(feature_dim=5, d_model=64, num_layers=2, ff_dim=128)
        tcfg = TrainerConfig(
            gamma=0.99, batch_size=64, buffer_capacity=10000, iterations_per_episode=4,
            lr_policy=3e-4, lr_critic=3e-4, lr_alpha=3e-4, grad_clip=10.0,
        )
        policy, logs = train_policy(
            train_texts, 500, cfg, tcfg, net_cfg=ncfg, seed=self.SEED, select_best_every=25,
        )
        assert logs, "no training steps ran"
        for row in logs:
            for key in ("critic_loss", "policy_loss", "temp_loss", "contrastive_loss", "alpha"):
                assert np.isfinite(row[key]), f"non-finite {key} at step {row['step']}"

        means = {}
        for name in ("learned", "frontier", "random"):
            dists = []
            for i, world in enumerate(held):
                res = run_episode(
                    world, name, cfg, np.random.default_rng([99, i]),
                    policy=policy if name == "learned" else None,
                )
                dists.append(res.metrics.distance)
            means[name] = float(np.mean(dists))
        ratio_random = means["learned"] / means["random"]
        ratio_frontier = means["learned"] / means["frontier"]
        print(
            f"\n  learned={means['learned']:.2f} frontier={means['frontier']:.2f} "
            f"random={means['random']:.2f} ratios: {ratio_random:.3f}x random, "
            f"{ratio_frontier:.3f}x frontier",
            flush=True,
        )
        assert ratio_random <= 0.6, f"learned/random = {ratio_random:.3f} > 0.6"
        assert ratio_frontier <= 1.15, f"learned/frontier = {ratio_frontier:.3f} > 1.15"
        _announce(
            f"training smoke ({ratio_random:.3f}x random, {ratio_frontier:.3f}x frontier)"
        )


class TestDeterminism:
    """Criterion 10: a fixed seed and config reproduce results.csv and the
    SVG plot byte-identically across two separate runs."""

    def test_bench_and_plot_byte_determinism(self, tmp_path):
        maps_dir = tmp_path / "maps"
        maps_dir.mkdir()
        from hiernav.world import dump_map

        for i in range(3):
            world = generate_map(35000 + i, "rooms", (16, 16))
            (maps_dir / f"map_{i:02d}.txt").write_text(dump_map(world), encoding="utf-8")
        cfgf = tmp_path / "det.cfg"
        cfgf.write_text("timing=off\nsensor_range=6.0\n")

        def run(tag):
            out = tmp_path / tag
            cmd = [
                sys.executable, "-m", "hiernav.cli", "bench",
                "--maps", str(maps_dir), "--task", "exploration",
                "--planners", "frontier,random", "--out", str(out),
                "--seed", "11", "--config", str(cfgf),
            ]
            res = subprocess.run(cmd, capture_output=True, text=True, timeout=600)
            assert res.returncode == 0, res.stderr
            cmd = [
                sys.executable, "-m", "hiernav.cli", "explore",
                "--map", str(maps_dir / "map_00.txt"), "--policy", "random",
                "--out", str(out), "--seed", "11", "--config", str(cfgf), "--plot",
            ]
            res = subprocess.run(cmd, capture_output=True, text=True, timeout=600)
            assert res.returncode == 0, res.stderr
            return out

        a, b = run("run_a"), run("run_b")
        assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
        assert (a / "summary.txt").read_bytes() == (b / "summary.txt").read_bytes()
        assert (a / "episode.svg").read_bytes() == (b / "episode.svg").read_bytes()
        _announce("determinism (results.csv and SVG byte-identical)")
