"""Command-line interface: gen-maps, explore, navigate, train, bench, plot.

Exit codes: 0 success, 2 configuration error, 3 map-corpus failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .mapgen import STYLES, generate_map
from .nets import NetConfig, load_policy_checkpoint
from .runner import (
    EpisodeConfig,
    Task,
    benchmark,
    run_episode,
    summarize,
    train_policy,
    write_results_csv,
)
from .train import TrainerConfig
from .world import MapFormatError, dump_map, load_map


class ConfigError(ValueError):
    pass


class CorpusError(ValueError):
    pass


_EPISODE_KEYS = {f.name for f in fields(EpisodeConfig)} - {"task", "lattice"}
_TRAINER_KEYS = {f.name for f in fields(TrainerConfig)}
_NET_KEYS = {f.name for f in fields(NetConfig)} - {"feature_dim"}
_EXTRA_KEYS = {"lattice_cols", "lattice_rows", "checkpoint_every", "workers", "threads", "select_best_every"}


def parse_config_file(path: str) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    for i, line in enumerate(text.splitlines()):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {i + 1} is not key=value: {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, like) -> object:
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if like is None or isinstance(like, float):
        return float(value)
    return value


def build_configs(
    raw: dict[str, str], task: Task
) -> tuple[EpisodeConfig, TrainerConfig, NetConfig, dict]:
    cfg = EpisodeConfig(task=task)
    tcfg = TrainerConfig()
    from .runner import feature_dim_for

    ncfg = NetConfig(feature_dim=feature_dim_for(task))
    extra = {"checkpoint_every": 100, "workers": 1, "threads": 0, "select_best_every": 0}
    lattice = list(cfg.lattice)
    for key, value in raw.items():
        try:
            if key in _EPISODE_KEYS:
                setattr(cfg, key, _coerce(value, getattr(cfg, key)))
            elif key in _TRAINER_KEYS:
                setattr(tcfg, key, _coerce(value, getattr(tcfg, key)))
            elif key in _NET_KEYS:
                setattr(ncfg, key, _coerce(value, getattr(ncfg, key)))
            elif key == "lattice_cols":
                lattice[0] = int(value)
            elif key == "lattice_rows":
                lattice[1] = int(value)
            elif key in _EXTRA_KEYS:
                extra[key] = int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})")
    cfg.lattice = (lattice[0], lattice[1])
    return cfg, tcfg, ncfg, extra


def _load_corpus(maps_dir: str) -> list[Path]:
    root = Path(maps_dir)
    if root.is_file():
        paths = [root]
    else:
        paths = sorted(root.glob("*.txt"))
    if not paths:
        raise CorpusError(f"no map files found under {maps_dir}")
    for p in paths:
        try:
            load_map(p.read_text(encoding="utf-8"))
        except (OSError, MapFormatError) as exc:
            raise CorpusError(f"bad map file {p}: {exc}")
    return paths


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory", default=".")


def _make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiernav")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-maps", help="generate a map corpus")
    _add_common(g)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--style", choices=STYLES, default="rooms")
    g.add_argument("--dims", default="30x30", help="WxH in cells")
    g.add_argument("--task", choices=[t.value for t in Task], default="exploration")
    g.add_argument("--cell-size", type=float, default=1.0)

    for name, task in (("explore", Task.EXPLORATION), ("navigate", Task.NAVIGATION)):
        e = sub.add_parser(name, help=f"run one {task.value} episode")
        _add_common(e)
        e.add_argument("--map", required=True)
        default_planner = "frontier" if task == Task.EXPLORATION else "replan"
        choices = (
            ["frontier", "random", "learned"]
            if task == Task.EXPLORATION
            else ["replan", "random", "learned"]
        )
        e.add_argument("--policy", choices=choices, default=default_planner)
        e.add_argument("--checkpoint")
        e.add_argument("--dump", action="store_true", help="write a JSONL step dump")
        e.add_argument("--plot", action="store_true", help="write an SVG trajectory plot")

    t = sub.add_parser("train", help="train the learned planner")
    _add_common(t)
    t.add_argument("--maps", required=True)
    t.add_argument("--episodes", type=int, default=500)
    t.add_argument("--task", choices=[t.value for t in Task], default="exploration")
    t.add_argument("--progress", action="store_true")

    b = sub.add_parser("bench", help="benchmark planners over a corpus")
    _add_common(b)
    b.add_argument("--maps", required=True)
    b.add_argument("--task", choices=[t.value for t in Task], default="exploration")
    b.add_argument("--planners", default=None, help="comma-separated planner names")
    b.add_argument("--checkpoint")

    pl = sub.add_parser("plot", help="render an SVG from an episode dump")
    pl.add_argument("--dump-file", required=True)
    pl.add_argument("--out", default="episode.svg")
    return parser


def _cmd_gen_maps(args, raw_cfg) -> int:
    try:
        w, h = (int(x) for x in args.dims.lower().split("x"))
    except ValueError:
        raise ConfigError(f"bad --dims {args.dims!r}, expected WxH")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with_target = args.task == Task.NAVIGATION.value
    for i in range(args.count):
        world = generate_map(
            args.seed + i, args.style, (w, h), args.cell_size, with_target
        )
        (out / f"map_{i:04d}.txt").write_text(dump_map(world), encoding="utf-8")
    print(f"wrote {args.count} {args.style} maps to {out}")
    return 0


def _cmd_episode(args, raw_cfg, task: Task) -> int:
    cfg, _, _, _ = build_configs(raw_cfg, task)
    try:
        truth = load_map(Path(args.map).read_text(encoding="utf-8"))
    except (OSError, MapFormatError) as exc:
        raise CorpusError(f"bad map file {args.map}: {exc}")
    policy = None
    if args.policy == "learned":
        if not args.checkpoint:
            raise ConfigError("--policy learned requires --checkpoint")
        policy, _, _ = load_policy_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_path = out / "episode.jsonl" if (args.dump or args.plot) else None
    rng = np.random.default_rng(args.seed)
    result = run_episode(truth, args.policy, cfg, rng, policy=policy, dump_path=dump_path)
    m = result.metrics
    print(
        f"planner={args.policy} distance={m.distance:.3f} steps={m.steps} "
        f"success={int(m.success)} coverage={m.coverage:.3f}"
    )
    if args.plot:
        from .plot import plot_from_dump

        svg = plot_from_dump(dump_path)
        (out / "episode.svg").write_text(svg, encoding="utf-8")
        print(f"wrote {out / 'episode.svg'}")
    return 0


def _cmd_train(args, raw_cfg) -> int:
    task = Task(args.task)
    cfg, tcfg, ncfg, extra = build_configs(raw_cfg, task)
    if extra.get("threads"):
        import torch

        torch.set_num_threads(extra["threads"])
    paths = _load_corpus(args.maps)
    texts = [p.read_text(encoding="utf-8") for p in paths]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_policy(
        texts,
        args.episodes,
        cfg,
        tcfg,
        net_cfg=ncfg,
        seed=args.seed,
        out_dir=out,
        checkpoint_every=extra["checkpoint_every"],
        select_best_every=extra["select_best_every"],
        progress=args.progress,
    )
    print(f"trained {args.episodes} episodes; artifacts in {out}")
    return 0


def _cmd_bench(args, raw_cfg) -> int:
    task = Task(args.task)
    cfg, _, _, extra = build_configs(raw_cfg, task)
    paths = _load_corpus(args.maps)
    default = "frontier,random" if task == Task.EXPLORATION else "replan,random"
    names = [p.strip() for p in (args.planners or default).split(",") if p.strip()]
    policy = None
    if "learned" in names:
        if not args.checkpoint:
            raise ConfigError("bench with the learned planner requires --checkpoint")
        policy, _, _ = load_policy_checkpoint(args.checkpoint)
    for name in names:
        if name not in ("learned", "frontier", "replan", "random"):
            raise ConfigError(f"unknown planner {name!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = benchmark(paths, names, cfg, seed=args.seed, policy=policy,
                     workers=extra.get("workers", 1))
    write_results_csv(rows, out / "results.csv")
    summary = summarize(rows)
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return 0


def _cmd_plot(args) -> int:
    from .plot import plot_from_dump

    svg = plot_from_dump(args.dump_file)
    Path(args.out).write_text(svg, encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _make_parser()
    args = parser.parse_args(argv)
    try:
        raw_cfg = parse_config_file(args.config) if getattr(args, "config", None) else {}
        if args.command == "gen-maps":
            return _cmd_gen_maps(args, raw_cfg)
        if args.command == "explore":
            return _cmd_episode(args, raw_cfg, Task.EXPLORATION)
        if args.command == "navigate":
            return _cmd_episode(args, raw_cfg, Task.NAVIGATION)
        if args.command == "train":
            return _cmd_train(args, raw_cfg)
        if args.command == "bench":
            return _cmd_bench(args, raw_cfg)
        if args.command == "plot":
            return _cmd_plot(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CorpusError as exc:
        print(f"corpus error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
