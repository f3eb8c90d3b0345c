"""Command-line entry point: synthetic data, training, evaluation, matching, baselines.

All commands are driven by a strict JSON config (unknown keys are rejected)
plus a handful of overrides, and are deterministic given (config, seed):
re-runs produce byte-identical outputs. Exit codes: 0 success, 1 validation
or configuration error, 2 numeric divergence.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import env as env_mod
from . import hough, pyramid, qnet, trainer
from .errors import DivergenceError, ScaleSelError, ValidationError

SPLITS = ("train", "val")


def _check_keys(obj: dict, allowed: dict[str, bool], ctx: str) -> None:
    """allowed maps key -> required; rejects unknown and missing-required keys."""
    if not isinstance(obj, dict):
        raise ValidationError(f"{ctx}: expected a JSON object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ValidationError(f"{ctx}: unknown keys {unknown}")
    missing = sorted(k for k, required in allowed.items() if required and k not in obj)
    if missing:
        raise ValidationError(f"{ctx}: missing required keys {missing}")


def _parse_warp(obj: dict) -> pyramid.Warp:
    _check_keys(
        obj,
        {"kind": True, "dx": False, "dy": False, "scale": False, "rotation": False},
        "synthetic.warp",
    )
    return pyramid.Warp(
        kind=obj["kind"],
        dx=float(obj.get("dx", 0.0)),
        dy=float(obj.get("dy", 0.0)),
        scale=float(obj.get("scale", 1.0)),
        rotation=float(obj.get("rotation", 0.0)),
    )


@dataclass(frozen=True)
class SyntheticSection:
    levels: tuple[pyramid.LevelSpec, ...]
    informative_set: tuple[int, ...]
    signal_dims: int
    noise_sigma: float
    num_keypoints: int
    warp: pyramid.Warp
    global_dim: int
    num_train_pairs: int
    num_val_pairs: int

    def spec_for(self, seed: int) -> pyramid.SyntheticSpec:
        return pyramid.SyntheticSpec(
            levels=self.levels,
            informative_set=self.informative_set,
            signal_dims=self.signal_dims,
            noise_sigma=self.noise_sigma,
            num_keypoints=self.num_keypoints,
            warp=self.warp,
            seed=seed,
            global_dim=self.global_dim,
        )


def _parse_synthetic(obj: dict) -> SyntheticSection:
    _check_keys(
        obj,
        {
            "levels": True,
            "informative_set": True,
            "signal_dims": True,
            "noise_sigma": True,
            "num_keypoints": True,
            "warp": True,
            "global_dim": False,
            "num_train_pairs": True,
            "num_val_pairs": True,
        },
        "synthetic",
    )
    levels = []
    for i, lv in enumerate(obj["levels"]):
        _check_keys(
            lv,
            {"channels": True, "height": True, "width": True, "stride": True},
            f"synthetic.levels[{i}]",
        )
        levels.append(
            pyramid.LevelSpec(
                channels=int(lv["channels"]),
                height=int(lv["height"]),
                width=int(lv["width"]),
                stride=float(lv["stride"]),
            )
        )
    return SyntheticSection(
        levels=tuple(levels),
        informative_set=tuple(int(i) for i in obj["informative_set"]),
        signal_dims=int(obj["signal_dims"]),
        noise_sigma=float(obj["noise_sigma"]),
        num_keypoints=int(obj["num_keypoints"]),
        warp=_parse_warp(obj["warp"]),
        global_dim=int(obj.get("global_dim", 8)),
        num_train_pairs=int(obj["num_train_pairs"]),
        num_val_pairs=int(obj["num_val_pairs"]),
    )


def _parse_env(obj: dict, num_levels: int) -> env_mod.EnvConfig:
    _check_keys(
        obj,
        {"costs": False, "beta": False, "score_alpha": False, "max_episode_len": False},
        "env",
    )
    costs = obj.get("costs", 0.4)
    if isinstance(costs, (int, float)):
        costs_vec = np.full(num_levels, float(costs))
    else:
        costs_vec = np.asarray([float(c) for c in costs])
        if costs_vec.size != num_levels:
            raise ValidationError(
                f"env.costs lists {costs_vec.size} values for {num_levels} levels"
            )
    max_len = obj.get("max_episode_len")
    return env_mod.EnvConfig(
        costs=costs_vec,
        beta=float(obj.get("beta", 20.0)),
        score_alpha=float(obj.get("score_alpha", 0.1)),
        max_episode_len=None if max_len is None else int(max_len),
    )


def _parse_trainer(obj: dict, seed: int) -> trainer.TrainerConfig:
    defaults = trainer.TrainerConfig()
    _check_keys(
        obj,
        {
            "gamma": False,
            "lr": False,
            "beta1": False,
            "beta2": False,
            "batch_size": False,
            "max_iterations": False,
            "epsilon_start": False,
            "epsilon_end": False,
            "soft_update_rho": False,
            "target_mode": False,
            "lr_patience": False,
            "stop_patience": False,
            "lr_decay": False,
            "buffer_capacity": False,
            "rollouts_per_iteration": False,
            "val_interval": False,
            "loss": False,
            "huber_delta": False,
        },
        "trainer",
    )
    return trainer.TrainerConfig(
        gamma=float(obj.get("gamma", defaults.gamma)),
        lr=float(obj.get("lr", defaults.lr)),
        beta1=float(obj.get("beta1", defaults.beta1)),
        beta2=float(obj.get("beta2", defaults.beta2)),
        batch_size=int(obj.get("batch_size", defaults.batch_size)),
        max_iterations=int(obj.get("max_iterations", defaults.max_iterations)),
        epsilon_start=float(obj.get("epsilon_start", defaults.epsilon_start)),
        epsilon_end=float(obj.get("epsilon_end", defaults.epsilon_end)),
        soft_update_rho=float(obj.get("soft_update_rho", defaults.soft_update_rho)),
        target_mode=str(obj.get("target_mode", defaults.target_mode)),
        lr_patience=int(obj.get("lr_patience", defaults.lr_patience)),
        stop_patience=int(obj.get("stop_patience", defaults.stop_patience)),
        lr_decay=float(obj.get("lr_decay", defaults.lr_decay)),
        buffer_capacity=int(obj.get("buffer_capacity", defaults.buffer_capacity)),
        rollouts_per_iteration=int(
            obj.get("rollouts_per_iteration", defaults.rollouts_per_iteration)
        ),
        val_interval=int(obj.get("val_interval", defaults.val_interval)),
        loss=str(obj.get("loss", defaults.loss)),
        huber_delta=float(obj.get("huber_delta", defaults.huber_delta)),
        seed=seed,
    )


@dataclass(frozen=True)
class RunConfig:
    seed: int
    synthetic: SyntheticSection
    env_section: dict
    net_section: dict
    trainer_section: dict
    baselines: dict
    data_dir: Path
    out_dir: Path
    checkpoint: Path


def load_run_config(path, seed_override=None, out_override=None, ckpt_override=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    _check_keys(
        doc,
        {
            "seed": True,
            "synthetic": True,
            "env": False,
            "net": False,
            "trainer": False,
            "baselines": False,
            "paths": True,
        },
        "config",
    )
    paths = doc["paths"]
    _check_keys(paths, {"data_dir": True, "out_dir": True, "checkpoint": False}, "paths")
    net_section = doc.get("net", {})
    _check_keys(net_section, {"embed_dim": False, "aggregation": False}, "net")
    baselines = doc.get("baselines", {})
    _check_keys(
        baselines, {"beam_width": False, "random_k": False, "random_trials": False}, "baselines"
    )
    base = path.parent

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    out_dir = Path(out_override) if out_override else resolve(paths["out_dir"])
    checkpoint = (
        Path(ckpt_override)
        if ckpt_override
        else resolve(paths.get("checkpoint", Path(paths["out_dir"]) / "qnet.ckpt"))
    )
    seed = int(seed_override if seed_override is not None else doc["seed"])
    synthetic = _parse_synthetic(doc["synthetic"])
    # validate every section up front so a typo fails whichever command runs
    _parse_env(doc.get("env", {}), len(synthetic.levels))
    _parse_trainer(doc.get("trainer", {}), seed)
    return RunConfig(
        seed=seed,
        synthetic=synthetic,
        env_section=doc.get("env", {}),
        net_section=net_section,
        trainer_section=doc.get("trainer", {}),
        baselines=baselines,
        data_dir=resolve(paths["data_dir"]),
        out_dir=out_dir,
        checkpoint=checkpoint,
    )


# ---------------------------------------------------------------------------
# Dataset I/O


def _write_split(cfg: RunConfig, split: str, count: int) -> None:
    split_idx = SPLITS.index(split)
    out = cfg.data_dir / split
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        seed = pyramid.derive_pair_seed(cfg.seed, split_idx, i)
        pair = pyramid.gen_synthetic_pair(cfg.synthetic.spec_for(seed))
        names = {
            "src_fpyr": f"pair_{i:04d}.src.fpyr",
            "tgt_fpyr": f"pair_{i:04d}.tgt.fpyr",
            "src_ann": f"pair_{i:04d}.src.json",
            "tgt_ann": f"pair_{i:04d}.tgt.json",
        }
        pyramid.save_pyramid(pair.source, out / names["src_fpyr"])
        pyramid.save_pyramid(pair.target, out / names["tgt_fpyr"])
        pyramid.save_keypoints(pair.src_keypoints, out / names["src_ann"], pair.src_mask)
        pyramid.save_keypoints(pair.tgt_keypoints, out / names["tgt_ann"], pair.tgt_mask)
        entries.append(names)
    manifest = {"split": split, "seed": cfg.seed, "num_pairs": count, "pairs": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_pairs(split_dir: Path) -> list[pyramid.ImagePair]:
    manifest_path = Path(split_dir) / "manifest.json"
    if not manifest_path.is_file():
        raise ValidationError(f"no manifest.json under {split_dir}")
    manifest = json.loads(manifest_path.read_text())
    pairs = []
    for entry in manifest["pairs"]:
        src = pyramid.load_pyramid(split_dir / entry["src_fpyr"])
        tgt = pyramid.load_pyramid(split_dir / entry["tgt_fpyr"])
        src_kps, src_mask = pyramid.load_keypoints(split_dir / entry["src_ann"])
        tgt_kps, tgt_mask = pyramid.load_keypoints(split_dir / entry["tgt_ann"])
        pairs.append(
            pyramid.ImagePair(
                source=src,
                target=tgt,
                src_keypoints=src_kps,
                tgt_keypoints=tgt_kps,
                src_mask=src_mask,
                tgt_mask=tgt_mask,
            )
        )
    return pairs


def _load_split(cfg: RunConfig, split: str) -> list[pyramid.ImagePair]:
    pairs = load_pairs(cfg.data_dir / split)
    if not pairs:
        raise ValidationError(f"the {split} split under {cfg.data_dir} is empty")
    return pairs


def _build_env(cfg: RunConfig, pairs) -> env_mod.MatchingEnv:
    config = _parse_env(cfg.env_section, pairs[0].num_levels)
    return env_mod.MatchingEnv(pairs, config)


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.out, args.checkpoint)
    _write_split(cfg, "train", cfg.synthetic.num_train_pairs)
    _write_split(cfg, "val", cfg.synthetic.num_val_pairs)
    _say(
        args,
        f"wrote {cfg.synthetic.num_train_pairs} train / {cfg.synthetic.num_val_pairs} val "
        f"pairs under {cfg.data_dir}",
    )
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.out, args.checkpoint)
    train_pairs = _load_split(cfg, "train")
    val_pairs = _load_split(cfg, "val")
    train_env = _build_env(cfg, train_pairs)
    val_env = _build_env(cfg, val_pairs)
    tcfg = _parse_trainer(cfg.trainer_section, cfg.seed)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cfg.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    net, metrics = trainer.train(
        train_env,
        tcfg,
        val_env=val_env,
        checkpoint_path=cfg.checkpoint,
        embed_dim=int(cfg.net_section.get("embed_dim", 16)),
        aggregation=str(cfg.net_section.get("aggregation", "product")),
    )
    trainer.write_metrics_csv(cfg.out_dir / "metrics.csv", metrics)
    val_return, subsets = trainer.greedy_validation(val_env, net)
    _say(
        args,
        f"trained {len(metrics)} iterations; greedy validation return {val_return:.4f}; "
        f"modal subset {trainer.modal_subset(subsets)}",
    )
    return 0


def _subset_report(venv: env_mod.MatchingEnv, subset: tuple[int, ...]) -> dict:
    per_pair = [venv.score_fn.pair_score(p, subset) for p in venv.pairs]
    mean_pck = venv.score(subset)
    cost = float(np.sum(venv.config.costs[list(subset)]))
    return {
        "subset": list(subset),
        "per_pair_pck": per_pair,
        "mean_pck": mean_pck,
        "episode_cost": cost,
        "total_return": venv.config.beta * mean_pck - cost,
    }


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.out, args.checkpoint)
    val_pairs = _load_split(cfg, "val")
    venv = _build_env(cfg, val_pairs)
    if args.subset:
        subset = _parse_subset(args.subset)
        report = _subset_report(venv, subset)
        report["mode"] = "forced"
    else:
        net = qnet.load_checkpoint(cfg.checkpoint)
        if net.config.num_levels != venv.num_levels:
            raise ValidationError(
                f"checkpoint has {net.config.num_levels} levels, data has {venv.num_levels}"
            )
        val_return, subsets = trainer.greedy_validation(venv, net)
        modal = trainer.modal_subset(subsets)
        report = _subset_report(venv, modal)
        report["mode"] = "greedy"
        report["greedy"] = {
            "per_pair_subsets": [list(s) for s in subsets],
            "per_pair_returns": [venv.episode_return(s) for s in subsets],
            "mean_return": val_return,
            "mean_subset_size": float(np.mean([len(s) for s in subsets])),
        }
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out_path = cfg.out_dir / "eval.json"
    out_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    _say(args, f"wrote {out_path}")
    return 0


def _parse_subset(text: str) -> tuple[int, ...]:
    try:
        subset = tuple(sorted({int(tok) for tok in text.split(",") if tok.strip() != ""}))
    except ValueError as exc:
        raise ValidationError(f"could not parse subset {text!r}: {exc}") from exc
    if not subset:
        raise ValidationError("the feature selection must be non-empty (s != {})")
    return subset


def cmd_match(args) -> int:
    subset = _parse_subset(args.subset)
    src = pyramid.load_pyramid(args.src)
    tgt = pyramid.load_pyramid(args.tgt)
    kps, _ = pyramid.load_keypoints(args.keypoints)
    match = hough.match_pair(src, tgt, subset)
    transferred = hough.transfer_keypoints(match, kps)
    flow = hough.dense_flow(match)
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "match.json").write_text(
        json.dumps(hough.match_result_to_json(match), sort_keys=True) + "\n"
    )
    pyramid.save_keypoints(transferred, out_dir / "keypoints_transferred.json")
    rows = hough.flow_to_csv_rows(flow)
    lines = ["x,y,dx,dy"] + [f"{x!r},{y!r},{dx!r},{dy!r}" for x, y, dx, dy in rows]
    (out_dir / "flow.csv").write_text("\n".join(lines) + "\n")
    _say(args, f"wrote match.json, keypoints_transferred.json, flow.csv under {out_dir}")
    return 0


def _baseline_setup(args):
    cfg = load_run_config(args.config, args.seed, args.out, args.checkpoint)
    pairs = _load_split(cfg, args.split)
    venv = _build_env(cfg, pairs)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, venv


def cmd_oracle(args) -> int:
    cfg, venv = _baseline_setup(args)
    best_subset, best_score = env_mod.exhaustive_oracle(
        venv.pairs, venv.config, score_fn=venv.score_fn
    )
    rows = []
    for size in range(1, venv.num_levels + 1):
        for subset in itertools.combinations(range(venv.num_levels), size):
            rows.append((subset, venv.score(subset)))
    out_path = cfg.out_dir / "oracle.csv"
    out_path.write_text("\n".join(env_mod.subset_csv_rows(rows)) + "\n")
    _say(args, f"oracle best subset {list(best_subset)} score {best_score!r}; wrote {out_path}")
    return 0


def cmd_beam(args) -> int:
    cfg, venv = _baseline_setup(args)
    width = int(args.beam_width or cfg.baselines.get("beam_width", 2))
    evaluated: list[tuple[tuple[int, ...], float]] = []

    def recording(selected) -> float:
        s = venv.score(selected)
        evaluated.append((tuple(sorted(selected)), s))
        return s

    best_subset, best_score = env_mod.beam_search_baseline(
        None, venv.config, width, num_levels=venv.num_levels, score_fn=recording
    )
    out_path = cfg.out_dir / "beam.csv"
    out_path.write_text("\n".join(env_mod.subset_csv_rows(evaluated)) + "\n")
    _say(args, f"beam (width {width}) best {list(best_subset)} score {best_score!r}; wrote {out_path}")
    return 0


def cmd_random(args) -> int:
    cfg, venv = _baseline_setup(args)
    k = int(args.k or cfg.baselines.get("random_k", 2))
    trials = int(args.trials or cfg.baselines.get("random_trials", 10))
    results = env_mod.random_selection_eval(
        None, venv.config, k, trials, cfg.seed, num_levels=venv.num_levels, score_fn=venv.score_fn
    )
    out_path = cfg.out_dir / "random.csv"
    out_path.write_text("\n".join(env_mod.subset_csv_rows(results)) + "\n")
    _say(args, f"random baseline K={k}, {trials} trials; wrote {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalesel",
        description="RL scale selection for feature-pyramid correspondence matching",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--checkpoint", default=None, help="override the checkpoint path")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")

    p_synth = sub.add_parser("synth", help="generate the synthetic train/val pair sets")
    add_common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train the selection policy")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint (or a forced subset)")
    add_common(p_eval)
    p_eval.add_argument("--subset", default=None, help="comma-separated level indices")
    p_eval.set_defaults(func=cmd_eval)

    p_match = sub.add_parser("match", help="match one pyramid pair with a fixed subset")
    p_match.add_argument("src", help="source .fpyr file")
    p_match.add_argument("tgt", help="target .fpyr file")
    p_match.add_argument("--subset", required=True, help="comma-separated level indices")
    p_match.add_argument("--keypoints", required=True, help="source keypoints JSON")
    p_match.add_argument("--out", default=None)
    p_match.add_argument("--quiet", action="store_true")
    p_match.set_defaults(func=cmd_match)

    for name, helptext, fn in (
        ("oracle", "exhaustive subset search (N <= 12)", cmd_oracle),
        ("beam", "prefix-ordered beam-search baseline", cmd_beam),
        ("random", "random fixed-size subset baseline", cmd_random),
    ):
        p = sub.add_parser(name, help=helptext)
        add_common(p)
        p.add_argument("--split", choices=SPLITS, default="val")
        if name == "beam":
            p.add_argument("--beam-width", type=int, default=None, dest="beam_width")
        if name == "random":
            p.add_argument("--k", type=int, default=None)
            p.add_argument("--trials", type=int, default=None)
        p.set_defaults(func=fn)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ScaleSelError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
