"""Command-line front end.

Exit codes: 0 success, 1 configuration/validation failure, 2 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from .data_io import (
    DatasetError,
    FeatureFormatError,
    NoiseSpec,
    Protocol,
    dataset_to_split,
    generate_synthetic,
    load_features,
    save_features,
    split_seen_unseen,
    split_to_dataset,
    synthesize_candidates,
)
from .alignment import align
from .checks import joint_loss_grad_check
from .diff_core import DegenerateInputError, ShapeError
from .inference_metrics import (
    EvalSplit,
    best_gamma,
    default_gamma_grid,
    reports_to_csv,
    reports_to_table,
    sweep_gamma,
)
from .semantic_space import SemanticFormatError, load_semantic, save_semantic
from .trainer import ConfigError, NumericAbort, TrainConfig, Trainer, write_history

# rows of the component ablation: (label, use_vta, use_label_update, use_sem_loss, use_atv_omega, use_mi)
ABLATION_ROWS = [
    ("plain-ce", False, False, False, False, False),
    ("vta", True, False, False, False, False),
    ("vta+vis", True, True, False, False, False),
    ("vta+vis+sem", True, True, True, False, False),
    ("vta+vis+sem+ami", True, True, True, False, True),
    ("vta+vis+sem+omega", True, True, True, True, False),
    ("full", True, True, True, True, True),
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- data directory layout -------------------------------------------------------


def _read_classes(data_dir: Path, Q: int) -> tuple[np.ndarray, np.ndarray]:
    path = data_dir / "classes.txt"
    if not path.is_file():
        return split_seen_unseen(Q)
    found = {}
    for line in path.read_text().splitlines():
        if ":" in line:
            key, vals = line.split(":", 1)
            found[key.strip()] = np.array([int(x) for x in vals.split()], dtype=np.int64)
    if set(found) != {"seen", "unseen"}:
        raise ConfigError(f"{path}: expected 'seen:' and 'unseen:' lines")
    return found["seen"], found["unseen"]


def load_data_dir(data_dir, noise: NoiseSpec | None = None):
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ConfigError(f"data directory not found: {data_dir}")
    for name in ("semantic.txt", "train.bin"):
        if not (data_dir / name).is_file():
            raise ConfigError(f"missing {data_dir / name}")
    semantic = load_semantic(data_dir / "semantic.txt")
    seen, unseen = _read_classes(data_dir, semantic.Q)
    train = load_features(data_dir / "train.bin", seen_classes=seen, semantic=semantic)
    if noise is not None:
        train = train.with_candidates(synthesize_candidates(train.true_labels, semantic.Q, noise, classes=seen))
    splits = {}
    for name in ("val", "test"):
        if (data_dir / f"{name}.bin").is_file():
            ds = load_features(data_dir / f"{name}.bin", seen_classes=np.arange(semantic.Q))
            splits[name] = dataset_to_split(ds, seen, unseen)
    return train, semantic, splits


def _noise_from_args(args) -> NoiseSpec | None:
    if args.noise_q is not None and args.noise_r is not None:
        raise ConfigError("--noise-q and --noise-r are mutually exclusive")
    if args.noise_q is not None:
        return NoiseSpec(Protocol.Q_BERNOULLI, q=args.noise_q, seed=args.noise_seed)
    if args.noise_r is not None:
        return NoiseSpec(Protocol.R_COUNT, r=args.noise_r, seed=args.noise_seed)
    return None


def _write_manifest(out: Path, command: str, argv: list[str], cfg: TrainConfig | None = None, extra: dict | None = None):
    lines = [f"command = {command}", f"argv = {' '.join(argv)}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    if cfg is not None:
        lines.append("# resolved training config")
        lines.append(cfg.to_text().rstrip("\n"))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return cfg.with_overrides(**overrides) if overrides else cfg


def _eval_split(splits: dict, which: str) -> EvalSplit:
    if which not in splits:
        raise ConfigError(f"data directory has no {which}.bin split")
    return splits[which]


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_synthetic(
        Q=args.Q, K=args.K, d_v=args.d_v, D=args.D, n_per_class=args.n_per_class,
        margin=args.margin, seed=args.seed, noise=args.noise_level, noise_spec=_noise_from_args(args),
    )
    save_semantic(world.semantic, out / "semantic.txt")
    save_features(world.train, out / "train.bin")
    save_features(split_to_dataset(world.val, world.semantic.Q), out / "val.bin")
    save_features(split_to_dataset(world.test, world.semantic.Q), out / "test.bin")
    seen, unseen = world.test.seen_classes, world.test.unseen_classes
    (out / "classes.txt").write_text(
        "seen: " + " ".join(map(str, seen)) + "\nunseen: " + " ".join(map(str, unseen)) + "\n"
    )
    _write_manifest(out, "gen-data", argv)
    print(f"wrote synthetic dataset to {out}")
    return 0


def _dump_soft_labels_row(writer, trainer: Trainer) -> None:
    lt = trainer.state.l_tilde
    for i, j in zip(*np.nonzero(lt)):
        writer.writerow([len(trainer.history), int(i), int(trainer.seen[j]), repr(float(lt[i, j]))])


def _dump_attention(trainer: Trainer, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    res = align(trainer.model.semantic.attr_embed, trainer.data.features, trainer.model.alignment)
    for i in range(trainer.data.N):
        np.savetxt(out / f"vta_{i:05d}.txt", res.vta_attn[i], fmt="%.10g")
        np.savetxt(out / f"atv_{i:05d}.txt", res.atv_attn[i], fmt="%.10g")


def cmd_train(args, argv) -> int:
    cfg = _load_config(args)
    train, semantic, splits = load_data_dir(args.data, _noise_from_args(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        if not Path(args.resume).is_file():
            raise ConfigError(f"checkpoint not found: {args.resume}")
        trainer = Trainer.from_checkpoint(args.resume, train, semantic)
        if args.epochs is not None:
            trainer.cfg = trainer.cfg.with_overrides(epochs=args.epochs)
        cfg = trainer.cfg
    else:
        trainer = Trainer(train, cfg, semantic)
    _write_manifest(out, "train", argv, cfg)

    sl_file = None
    if args.dump_soft_labels:
        sl_file = open(out / "softlabels.csv", "w", newline="")
        sl_writer = csv.writer(sl_file, lineterminator="\n")
        sl_writer.writerow(["epoch", "instance", "class", "weight"])
        _dump_soft_labels_row(sl_writer, trainer)
    try:
        trainer.run(on_epoch=(lambda t, m: _dump_soft_labels_row(sl_writer, t)) if sl_file else None)
    finally:
        if sl_file:
            sl_file.close()

    trainer.save_checkpoint(out / "checkpoint.bin")
    write_history(trainer.history, out / "history.csv")
    if "test" in splits:
        report = trainer.evaluate(splits["test"])
        (out / "metrics.csv").write_text(reports_to_csv([report], "GZSL", cfg.seed))
        print(reports_to_table([report]))
    if args.dump_attention:
        _dump_attention(trainer, out / "attn")
    last = trainer.history[-1]
    print(f"trained {len(trainer.history)} epochs, final loss {last.loss:.4f}, disambiguation {last.disamb_acc:.3f}")
    return 0


def _trainer_from_ckpt(args):
    train, semantic, splits = load_data_dir(args.data)
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    return Trainer.from_checkpoint(args.checkpoint, train, semantic), splits


def cmd_eval(args, argv) -> int:
    trainer, splits = _trainer_from_ckpt(args)
    test = _eval_split(splits, "test")
    gamma = trainer.cfg.gamma if args.gamma is None else args.gamma
    if args.calibrate:
        val = _eval_split(splits, "val")
        gamma = best_gamma(sweep_gamma(val, trainer.model.prototypes().data, default_gamma_grid())).gamma
    report = trainer.evaluate(test, gamma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(reports_to_csv([report], "GZSL", trainer.cfg.seed))
    _write_manifest(out, "eval", argv, trainer.cfg, {"gamma": gamma})
    print(reports_to_table([report]))
    return 0


def _parse_grid(text: str | None) -> list[float]:
    if not text:
        return default_gamma_grid()
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad gamma grid {text!r}") from exc


def cmd_sweep_gamma(args, argv) -> int:
    trainer, splits = _trainer_from_ckpt(args)
    test = _eval_split(splits, "test")
    grid = _parse_grid(args.grid)
    reports = sweep_gamma(test, trainer.model.prototypes().data, grid, trainer.cfg.inference_score)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(reports_to_csv(reports, "GZSL", trainer.cfg.seed))
    best = best_gamma(reports)
    _write_manifest(out, "sweep-gamma", argv, trainer.cfg, {"grid": ",".join(map(str, grid)), "best_gamma": best.gamma})
    print(reports_to_table(reports, show_seen=True))
    print(f"best gamma {best.gamma:g} (H = {best.H:.2f})")
    return 0


def run_ablation(train, semantic, splits, cfg: TrainConfig):
    """Train one model per ablation row; gamma is calibrated on val when available."""
    test = _eval_split(splits, "test")
    val = splits.get("val")
    results = []
    for label, vta, upd, sem, om, mi in ABLATION_ROWS:
        row_cfg = cfg.with_overrides(use_vta=vta, use_label_update=upd, use_sem_loss=sem, use_atv_omega=om, use_mi=mi)
        trainer = Trainer(train, row_cfg, semantic)
        trainer.run()
        protos = trainer.model.prototypes().data
        gamma = row_cfg.gamma
        if val is not None:
            gamma = best_gamma(sweep_gamma(val, protos, default_gamma_grid(), row_cfg.inference_score)).gamma
        results.append((label, trainer.evaluate(test, gamma)))
    return results


def cmd_ablate(args, argv) -> int:
    cfg = _load_config(args)
    train, semantic, splits = load_data_dir(args.data, _noise_from_args(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "ablate", argv, cfg)
    results = run_ablation(train, semantic, splits, cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "T1", "U", "S", "H", "gamma", "seed"])
    for label, r in results:
        w.writerow([label, f"{r.T1:.4f}", f"{r.U:.4f}", f"{r.S:.4f}", f"{r.H:.4f}", f"{r.gamma:g}", cfg.seed])
    (out / "ablation.csv").write_text(buf.getvalue())
    print(reports_to_table([r for _, r in results], [label for label, _ in results]))
    return 0


def cmd_grad_check(args, argv) -> int:
    report = joint_loss_grad_check(seed=args.seed, tol=args.tol, omega_grad=args.omega_grad)
    print(f"checked {report.checked} entries, max relative error {report.max_error:.3e}")
    for name, idx, a, n in report.offenders[:20]:
        print(f"  {name}{list(idx)}: analytic {a:.6e} numeric {n:.6e}")
    return 0 if report.ok else 2


# -- parser ----------------------------------------------------------------------------


def _add_noise_flags(p):
    p.add_argument("--noise-q", type=float, default=None, help="per-label inclusion probability")
    p.add_argument("--noise-r", type=int, default=None, help="number of false-positive labels")
    p.add_argument("--noise-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dvsa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic partial-label dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--Q", type=int, default=20)
    p.add_argument("--K", type=int, default=32)
    p.add_argument("--d-v", dest="d_v", type=int, default=64)
    p.add_argument("--D", type=int, default=9)
    p.add_argument("--n-per-class", type=int, default=30)
    p.add_argument("--margin", type=float, default=0.25)
    p.add_argument("--noise-level", type=float, default=3.0, help="feature noise scale")
    _add_noise_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", default=None, help="continue from a checkpoint")
    p.add_argument("--dump-soft-labels", action="store_true", help="write softlabels.csv with the per-epoch soft labels")
    p.add_argument("--dump-attention", action="store_true", help="write final attention maps under attn/")
    _add_noise_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--calibrate", action="store_true", help="pick gamma on the validation split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-gamma", help="GZSL metrics over a calibration grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default=None, help="comma-separated gamma values")
    p.set_defaults(func=cmd_sweep_gamma)

    p = sub.add_parser("ablate", help="train every component-ablation row")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    _add_noise_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of the joint loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--omega-grad", action="store_true", help="differentiate through the correction factor")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DatasetError, FeatureFormatError, SemanticFormatError, ShapeError,
            DegenerateInputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
