"""Command-line interface.

Subcommands: synth-data, train-backbone, export-features, train-hallucinator,
eval, gradcheck.  Every command takes --seed and is bit-reproducible under it;
--config <json> supplies defaults that explicit flags override, and the
effective configuration is echoed to the log.  Exit codes: 0 ok, 1 runtime
failure, 2 usage/config error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, gradcheck, meta_training, models, representation
from .data import (FormatError, read_feature_file, synth_clusters, synth_low_rank,
                   write_feature_file, EpisodeSpec)
from .tensor import ShapeError, dtype_for

log = logging.getLogger("halluc")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CHECK = 3


class ConfigError(ValueError):
    """Invalid configuration (unknown keys, inconsistent flags)."""


def _parse_shape(text: str):
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid shape {text!r}; expected d,h,w")
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"invalid shape {text!r}; expected three positive ints")
    return parts


def _parse_splits(text: str):
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid splits {text!r}; expected base,val,novel")
    if len(parts) != 3 or min(parts) < 0:
        raise argparse.ArgumentTypeError(f"invalid splits {text!r}; expected three counts")
    return parts


def _parse_shots(text: str):
    try:
        shots = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid shots {text!r}; expected e.g. 1,5")
    if not shots or min(shots) < 1:
        raise argparse.ArgumentTypeError(f"invalid shots {text!r}")
    return shots


DEFAULTS = {
    "synth-data": {
        "classes": 30, "per_class": 60, "shape": (64, 7, 7), "std": 0.05,
        "mode": "clusters", "rank": 4, "splits": None, "seed": 0,
    },
    "train-backbone": {
        "feature_shape": (64, 7, 7), "epochs": 20, "batch_size": 32,
        "learning_rate": 0.05, "momentum": 0.9, "weight_decay": 0.0005,
        "alpha": 0.5, "beta": 0.5, "stage": "both", "seed": 0, "precision": "double",
    },
    "export-features": {"batch_size": 64, "precision": "double"},
    "train-hallucinator": {
        "variant": "tensor", "cond_dim": None, "noise_dim": None, "hidden_dim": 512,
        "n_way": 5, "k_shot": 20, "generated": 50, "epochs": 50,
        "tasks_per_epoch": 600, "learning_rate": 1e-5, "lr_half_every": 10,
        "seed": 0, "precision": "double",
    },
    "eval": {
        "variants": "baseline", "shots": (1, 5), "tasks": 600, "queries": 15,
        "m_test": 500, "finetune_steps": 10, "finetune_lr": 1e-5, "finetune_m": 50,
        "seed": 0, "jobs": 1, "precision": "double",
    },
    "gradcheck": {"tol": 1e-4, "eps": 1e-6, "seed": 0},
}

# dims the published configuration uses when none are given
_PAPER_COND_DIM = {"tensor": 1024, "vector": 512}
_PAPER_NOISE_DIM = {"tensor": 1024, "vector": 512}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="halluc",
        description="Tensor-feature hallucination for few-shot classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None, help="RNG seed (bit-reproducible)")
        p.add_argument("--config", type=str, default=None, help="JSON config file; flags win")

    p = sub.add_parser("synth-data", help="generate a synthetic feature dataset")
    add_common(p)
    p.add_argument("--out", required=True, help="output .fth1 path")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", type=int, default=None, dest="per_class")
    p.add_argument("--shape", type=_parse_shape, default=None, help="d,h,w")
    p.add_argument("--std", type=float, default=None, help="intra-class noise std")
    p.add_argument("--mode", choices=("clusters", "low-rank"), default=None)
    p.add_argument("--rank", type=int, default=None, help="factors for --mode low-rank")
    p.add_argument("--splits", type=_parse_splits, default=None, help="base,val,novel counts")

    p = sub.add_parser("train-backbone", help="two-stage representation learning")
    add_common(p)
    p.add_argument("--data", required=True, help="raw-input .fth1 file")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--feature-shape", type=_parse_shape, default=None, dest="feature_shape")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None, dest="weight_decay")
    p.add_argument("--alpha", type=float, default=None, help="distillation CE weight")
    p.add_argument("--beta", type=float, default=None, help="distillation KL weight")
    p.add_argument("--stage", choices=("1", "2", "both"), default=None)
    p.add_argument("--precision", choices=("single", "double"), default=None)

    p = sub.add_parser("export-features", help="run a backbone over a dataset, write features")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="backbone .halc checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--precision", choices=("single", "double"), default=None)

    p = sub.add_parser("train-hallucinator", help="episodic meta-training of the hallucinator")
    add_common(p)
    p.add_argument("--data", required=True, help="feature .fth1 file")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--variant", choices=("tensor", "vector"), default=None)
    p.add_argument("--cond-dim", type=int, default=None, dest="cond_dim")
    p.add_argument("--noise-dim", type=int, default=None, dest="noise_dim")
    p.add_argument("--hidden-dim", type=int, default=None, dest="hidden_dim",
                   help="vector-variant hidden width")
    p.add_argument("--n-way", type=int, default=None, dest="n_way")
    p.add_argument("--k-shot", type=int, default=None, dest="k_shot")
    p.add_argument("--generated", type=int, default=None, help="M per class per task")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--tasks-per-epoch", type=int, default=None, dest="tasks_per_epoch")
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--lr-half-every", type=int, default=None, dest="lr_half_every",
                   help="halve the learning rate every this many epochs")
    p.add_argument("--precision", choices=("single", "double"), default=None)

    p = sub.add_parser("eval", help="episodic nearest-prototype evaluation")
    add_common(p)
    p.add_argument("--data", required=True, help="feature .fth1 file")
    p.add_argument("--variants", type=str, default=None,
                   help="comma list of baseline,baseline_kd,vfh,tfh,tfh_ft or 'all'")
    p.add_argument("--tfh-checkpoint", type=str, default=None, dest="tfh_checkpoint")
    p.add_argument("--vfh-checkpoint", type=str, default=None, dest="vfh_checkpoint")
    p.add_argument("--shots", type=_parse_shots, default=None, help="e.g. 1,5")
    p.add_argument("--tasks", type=int, default=None)
    p.add_argument("--queries", type=int, default=None, help="queries per class")
    p.add_argument("--m-test", type=int, default=None, dest="m_test")
    p.add_argument("--finetune-steps", type=int, default=None, dest="finetune_steps")
    p.add_argument("--finetune-lr", type=float, default=None, dest="finetune_lr")
    p.add_argument("--finetune-m", type=int, default=None, dest="finetune_m")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--report", type=str, default=None, help="write the JSON report here")
    p.add_argument("--precision", choices=("single", "double"), default=None)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every operator")
    add_common(p)
    p.add_argument("--tol", type=float, default=None, help="relative-error threshold")
    p.add_argument("--eps", type=float, default=None, help="finite-difference step")

    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < --config file < explicit flags; unknown config keys rejected."""
    effective = dict(DEFAULTS[command])
    for key in ("data", "out", "out_dir", "checkpoint", "report",
                "tfh_checkpoint", "vfh_checkpoint"):
        if hasattr(args, key):
            effective.setdefault(key, None)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
        unknown = set(loaded) - set(effective) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        effective.update(loaded)
    effective.setdefault("seed", 0)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        effective[key] = value
    for key in ("shape", "feature_shape", "splits", "shots"):
        if isinstance(effective.get(key), list):
            effective[key] = tuple(effective[key])
    return effective


def _echo_config(command: str, cfg: dict) -> None:
    printable = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())}
    log.info("%s effective config: %s", command, json.dumps(printable))


def cmd_synth_data(cfg: dict) -> int:
    if cfg["mode"] == "low-rank":
        ds = synth_low_rank(cfg["classes"], cfg["per_class"], cfg["shape"], cfg["rank"],
                            cfg["std"], cfg["seed"], cfg["splits"])
    else:
        ds = synth_clusters(cfg["classes"], cfg["per_class"], cfg["shape"], cfg["std"],
                            cfg["seed"], cfg["splits"])
    write_feature_file(cfg["out"], ds)
    log.info("wrote %d examples of shape %s to %s", ds.num_examples, ds.feature_shape,
             cfg["out"])
    print(cfg["out"])
    return EXIT_OK


def cmd_train_backbone(cfg: dict) -> int:
    dataset = read_feature_file(cfg["data"])
    dtype = dtype_for(cfg["precision"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    config = representation.ReprConfig(
        alpha=cfg["alpha"], beta=cfg["beta"], epochs=cfg["epochs"],
        batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"], weight_decay=cfg["weight_decay"], seed=cfg["seed"])
    num_classes = len(dataset.classes("base"))
    input_shape = dataset.feature_shape
    feature_shape = tuple(cfg["feature_shape"])
    d = feature_shape[0]

    rows = []
    teacher_path = out_dir / "teacher.halc"
    if cfg["stage"] in ("1", "both"):
        backbone = models.build_toy_backbone(input_shape, feature_shape,
                                             seed=cfg["seed"], dtype=dtype)
        head = models.build_classifier_head(d, num_classes, seed=cfg["seed"] + 1, dtype=dtype)
        history = representation.train_stage1(dataset, backbone, head, config)
        models.save_backbone(teacher_path, backbone, head)
        rows += [("stage1", i + 1, loss) for i, loss in enumerate(history)]
        log.info("stage 1 done: loss %.4f -> %.4f", history[0], history[-1])
    if cfg["stage"] in ("2", "both"):
        teacher = models.load_backbone(teacher_path, dtype=dtype)
        student_bb = models.build_toy_backbone(input_shape, feature_shape,
                                               seed=cfg["seed"] + 2, dtype=dtype)
        student_head = models.build_classifier_head(d, num_classes, seed=cfg["seed"] + 3,
                                                    dtype=dtype)
        history = representation.train_stage2_distill(dataset, teacher,
                                                      (student_bb, student_head), config)
        models.save_backbone(out_dir / "student.halc", student_bb, student_head)
        rows += [("stage2", i + 1, loss) for i, loss in enumerate(history)]
        log.info("stage 2 done: loss %.4f -> %.4f", history[0], history[-1])
    with open(out_dir / "repr_loss.csv", "w") as fh:
        fh.write("stage,epoch,loss\n")
        for stage, epoch, loss in rows:
            fh.write(f"{stage},{epoch},{loss!r}\n")
    print(str(out_dir))
    return EXIT_OK


def cmd_export_features(cfg: dict) -> int:
    dataset = read_feature_file(cfg["data"])
    dtype = dtype_for(cfg["precision"])
    backbone, _ = models.load_backbone(cfg["checkpoint"], dtype=dtype)
    representation.export_features(backbone, dataset, cfg["out"],
                                   batch_size=cfg["batch_size"])
    log.info("exported features of shape %s to %s", backbone.feature_shape, cfg["out"])
    print(cfg["out"])
    return EXIT_OK


def cmd_train_hallucinator(cfg: dict) -> int:
    dataset = read_feature_file(cfg["data"])
    dtype = dtype_for(cfg["precision"])
    variant = cfg["variant"]
    cond_dim = cfg["cond_dim"] or _PAPER_COND_DIM[variant]
    noise_dim = cfg["noise_dim"] or _PAPER_NOISE_DIM[variant]
    if variant == "tensor":
        model = models.build_tensor_hallucinator(dataset.feature_shape, cond_dim=cond_dim,
                                                 noise_dim=noise_dim, seed=cfg["seed"],
                                                 dtype=dtype)
    else:
        model = models.build_vector_hallucinator(dataset.feature_shape[0], cond_dim=cond_dim,
                                                 noise_dim=noise_dim,
                                                 hidden_dim=cfg["hidden_dim"],
                                                 seed=cfg["seed"], dtype=dtype)
    config = meta_training.HallucTrainConfig(
        n_way=cfg["n_way"], k_shot=cfg["k_shot"], generated_count=cfg["generated"],
        epochs=cfg["epochs"], tasks_per_epoch=cfg["tasks_per_epoch"],
        learning_rate=cfg["learning_rate"], lr_half_every_epochs=cfg["lr_half_every"],
        seed=cfg["seed"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    model, history = meta_training.train_hallucinator(
        dataset, model, config, checkpoint_dir=out_dir, log_path=out_dir / "loss.csv")
    final = out_dir / "hallucinator.halc"
    models.save_hallucinator(final, model)
    log.info("trained %s hallucinator: epoch losses %.4f -> %.4f", variant,
             history[0], history[-1])
    print(str(final))
    return EXIT_OK


def _build_variants(cfg: dict, dtype) -> list:
    names = cfg["variants"]
    if isinstance(names, str):
        names = evaluation.VARIANT_TAGS if names == "all" else tuple(
            n.strip() for n in names.split(",") if n.strip())
    unknown = set(names) - set(evaluation.VARIANT_TAGS)
    if unknown:
        raise ConfigError(f"unknown variants {sorted(unknown)}; "
                          f"expected among {evaluation.VARIANT_TAGS}")
    tfh_model = vfh_model = None
    if any(n in ("tfh", "tfh_ft") for n in names):
        if not cfg["tfh_checkpoint"]:
            raise ConfigError("variants tfh/tfh_ft need --tfh-checkpoint")
        tfh_model = models.load_hallucinator(cfg["tfh_checkpoint"], dtype=dtype)
        if tfh_model.variant != "tensor":
            raise ConfigError(f"--tfh-checkpoint holds a {tfh_model.variant} hallucinator")
    if "vfh" in names:
        if not cfg["vfh_checkpoint"]:
            raise ConfigError("variant vfh needs --vfh-checkpoint")
        vfh_model = models.load_hallucinator(cfg["vfh_checkpoint"], dtype=dtype)
        if vfh_model.variant != "vector":
            raise ConfigError(f"--vfh-checkpoint holds a {vfh_model.variant} hallucinator")
    variants = []
    for name in names:
        model = {"tfh": tfh_model, "tfh_ft": tfh_model, "vfh": vfh_model}.get(name)
        variants.append(evaluation.MethodVariant(
            tag=name, hallucinator=model, m_test=cfg["m_test"],
            finetune_steps=cfg["finetune_steps"], finetune_lr=cfg["finetune_lr"],
            finetune_m=cfg["finetune_m"]))
    return variants


def cmd_eval(cfg: dict) -> int:
    dataset = read_feature_file(cfg["data"])
    dtype = dtype_for(cfg["precision"])
    variants = _build_variants(cfg, dtype)
    reports = []
    for k_shot in cfg["shots"]:
        spec = EpisodeSpec(n_way=5, k_shot=k_shot, queries_per_class=cfg["queries"],
                           generated_count=cfg["m_test"], seed=cfg["seed"])
        reports.append(evaluation.evaluate(dataset, variants, cfg["tasks"], spec,
                                           cfg["seed"], jobs=cfg["jobs"], dtype=dtype))
    print(evaluation.report_table(reports))
    if cfg["report"]:
        payload = json.dumps({"reports": [r.to_dict() for r in reports]}, indent=2) + "\n"
        Path(cfg["report"]).write_text(payload)
        log.info("wrote report to %s", cfg["report"])
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    results = gradcheck.run_operator_suite(rel_tol=cfg["tol"], eps=cfg["eps"],
                                           seed=cfg["seed"])
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<28} max_rel_err={r.max_rel_error:.3e}  {status}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} gradient checks passed "
          f"(tolerance {cfg['tol']:g})")
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-backbone": cmd_train_backbone,
    "export-features": cmd_export_features,
    "train-hallucinator": cmd_train_hallucinator,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def _configure_logging() -> None:
    level = os.environ.get("HALC_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        cfg = resolve_config(args.command, args)
        _echo_config(args.command, cfg)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
