"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from dmia import io as dio
from dmia import metrics
from dmia.attack import (
    DetectConfig,
    NumericalError,
    TrainConfig,
    TrainedKernel,
    detect_candidate,
    detect_with_ensemble,
    train_deep_kernel,
    train_ensemble,
)
from dmia.experiment import (
    ExperimentConfig,
    ExperimentError,
    dumps_report,
    load_report,
    run_experiment,
    write_report,
)
from dmia.kernels import DeepKernel
from dmia.numeric import RngStream
from dmia.worldsim import EncoderHandle, WorldBuildError, WorldSpec, build_world

log = logging.getLogger("dmia")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
KERNEL_SCHEMA = "dmia.trained_kernel"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _u64(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _common(p):
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--seed", type=_u64, help="experiment seed (overrides the config)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--format", choices=("csv", "f32bin"), default="csv")
    p.add_argument("--threads", type=int, help="worker threads (default: $DMIA_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dmia", description="Distribution-level membership inference")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="build a synthetic world and export its datasets")
    _common(p)

    p = sub.add_parser("train-kernel", help="train one deep kernel and save it")
    _common(p)
    p.add_argument("--nonmember", type=Path, required=True)
    p.add_argument("--generated", type=Path, required=True, help="student-generated samples")
    p.add_argument("--encoder", type=Path, help="encoder JSON (default identity)")

    p = sub.add_parser("detect", help="score a candidate set with a saved kernel")
    _common(p)
    p.add_argument("--kernel", type=Path, required=True)
    p.add_argument("--candidate", type=Path, required=True)
    p.add_argument("--nonmember", type=Path, required=True)

    p = sub.add_parser("ensemble", help="train h kernels and threshold their mean score")
    _common(p)
    p.add_argument("--candidate", type=Path, required=True)
    p.add_argument("--nonmember-train", type=Path, required=True)
    p.add_argument("--nonmember", type=Path, required=True)
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--encoder", type=Path)
    p.add_argument("--h", type=int, default=5)
    p.add_argument("--tau", type=float, default=0.7)

    p = sub.add_parser("experiment", help="run the full protocol from a JSON config")
    _common(p)

    p = sub.add_parser("report", help="summarize saved run reports to CSV and histogram JSON")
    _common(p)
    p.add_argument("reports", type=Path, nargs="+")
    return parser


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("DMIA_THREADS")
    return max(1, int(env)) if env else 1


def _read_json(path: Path | None) -> dict:
    return {} if path is None else json.loads(path.read_text())


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def pool_sampler(X: np.ndarray):
    """Sampler over a fixed pool of generated rows (drawn without replacement)."""

    def sample(n: int, rng: RngStream) -> np.ndarray:
        if n > len(X):
            raise ValueError(f"generated pool has {len(X)} rows, {n} requested")
        return X[rng.generator().choice(len(X), n, replace=False)]

    return sample


def _encoder(path: Path | None) -> EncoderHandle:
    return EncoderHandle() if path is None else EncoderHandle.from_dict(_read_json(path))


def cmd_simulate(args) -> int:
    conf = _read_json(args.config)
    spec = WorldSpec.from_dict(conf.get("world", conf))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    world = build_world(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    ext = dio.extension(args.format)
    for name, X in world.datasets().items():
        dio.save_dataset(args.out / f"{name}{ext}", X, args.format)
    _write_json(args.out / "encoder.json", world.encoder.to_dict())
    _write_json(args.out / "world.json", {"spec": spec.to_dict(), "digest": world.digest()})
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    conf = _read_json(args.config)
    cfg = TrainConfig(**conf.get("train", conf))
    return cfg if args.seed is None else replace(cfg, seed=args.seed)


def _detect_config(args) -> DetectConfig:
    conf = _read_json(args.config)
    cfg = DetectConfig(**conf.get("detect", {k: v for k, v in conf.items()
                                             if k in DetectConfig.__dataclass_fields__}))
    return cfg if args.seed is None else replace(cfg, seed=args.seed)


def save_trained_kernel(path: Path, tk: TrainedKernel, enc: EncoderHandle, cfg: TrainConfig):
    doc = {
        "schema": KERNEL_SCHEMA,
        "version": 1,
        "kernel": tk.kernel.to_dict(),
        "anchor": np.asarray(tk.anchor).tolist(),
        "encoder": enc.to_dict(),
        "train_config": asdict(cfg),
    }
    if tk.log is not None:
        doc["training"] = {"initial_eval_loss": tk.log.initial_eval_loss,
                           "final_eval_loss": tk.log.final_eval_loss,
                           "loss_sign": tk.log.loss_sign,
                           "losses": tk.log.losses}
    _write_json(path, doc)


def load_trained_kernel(path: Path) -> tuple[TrainedKernel, EncoderHandle]:
    doc = _read_json(path)
    if doc.get("schema") != KERNEL_SCHEMA or doc.get("version") != 1:
        raise ValueError(f"{path}: not a version-1 trained kernel")
    tk = TrainedKernel(DeepKernel.from_dict(doc["kernel"]), np.asarray(doc["anchor"], dtype=np.float64))
    return tk, EncoderHandle.from_dict(doc["encoder"])


def cmd_train_kernel(args) -> int:
    cfg = _train_config(args)
    enc = _encoder(args.encoder)
    non = dio.load_dataset(args.nonmember)
    gen = dio.load_dataset(args.generated)
    k, anchor, tlog = train_deep_kernel(non, pool_sampler(gen), enc, cfg, return_log=True)
    save_trained_kernel(args.out / "kernel.json", TrainedKernel(k, anchor, tlog), enc, cfg)
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _detect_config(args)
    tk, enc = load_trained_kernel(args.kernel)
    can = dio.load_dataset(args.candidate)
    non = dio.load_dataset(args.nonmember)
    rep = detect_candidate(can, non, tk.anchor, tk.kernel, enc, cfg)
    _write_json(args.out / "detection.json",
                {"schema": "dmia.detection", "version": 1, "config": asdict(cfg),
                 "report": rep.to_dict()})
    print(f"p_mem={rep.p_mem:.4f}")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    conf = _read_json(args.config)
    tcfg = TrainConfig(**conf.get("train", {}))
    dcfg = DetectConfig(**conf.get("detect", {}))
    if args.seed is not None:
        tcfg, dcfg = replace(tcfg, seed=args.seed), replace(dcfg, seed=args.seed)
    enc = _encoder(args.encoder)
    rng = RngStream(tcfg.seed)
    kernels = train_ensemble(dio.load_dataset(args.nonmember_train),
                             pool_sampler(dio.load_dataset(args.generated)), enc, args.h, tcfg,
                             rng.derive("train"), _threads(args))
    rep = detect_with_ensemble(dio.load_dataset(args.candidate), dio.load_dataset(args.nonmember),
                               kernels, enc, args.tau, dcfg, rng.derive("detect"), _threads(args))
    _write_json(args.out / "ensemble.json",
                {"schema": "dmia.ensemble", "version": 1,
                 "config": {"train": asdict(tcfg), "detect": asdict(dcfg), "h": args.h},
                 "report": rep.to_dict()})
    print(f"p_bar={rep.p_bar:.4f} decision={rep.decision}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig.from_dict(_read_json(args.config)) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg = replace(cfg, out_dir=str(args.out))
    try:
        run_experiment(cfg, threads=_threads(args))
    except ExperimentError as exc:
        if exc.partial is not None:
            write_report(exc.partial, args.out)
        raise exc.__cause__ or exc
    return EXIT_OK


def cmd_report(args) -> int:
    import csv

    args.out.mkdir(parents=True, exist_ok=True)
    rows, groups = [], {}
    for path in args.reports:
        rep = load_report(path)
        for key, m in rep["metrics"].items():
            if isinstance(m, dict):
                rows.append([str(path), rep["config"]["seed"], key, m["asr"], m["auc"],
                             m["tpr_at_fpr_0.05"], m["accuracy_at_tau"]])
        for rnd in rep["rounds"]:
            for kind, rec in rnd.items():
                groups.setdefault(kind, []).append(rec["p_bar"])
    with open(args.out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["report", "seed", "ratio", "asr", "auc", "tpr_at_fpr_0.05", "accuracy_at_tau"])
        w.writerows(rows)
    (args.out / "histograms.json").write_text(metrics.histogram_json(groups) + "\n")
    (args.out / "histograms.csv").write_text(metrics.histogram_csv(groups))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train-kernel": cmd_train_kernel,
    "detect": cmd_detect,
    "ensemble": cmd_ensemble,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"dmia: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (NumericalError, WorldBuildError, FloatingPointError) as exc:
        print(f"dmia: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dio.DatasetFormatError, FileNotFoundError, ValueError, KeyError, TypeError) as exc:
        print(f"dmia: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
