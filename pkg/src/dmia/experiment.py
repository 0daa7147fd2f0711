"""End-to-end experiment protocol and versioned run reports."""

from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from dmia import metrics
from dmia.attack import (
    LOSS_SIGN,
    DetectConfig,
    TrainConfig,
    _pmap,
    detect_with_ensemble,
    train_ensemble,
)
from dmia.baseline import teacher_student_gap
from dmia.kernels import BANDWIDTH_CONVENTION
from dmia.numeric import RngStream
from dmia.worldsim import WorldSpec, build_world, make_candidate

log = logging.getLogger(__name__)

REPORT_SCHEMA = "dmia.run_report"
REPORT_VERSION = 1


class ExperimentError(RuntimeError):
    def __init__(self, message: str, partial: dict | None = None):
        super().__init__(message)
        self.partial = partial


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    h: int = 5
    tau: float | str = 0.7
    ratios: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.3])
    candidate_size: int = 2000
    nonmember_train: int = 2000
    nonmember_detect: int = 4000
    calibration_size: int = 2000
    calibration_rounds: int = 10
    rounds: int = 50
    baseline: bool = True
    baseline_queries: int = 1000
    baseline_nonmember_source: str = "nonmember"
    keep_trial_stats: bool = False
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.world, dict):
            self.world = WorldSpec.from_dict(self.world)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.detect, dict):
            self.detect = DetectConfig(**self.detect)
        if self.rounds < 1 or self.h < 1:
            raise ValueError("rounds and h must be >= 1")
        if not (self.tau == "calibrate" or (isinstance(self.tau, (int, float)) and 0 < self.tau < 1)):
            raise ValueError("tau must be in (0, 1) or 'calibrate'")
        if any(not 0 < r <= 1 for r in self.ratios):
            raise ValueError("positive member ratios must lie in (0, 1]")
        calib = self.calibration_size if self.tau == "calibrate" else 0
        if self.nonmember_train + self.nonmember_detect + calib > self.world.n_nonmember:
            raise ValueError("non-member splits exceed the world's non-member pool")
        if self.candidate_size > min(self.world.n_member, self.world.n_nonmember_heldout):
            raise ValueError("candidate_size exceeds the world's pools")
        if self.detect.batch_size > min(self.candidate_size, self.nonmember_detect):
            raise ValueError("detection batch exceeds candidate or non-member pool")
        if 2 * self.train.batch_size > self.nonmember_train:
            raise ValueError("training needs nonmember_train >= 2 * batch_size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out_dir")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _seeded(cfg: ExperimentConfig) -> ExperimentConfig:
    """Push the experiment seed into every component config."""
    return replace(cfg, world=replace(cfg.world, seed=cfg.seed),
                   train=replace(cfg.train, seed=cfg.seed),
                   detect=replace(cfg.detect, seed=cfg.seed))


def calibrate_tau(p_pos, p_neg) -> float:
    """Accuracy-maximising threshold on labelled calibration scores, kept inside (0, 1)."""
    scores = np.r_[p_pos, p_neg]
    labels = np.r_[np.ones(len(p_pos), bool), np.zeros(len(p_neg), bool)]
    _, t = metrics.best_asr(scores, labels, return_threshold=True)
    return float(np.clip(t, 1e-3, 1 - 1e-3))


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> dict:
    """Run the full protocol; returns the (deterministic) report dictionary.

    Per round: one negative candidate (all non-member) and one positive
    candidate per member ratio, each scored by the trained ensemble.
    """
    cfg = _seeded(cfg)
    started = time.perf_counter()
    with threadpool_limits(limits=1):
        report = _run(cfg, threads)
    elapsed = time.perf_counter() - started
    if cfg.out_dir:
        write_report(report, cfg.out_dir, elapsed)
    return report


def _run(cfg: ExperimentConfig, threads: int) -> dict:
    root = RngStream(cfg.seed).derive("experiment")
    world = build_world(cfg.world)
    enc = world.encoder
    perm = root.derive("nonmember_split").generator().permutation(len(world.D_non))
    D_non = world.D_non[perm]
    non_train = D_non[:cfg.nonmember_train]
    non_detect = D_non[cfg.nonmember_train:cfg.nonmember_train + cfg.nonmember_detect]
    non_calib = D_non[cfg.nonmember_train + cfg.nonmember_detect:]

    report = {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "config": cfg.to_dict(),
        "conventions": {
            "bandwidth": BANDWIDTH_CONVENTION,
            "loss": LOSS_SIGN,
            "metrics": metrics.CONVENTION,
            "negatives": "one all-non-member candidate per round, shared by every ratio",
        },
        "world_digest": world.digest(),
        "partial": True,
    }
    try:
        kernels = train_ensemble(non_train, world.student_sampler, enc, cfg.h, cfg.train,
                                 root.derive("train"), threads)
        report["kernels"] = [{
            "gamma_phi": tk.kernel.gamma_phi,
            "gamma_q": tk.kernel.gamma_q,
            "epsilon": tk.kernel.epsilon,
            "initial_eval_loss": tk.log.initial_eval_loss,
            "final_eval_loss": tk.log.final_eval_loss,
        } for tk in kernels]

        tau = cfg.tau
        if tau == "calibrate":
            tau = _calibrate(cfg, world, kernels, non_calib, non_detect, root.derive("calibration"),
                             threads)
            report["calibration"] = {"tau": tau, "rounds": cfg.calibration_rounds,
                                     "pool_size": len(non_calib)}

        kinds = [("negative", 0.0)] + [(f"rho={r:g}", r) for r in cfg.ratios]
        items = [(r, kind, rho) for r in range(cfg.rounds) for kind, rho in kinds]

        def work(item):
            rnd, kind, rho = item
            rr = root.derive("round", rnd, kind)
            cand = make_candidate(world, rho, cfg.candidate_size, rr.derive("candidate"))
            return detect_with_ensemble(cand, non_detect, kernels, enc, tau, cfg.detect,
                                        rr.derive("detect"))

        results = _pmap(work, items, threads)
        rounds = []
        for rnd in range(cfg.rounds):
            block = results[rnd * len(kinds):(rnd + 1) * len(kinds)]
            rounds.append({kind: _ens_record(rep, cfg.keep_trial_stats)
                           for (kind, _), rep in zip(kinds, block)})
        report["tau"] = tau
        report["rounds"] = rounds
        report["metrics"] = summarize_rounds(rounds, cfg.ratios, tau)
        report["histograms"] = {k: metrics.histogram([r[k]["p_bar"] for r in rounds])
                                for k, _ in kinds}
        if cfg.baseline:
            report["baseline"] = teacher_student_gap(world, cfg.baseline_queries,
                                                     cfg.baseline_nonmember_source)
    except Exception as exc:
        report["error"] = f"{type(exc).__name__}: {exc}"
        raise ExperimentError(str(exc), report) from exc
    report["partial"] = False
    return report


def _calibrate(cfg, world, kernels, non_calib, non_detect, rng, threads) -> float:
    """Threshold from labelled calibration sets the auditor can build alone.

    Negatives come from the reserved non-member split; positives are fresh
    student-generated sets standing in for members.
    """
    size = min(cfg.candidate_size, len(non_calib))
    if size < cfg.detect.batch_size:
        raise ValueError("calibration split too small for the detection batch size")

    def work(i):
        r = rng.derive("set", i)
        neg = non_calib[r.derive("neg").generator().choice(len(non_calib), size, replace=False)]
        pos = world.student_sampler(size, r.derive("pos"))
        return [detect_with_ensemble(c, non_detect, kernels, world.encoder, 0.5, cfg.detect,
                                     r.derive(tag)).p_bar
                for tag, c in (("pos_detect", pos), ("neg_detect", neg))]

    pairs = _pmap(work, range(cfg.calibration_rounds), threads)
    return calibrate_tau([p for p, _ in pairs], [n for _, n in pairs])


def _ens_record(rep, keep_trial_stats: bool) -> dict:
    d = {"p_bar": rep.p_bar, "decision": rep.decision,
         "p_mem": [m.p_mem for m in rep.members],
         "indicators": ["".join("1" if b else "0" for b in m.indicators) for m in rep.members]}
    if keep_trial_stats:
        d["m1"] = [m.m1.tolist() for m in rep.members]
        d["m2"] = [m.m2.tolist() for m in rep.members]
    return d


def summarize_rounds(rounds: list[dict], ratios, tau: float) -> dict:
    neg = np.array([r["negative"]["p_bar"] for r in rounds])
    out = {}
    for rho in ratios:
        key = f"rho={rho:g}"
        pos = np.array([r[key]["p_bar"] for r in rounds])
        scores = np.r_[pos, neg]
        labels = np.r_[np.ones(len(pos), bool), np.zeros(len(neg), bool)]
        s = metrics.summary(scores, labels)
        s["accuracy_at_tau"] = metrics.asr(scores, labels, tau)
        s["paired_correct"] = int(np.sum((pos >= tau) & (neg < tau)))
        s["mean_p_bar_positive"] = float(pos.mean())
        out[key] = s
    out["mean_p_bar_negative"] = float(neg.mean())
    return out


def recompute_p_bar(record: dict) -> float:
    """p_bar from the stored per-trial indicator strings."""
    p = [s.count("1") / len(s) for s in record["indicators"]]
    return float(np.mean(p))


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def write_report(report: dict, out_dir, elapsed: float | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(dumps_report(report))
    # timing lives beside the report so the report itself stays byte-reproducible
    meta = {"wall_clock_seconds": elapsed, "python": platform.python_version(),
            "numpy": np.__version__}
    from dmia import __version__
    meta["dmia"] = __version__
    (out / "run_meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return path


def load_report(path) -> dict:
    d = json.loads(Path(path).read_text())
    if d.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"{path}: not a run report")
    if d.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: unsupported report version {d.get('version')!r}")
    return d


def size_sweep_config(size: int, seed: int, rounds: int = 50, h: int = 5,
                      trials: int = 100, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """One point of the candidate-size sweep.

    Non-member data is three times the candidate size, one third for kernel
    training and two thirds for detection; batch sizes shrink with the pools.
    """
    base = base or ExperimentConfig()
    batch = min(base.detect.batch_size, size // 2)
    return replace(
        base,
        train=replace(base.train, batch_size=batch),
        detect=replace(base.detect, batch_size=batch, trials=trials),
        h=h, rounds=rounds, ratios=[1.0], candidate_size=size,
        nonmember_train=size, nonmember_detect=2 * size,
        baseline=False, seed=seed, out_dir=None,
    )


def run_size_sweep(sizes=(500, 200, 60, 30), seed: int = 0, threads: int = 1, **kw) -> dict:
    rows = []
    for s in sizes:
        rep = run_experiment(size_sweep_config(s, seed, **kw), threads)
        m = rep["metrics"]["rho=1"]
        rows.append({"candidate_size": s, "asr": m["asr"], "auc": m["auc"],
                     "tpr_at_fpr_0.05": m["tpr_at_fpr_0.05"]})
    return {"seed": seed, "rows": rows}
