"""Metrics, whole-image segmentation and the baseline/DASA experiment runners."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .adapt import AdaptConfig, dasa
from .data import LabeledImage, extract_patches, sample_patches, valid_centers
from .nn_core import clip_prob
from .sae_dnn import LabeledBatch, SaeDnnModel, TrainConfig, predict_vessel_prob, train_sae_dnn

log = logging.getLogger(__name__)

ARMS = ("SOURCE", "BL1", "BL2", "DASA")
DEFAULT_TAU_GRID = (0.0, 0.05, 0.1, 0.15, 0.2)

# patch-sampling streams, offset from the run seed
_SRC_STREAM, _UNL_STREAM, _LAB_STREAM = 101, 102, 103


def logloss(probs, labels) -> float:
    """Binary cross-entropy, probabilities clipped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise ValueError(f"logloss needs equal-length non-empty inputs, got {p.shape} and {y.shape}")
    p = clip_prob(p)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def roc_auc(probs, labels):
    """ROC curve over every distinct threshold and its trapezoidal area.

    Returns ``(fpr, tpr, auc)``. Tied scores form one step, so the area equals
    the Mann-Whitney statistic with ties counted as one half.
    """
    s = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.size == 0:
        raise ValueError("roc_auc needs equal-length non-empty inputs")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tp = np.r_[0, np.cumsum(y)[last]].astype(np.int64)
    fp = np.r_[0, np.cumsum(~y)[last]].astype(np.int64)
    # integer twice-area keeps the result exact
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return fp / n_neg, tp / n_pos, auc


def patch_side(model: SaeDnnModel, channels: int) -> int:
    side = int(round(np.sqrt(model.n_in / channels)))
    if side * side * channels != model.n_in:
        raise ValueError(f"model input {model.n_in} is not side^2 x {channels} channels")
    return side


def segment_image(model: SaeDnnModel, img, fov=None, chunk: int = 8192) -> np.ndarray:
    """Per-pixel vessel probability; NaN where no full patch fits or outside ``fov``."""
    side = patch_side(model, img.channels)
    if img.height < side or img.width < side:
        raise ValueError(f"image {img.width}x{img.height} smaller than {side}x{side} patch")
    centers = valid_centers(img.height, img.width, side, fov)
    out = np.full((img.height, img.width), np.nan)
    for start in range(0, len(centers), chunk):
        c = centers[start:start + chunk]
        out[c[:, 1], c[:, 0]] = predict_vessel_prob(model, extract_patches(img, c, side))
    return out


def write_pgm16(prob_map: np.ndarray, path) -> None:
    """16-bit PGM of a probability map; absent pixels are written as 0."""
    q = np.rint(np.nan_to_num(prob_map, nan=0.0) * 65535).astype(">u2")
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())


@dataclass
class MetricReport:
    logloss_mean: float
    logloss_std: float
    auc_mean: float
    auc_std: float
    per_image: list = field(default_factory=list)  # (image_id, logloss, auc)

    @classmethod
    def from_rows(cls, rows) -> "MetricReport":
        ll = np.array([r[1] for r in rows])
        au = np.array([r[2] for r in rows])
        return cls(float(ll.mean()), float(ll.std()), float(au.mean()), float(au.std()), list(rows))


def evaluate_model(model: SaeDnnModel, items: Sequence[LabeledImage], prefix: str = ""):
    rows = []
    for i, it in enumerate(items):
        if it.mask is None:
            raise ValueError(f"test image {it.name or i} has no ground-truth mask")
        pmap = segment_image(model, it.image, it.fov)
        valid = ~np.isnan(pmap)
        probs, labels = pmap[valid], np.asarray(it.mask)[valid]
        name = f"{prefix}{it.name or i}"
        try:
            auc = roc_auc(probs, labels)[2]
        except ValueError as exc:
            raise ValueError(f"image {name}: {exc}") from exc
        rows.append((name, logloss(probs, labels), auc))
    return rows


@dataclass
class ExperimentPlan:
    source_train: list
    source_test: list
    target_unlabeled: list
    target_labeled: list
    target_test: list
    config: TrainConfig = field(default_factory=TrainConfig)
    arms: tuple = ARMS
    tau_grid: tuple = DEFAULT_TAU_GRID
    seeds: tuple = (0,)
    fraction: float = 0.04
    side: int = 15
    saliency_statistic: str = "batch_mean"

    def __post_init__(self):
        if not self.arms:
            raise ValueError("plan needs at least one arm")
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ValueError(f"unknown arms {bad}; choose from {ARMS}")
        if any(not 0.0 <= t <= 1.0 for t in self.tau_grid):
            raise ValueError("tau grid values must lie in [0, 1]")


@dataclass
class SeedData:
    config: TrainConfig
    source: object
    unlabeled: object
    labeled: LabeledBatch


def _seed_data(plan: ExperimentPlan, seed: int) -> SeedData:
    cfg = plan.config.with_(seed=seed)
    src = sample_patches(plan.source_train, plan.fraction, plan.side, seed + _SRC_STREAM, "source")
    unl = sample_patches(plan.target_unlabeled, plan.fraction, plan.side, seed + _UNL_STREAM, "target")
    lab = sample_patches(plan.target_labeled, plan.fraction, plan.side, seed + _LAB_STREAM, "target")
    if lab.labels is None or src.labels is None:
        raise ValueError("source training and labeled target images need masks")
    return SeedData(cfg, src, unl, LabeledBatch(lab.patches, lab.labels))


def train_source_model(plan: ExperimentPlan, seed: int, cache: Optional[dict] = None):
    if cache is not None and seed in cache:
        return cache[seed]
    sd = _seed_data(plan, seed)
    model, _ = train_sae_dnn(sd.source, LabeledBatch(sd.source.patches, sd.source.labels), sd.config)
    if cache is not None:
        cache[seed] = model
    return model


def _dasa_model(plan, sd: SeedData, source_model, tau):
    acfg = AdaptConfig.from_train_config(sd.config, tau=tau,
                                         saliency_statistic=plan.saliency_statistic)
    return dasa(source_model, sd.unlabeled, sd.labeled, acfg, sd.config)[0]


def run_experiment(plan: ExperimentPlan, source_models: Optional[dict] = None) -> dict:
    """Train and evaluate each arm under every seed of the plan.

    SOURCE: source model on source test images. BL1: source model on target
    test images. BL2: pretrain + fine-tune on the labeled target patches only.
    DASA: adapt the source model, then fine-tune on labeled target patches.
    Returns ``{arm: MetricReport}`` pooling per-image rows over seeds.
    ``source_models`` (seed -> model) is used and filled as a cache.
    """
    rows = {arm: [] for arm in plan.arms}
    for seed in plan.seeds:
        sd = _seed_data(plan, seed)
        prefix = f"s{seed}/"
        src_model = None
        if any(a in plan.arms for a in ("SOURCE", "BL1", "DASA")):
            src_model = train_source_model(plan, seed, source_models)
        for arm in plan.arms:
            try:
                if arm == "SOURCE":
                    r = evaluate_model(src_model, plan.source_test, prefix)
                elif arm == "BL1":
                    r = evaluate_model(src_model, plan.target_test, prefix)
                elif arm == "BL2":
                    bl2, _ = train_sae_dnn(sd.labeled.patches, sd.labeled, sd.config)
                    r = evaluate_model(bl2, plan.target_test, prefix)
                else:
                    model = _dasa_model(plan, sd, src_model, sd.config.tau)
                    r = evaluate_model(model, plan.target_test, prefix)
            except Exception as exc:
                raise RuntimeError(f"arm {arm} (seed {seed}) failed: {exc}") from exc
            log.info("seed %s arm %s logloss %.4f auc %.4f", seed, arm,
                     np.mean([x[1] for x in r]), np.mean([x[2] for x in r]))
            rows[arm].extend(r)
    return {arm: MetricReport.from_rows(rows[arm]) for arm in plan.arms}


@dataclass
class TauPoint:
    tau: float
    logloss_mean: float
    logloss_std: float
    auc_mean: float = float("nan")


def tau_sweep(plan: ExperimentPlan, source_models: Optional[dict] = None) -> list:
    """Run the DASA arm once per tau in ``plan.tau_grid`` with shared seeds."""
    per_tau = {t: [] for t in plan.tau_grid}
    for seed in plan.seeds:
        sd = _seed_data(plan, seed)
        src_model = train_source_model(plan, seed, source_models)
        for tau in plan.tau_grid:
            try:
                model = _dasa_model(plan, sd, src_model, tau)
            except Exception as exc:
                raise RuntimeError(f"tau {tau} (seed {seed}) failed: {exc}") from exc
            per_tau[tau].extend(evaluate_model(model, plan.target_test, f"s{seed}/"))
    out = []
    for tau in plan.tau_grid:
        rep = MetricReport.from_rows(per_tau[tau])
        out.append(TauPoint(float(tau), rep.logloss_mean, rep.logloss_std, rep.auc_mean))
    return out


def write_metrics_csv(reports: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "image_id", "logloss", "auc"])
        for arm, rep in reports.items():
            for image_id, ll, auc in rep.per_image:
                w.writerow([arm, image_id, repr(float(ll)), repr(float(auc))])


def write_sweep_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "logloss_mean", "logloss_std"])
        for p in points:
            w.writerow([repr(p.tau), repr(p.logloss_mean), repr(p.logloss_std)])


def summary_table(reports: dict) -> str:
    lines = [f"{'arm':<8}{'logloss':>18}{'AUC':>18}"]
    for arm, r in reports.items():
        lines.append(f"{arm:<8}{r.logloss_mean:>10.4f} ± {r.logloss_std:<6.3f}"
                     f"{r.auc_mean:>10.4f} ± {r.auc_std:<6.3f}")
    return "\n".join(lines)
