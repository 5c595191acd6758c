"""Unsupervised adaptation with saliency-gated (systematic) dropout, and the
two-stage adapt-then-fine-tune pipeline."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .nn_core import AeHyperparams, AutoencoderParams, ShapeError, decode, encode, sgd_autoencoder, sub_seed
from .sae_dnn import LabeledBatch, SaeDnnModel, TrainConfig, finetune

SALIENCY_STATISTICS = ("batch_mean", "per_sample")

_S_ADAPT1, _S_ADAPT2 = 21, 22


@dataclass
class SaliencyMask:
    gates: np.ndarray  # (J,) or (batch, J) in per-sample mode
    layer_index: int = 1
    tau: float = 0.1

    def __post_init__(self):
        self.gates = np.asarray(self.gates, dtype=np.float64)
        if not np.isin(self.gates, (0.0, 1.0)).all():
            raise ValueError("saliency gates must be 0 or 1")

    def __len__(self):
        return self.gates.shape[-1]

    @property
    def fraction_on(self) -> float:
        return float(self.gates.mean())


@dataclass(frozen=True)
class AdaptConfig:
    tau: float = 0.1
    saliency_statistic: str = "batch_mean"
    learning_rate: float = 0.3
    epochs: int = 50
    batch_size: int = 100
    seed: int = 0
    # sparsity penalty kept from pretraining unless overridden
    beta: float = 0.1
    rho: float = 0.04

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.saliency_statistic not in SALIENCY_STATISTICS:
            raise ValueError(f"saliency_statistic must be one of {SALIENCY_STATISTICS}")
        self.ae_hyperparams()

    @classmethod
    def from_train_config(cls, cfg: TrainConfig, **kw) -> "AdaptConfig":
        base = dict(tau=cfg.tau, learning_rate=cfg.pretrain_lr, epochs=cfg.pretrain_epochs,
                    batch_size=cfg.batch_size, seed=cfg.seed, beta=cfg.beta, rho=cfg.rho)
        base.update(kw)
        return cls(**base)

    def ae_hyperparams(self, seed=None) -> AeHyperparams:
        return AeHyperparams(beta=self.beta, rho=self.rho, learning_rate=self.learning_rate,
                             epochs=self.epochs, batch_size=self.batch_size,
                             seed=self.seed if seed is None else seed)

    def with_(self, **kw) -> "AdaptConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)


def saliency_mask(activations, tau: float, statistic: str = "batch_mean",
                  layer_index: int = 1) -> SaliencyMask:
    """Gate a hidden node on when its response reaches ``tau`` (y >= tau).

    ``batch_mean`` thresholds each node's mean activation over the batch and
    yields one gate vector; ``per_sample`` thresholds every activation.
    """
    Y = np.asarray(activations, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] == 0:
        raise ValueError("saliency_mask needs a non-empty (batch, J) activation matrix")
    if statistic == "batch_mean":
        gates = Y.mean(axis=0) >= tau
    elif statistic == "per_sample":
        gates = Y >= tau
    else:
        raise ValueError(f"unknown saliency statistic {statistic!r}")
    return SaliencyMask(gates.astype(np.float64), layer_index, tau)


def masked_decode(ae: AutoencoderParams, y, mask) -> np.ndarray:
    """Decode the gated activations y * s."""
    gates = np.asarray(getattr(mask, "gates", mask), dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if gates.shape[-1] != y.shape[-1]:
        raise ShapeError(f"mask length {gates.shape[-1]} != activation length {y.shape[-1]}")
    return decode(ae, y * gates)


def _adapt_with_trace(ae, target_inputs, cfg: AdaptConfig, layer_index=1, seed=None):
    def mask_fn(Y):
        return saliency_mask(Y, cfg.tau, cfg.saliency_statistic, layer_index).gates

    return sgd_autoencoder(ae, target_inputs, cfg.ae_hyperparams(seed), mask_fn)


def adapt_layer(ae: AutoencoderParams, target_inputs, cfg: AdaptConfig, layer_index: int = 1):
    """Re-train one autoencoder on target-domain inputs with a fresh saliency
    mask per mini-batch; every weight is updated at every step.

    Returns ``(params, trace)``; trace rows are (epoch, cost, fraction of gates on).
    """
    return _adapt_with_trace(ae, target_inputs, cfg, layer_index)


def adapt_model(model: SaeDnnModel, target_unlabeled, cfg: AdaptConfig):
    """Adapt layer1 on raw target patches, then layer2 on the adapted layer1's
    encodings. The target layer is left as is.

    Returns ``(model, trace)`` with rows (epoch, layer, cost, fraction_on).
    """
    X = np.asarray(getattr(target_unlabeled, "patches", target_unlabeled), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("adapt_model needs non-empty target patches")
    out = model.copy()
    l1, t1 = _adapt_with_trace(out.layer1, X, cfg, 1, sub_seed(cfg.seed, _S_ADAPT1))
    l2, t2 = _adapt_with_trace(out.layer2, encode(l1, X), cfg, 2, sub_seed(cfg.seed, _S_ADAPT2))
    out.layer1, out.layer2 = l1, l2
    trace = [(e, 1, c, f) for e, c, f in t1] + [(e, 2, c, f) for e, c, f in t2]
    return out, trace


def dasa(model_source: SaeDnnModel, target_unlabeled, target_labeled: LabeledBatch,
         cfg: AdaptConfig, finetune_cfg: TrainConfig):
    """Stage one: :func:`adapt_model` on unlabeled target patches.
    Stage two: supervised fine-tuning on the labeled target patches.

    Returns ``(model_target, {"adapt": ..., "finetune": ...})``.
    """
    if len(target_labeled) == 0:
        raise ValueError("dasa needs labeled target patches")
    adapted, atrace = adapt_model(model_source, target_unlabeled, cfg)
    tuned, ftrace = finetune(adapted, target_labeled, finetune_cfg)
    return tuned, {"adapt": atrace, "finetune": ftrace}


def write_adapt_trace(trace, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "layer", "cost", "fraction_on"])
        for epoch, layer, cost, frac in trace:
            w.writerow([epoch, layer, repr(float(cost)), repr(float(frac))])
