"""Two stacked autoencoders topped by a target (classification) layer.

Greedy layer-wise pretraining, joint supervised fine-tuning of all three
weight sets, and a scalar vessel probability for ROC/logloss.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .nn_core import (
    AeHyperparams,
    AutoencoderParams,
    DivergenceError,
    ShapeError,
    clip_prob,
    init_params,
    rng_for,
    sigmoid,
    sub_seed,
    train_ae,
    encode,
)

log = logging.getLogger(__name__)

OUTPUT_MODES = ("softmax", "sigmoid_as_written")
LOSSES = ("squared", "cross_entropy")
N_CLASSES = 2
VESSEL = 1

# sub-stream ids for rng_for(seed, ...)
_S_INIT1, _S_INIT2, _S_INIT3 = 1, 2, 3
_S_SHUF1, _S_SHUF2, _S_FINETUNE = 11, 12, 13


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the whole source-domain / adaptation pipeline."""

    hidden1: int = 400
    hidden2: int = 100
    pretrain_lr: float = 0.3
    pretrain_epochs: int = 50
    finetune_lr: float = 0.1
    finetune_epochs: int = 200
    batch_size: int = 100
    beta: float = 0.1
    rho: float = 0.04
    tau: float = 0.1
    seed: int = 0
    output_mode: str = "softmax"
    loss: str = "squared"

    def __post_init__(self):
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"output_mode must be one of {OUTPUT_MODES}, got {self.output_mode!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.hidden1 < 1 or self.hidden2 < 1:
            raise ValueError("hidden layer sizes must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.finetune_lr < 0 or self.finetune_epochs < 0:
            raise ValueError("finetune_lr and finetune_epochs must be non-negative")
        self.ae_hyperparams()  # validates beta/rho/lr/batch

    def ae_hyperparams(self, seed=None) -> AeHyperparams:
        return AeHyperparams(
            beta=self.beta,
            rho=self.rho,
            learning_rate=self.pretrain_lr,
            epochs=self.pretrain_epochs,
            batch_size=self.batch_size,
            seed=self.seed if seed is None else seed,
        )

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SaeDnnModel:
    layer1: AutoencoderParams
    layer2: AutoencoderParams
    target_w: np.ndarray  # (|classes|, hidden2)
    target_b: np.ndarray
    output_mode: str = "softmax"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.layer2.n_in != self.layer1.n_hidden:
            raise ShapeError(
                f"layer2 input dim {self.layer2.n_in} != layer1 hidden dim {self.layer1.n_hidden}"
            )
        if self.target_w.shape != (N_CLASSES, self.layer2.n_hidden):
            raise ShapeError(
                f"target_w shape {self.target_w.shape} != ({N_CLASSES}, {self.layer2.n_hidden})"
            )
        if self.target_b.shape != (N_CLASSES,):
            raise ShapeError(f"target_b shape {self.target_b.shape} != ({N_CLASSES},)")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output_mode {self.output_mode!r}")

    @property
    def n_in(self) -> int:
        return self.layer1.n_in

    def dims(self) -> tuple[int, int, int, int]:
        return (self.layer1.n_in, self.layer1.n_hidden, self.layer2.n_hidden, self.target_w.shape[0])

    def copy(self) -> "SaeDnnModel":
        return SaeDnnModel(
            self.layer1.copy(), self.layer2.copy(), self.target_w.copy(), self.target_b.copy(),
            self.output_mode, dict(self.meta),
        )

    def equals(self, other: "SaeDnnModel") -> bool:
        return (
            self.output_mode == other.output_mode
            and self.layer1.equals(other.layer1)
            and self.layer2.equals(other.layer2)
            and np.array_equal(self.target_w, other.target_w)
            and np.array_equal(self.target_b, other.target_b)
        )


@dataclass
class LabeledBatch:
    patches: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.patches.ndim != 2 or len(self.patches) != len(self.labels):
            raise ShapeError(
                f"{len(self.patches)} patches vs {len(self.labels)} labels; patches must be 2-D"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ValueError("labels must be class indices in {0, 1}")

    def __len__(self):
        return len(self.labels)


def init_target_layer(n_hidden: int, seed: int):
    r = np.sqrt(6.0 / (n_hidden + N_CLASSES))
    w = np.random.default_rng(seed).uniform(-r, r, size=(N_CLASSES, n_hidden))
    return w, np.zeros(N_CLASSES)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activations(model: SaeDnnModel, P):
    h1 = sigmoid(P @ model.layer1.w.T + model.layer1.b)
    h2 = sigmoid(h1 @ model.layer2.w.T + model.layer2.b)
    z = h2 @ model.target_w.T + model.target_b
    t = softmax(z) if model.output_mode == "softmax" else sigmoid(z)
    return h1, h2, t


def _batch(model, p):
    P = np.asarray(p, dtype=np.float64)
    single = P.ndim == 1
    if single:
        P = P[None, :]
    if P.ndim != 2 or P.shape[1] != model.n_in:
        raise ShapeError(f"patch length {P.shape[-1]} does not match model input dim {model.n_in}")
    return P, single


def forward(model: SaeDnnModel, p) -> np.ndarray:
    """Class scores t for one patch (1-D) or a batch of patches (rows)."""
    P, single = _batch(model, p)
    t = _activations(model, P)[2]
    return t[0] if single else t


def _one_hot(labels):
    y = np.zeros((len(labels), N_CLASSES))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def _cost_grad(model: SaeDnnModel, P, labels, loss: str, want_grad=True):
    B = P.shape[0]
    h1, h2, t = _activations(model, P)
    y = _one_hot(labels)
    if loss == "squared":
        cost = float(np.sum((t - y) ** 2) / B)
    elif model.output_mode == "softmax":
        cost = float(-np.sum(y * np.log(clip_prob(t))) / B)
    else:
        tc = clip_prob(t)
        cost = float(-np.sum(y * np.log(tc) + (1 - y) * np.log(1 - tc)) / B)
    if not want_grad:
        return cost, None

    if loss == "cross_entropy":
        d_z = (t - y) / B
    else:
        d_t = 2.0 * (t - y) / B
        if model.output_mode == "softmax":
            d_z = t * (d_t - np.sum(d_t * t, axis=1, keepdims=True))
        else:
            d_z = d_t * t * (1.0 - t)
    g_w3 = d_z.T @ h2
    g_b3 = d_z.sum(axis=0)
    d_z2 = (d_z @ model.target_w) * h2 * (1.0 - h2)
    g_w2 = d_z2.T @ h1
    g_b2 = d_z2.sum(axis=0)
    d_z1 = (d_z2 @ model.layer2.w) * h1 * (1.0 - h1)
    g_w1 = d_z1.T @ P
    g_b1 = d_z1.sum(axis=0)
    return cost, {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "w3": g_w3, "b3": g_b3}


def supervised_cost(model: SaeDnnModel, batch: LabeledBatch, loss: str = "squared") -> float:
    """Mean over the batch of ||t - one_hot(label)||^2, or cross-entropy."""
    if len(batch) == 0:
        raise ValueError("supervised_cost needs a non-empty batch")
    P, _ = _batch(model, batch.patches)
    return _cost_grad(model, P, batch.labels, loss, want_grad=False)[0]


def supervised_gradients(model: SaeDnnModel, batch: LabeledBatch, loss: str = "squared") -> dict:
    """Gradients of :func:`supervised_cost` w.r.t. the three encoder/target weight sets,
    keyed ``w1, b1, w2, b2, w3, b3``."""
    if len(batch) == 0:
        raise ValueError("supervised_gradients needs a non-empty batch")
    P, _ = _batch(model, batch.patches)
    return _cost_grad(model, P, batch.labels, loss)[1]


def predict_vessel_prob(model: SaeDnnModel, p):
    P, single = _batch(model, p)
    t = _activations(model, P)[2]
    if model.output_mode == "softmax":
        prob = t[:, VESSEL]
    else:
        prob = t[:, VESSEL] / (t[:, VESSEL] + t[:, 1 - VESSEL])
    prob = clip_prob(prob)
    return float(prob[0]) if single else prob


def pretrain(data, config: TrainConfig):
    """Greedy layer-wise pretraining: layer1 on the raw patches, then layer2 on
    layer1's encodings of the same patches.

    Returns ``(layer1, layer2, traces)`` where traces holds both epoch-cost lists.
    """
    X = np.asarray(getattr(data, "patches", data), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("pretrain needs a non-empty (N, K) patch array")
    seed = config.seed
    l1 = init_params(X.shape[1], config.hidden1, sub_seed(seed, _S_INIT1))
    l1, trace1 = train_ae(l1, X, config.ae_hyperparams(seed=sub_seed(seed, _S_SHUF1)))
    H = encode(l1, X)
    l2 = init_params(config.hidden1, config.hidden2, sub_seed(seed, _S_INIT2))
    l2, trace2 = train_ae(l2, H, config.ae_hyperparams(seed=sub_seed(seed, _S_SHUF2)))
    return l1, l2, {"layer1": trace1, "layer2": trace2}


def build_model(layer1, layer2, config: TrainConfig) -> SaeDnnModel:
    w3, b3 = init_target_layer(layer2.n_hidden, sub_seed(config.seed, _S_INIT3))
    return SaeDnnModel(layer1, layer2, w3, b3, config.output_mode)


def finetune(model: SaeDnnModel, labeled: LabeledBatch, config: TrainConfig):
    """Mini-batch SGD on the supervised cost, updating W1, W2 and W3 jointly.

    Returns ``(model, costs)`` with one mean batch cost per epoch.
    """
    if len(labeled) == 0:
        raise ValueError("finetune needs labeled data")
    P, _ = _batch(model, labeled.patches)
    labels = labeled.labels
    model = model.copy()
    rng = rng_for(config.seed, _S_FINETUNE)
    lr = config.finetune_lr
    n = len(labels)
    trace = []
    for epoch in range(config.finetune_epochs):
        order = rng.permutation(n)
        costs = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            cost, g = _cost_grad(model, P[idx], labels[idx], config.loss)
            if not np.isfinite(cost):
                raise DivergenceError(f"non-finite supervised cost at epoch {epoch}, batch {bi}")
            model.layer1.w -= lr * g["w1"]
            model.layer1.b -= lr * g["b1"]
            model.layer2.w -= lr * g["w2"]
            model.layer2.b -= lr * g["b2"]
            model.target_w -= lr * g["w3"]
            model.target_b -= lr * g["b3"]
            costs.append(cost)
        trace.append(float(np.mean(costs)))
        log.debug("finetune epoch %d cost %.6f", epoch, trace[-1])
    return model, trace


def train_sae_dnn(unlabeled, labeled: LabeledBatch, config: TrainConfig):
    """Pretrain on ``unlabeled`` patches then fine-tune on ``labeled``."""
    l1, l2, traces = pretrain(unlabeled, config)
    model = build_model(l1, l2, config)
    model, ft = finetune(model, labeled, config)
    traces["finetune"] = ft
    return model, traces
