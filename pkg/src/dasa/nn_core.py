"""Single sparse autoencoder: encode/decode, sparsity-penalised cost,
backpropagated gradients and mini-batch SGD training.

Arrays are plain float64 numpy arrays. Patches are rows of a 2-D array,
so a mini-batch of B patches with K inputs is ``(B, K)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


def sigmoid(z):
    """Logistic function, evaluated without overflow for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    if out.ndim == 0:
        return float(out)
    return out


def clip_prob(p):
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for a named sub-stream of one run seed."""
    return np.random.default_rng([int(seed), *map(int, stream)])


def sub_seed(seed: int, *stream: int) -> int:
    return int(rng_for(seed, *stream).integers(2**63))


@dataclass
class AutoencoderParams:
    w: np.ndarray  # (J, K)
    b: np.ndarray  # (J,)
    w_dec: np.ndarray  # (K, J)
    b_dec: np.ndarray  # (K,)

    def __post_init__(self):
        J, K = self.w.shape
        if self.b.shape != (J,) or self.w_dec.shape != (K, J) or self.b_dec.shape != (K,):
            raise ShapeError(
                f"inconsistent autoencoder shapes: w {self.w.shape}, b {self.b.shape}, "
                f"w_dec {self.w_dec.shape}, b_dec {self.b_dec.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.w.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.w.shape[0]

    def copy(self) -> "AutoencoderParams":
        return AutoencoderParams(self.w.copy(), self.b.copy(), self.w_dec.copy(), self.b_dec.copy())

    def arrays(self):
        return (self.w, self.b, self.w_dec, self.b_dec)

    def equals(self, other: "AutoencoderParams") -> bool:
        return all(np.array_equal(a, o) for a, o in zip(self.arrays(), other.arrays()))


@dataclass(frozen=True)
class AeHyperparams:
    beta: float = 0.1
    rho: float = 0.04
    learning_rate: float = 0.3
    epochs: int = 50
    batch_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")

    def with_(self, **kw) -> "AeHyperparams":
        return replace(self, **kw)


def init_params(K: int, J: int, seed: int) -> AutoencoderParams:
    """Uniform(-r, r) weights with r = sqrt(6 / (K + J)); zero biases."""
    if K < 1 or J < 1:
        raise ShapeError(f"autoencoder dimensions must be >= 1, got K={K}, J={J}")
    rng = np.random.default_rng(seed)
    r = np.sqrt(6.0 / (K + J))
    w = rng.uniform(-r, r, size=(J, K))
    w_dec = rng.uniform(-r, r, size=(K, J))
    return AutoencoderParams(w, np.zeros(J), w_dec, np.zeros(K))


def _as_batch(p, n: int, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n:
        raise ShapeError(f"{what}: expected length {n}, got {arr.shape[-1] if arr.ndim else 0}")
    return arr, single


def _gates(mask):
    if mask is None:
        return None
    return np.asarray(getattr(mask, "gates", mask), dtype=np.float64)


def encode(ae: AutoencoderParams, p) -> np.ndarray:
    """Hidden activations for one patch (1-D) or a batch of patches (rows)."""
    P, single = _as_batch(p, ae.n_in, f"encode input (w is {ae.n_hidden}x{ae.n_in})")
    y = sigmoid(P @ ae.w.T + ae.b)
    return y[0] if single else y


def decode(ae: AutoencoderParams, y) -> np.ndarray:
    Y, single = _as_batch(y, ae.n_hidden, f"decode input (w_dec is {ae.n_in}x{ae.n_hidden})")
    p_hat = sigmoid(Y @ ae.w_dec.T + ae.b_dec)
    return p_hat[0] if single else p_hat


def _check_mask(g, ae: AutoencoderParams, batch_rows: int):
    if g is None:
        return
    if g.shape not in ((ae.n_hidden,), (batch_rows, ae.n_hidden)):
        raise ShapeError(f"mask shape {g.shape} does not match hidden dimension {ae.n_hidden}")


def _forward_backward(ae, P, hp, gates, want_grad=True):
    B = P.shape[0]
    Y = sigmoid(P @ ae.w.T + ae.b)
    Ys = Y if gates is None else Y * gates
    P_hat = sigmoid(Ys @ ae.w_dec.T + ae.b_dec)
    diff = P_hat - P
    rho_hat = Y.mean(axis=0)
    cost = float(np.sum(diff * diff) / B + hp.beta * np.sum(np.abs(hp.rho - rho_hat)))
    if not want_grad:
        return cost, None, Y

    d_z2 = (2.0 / B) * diff * P_hat * (1.0 - P_hat)
    g_w_dec = d_z2.T @ Ys
    g_b_dec = d_z2.sum(axis=0)
    d_y = d_z2 @ ae.w_dec
    if gates is not None:
        d_y = d_y * gates
    # subgradient of |rho - rho_hat| is sign(rho_hat - rho); 0 at the kink
    d_y = d_y + (hp.beta / B) * np.sign(rho_hat - hp.rho)
    d_z1 = d_y * Y * (1.0 - Y)
    grads = AutoencoderParams(d_z1.T @ P, d_z1.sum(axis=0), g_w_dec, g_b_dec)
    return cost, grads, Y


def ae_cost(ae: AutoencoderParams, batch, hp: AeHyperparams, mask=None) -> float:
    """Mean squared reconstruction error plus beta * sum_j |rho - mean activation_j|.

    With ``mask`` the decoder sees gated activations (y * s).
    """
    P = np.asarray(batch, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("ae_cost needs a non-empty 2-D batch")
    P, _ = _as_batch(P, ae.n_in, "ae_cost batch")
    g = _gates(mask)
    _check_mask(g, ae, P.shape[0])
    return _forward_backward(ae, P, hp, g, want_grad=False)[0]


def ae_gradients(ae: AutoencoderParams, batch, hp: AeHyperparams, mask=None) -> AutoencoderParams:
    """Gradient of :func:`ae_cost` for every weight; gated-off nodes keep their
    sparsity and encoder gradients."""
    P = np.asarray(batch, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("ae_gradients needs a non-empty 2-D batch")
    P, _ = _as_batch(P, ae.n_in, "ae_gradients batch")
    g = _gates(mask)
    _check_mask(g, ae, P.shape[0])
    return _forward_backward(ae, P, hp, g)[1]


MaskFn = Callable[[np.ndarray], np.ndarray]


def sgd_autoencoder(ae, data, hp: AeHyperparams, mask_fn: Optional[MaskFn] = None):
    """Shared SGD loop. Returns (params, trace) where each trace row is
    ``(epoch, mean batch cost, mean fraction of gates on)``."""
    X = np.asarray(getattr(data, "patches", data), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data must be a non-empty (N, K) array")
    if X.shape[1] != ae.n_in:
        raise ShapeError(f"training data has {X.shape[1]} inputs, autoencoder expects {ae.n_in}")
    ae = ae.copy()
    rng = np.random.default_rng(hp.seed)
    n = X.shape[0]
    lr = hp.learning_rate
    trace = []
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        costs, on = [], []
        for bi, start in enumerate(range(0, n, hp.batch_size)):
            P = X[order[start:start + hp.batch_size]]
            gates = None
            if mask_fn is not None:
                Y = sigmoid(P @ ae.w.T + ae.b)
                gates = np.asarray(mask_fn(Y), dtype=np.float64)
                on.append(float(gates.mean()))
            cost, g, _ = _forward_backward(ae, P, hp, gates)
            if not np.isfinite(cost):
                raise DivergenceError(f"non-finite autoencoder cost at epoch {epoch}, batch {bi}")
            ae.w -= lr * g.w
            ae.b -= lr * g.b
            ae.w_dec -= lr * g.w_dec
            ae.b_dec -= lr * g.b_dec
            costs.append(cost)
        row = (epoch, float(np.mean(costs)), float(np.mean(on)) if on else 1.0)
        log.debug("ae epoch %d cost %.6f gates-on %.3f", *row)
        trace.append(row)
    return ae, trace


def train_ae(ae: AutoencoderParams, data, hp: AeHyperparams, mask_fn: Optional[MaskFn] = None):
    """Mini-batch SGD on :func:`ae_cost`, reshuffling each epoch from ``hp.seed``.

    ``mask_fn`` maps a batch's hidden activations to gates for that batch.
    Returns ``(params, costs)`` with one mean batch cost per epoch.
    """
    ae, trace = sgd_autoencoder(ae, data, hp, mask_fn)
    return ae, [c for _, c, _ in trace]
