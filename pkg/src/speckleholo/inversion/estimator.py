"""Two-stage physics-informed abundance estimator.

Stage I fits an encoder (affine + tanh over image features concatenated with
physics-prior features) together with a softmax descriptor mapper under a
cross-entropy representation loss. Stage II freezes the encoder and fits an
affine + softplus abundance head under the quantification loss
``(1/2N) * sum_n ||c_hat_n - c_n||`` (optionally squared).

Gradients are derived by hand; ``grad_check`` compares them against central
differences.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError, ParameterError, ShapeError

PARAM_FORMAT = "speckleholo-estimator"
PARAM_VERSION = 1


@dataclass
class TrainingSet:
    """Rows of image features ``X``, physics-prior features ``I``, target
    descriptor distributions ``t`` and true abundances ``c`` (mg/mL)."""

    X: np.ndarray
    I: np.ndarray
    t: np.ndarray
    c: np.ndarray
    species: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.I = np.asarray(self.I, dtype=np.float64)
        if self.I.ndim < 2:
            self.I = self.I.reshape(len(self.X), -1) if self.I.size % len(self.X) == 0 \
                else self.I.reshape(1, -1)
        self.t = np.atleast_2d(np.asarray(self.t, dtype=np.float64))
        self.c = np.atleast_2d(np.asarray(self.c, dtype=np.float64))
        n = len(self.X)
        for name, arr in (("I", self.I), ("t", self.t), ("c", self.c)):
            if len(arr) != n:
                raise ShapeError(f"{name} has {len(arr)} rows, X has {n}")
        if np.any(self.t < 0) or np.any(np.abs(self.t.sum(axis=1) - 1.0) > 1e-9):
            raise ParameterError("every target distribution t_n must be non-negative and sum to 1")

    def __len__(self):
        return len(self.X)

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.X, self.I])


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 500
    batch_size: int | None = None  # None: full batch
    seed: int = 0
    stage: str = "I"
    optimizer: str = "adam"
    hidden: int = 16
    squared: bool = False  # stage II: squared-norm variant of the quantification loss

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ParameterError("learning_rate must be >= 0")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.stage not in ("I", "II"):
            raise ParameterError("stage must be 'I' or 'II'")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError("optimizer must be 'adam' or 'sgd'")


@dataclass
class EstimatorParams:
    """Encoder (theta), descriptor mapper (phi) and abundance head (psi).

    ``input_mean``/``input_scale`` standardize the concatenated inputs and
    belong to the encoder; they are fixed at stage-I initialization.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    input_mean: np.ndarray
    input_scale: np.ndarray

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2", "W3", "b3", "input_mean", "input_scale"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h, d = self.W1.shape
        if self.b1.shape != (h,) or self.input_mean.shape != (d,) or self.input_scale.shape != (d,):
            raise ShapeError("encoder dimensions are inconsistent")
        if self.W2.shape[1] != h or self.b2.shape != (self.W2.shape[0],):
            raise ShapeError("descriptor mapper dimensions are inconsistent")
        if self.W3.shape[1] != h or self.b3.shape != (self.W3.shape[0],):
            raise ShapeError("abundance head dimensions are inconsistent")
        if not all(np.all(np.isfinite(getattr(self, n))) for n in self.names()):
            raise ParameterError("estimator weights must be finite")

    @staticmethod
    def names():
        return ("W1", "b1", "W2", "b2", "W3", "b3", "input_mean", "input_scale")

    @property
    def dims(self) -> dict:
        return {"input": self.W1.shape[1], "hidden": self.W1.shape[0],
                "descriptors": self.W2.shape[0], "outputs": self.W3.shape[0]}

    def copy(self) -> "EstimatorParams":
        return copy.deepcopy(self)

    def theta_digest(self) -> str:
        """SHA-256 of the encoder weights and input standardization."""
        h = hashlib.sha256()
        for name in ("W1", "b1", "input_mean", "input_scale"):
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()

    def to_json(self) -> str:
        doc = {"format": PARAM_FORMAT, "version": PARAM_VERSION, "dims": self.dims, "arrays": {}}
        for name in self.names():
            a = getattr(self, name)
            doc["arrays"][name] = {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EstimatorParams":
        doc = json.loads(text)
        if doc.get("format") != PARAM_FORMAT or doc.get("version") != PARAM_VERSION:
            raise ParameterError("not a speckleholo estimator parameter file (format/version)")
        arrays = {}
        for name in cls.names():
            entry = doc["arrays"][name]
            arrays[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        return cls(**arrays)


def init_params(n_inputs: int, n_hidden: int, n_descriptors: int, n_outputs: int, seed: int,
                input_mean=None, input_scale=None) -> EstimatorParams:
    """Gaussian(0, 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)

    def w(out, fan_in):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(out, fan_in))

    mean = np.zeros(n_inputs) if input_mean is None else input_mean
    scale = np.ones(n_inputs) if input_scale is None else input_scale
    return EstimatorParams(w(n_hidden, n_inputs), np.zeros(n_hidden),
                           w(n_descriptors, n_hidden), np.zeros(n_descriptors),
                           w(n_outputs, n_hidden), np.zeros(n_outputs), mean, scale)


def _standardize(Z, params):
    return (Z - params.input_mean) / params.input_scale


def _check_inputs(Z, params):
    if Z.shape[1] != params.W1.shape[1]:
        raise ShapeError(f"inputs have {Z.shape[1]} columns, encoder expects {params.W1.shape[1]}")


def encode(X, I, params: EstimatorParams) -> np.ndarray:
    """Hidden representation ``tanh(W1 [X, I] + b1)`` (inputs standardized).

    Works on single rows or batches.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    I = np.asarray(I, dtype=np.float64).reshape(len(X), -1)
    Z = np.hstack([X, I])
    _check_inputs(Z, params)
    return np.tanh(_standardize(Z, params) @ params.W1.T + params.b1)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def map_descriptor(h, params: EstimatorParams) -> np.ndarray:
    """Descriptor distribution ``softmax(W2 h + b2)``."""
    return softmax(np.asarray(h) @ params.W2.T + params.b2)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def estimate(X, I, params: EstimatorParams) -> np.ndarray:
    """Abundances ``softplus(W3 h + b3)`` from the encoded inputs."""
    return softplus(encode(X, I, params) @ params.W3.T + params.b3)


def loss_rep(s_hat, t) -> float:
    """Mean cross-entropy ``-(1/N) sum_n sum_i t_ni ln s_ni``."""
    s_hat = np.atleast_2d(np.asarray(s_hat, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    if s_hat.size == 0:
        raise ParameterError("empty batch")
    if s_hat.shape != t.shape:
        raise ShapeError(f"descriptor batch {s_hat.shape} vs target batch {t.shape}")
    if np.any(s_hat <= 0):
        raise ParameterError("descriptor components must be strictly positive")
    return float(-np.sum(t * np.log(s_hat)) / len(s_hat))


def loss_qt(c_hat, c_true, squared: bool = False) -> float:
    """Quantification loss ``(1/2N) sum_n ||c_hat_n - c_n||`` (``||.||^2`` if squared)."""
    c_hat = np.atleast_2d(np.asarray(c_hat, dtype=np.float64))
    c_true = np.atleast_2d(np.asarray(c_true, dtype=np.float64))
    if c_hat.size == 0:
        raise ParameterError("empty batch")
    if c_hat.shape != c_true.shape:
        raise ShapeError(f"prediction batch {c_hat.shape} vs truth batch {c_true.shape}")
    norms = np.linalg.norm(c_hat - c_true, axis=1)
    if squared:
        norms = norms**2
    return float(np.sum(norms) / (2 * len(c_hat)))


def _forward(params, Z):
    A1 = _standardize(Z, params) @ params.W1.T + params.b1
    return A1, np.tanh(A1)


def rep_loss_and_grads(params: EstimatorParams, Z, t):
    """Representation loss and its gradients w.r.t. W1, b1, W2, b2."""
    n = len(Z)
    Zs = _standardize(Z, params)
    _, H = _forward(params, Z)
    logits = H @ params.W2.T + params.b2
    log_s = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    S = np.exp(log_s)
    # log-softmax keeps the loss finite where softmax underflows
    loss = float(-np.sum(np.where(t > 0, t * log_s, 0.0)) / n)
    dlogits = (S * t.sum(axis=1, keepdims=True) - t) / n
    gW2 = dlogits.T @ H
    gb2 = dlogits.sum(axis=0)
    dA1 = (dlogits @ params.W2) * (1.0 - H**2)
    return loss, {"W1": dA1.T @ Zs, "b1": dA1.sum(axis=0), "W2": gW2, "b2": gb2}


def qt_kink_rows(params, Z, c, tol: float = 0.0) -> np.ndarray:
    """Rows whose prediction error norm is ``<= tol`` (non-differentiable points)."""
    _, H = _forward(params, Z)
    C = softplus(H @ params.W3.T + params.b3)
    return np.linalg.norm(C - c, axis=1) <= tol


def qt_loss_and_grads(params: EstimatorParams, Z, c, squared: bool = False):
    """Quantification loss and gradients w.r.t. W3, b3 (head) and W1, b1 (encoder).

    Rows at the kink ``c_hat == c`` contribute a zero subgradient.
    """
    n = len(Z)
    Zs = _standardize(Z, params)
    _, H = _forward(params, Z)
    P = H @ params.W3.T + params.b3
    C = softplus(P)
    D = C - c
    norms = np.linalg.norm(D, axis=1)
    loss = loss_qt(C, c, squared)
    if squared:
        dC = D / n
    else:
        safe = np.where(norms > 0, norms, 1.0)
        dC = np.where((norms > 0)[:, None], D / (2 * n * safe[:, None]), 0.0)
    dP = dC * sigmoid(P)
    dA1 = (dP @ params.W3) * (1.0 - H**2)
    return loss, {"W3": dP.T @ H, "b3": dP.sum(axis=0), "W1": dA1.T @ Zs, "b1": dA1.sum(axis=0)}


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            setattr(params, k, getattr(params, k) - self.lr * mhat / (np.sqrt(vhat) + self.eps))


class _SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            setattr(params, k, getattr(params, k) - self.lr * g)


@dataclass
class TrainResult:
    params: EstimatorParams
    trace: list  # (epoch, loss) with epoch 0 the initialization
    best_epoch: int

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for epoch, loss in self.trace:
                w.writerow([epoch, repr(float(loss))])


def _run(params, trainable, loss_fn, n_rows, cfg):
    # overflow shows up as a non-finite loss, reported as DivergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_epochs(params, trainable, loss_fn, n_rows, cfg)


def _run_epochs(params, trainable, loss_fn, n_rows, cfg):
    opt = _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else _SGD(cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x5EED]))
    all_rows = np.arange(n_rows)
    loss0 = loss_fn(params, all_rows)[0]
    if not np.isfinite(loss0):
        raise DivergenceError(0, loss0)
    trace = [(0, loss0)]
    best, best_loss, best_epoch = params.copy(), loss0, 0
    bs = n_rows if cfg.batch_size is None else max(1, min(int(cfg.batch_size), n_rows))
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_rows) if bs < n_rows else all_rows
        for start in range(0, n_rows, bs):
            rows = order[start:start + bs]
            _, grads = loss_fn(params, rows)
            opt.step(params, {k: grads[k] for k in trainable})
        loss = loss_fn(params, all_rows)[0]
        if not np.isfinite(loss):
            raise DivergenceError(epoch, loss)
        trace.append((epoch, loss))
        if loss < best_loss:
            best, best_loss, best_epoch = params.copy(), loss, epoch
    return TrainResult(best, trace, best_epoch)


def train_stage1(ts: TrainingSet, cfg: TrainConfig, params: EstimatorParams | None = None) -> TrainResult:
    """Fit encoder and descriptor mapper on the representation loss.

    Returns the best parameters seen (never worse than initialization) and
    the per-epoch full-set loss trace.
    """
    if cfg.stage != "I":
        raise ParameterError("train_stage1 requires cfg.stage == 'I'")
    Z = ts.inputs
    if params is None:
        mean = Z.mean(axis=0)
        scale = Z.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        params = init_params(Z.shape[1], cfg.hidden, ts.t.shape[1], ts.c.shape[1], cfg.seed,
                             mean, scale)
    else:
        params = params.copy()
        _check_inputs(Z, params)

    def loss_fn(p, rows):
        return rep_loss_and_grads(p, Z[rows], ts.t[rows])

    return _run(params, ("W1", "b1", "W2", "b2"), loss_fn, len(ts), cfg)


def train_stage2(ts: TrainingSet, frozen: EstimatorParams, cfg: TrainConfig) -> TrainResult:
    """Fit the abundance head on the quantification loss with the encoder frozen.

    ``frozen`` is not modified; the head is re-initialized from ``cfg.seed``.
    """
    if cfg.stage != "II":
        raise ParameterError("train_stage2 requires cfg.stage == 'II'")
    Z = ts.inputs
    _check_inputs(Z, frozen)
    params = frozen.copy()
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 2]))
    h = params.W1.shape[0]
    params.W3 = rng.normal(0.0, 1.0 / np.sqrt(h), size=(ts.c.shape[1], h))
    params.b3 = np.zeros(ts.c.shape[1])

    def loss_fn(p, rows):
        return qt_loss_and_grads(p, Z[rows], ts.c[rows], cfg.squared)

    return _run(params, ("W3", "b3"), loss_fn, len(ts), cfg)


@dataclass
class GradCheck:
    max_rel_error: float
    n_checked: int
    excluded_rows: int


def numeric_gradient(f, x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def _relative_error(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return np.abs(a - b) / denom


def grad_check(params: EstimatorParams, ts: TrainingSet, which_loss: str = "rep",
               eps: float = 1e-5, squared: bool = False) -> GradCheck:
    """Max relative error between analytic and central-difference gradients.

    For the quantification loss, rows within ``100*eps`` of the kink
    ``c_hat == c`` are excluded since the norm is not differentiable there.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ParameterError("eps must lie in [1e-7, 1e-4]")
    p = params.copy()
    Z = ts.inputs
    if which_loss == "rep":
        def loss(): return rep_loss_and_grads(p, Z, ts.t)[0]
        grads = rep_loss_and_grads(p, Z, ts.t)[1]
        excluded = 0
    elif which_loss == "qt":
        keep = ~qt_kink_rows(p, Z, ts.c, tol=0.0 if squared else 100 * eps)
        excluded = int((~keep).sum())
        if not keep.any():
            return GradCheck(0.0, 0, excluded)
        Zk, ck = Z[keep], ts.c[keep]

        def loss(): return qt_loss_and_grads(p, Zk, ck, squared)[0]
        grads = qt_loss_and_grads(p, Zk, ck, squared)[1]
    else:
        raise ParameterError("which_loss must be 'rep' or 'qt'")
    worst, n = 0.0, 0
    for name, g in grads.items():
        num = numeric_gradient(loss, getattr(p, name), eps)
        worst = max(worst, float(np.max(_relative_error(g, num))))
        n += g.size
    return GradCheck(worst, n, excluded)


def r2_score(c_true, c_pred) -> float:
    """R^2 over all outputs pooled."""
    y = np.asarray(c_true, dtype=np.float64).ravel()
    yh = np.asarray(c_pred, dtype=np.float64).ravel()
    sst = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum((y - yh) ** 2) / sst)
