"""SGD for least squares and LS-SVM with quantized samples/model/gradients.

The per-sample least-squares gradient a (a'x - b) is quadratic in the
sample, so plugging one quantized copy into both factors is biased.  Using
two independent copies (one per factor) removes the bias; quantizing the
model or the final gradient is harmless because those enter linearly.
All estimators here are exact in expectation except the deliberately
biased single-copy baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantize import (
    QuantScheme,
    QuantizedVector,
    StreamReuseError,
    column_scales,
    quantize_stochastic,
    row_scale,
    row_scales,
    scheme_for_bits,
)
from .rng import new_rng


@dataclass(frozen=True)
class Regularizer:
    """Proximal-friendly penalty: none, l1, l2, or an l2-ball constraint."""

    kind: str = "none"
    strength: float = 0.0
    radius: float = 0.0

    @staticmethod
    def none():
        return Regularizer("none")

    @staticmethod
    def l1(lam: float):
        return Regularizer("l1", strength=lam)

    @staticmethod
    def l2(lam: float):
        return Regularizer("l2", strength=lam)

    @staticmethod
    def ball(radius: float):
        return Regularizer("ball", radius=radius)

    def penalty(self, x) -> float:
        if self.kind == "l1":
            return self.strength * float(np.abs(x).sum())
        if self.kind == "l2":
            return 0.5 * self.strength * float(x @ x)
        return 0.0


def prox(reg: Regularizer, gamma: float, y) -> np.ndarray:
    """Proximal map of gamma * reg at y."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    y = np.asarray(y, dtype=np.float64)
    if reg.kind == "none":
        return y
    if reg.kind == "l1":
        t = gamma * reg.strength
        return np.sign(y) * np.maximum(np.abs(y) - t, 0.0)
    if reg.kind == "l2":
        return y / (1.0 + gamma * reg.strength)
    if reg.kind == "ball":
        n = float(np.linalg.norm(y))
        if n <= reg.radius:
            return y
        return y * (reg.radius / n)
    raise ValueError(f"unknown regularizer: {reg.kind!r}")


@dataclass
class TrainConfig:
    """Hyperparameters and quantization switches for one SGD run.

    The step size follows the diminishing schedule alpha0 / epoch.  Sample
    quantization uses ``sample_scheme`` when given (a shared grid or one
    grid per feature, e.g. from the optimal-partition solvers), otherwise
    a uniform grid with ``sample_bits`` bits.
    """

    loss: str = "least_squares"  # or "ls_svm"
    ls_svm_c: float = 0.0
    reg: Regularizer = field(default_factory=Regularizer.none)
    alpha0: float = 0.1
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    sample_bits: int | None = None
    sample_scheme: QuantScheme | list[QuantScheme] | None = None
    model_bits: int | None = None
    gradient_bits: int | None = None
    double_sampling: bool = True
    averaged_pair: bool = True

    def __post_init__(self):
        if self.alpha0 <= 0:
            raise ValueError("alpha0 must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss not in ("least_squares", "ls_svm"):
            raise ValueError(f"unknown loss: {self.loss!r}")
        for bits in (self.sample_bits, self.model_bits, self.gradient_bits):
            if bits is not None and not 1 <= bits <= 16:
                raise ValueError("bit widths must be in [1, 16]")

    @property
    def quantize_samples(self) -> bool:
        return self.sample_bits is not None or self.sample_scheme is not None


@dataclass
class TrainTrace:
    """Per-epoch telemetry of a run plus the final model.

    ``grad_variance`` estimates the extra gradient variance caused by
    quantization (zero for full-precision runs, up to sampling noise).  On
    divergence the lists stop at the failing epoch and ``diverged`` is set.
    """

    train_loss: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)
    grad_variance: list[float] = field(default_factory=list)
    refetch_fraction: list[float] = field(default_factory=list)
    model: np.ndarray | None = None
    diverged: bool = False
    flips: int = 0


# ---------------------------------------------------------------------------
# per-sample gradient estimators


def _check_dims(a, x):
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if a.shape != x.shape:
        raise ValueError(f"dimension mismatch: sample {a.shape} vs model {x.shape}")
    return a, x


def full_gradient_sample(a, b: float, x) -> np.ndarray:
    """Exact single-sample least-squares gradient a (a'x - b)."""
    a, x = _check_dims(a, x)
    return a * (float(a @ x) - b)


def double_sample_gradient(
    q1: QuantizedVector, q2: QuantizedVector, b: float, x, averaged: bool = True
) -> np.ndarray:
    """Unbiased gradient from two independent quantizations of the sample.

    One copy feeds each factor of the quadratic; ``averaged`` symmetrizes
    the two roles, which keeps the mean and lowers the variance.
    """
    if q1.draw_id == q2.draw_id:
        raise StreamReuseError("double sampling needs two independent quantizations")
    a1, a2 = q1.dequantize(), q2.dequantize()
    x = np.asarray(x, dtype=np.float64)
    g = a1 * (float(a2 @ x) - b)
    if averaged:
        g = 0.5 * (g + a2 * (float(a1 @ x) - b))
    return g


def naive_quantized_gradient(q: QuantizedVector, b: float, x) -> np.ndarray:
    """Single-copy plug-in gradient Q(a)(Q(a)'x - b): biased by design.

    Its expectation exceeds the true gradient by D x where D is the
    diagonal of per-coordinate quantization variances.  Kept as the
    baseline that motivates double sampling.
    """
    aq = q.dequantize()
    x = np.asarray(x, dtype=np.float64)
    return aq * (float(aq @ x) - b)


def model_quantized_gradient(a, b: float, qx: QuantizedVector) -> np.ndarray:
    """Gradient with a quantized model: unbiased since it enters linearly."""
    a = np.asarray(a, dtype=np.float64)
    return a * (float(a @ qx.dequantize()) - b)


def end_to_end_gradient(
    q1: QuantizedVector,
    q2: QuantizedVector,
    b: float,
    qx: QuantizedVector,
    gradient_bits: int,
    rng,
    averaged: bool = True,
) -> QuantizedVector:
    """Quantized-sample, quantized-model gradient, itself re-quantized.

    All draws must be independent; the composition stays unbiased because
    each quantizer is unbiased and enters linearly given the others.
    """
    ids = (q1.draw_id, q2.draw_id, qx.draw_id)
    if len(set(ids)) != 3:
        raise StreamReuseError("end-to-end gradient needs independent quantizations")
    g = double_sample_gradient(q1, q2, b, qx.dequantize(), averaged=averaged)
    scheme = scheme_for_bits(gradient_bits, signed=True, scaling="row")
    return quantize_stochastic(g, scheme, row_scale(g), rng)


def quantize_model(x, model_bits: int, rng) -> QuantizedVector:
    """One norm-scaled quantization draw of the model vector."""
    scheme = scheme_for_bits(model_bits, signed=True, scaling="row")
    return quantize_stochastic(x, scheme, row_scale(x), rng)


# ---------------------------------------------------------------------------
# batched sample quantizer used by the training loops


class SampleQuantizer:
    """Column-scaled stochastic quantizer for sample matrices.

    Holds either one shared grid or one grid per feature (optimal grids
    differ per feature).  ``draw`` returns a dequantized independent
    rounding of the given rows.
    """

    def __init__(self, schemes, scales):
        self.scales = np.asarray(scales, dtype=np.float64)
        self.per_feature = isinstance(schemes, (list, tuple))
        self.schemes = list(schemes) if self.per_feature else schemes
        if self.per_feature and len(self.schemes) != self.scales.size:
            raise ValueError("need one scheme per feature")

    @classmethod
    def for_data(cls, X, bits=None, scheme=None) -> "SampleQuantizer":
        """Build from config switches; grid signedness follows a data scan."""
        scales = column_scales(X)
        if scheme is None:
            if bits is None:
                raise ValueError("need sample_bits or sample_scheme")
            signed = bool(np.asarray(X).min() < 0)
            scheme = scheme_for_bits(bits, signed=signed, scaling="column")
        return cls(scheme, scales)

    def draw(self, A, rng) -> np.ndarray:
        """Dequantized stochastic rounding of rows ``A`` (fresh draw)."""
        if not self.per_feature:
            x = np.clip(A / self.scales, self.schemes.levels[0], self.schemes.levels[-1])
            lo, p = self.schemes.bracket(x)
            idx = lo + (rng.random(x.shape) < p)
            return self.scales * self.schemes.levels[idx]
        out = np.empty_like(A, dtype=np.float64)
        for f, sch in enumerate(self.schemes):
            x = np.clip(A[:, f] / self.scales[f], sch.levels[0], sch.levels[-1])
            lo, p = sch.bracket(x)
            idx = lo + (rng.random(x.shape) < p)
            out[:, f] = self.scales[f] * sch.levels[idx]
        return out

    def round_nearest(self, A) -> np.ndarray:
        """Deterministic nearest-level rounding (the straw-man transform)."""
        if not self.per_feature:
            x = np.clip(A / self.scales, self.schemes.levels[0], self.schemes.levels[-1])
            lo, p = self.schemes.bracket(x)
            idx = lo + (p >= 0.5)
            return self.scales * self.schemes.levels[idx]
        out = np.empty_like(A, dtype=np.float64)
        for f, sch in enumerate(self.schemes):
            x = np.clip(A[:, f] / self.scales[f], sch.levels[0], sch.levels[-1])
            lo, p = sch.bracket(x)
            out[:, f] = self.scales[f] * sch.levels[lo + (p >= 0.5)]
        return out

    def resolution(self) -> np.ndarray:
        """Per-feature worst-case rounding error (scale times largest gap)."""
        if not self.per_feature:
            return self.scales * self.schemes.max_gap
        return self.scales * np.array([s.max_gap for s in self.schemes])


# ---------------------------------------------------------------------------
# training


def least_squares_loss(X, y, x, c: float = 0.0) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        r = X @ x - y
        loss = 0.5 * float(r @ r) / len(y)
        if c:
            loss += 0.5 * c * float(x @ x)
    return loss


def _grad_rows(A, y, xe, cfg: TrainConfig, qz: SampleQuantizer | None, rng, copies=None):
    """Per-sample gradient rows for one batch.

    ``xe`` is the model as seen by the gradient computation (possibly a
    dequantized draw).  ``copies`` optionally supplies two pre-quantized
    dequantized copies of the rows (stored-container training).
    """
    if cfg.quantize_samples:
        if cfg.double_sampling:
            if copies is not None:
                A1, A2 = copies
            else:
                A1 = qz.draw(A, rng)
                A2 = qz.draw(A, rng)
            r2 = A2 @ xe - y
            G = A1 * r2[:, None]
            if cfg.averaged_pair:
                r1 = A1 @ xe - y
                G = 0.5 * (G + A2 * r1[:, None])
        else:
            Aq = copies[0] if copies is not None else qz.draw(A, rng)
            G = Aq * (Aq @ xe - y)[:, None]
    else:
        G = A * (A @ xe - y)[:, None]
    if cfg.loss == "ls_svm" and cfg.ls_svm_c:
        G = G + cfg.ls_svm_c * xe
    if cfg.gradient_bits is not None:
        scheme = scheme_for_bits(cfg.gradient_bits, signed=True, scaling="row")
        sc = row_scales(G)
        xn = np.clip(G / sc, -1.0, 1.0)
        lo, p = scheme.bracket(xn)
        G = sc * scheme.levels[lo + (rng.random(xn.shape) < p)]
    return G


def _full_rows(A, y, x, cfg: TrainConfig):
    G = A * (A @ x - y)[:, None]
    if cfg.loss == "ls_svm" and cfg.ls_svm_c:
        G = G + cfg.ls_svm_c * x
    return G


def train(dataset, config: TrainConfig, sample_copies=None) -> TrainTrace:
    """Mini-batch proximal SGD; deterministic given the config seed.

    ``sample_copies`` optionally provides pre-drawn dequantized copies of
    the training matrix, shaped (n_copies, n_samples, n_features), e.g.
    decoded from a quantized container; the run then reuses those fixed
    copies instead of re-quantizing on the fly.

    Losses are always evaluated on the full-precision data so curves stay
    comparable across quantization settings.  A non-finite loss stops the
    run early with the ``diverged`` flag set instead of raising.
    """
    X, y = np.asarray(dataset.X, dtype=np.float64), np.asarray(dataset.y, dtype=np.float64)
    K, n = X.shape
    rng = new_rng(config.seed)
    qz = None
    if config.quantize_samples:
        qz = SampleQuantizer.for_data(X, config.sample_bits, config.sample_scheme)
    if sample_copies is not None:
        sample_copies = np.asarray(sample_copies, dtype=np.float64)
        need = 2 if (config.double_sampling and config.quantize_samples) else 1
        if sample_copies.shape[0] < need or sample_copies.shape[1:] != (K, n):
            raise ValueError("sample_copies must be shaped (>=2, n_samples, n_features)")

    x = np.zeros(n)
    trace = TrainTrace()
    c = config.ls_svm_c if config.loss == "ls_svm" else 0.0
    for epoch in range(1, config.epochs + 1):
        step = config.alpha0 / epoch
        order = rng.permutation(K)
        for start in range(0, K, config.batch_size):
            sel = order[start : start + config.batch_size]
            xe = x
            if config.model_bits is not None:
                xe = quantize_model(x, config.model_bits, rng).dequantize()
            copies = None
            if sample_copies is not None and config.quantize_samples:
                second = sample_copies[1] if len(sample_copies) > 1 else sample_copies[0]
                copies = (sample_copies[0][sel], second[sel])
            G = _grad_rows(X[sel], y[sel], xe, config, qz, rng, copies)
            x = prox(config.reg, step, x - step * G.mean(axis=0))

        trace.train_loss.append(least_squares_loss(X, y, x, c) + config.reg.penalty(x))
        if dataset.X_test is not None:
            trace.test_loss.append(
                least_squares_loss(dataset.X_test, dataset.y_test, x, c) + config.reg.penalty(x)
            )
        else:
            trace.test_loss.append(float("nan"))
        trace.grad_variance.append(_excess_variance_probe(X, y, x, config, qz, rng))
        if not np.isfinite(trace.train_loss[-1]):
            trace.diverged = True
            break
    trace.model = x
    return trace


def _excess_variance_probe(X, y, x, cfg, qz, rng, n_probe: int = 64) -> float:
    """Mean squared gap between one estimator draw and the exact per-sample
    gradient, on a random probe of the data."""
    if not (cfg.quantize_samples or cfg.model_bits or cfg.gradient_bits):
        return 0.0
    K = len(y)
    sel = rng.choice(K, size=min(n_probe, K), replace=False)
    A, yy = X[sel], y[sel]
    xe = x
    if cfg.model_bits is not None:
        xe = quantize_model(x, cfg.model_bits, rng).dequantize()
    G = _grad_rows(A, yy, xe, cfg, qz, rng)
    D = G - _full_rows(A, yy, x, cfg)
    return float((D * D).sum(axis=1).mean())
