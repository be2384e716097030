"""Gradient estimators for non-linear losses from quantized samples.

A classification gradient b l'(b a'x) a is polynomial in the sample only
after l' is replaced by a polynomial P.  Each power (a'x)^i is estimated
without bias by multiplying i margins computed from distinct quantized
copies of a, so a degree-d polynomial consumes d+1 copies (one more for
the leading sample factor).  For the hinge loss, whose derivative jumps,
quantization can flip the active/inactive decision near the margin; the
refetch rules detect that risk and fall back to the full-precision
sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as _cheb
from numpy.polynomial import polynomial as _poly

from .linear import SampleQuantizer, TrainConfig, TrainTrace, prox
from .quantize import QuantizedVector, StreamReuseError
from .rng import new_rng

_CERT_GRID = 10_000
_MAX_DEGREE = 31  # monomial evaluation conditioning limit


class ApproximationError(ValueError):
    """The fitted polynomial misses the requested accuracy."""


def sigmoid_deriv(z):
    """Derivative of the logistic loss log(1 + exp(-z)): smooth, in (-1, 0)."""
    z = np.asarray(z, dtype=np.float64)
    return -np.exp(-np.logaddexp(0.0, z))


def step_function(z):
    """Heaviside step H(z): 1 at and above zero, else 0."""
    return (np.asarray(z, dtype=np.float64) >= 0).astype(np.float64)


def _smoothed_step(delta):
    def f(z):
        return np.clip((np.asarray(z, dtype=np.float64) + delta) / (2.0 * delta), 0.0, 1.0)

    return f


_TARGETS = {
    "sigmoid_deriv": sigmoid_deriv,
    "step": step_function,
    "constant": lambda z: np.ones_like(np.asarray(z, dtype=np.float64)),
}


@dataclass(frozen=True, eq=False)
class PolyApprox:
    """Monomial coefficients approximating a loss derivative on [-R, R].

    ``delta`` is the half-width of the exclusion zone around zero where no
    accuracy is promised (non-smooth targets only); ``sup_error`` is the
    measured worst-case error on a dense grid outside that zone.
    """

    coeffs: np.ndarray
    radius: float
    delta: float = 0.0
    sup_error: float = float("nan")
    target: str = ""

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return int(self.coeffs.size - 1)

    def __call__(self, z):
        return _poly.polyval(np.asarray(z, dtype=np.float64), self.coeffs)


def certificate_sup_error(coeffs, target_fn, radius, delta, grid: int = _CERT_GRID) -> float:
    """Worst |P - target| on a dense grid over [-R, R] minus (-delta, delta)."""
    z = np.linspace(-radius, radius, grid)
    if delta > 0:
        z = z[np.abs(z) >= delta]
    return float(np.abs(_poly.polyval(z, coeffs) - target_fn(z)).max())


def _poly_abs_max(coeffs, radius) -> float:
    """Exact max of |P| on [-R, R]: check endpoints and stationary points."""
    crit = [-radius, radius]
    roots = _poly.Polynomial(coeffs).deriv().roots()
    real = roots[np.abs(roots.imag) < 1e-9].real
    crit.extend(real[(real >= -radius) & (real <= radius)].tolist())
    return float(np.abs(_poly.polyval(np.asarray(crit), coeffs)).max())


def chebyshev_fit(
    target: str,
    radius: float,
    delta: float = 0.0,
    degree: int = 15,
    eps: float | None = None,
) -> PolyApprox:
    """Interpolate the target at Chebyshev nodes and certify the result.

    The step target is fitted against its delta-smoothed ramp (accuracy is
    only required outside the exclusion zone) and then rescaled if needed
    so |P| <= 1 over the whole range, which the non-smooth protocol
    assumes.  Raises :class:`ApproximationError` when a requested ``eps``
    is not met; a higher degree usually fixes that.
    """
    if target not in _TARGETS:
        raise ValueError(f"unknown target {target!r}; choose from {sorted(_TARGETS)}")
    if not 1 <= degree <= _MAX_DEGREE:
        raise ValueError(f"degree must be in [1, {_MAX_DEGREE}]")
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if target == "step" and delta <= 0:
        raise ValueError("the step target needs an exclusion half-width delta > 0")

    fit_fn = _smoothed_step(delta) if target == "step" else _TARGETS[target]
    ch = _cheb.Chebyshev.interpolate(fit_fn, degree, domain=[-radius, radius])
    coeffs = ch.convert(kind=_poly.Polynomial).coef
    if coeffs.size < degree + 1:
        coeffs = np.pad(coeffs, (0, degree + 1 - coeffs.size))

    if target == "step":
        peak = _poly_abs_max(coeffs, radius)
        if peak > 1.0:
            coeffs = coeffs / peak
    sup = certificate_sup_error(coeffs, _TARGETS[target], radius, delta)
    if eps is not None and sup > eps:
        raise ApproximationError(
            f"sup error {sup:.3e} exceeds requested {eps:.3e}; try a higher degree"
        )
    return PolyApprox(coeffs, radius, delta, sup, target)


def poly_gradient_estimate(p: PolyApprox, quants, b: float, x) -> np.ndarray:
    """Unbiased estimate of b P(b a'x) a from d+1 independent quantizations.

    Copy j feeds only the j-th factor of each power, so expectations
    factorize; the last copy supplies the leading sample.
    """
    quants = list(quants)
    if len(quants) < p.degree + 1:
        raise ValueError(f"need {p.degree + 1} quantizations, got {len(quants)}")
    ids = [q.draw_id for q in quants]
    if len(set(ids)) != len(ids):
        raise StreamReuseError("polynomial estimation needs independent quantizations")
    x = np.asarray(x, dtype=np.float64)
    value = p.coeffs[0]
    running = 1.0
    for i in range(1, p.degree + 1):
        running *= b * float(quants[i - 1].dequantize() @ x)
        value += p.coeffs[i] * running
    return b * value * quants[p.degree].dequantize()


@dataclass(frozen=True)
class RefetchPolicy:
    """When to fall back to the full-precision sample for hinge training.

    ``l1``: exact interval bound on the margin from one quantized copy.
    ``l2jl``: estimate the margin through a shared-seed random projection
    of dimension ``r``; refetch when it lands within 2*delta of zero,
    which fails to protect with probability about ``tau``.
    """

    mode: str  # "l1" or "l2jl"
    r: int = 256
    delta: float = 0.05
    tau: float = 0.05

    def __post_init__(self):
        if self.mode not in ("l1", "l2jl"):
            raise ValueError(f"unknown refetch mode: {self.mode!r}")
        if self.mode == "l2jl" and self.r < 1:
            raise ValueError("projection dimension r must be >= 1")


@dataclass(frozen=True)
class RefetchDecision:
    refetch: bool
    lower: float = float("nan")
    upper: float = float("nan")
    c: float = float("nan")


def refetch_l1_decide(qa: QuantizedVector, x, b: float) -> RefetchDecision:
    """Bound the true margin 1 - b a'x from the quantized sample.

    Each coordinate of the quantized sample is within scale * max-gap of
    the original, giving a weighted-l1 slack around the quantized margin.
    Refetch exactly when the bound straddles zero, i.e. when the hinge
    active/inactive decision is not certain.
    """
    x = np.asarray(x, dtype=np.float64)
    u_hat = 1.0 - b * float(qa.dequantize() @ x)
    slack = float(np.abs(x) @ qa.resolution())
    lower, upper = u_hat - slack, u_hat + slack
    return RefetchDecision(refetch=(lower <= 0.0 <= upper), lower=lower, upper=upper)


def jl_projection(n: int, r: int, seed) -> np.ndarray:
    """Dense +-1/sqrt(r) projection matrix derived from a shared seed."""
    rng = new_rng(seed)
    return (2.0 * rng.integers(0, 2, size=(r, n)) - 1.0) / np.sqrt(r)


def jl_projection_dim(radius: float, delta: float, tau: float) -> int:
    """Projection size giving margin error <= delta with probability ~1-tau."""
    return int(np.ceil(8.0 * radius**2 * np.log(2.0 / tau) / delta**2))


def refetch_l2_decide(a, x, b: float, policy: RefetchPolicy, seed) -> RefetchDecision:
    """Estimate the margin via a shared random projection; refetch when small.

    Both sides derive the same projection from ``seed``, send projected
    vectors, and recover a'x from the squared norms (polarization), so the
    decision needs only r-dimensional traffic.  Refetch when |c| <= 2 delta.
    """
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    M = jl_projection(a.size, policy.r, seed)
    Ma, Mx = M @ a, M @ x
    est = 0.5 * (float(Ma @ Ma) + float(Mx @ Mx) - float((Ma - Mx) @ (Ma - Mx)))
    c = 1.0 - b * est
    return RefetchDecision(refetch=(abs(c) <= 2.0 * policy.delta), c=c)


# ---------------------------------------------------------------------------
# training


def _hinge_compose(p: PolyApprox) -> np.ndarray:
    """Coefficients of z -> -P(1 - z), the hinge derivative through a step fit."""
    q = _poly.Polynomial(p.coeffs)
    composed = -q(_poly.Polynomial([1.0, -1.0]))
    c = composed.coef
    if c.size < p.degree + 1:
        c = np.pad(c, (0, p.degree + 1 - c.size))
    return c


def logistic_loss(X, y, x) -> float:
    return float(np.logaddexp(0.0, -y * (X @ x)).mean())


def hinge_loss(X, y, x) -> float:
    return float(np.maximum(0.0, 1.0 - y * (X @ x)).mean())


_EXPECTED_TARGET = {"logistic": "sigmoid_deriv", "hinge": "step"}


def _true_grad_rows(A, y, x, loss):
    m = A @ x
    if loss == "logistic":
        return (y * sigmoid_deriv(y * m))[:, None] * A
    return -(y * ((1.0 - y * m) > 0))[:, None] * A


def train_nonlinear(
    dataset,
    loss: str,
    config: TrainConfig,
    approx: PolyApprox | None = None,
    refetch: RefetchPolicy | None = None,
) -> TrainTrace:
    """Proximal SGD for logistic or hinge loss on quantized samples.

    Without sample quantization settings this runs plain SGD with the
    exact loss derivative (the full-precision baseline).  Otherwise,
    logistic (and hinge without an ``l1`` policy) uses the polynomial
    estimator, drawing degree+1 fresh copies per sample.  Hinge with the
    ``l1`` policy uses the quantized sample directly whenever its margin
    bound certifies the hinge decision, refetching otherwise; with
    ``l2jl`` the same gate comes from a random-projection estimate.  The
    trace records the refetch fraction per epoch and counts hinge
    decisions that still flipped (always zero under ``l1``).
    """
    if loss not in ("logistic", "hinge"):
        raise ValueError(f"unknown loss: {loss!r}")
    if refetch is not None and loss != "hinge":
        raise ValueError("refetching only applies to hinge training")
    quantized = config.quantize_samples
    need_poly = quantized and (loss == "logistic" or refetch is None or refetch.mode == "l2jl")
    if need_poly:
        if approx is None:
            raise ValueError(f"quantized {loss} training needs a polynomial approximation")
        if approx.target != _EXPECTED_TARGET[loss]:
            raise ValueError(
                f"approximation target {approx.target!r} does not match loss {loss!r}"
            )
    if refetch is not None and not quantized:
        raise ValueError("refetching needs sample quantization settings")

    X, y = np.asarray(dataset.X, dtype=np.float64), np.asarray(dataset.y, dtype=np.float64)
    K, n = X.shape
    rng = new_rng(config.seed)
    qz = res = None
    if quantized:
        qz = SampleQuantizer.for_data(X, config.sample_bits, config.sample_scheme)
        res = qz.resolution()
    coeffs = None
    if need_poly:
        coeffs = _hinge_compose(approx) if loss == "hinge" else approx.coeffs
    loss_fn = logistic_loss if loss == "logistic" else hinge_loss

    x = np.zeros(n)
    trace = TrainTrace()
    for epoch in range(1, config.epochs + 1):
        step = config.alpha0 / epoch
        order = rng.permutation(K)
        refetched = 0
        for start in range(0, K, config.batch_size):
            sel = order[start : start + config.batch_size]
            A, yy = X[sel], y[sel]

            if not quantized:
                G = _true_grad_rows(A, yy, x, loss)
            elif refetch is None:
                G = _poly_rows(A, yy, x, coeffs, qz, rng)
            else:
                if refetch.mode == "l1":
                    Aq = qz.draw(A, rng)
                    u_hat = 1.0 - yy * (Aq @ x)
                    slack = float(np.abs(x) @ res)
                    mask = np.abs(u_hat) <= slack  # margin bound straddles zero
                    G = -(yy * (u_hat > 0))[:, None] * Aq
                    trace.flips += int(
                        ((u_hat > 0) != ((1.0 - yy * (A @ x)) > 0))[~mask].sum()
                    )
                else:
                    M = jl_projection(n, refetch.r, rng.integers(2**63))
                    c_est = 1.0 - yy * ((A @ M.T) @ (M @ x))
                    mask = np.abs(c_est) <= 2.0 * refetch.delta
                    G = _poly_rows(A, yy, x, coeffs, qz, rng)
                if mask.any():
                    G[mask] = _true_grad_rows(A[mask], yy[mask], x, "hinge")
                    refetched += int(mask.sum())
            x = prox(config.reg, step, x - step * G.mean(axis=0))

        trace.train_loss.append(loss_fn(X, y, x) + config.reg.penalty(x))
        if dataset.X_test is not None:
            trace.test_loss.append(loss_fn(dataset.X_test, dataset.y_test, x) + config.reg.penalty(x))
        else:
            trace.test_loss.append(float("nan"))
        trace.refetch_fraction.append(refetched / K)
        trace.grad_variance.append(_probe_excess(X, y, x, loss, coeffs, qz, refetch, res, rng))
        if not np.isfinite(trace.train_loss[-1]):
            trace.diverged = True
            break
    trace.model = x
    return trace


def _poly_rows(A, yy, x, coeffs, qz, rng):
    """Per-sample polynomial gradient rows; degree+1 fresh draws per batch."""
    d = len(coeffs) - 1
    value = np.full(len(yy), coeffs[0])
    running = np.ones(len(yy))
    for i in range(1, d + 1):
        running = running * (yy * (qz.draw(A, rng) @ x))
        value += coeffs[i] * running
    return (yy * value)[:, None] * qz.draw(A, rng)


def _probe_excess(X, y, x, loss, coeffs, qz, refetch, res, rng, n_probe: int = 64):
    if qz is None:
        return 0.0
    sel = rng.choice(len(y), size=min(n_probe, len(y)), replace=False)
    A, yy = X[sel], y[sel]
    if refetch is not None and refetch.mode == "l1":
        Aq = qz.draw(A, rng)
        u_hat = 1.0 - yy * (Aq @ x)
        G = -(yy * (u_hat > 0))[:, None] * Aq
    else:
        G = _poly_rows(A, yy, x, coeffs, qz, rng)
    D = G - _true_grad_rows(A, yy, x, loss)
    return float((D * D).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# serialization: "degree,R,delta,eps" header then one coefficient per line


def save_poly(p: PolyApprox, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{p.degree},{float(p.radius)!r},{float(p.delta)!r},{float(p.sup_error)!r}\n")
        fh.write(f"# target={p.target}\n")
        for c in p.coeffs:
            fh.write(f"{float(c)!r}\n")


def load_poly(path) -> PolyApprox:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        degree, radius, delta, eps = int(header[0]), float(header[1]), float(header[2]), float(header[3])
        target = ""
        coeffs = []
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                if "target=" in line:
                    target = line.split("target=", 1)[1].strip()
                continue
            if line:
                coeffs.append(float(line))
    if len(coeffs) != degree + 1:
        raise ValueError(f"expected {degree + 1} coefficients, found {len(coeffs)}")
    return PolyApprox(np.asarray(coeffs), radius, delta, eps, target)
