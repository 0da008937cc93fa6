"""SROCC / PLCC and the five-parameter logistic mapping applied before PLCC.

The mapping is the usual VQEG form

    q(x) = b1 * (1/2 - 1 / (1 + exp(b2 * (x - b3)))) + b4 * x + b5

Some printings drop the ``1 +`` in the denominator; that variant is unbounded
for x -> -inf and is not used here.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit
from scipy.stats import rankdata

from .errors import UndefinedMetricError

log = logging.getLogger(__name__)

MAX_ITER = 2000
PARAM_TOL = 1e-10


def _vectors(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise UndefinedMetricError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 3:
        raise UndefinedMetricError(f"correlation needs n >= 3, got n={a.size}")
    return a, b


def _pearson(a: np.ndarray, b: np.ndarray, what: str) -> float:
    da = a - a.mean()
    db = b - b.mean()
    saa = np.dot(da, da)
    sbb = np.dot(db, db)
    if saa == 0 or sbb == 0:
        raise UndefinedMetricError(f"{what}: zero variance (n={a.size}, var_a={saa / a.size}, var_b={sbb / b.size})")
    r = np.dot(da, db) / np.sqrt(saa * sbb)
    return float(np.clip(r, -1.0, 1.0))


def fractional_ranks(x) -> np.ndarray:
    return rankdata(np.asarray(x, dtype=np.float64), method="average")


def srocc(preds, labels) -> float:
    a, b = _vectors(preds, labels)
    return _pearson(fractional_ranks(a), fractional_ranks(b), "SROCC")


def plcc(preds, labels) -> float:
    a, b = _vectors(preds, labels)
    return _pearson(a, b, "PLCC")


def logistic5(x, beta) -> np.ndarray:
    b1, b2, b3, b4, b5 = beta
    # 1/2 - 1/(1 + e^z) == expit(z) - 1/2
    return b1 * (expit(b2 * (x - b3)) - 0.5) + b4 * x + b5


def _logistic5_jac(x, beta) -> np.ndarray:
    b1, b2, b3, _, _ = beta
    s = expit(b2 * (x - b3))
    ds = s * (1 - s)
    return np.stack([s - 0.5, b1 * ds * (x - b3), -b1 * ds * b2, x, np.ones_like(x)], axis=1)


@dataclass
class LogisticFit:
    beta: list[float]
    converged: bool
    residual_norm: float


IDENTITY_BETA = [0.0, 1.0, 0.0, 1.0, 0.0]


def _initial_beta(x, y) -> np.ndarray:
    sd = x.std()
    try:
        sign = np.sign(plcc(x, y)) or 1.0
    except UndefinedMetricError:
        sign = 1.0
    return np.array([sign * (y.max() - y.min()), 1.0 / sd if sd > 0 else 1.0, x.mean(), 0.0, y.mean()])


def logistic_map_fit(preds, labels, max_iter: int = MAX_ITER) -> tuple[LogisticFit, np.ndarray]:
    """Least-squares fit of the logistic mapping from ``preds`` to ``labels``.

    Runs Levenberg-Marquardt from the scale-aware start and from the best
    affine fit, keeping the smaller residual. If neither run converges the
    identity mapping is returned with ``converged=False``.
    """
    x = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.size != y.size:
        raise UndefinedMetricError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 5:
        raise UndefinedMetricError(f"logistic fit needs n >= 5, got n={x.size}")

    starts = [_initial_beta(x, y)]
    slope, icpt = np.polyfit(x, y, 1) if x.std() > 0 else (0.0, y.mean())
    starts.append(np.array([0.0, starts[0][1], starts[0][2], slope, icpt]))

    best = None
    for b0 in starts:
        try:
            res = least_squares(
                lambda b: logistic5(x, b) - y,
                b0,
                jac=lambda b: _logistic5_jac(x, b),
                method="lm",
                xtol=PARAM_TOL,
                ftol=PARAM_TOL,
                gtol=PARAM_TOL,
                max_nfev=max_iter,
            )
        except (ValueError, FloatingPointError) as exc:
            log.debug("logistic fit start %s failed: %s", b0, exc)
            continue
        if res.status > 0 and np.all(np.isfinite(res.x)) and (best is None or res.cost < best.cost):
            best = res

    if best is None:
        log.warning("logistic mapping did not converge in %d iterations; using identity", max_iter)
        return LogisticFit(list(IDENTITY_BETA), False, float(np.linalg.norm(x - y))), x.copy()
    mapped = logistic5(x, best.x)
    return LogisticFit([float(v) for v in best.x], True, float(np.linalg.norm(mapped - y))), mapped


@dataclass
class MetricsReport:
    n: int
    srocc: float
    plcc_raw: float
    plcc_mapped: float
    fit: LogisticFit = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "srocc": self.srocc,
            "plcc_raw": self.plcc_raw,
            "plcc_mapped": self.plcc_mapped,
            "beta": list(self.fit.beta),
            "converged": self.fit.converged,
        }


def evaluate_predictions(preds, labels) -> MetricsReport:
    x, y = _vectors(preds, labels)
    raw = plcc(x, y)
    fit, mapped = logistic_map_fit(x, y)
    try:
        mapped_r = plcc(mapped, y) if fit.converged else raw
    except UndefinedMetricError:
        mapped_r = raw
    return MetricsReport(n=int(x.size), srocc=srocc(x, y), plcc_raw=raw, plcc_mapped=mapped_r, fit=fit)

