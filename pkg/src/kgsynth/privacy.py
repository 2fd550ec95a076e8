"""DP-SGD primitives and a Renyi-DP accountant for the Poisson-subsampled Gaussian."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special

DEFAULT_ORDERS = tuple([1.25, 1.5, 1.75] + list(range(2, 65)) + [128, 256])


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    sampling_rate: float = 0.01
    delta: float = 1e-5
    epsilon_ceiling: float | None = None

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if not self.noise_multiplier > 0:
            raise ValueError("noise_multiplier must be positive")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError("sampling_rate must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.epsilon_ceiling is not None and not self.epsilon_ceiling > 0:
            raise ValueError("epsilon_ceiling must be positive")

    def to_dict(self) -> dict:
        return {"clip_norm": self.clip_norm, "noise_multiplier": self.noise_multiplier,
                "sampling_rate": self.sampling_rate, "delta": self.delta,
                "epsilon_ceiling": self.epsilon_ceiling}


@dataclass(frozen=True)
class ClippedGradient:
    vector: np.ndarray
    original_norm: float
    scale: float


def clip_per_example(g: np.ndarray, clip_norm: float) -> ClippedGradient:
    """g / max(1, ||g||_2 / C)."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    scale = 1.0 / max(1.0, norm / clip_norm)
    return ClippedGradient(g * scale, norm, scale)


def clip_rows(G: np.ndarray, clip_norm: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise clip of a (B, P) per-example gradient matrix; returns (clipped, norms)."""
    norms = np.linalg.norm(G, axis=1)
    scale = 1.0 / np.maximum(1.0, norms / clip_norm)
    return G * scale[:, None], norms


def aggregate_noisy(clipped, clip_norm: float, sigma: float, lot_size: float | None = None,
                    seed: int | np.random.Generator = 0) -> np.ndarray:
    """(1/L) (sum_i clipped_i + N(0, sigma^2 C^2 I)).

    ``lot_size`` defaults to the number of clipped gradients; Poisson-sampled
    training passes the expected lot size instead.
    """
    rows = np.atleast_2d(np.asarray([c.vector if isinstance(c, ClippedGradient) else c for c in clipped]
                                    if not isinstance(clipped, np.ndarray) else clipped, dtype=np.float64))
    L = rows.shape[0] if lot_size is None else lot_size
    if L < 1 and lot_size is None:
        raise ValueError("need at least one gradient")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma * clip_norm, size=rows.shape[1]) if sigma > 0 else 0.0
    return (rows.sum(axis=0) + noise) / L


# ---------------------------------------------------------------------------
# RDP of the sampled Gaussian mechanism


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_comb(n: float, k: float) -> float:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    # binomial expansion of E_{mu0}[((1-q) + q mu1/mu0)^alpha]
    log_a = -math.inf
    lq, l1q = math.log(q), math.log1p(-q)
    for i in range(alpha + 1):
        term = _log_comb(alpha, i) + i * lq + (alpha - i) * l1q + (i * i - i) / (2.0 * sigma * sigma)
        log_a = _log_add(log_a, term)
    return log_a


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    """log E_{z~N(0,s^2)}[((1-q) + q exp((2z-1)/(2 s^2)))^alpha] by adaptive quadrature."""
    s2 = sigma * sigma
    l1q, lq = math.log1p(-q), math.log(q)

    def log_f(z):
        mix = np.logaddexp(l1q, lq + (2.0 * z - 1.0) / (2.0 * s2))
        return -0.5 * z * z / s2 - math.log(sigma * math.sqrt(2.0 * math.pi)) + alpha * mix

    res = optimize.minimize_scalar(lambda z: -log_f(z), bounds=(-10.0 * sigma, alpha + 10.0 * sigma),
                                   method="bounded", options={"xatol": 1e-10})
    peak = float(res.x)
    top = float(log_f(peak))
    width = 40.0 * sigma
    pts = sorted({peak, 0.0, 0.5, 1.0})
    pts = [p for p in pts if peak - width < p < peak + width]
    val, _ = integrate.quad(lambda z: math.exp(log_f(z) - top), peak - width, peak + width,
                            points=pts, epsabs=0.0, epsrel=1e-13, limit=500)
    return top + math.log(val)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """RDP at order alpha of one Poisson-subsampled Gaussian step (sensitivity 1)."""
    if alpha <= 1:
        raise ValueError("RDP order must exceed 1")
    if q == 0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if not 0 < q < 1:
        raise ValueError("sampling rate must lie in [0, 1]")
    if math.isinf(alpha):
        return math.inf
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, float(alpha))
    return log_a / (alpha - 1.0)


@dataclass
class AccountantState:
    orders: tuple[float, ...] = DEFAULT_ORDERS
    rdp: np.ndarray = field(default=None)
    steps: int = 0

    def __post_init__(self):
        self.orders = tuple(self.orders)
        if self.rdp is None:
            self.rdp = np.zeros(len(self.orders))
        else:
            self.rdp = np.asarray(self.rdp, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"orders": list(self.orders), "rdp": self.rdp.tolist(), "steps": self.steps}

    @classmethod
    def from_dict(cls, d: dict) -> AccountantState:
        return cls(tuple(d["orders"]), np.array(d["rdp"]), int(d["steps"]))


def rdp_vector(q: float, sigma: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    return np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders])


def account_step(state: AccountantState, q: float, sigma: float, steps: int = 1) -> AccountantState:
    """Compose ``steps`` more mechanism applications (RDP adds)."""
    per = rdp_vector(q, sigma, state.orders)
    return AccountantState(state.orders, state.rdp + steps * per, state.steps + steps)


@dataclass(frozen=True)
class EpsilonReport:
    epsilon: float
    order: float | None
    no_steps: bool = False


def report_epsilon(state: AccountantState, delta: float) -> EpsilonReport:
    """eps = min_alpha rdp(alpha) + log(1/delta) / (alpha - 1)."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if state.steps == 0:
        return EpsilonReport(0.0, None, no_steps=True)
    orders = np.array(state.orders, dtype=np.float64)
    eps = state.rdp + math.log(1.0 / delta) / (orders - 1.0)
    eps = np.where(np.isnan(eps), np.inf, eps)
    k = int(np.argmin(eps))
    return EpsilonReport(float(eps[k]), float(orders[k]))


def epsilon_for(q: float, sigma: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> EpsilonReport:
    return report_epsilon(account_step(AccountantState(tuple(orders)), q, sigma, steps), delta)


class Accountant:
    """Mutable wrapper the trainer steps once per private critic update."""

    def __init__(self, q: float, sigma: float, orders=DEFAULT_ORDERS):
        self.q, self.sigma = q, sigma
        self.state = AccountantState(tuple(orders))
        self._per_step = rdp_vector(q, sigma, orders)

    def step(self, n: int = 1) -> None:
        self.state = AccountantState(self.state.orders, self.state.rdp + n * self._per_step, self.state.steps + n)

    def epsilon(self, delta: float) -> float:
        return report_epsilon(self.state, delta).epsilon

    def epsilon_after(self, extra_steps: int, delta: float) -> float:
        s = AccountantState(self.state.orders, self.state.rdp + extra_steps * self._per_step,
                            self.state.steps + extra_steps)
        return report_epsilon(s, delta).epsilon


def solve_noise_multiplier(q: float, steps: int, delta: float, target_epsilon: float,
                           lo: float = 0.3, hi: float = 100.0, tol: float = 1e-3) -> float:
    """Smallest sigma (to ``tol``) whose epsilon after ``steps`` stays within target."""
    if epsilon_for(q, hi, steps, delta).epsilon > target_epsilon:
        raise ValueError("target epsilon unreachable even with the largest noise multiplier")
    while epsilon_for(q, lo, steps, delta).epsilon <= target_epsilon and lo > 1e-3:
        lo /= 2
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if epsilon_for(q, mid, steps, delta).epsilon <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi
