"""Data-generating processes for the simulation scenarios.

Every draw uses its own counter-based stream keyed by ``(seed, rep)`` so a
Monte-Carlo study gives the same replications whatever the execution order.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .panel import LongPanel

__all__ = [
    "NormalDgpConfig",
    "SurvivalDgpConfig",
    "TruthRecord",
    "PRESETS",
    "rng_for",
    "generate_normal",
    "generate_survival",
    "generate",
    "preset",
    "PositivityError",
    "ExactDistribution",
    "enumerable_dgp",
    "logistic_enumerable",
    "random_enumerable",
]


def rng_for(seed: int, rep: int = 0) -> np.random.Generator:
    """Philox stream for replication ``rep`` of master seed ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(rep,))))


@dataclass(frozen=True)
class NormalDgpConfig:
    """Normal-outcome scenario with four treatment times."""

    alpha0: float = 0.0
    alpha1: float = 0.0
    alpha2: float = 1.0
    pi1: float = 4.0
    delta0: float = 0.0
    delta1: float = 1.0
    delta2: float = 2.0
    delta3: float = 1.0
    n: int = 5000
    K: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.K != 4:
            raise ValueError("the normal-outcome family has K = 4")
        if self.n < 1:
            raise ValueError("n must be positive")

    @property
    def theta(self) -> float:
        return self.delta2 + self.delta1 * self.alpha2 + self.delta3 * self.alpha2

    @property
    def m_star(self) -> int:
        return 2 if (self.delta1 * self.alpha2 != 0 or self.delta3 * self.alpha2 != 0) else 1


@dataclass(frozen=True)
class SurvivalDgpConfig:
    """Discrete-time survival scenario with 36 treatment times."""

    n: int = 5000
    K: int = 36
    seed: int = 0

    def __post_init__(self):
        if self.K != 36:
            raise ValueError("the survival family has K = 36")
        if self.n < 1:
            raise ValueError("n must be positive")

    theta = -0.87
    m_star = 2


@dataclass(frozen=True)
class TruthRecord:
    """Ground truth for one draw.

    ``p_treat[i, k]`` is the generating ``P[A(k)=1 | history]`` and
    ``p_censor[i, k]`` the generating ``P[C(k+1)=1 | history]``; both are NaN
    once the subject has left follow-up.
    """

    theta: float
    m_star: int
    p_treat: np.ndarray
    p_censor: Optional[np.ndarray] = None
    scenario: str = ""
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"scenario": self.scenario, "theta": self.theta, "m_star": self.m_star, "config": self.config}


def generate_normal(cfg: NormalDgpConfig, rep: int = 0, scenario: str = "") -> tuple:
    """Draw a normal-outcome panel.

    ``L(0) ~ N(a0 + a1, 1)``, ``A(0) ~ Bin(expit(-3 + L(0)))``, then for
    ``k = 1..3`` ``L(k) ~ N(a0 L(0) + a1 L(k-1) + a2 A(k-1), 1)`` and
    ``A(k) ~ Bin(expit(-3 + L(k) + pi1 A(k-1)))``; finally
    ``Y ~ N(d0 L(0) + d1 L(3) + d2 A(3) + d3 A(3) L(3), 1)``.
    """
    rng = rng_for(cfg.seed, rep)
    n, K = cfg.n, cfg.K
    L = np.empty((n, K))
    A = np.empty((n, K))
    P = np.empty((n, K))
    L[:, 0] = rng.normal(cfg.alpha0 + cfg.alpha1, 1.0, n)
    P[:, 0] = expit(-3 + L[:, 0])
    A[:, 0] = rng.random(n) < P[:, 0]
    for k in range(1, K):
        L[:, k] = rng.normal(cfg.alpha0 * L[:, 0] + cfg.alpha1 * L[:, k - 1] + cfg.alpha2 * A[:, k - 1], 1.0)
        P[:, k] = expit(-3 + L[:, k] + cfg.pi1 * A[:, k - 1])
        A[:, k] = rng.random(n) < P[:, k]
    mean = cfg.delta0 * L[:, 0] + cfg.delta1 * L[:, -1] + cfg.delta2 * A[:, -1] + cfg.delta3 * A[:, -1] * L[:, -1]
    Y = rng.normal(mean, 1.0)
    panel = LongPanel(Z=L[:, :, None], A=A, Y=Y)
    truth = TruthRecord(cfg.theta, cfg.m_star, P, None, scenario, _asdict(cfg))
    return panel, truth


def generate_survival(cfg: SurvivalDgpConfig, rep: int = 0, scenario: str = "surv") -> tuple:
    """Draw a discrete-time survival panel.

    For ``k = 0..35`` among subjects still at risk, with ``A(-1) = 0``:
    ``L(k) ~ Bin(expit(-0.5 A(k-1)))``, ``A(k) ~ Bin(expit(-4 + 2L(k) + 5A(k-1)))``,
    ``C(k+1) ~ Bin(expit(-6.5 + 4L(k) - 4A(k)))`` and, if uncensored,
    ``Y(k+1) ~ Bin(expit(-6.5 + L(k) - 0.5A(k) - 0.25A(k-1)))``.
    """
    rng = rng_for(cfg.seed, rep)
    n, K = cfg.n, cfg.K
    L = np.full((n, K), np.nan)
    A = np.full((n, K), np.nan)
    C = np.full((n, K), np.nan)
    Y = np.full((n, K), np.nan)
    PA = np.full((n, K), np.nan)
    PC = np.full((n, K), np.nan)
    prev = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    censored = np.zeros(n, dtype=bool)
    evented = np.zeros(n, dtype=bool)
    for k in range(K):
        # one block of uniforms per step keeps the stream layout fixed
        u = rng.random((4, n))
        lk = (u[0] < expit(-0.5 * prev)).astype(float)
        pa = expit(-4 + 2 * lk + 5 * prev)
        ak = (u[1] < pa).astype(float)
        pc = expit(-6.5 + 4 * lk - 4 * ak)
        ck = u[2] < pc
        py = expit(-6.5 + lk - 0.5 * ak - 0.25 * prev)
        yk = (u[3] < py) & ~ck
        idx = alive
        L[idx, k], A[idx, k], PA[idx, k], PC[idx, k] = lk[idx], ak[idx], pa[idx], pc[idx]
        C[idx, k] = ck[idx]
        Y[idx & ~ck, k] = yk[idx & ~ck]
        newly_c = idx & ck
        newly_y = idx & yk
        censored |= newly_c
        evented |= newly_y
        alive = alive & ~ck & ~yk
        # absorbing indicators after leaving follow-up
        if k + 1 < K:
            C[censored, k + 1] = 1.0
            Y[evented, k + 1] = 1.0
        prev = np.where(alive, ak, prev)
    panel = LongPanel(Z=L[:, :, None], A=A, Y=Y, C=C)
    truth = TruthRecord(cfg.theta, cfg.m_star, PA, PC, scenario, _asdict(cfg))
    return panel, truth


def _asdict(cfg) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


PRESETS = {
    "s1": NormalDgpConfig(0, 0, 1, 4, 0, 1, 2, 1),
    "s2": NormalDgpConfig(0, 0, 1, 4, 0, 1, 2, 0),
    "s3": NormalDgpConfig(0.5, 0, 1, 4, 0.5, 1, 2, 0),
    "surv": SurvivalDgpConfig(),
}


def preset(name: str, **overrides):
    """Scenario config by name with field overrides (e.g. ``n``, ``seed``)."""
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


def generate(cfg: Union[str, NormalDgpConfig, SurvivalDgpConfig], rep: int = 0, **overrides):
    """Generate ``(panel, truth)`` from a config or preset name."""
    name = cfg if isinstance(cfg, str) else ""
    if isinstance(cfg, str):
        cfg = preset(cfg, **overrides)
    elif overrides:
        cfg = replace(cfg, **overrides)
    if isinstance(cfg, SurvivalDgpConfig):
        return generate_survival(cfg, rep, scenario=name or "surv")
    return generate_normal(cfg, rep, scenario=name)


# --------------------------------------------------------------------------
# enumerable distributions


class PositivityError(ValueError):
    """A treatment probability is 0 or 1 for some reachable history."""


@dataclass(frozen=True)
class ExactDistribution:
    """Joint law of ``(L(0), A(0), ..., L(K-1), A(K-1))`` with binary L.

    Row ``r`` is one path: ``L[r]``, ``A[r]`` (both (K,)), its probability
    ``mass[r]``, ``EY[r] = E[Y | path]``, the treatment probabilities
    ``pA[r, k] = P[A(k)=1 | L(0..k), A(0..k-1)]`` and covariate probabilities
    ``pL[r, k] = P[L(k)=1 | L(0..k-1), A(0..k-1)]``.
    """

    K: int
    L: np.ndarray
    A: np.ndarray
    mass: np.ndarray
    EY: np.ndarray
    pA: np.ndarray
    pL: np.ndarray
    outcome: Callable = None

    def to_panel(self) -> tuple:
        """``(panel, masses)``: every path as a subject, masses as case weights."""
        panel = LongPanel(Z=self.L[:, :, None].astype(float), A=self.A.astype(float), Y=self.EY.copy())
        return panel, self.mass.copy()

    def permuted(self, order) -> "ExactDistribution":
        order = np.asarray(order)
        return ExactDistribution(self.K, self.L[order], self.A[order], self.mass[order], self.EY[order],
                                 self.pA[order], self.pL[order], self.outcome)


def enumerable_dgp(K: int, p_L: Callable, p_A: Callable, mean_Y: Callable, tol: float = 1e-12) -> ExactDistribution:
    """Enumerate a small binary-covariate DGP.

    Parameters
    ----------
    K : int
        Number of treatment times, at most 3.
    p_L : callable ``(k, L, A) -> P[L(k)=1]``
        ``L`` holds ``L(0..k-1)`` and ``A`` holds ``A(0..k-1)``.
    p_A : callable ``(k, L, A) -> P[A(k)=1]``
        ``L`` holds ``L(0..k)`` and ``A`` holds ``A(0..k-1)``.
    mean_Y : callable ``(L, A) -> E[Y | L, A]``
    """
    if K > 3:
        raise ValueError(f"state space too large: K={K} gives {4 ** K} paths (at most 3 allowed)")
    if K < 1:
        raise ValueError("K must be at least 1")
    rows = []
    for bits in itertools.product((0, 1), repeat=2 * K):
        Lb = np.array(bits[0::2])
        Ab = np.array(bits[1::2])
        mass = 1.0
        pa_row = np.empty(K)
        pl_row = np.empty(K)
        for k in range(K):
            pl = float(p_L(k, Lb[:k], Ab[:k]))
            pl_row[k] = pl
            mass *= pl if Lb[k] == 1 else 1 - pl
            pa = float(p_A(k, Lb[: k + 1], Ab[:k]))
            if not tol < pa < 1 - tol:
                raise PositivityError(
                    f"positivity violated: P[A({k})=1 | L={Lb[:k + 1].tolist()}, A={Ab[:k].tolist()}] = {pa}"
                )
            pa_row[k] = pa
            mass *= pa if Ab[k] == 1 else 1 - pa
        rows.append((Lb, Ab, mass, float(mean_Y(Lb, Ab)), pa_row, pl_row))
    L = np.array([r[0] for r in rows])
    A = np.array([r[1] for r in rows])
    return ExactDistribution(
        K,
        L,
        A,
        np.array([r[2] for r in rows]),
        np.array([r[3] for r in rows]),
        np.array([r[4] for r in rows]),
        np.array([r[5] for r in rows]),
        mean_Y,
    )


def logistic_enumerable(K, l_coef, a_coef, y_fn) -> ExactDistribution:
    """Enumerable DGP from logistic coefficient blocks.

    ``l_coef[k] = (intercept, on L(k-1), on A(k-1), on L(0))`` and
    ``a_coef[k] = (intercept, on L(k), on A(k-1), on L(0))``; missing
    history terms at ``k = 0`` are zero.
    """

    def p_L(k, L, A):
        c = l_coef[k]
        lp = L[k - 1] if k >= 1 else 0.0
        ap = A[k - 1] if k >= 1 else 0.0
        l0 = L[0] if k >= 1 else 0.0
        return expit(c[0] + c[1] * lp + c[2] * ap + c[3] * l0)

    def p_A(k, L, A):
        c = a_coef[k]
        ap = A[k - 1] if k >= 1 else 0.0
        return expit(c[0] + c[1] * L[k] + c[2] * ap + c[3] * L[0])

    return enumerable_dgp(K, p_L, p_A, y_fn)


def random_enumerable(rng: np.random.Generator, K: int, structure: str) -> tuple:
    """Randomised enumerable DGP of a given structure.

    Returns ``(dist, info)`` where ``info`` holds the outcome coefficients.

    Structures
    ----------
    ``"additive"``
        Covariates ignore past treatment and the outcome is additive in
        treatments and covariates with non-negative treatment effects, so the
        main-effect MSM holds with ``psi_j >= 0`` and the treatment effects do
        not vary with the early treatment history.
    ``"randomized_early"``
        Treatments before the last ``m`` times ignore the covariates, with
        feedback from treatment to covariates and an arbitrary outcome; the
        outcome's potential values are independent of early treatment.
    ``"baseline_confounded"``
        ``L(0)`` drives both early treatment and the outcome directly.
    """
    m = info_m = K - 1
    if structure == "additive":
        l_coef = [(rng.normal(0, 0.5), rng.normal(0, 1.5), 0.0, 0.0) for _ in range(K)]
        a_coef = [(rng.normal(-0.3, 0.5), rng.uniform(0.5, 2.0), rng.uniform(1.0, 3.0), 0.0) for _ in range(K)]
        psi = rng.uniform(0.2, 2.0, K)  # psi[j-1] multiplies A(K-j)
        gamma = rng.normal(0, 1.0, K)
        psi0 = rng.normal()

        def y_fn(L, A):
            return psi0 + sum(psi[j - 1] * A[K - j] for j in range(1, K + 1)) + float(gamma @ L)

        info = {"psi0": psi0, "psi": psi, "gamma": gamma}
    elif structure == "randomized_early":
        m = info_m = 1
        l_coef = [(rng.normal(0, 0.5), rng.normal(0, 1.5), rng.normal(0, 1.5), rng.normal(0, 1.0)) for _ in range(K)]
        a_coef = []
        for k in range(K):
            early = k < K - m
            a_coef.append((rng.normal(-0.3, 0.5), 0.0 if early else rng.uniform(0.5, 2.0),
                           rng.uniform(1.0, 3.0), 0.0 if early else rng.normal(0, 1.0)))
        w = rng.normal(0, 1.0, (2 * K + 1,))

        def y_fn(L, A):
            x = np.concatenate([[1.0], L, A])
            return float(w @ x + 0.7 * A[-1] * L[-1] + 0.5 * L[0] * L[-1])

        info = {"m": m, "coef": w}
    elif structure == "baseline_confounded":
        m = info_m = 1
        l_coef = [(rng.normal(0, 0.3), rng.normal(0, 0.5), rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5))
                  for _ in range(K)]
        a_coef = [(rng.uniform(-1.5, -0.5), rng.uniform(0.5, 1.5), rng.uniform(1.5, 3.0),
                   rng.uniform(1.5, 3.0) if k < K - m else 0.0) for k in range(K)]
        d0 = rng.uniform(1.0, 2.0)
        d = rng.uniform(0.5, 2.0, K)

        def y_fn(L, A):
            return float(d0 * L[0] + L[-1] + d[0] * A[-1] + 0.2 * float(d[1:] @ A[:-1]))

        info = {"m": m, "delta0": d0}
    else:
        raise ValueError(f"unknown structure {structure!r}")
    info.setdefault("m", info_m)
    return logistic_enumerable(K, l_coef, a_coef, y_fn), info
