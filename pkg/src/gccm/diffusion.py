"""Forward noising, posteriors and reverse means for label diffusion.

Discrete targets are one-hot rows corrupted by uniform-mixing transition
matrices ``Q_t = (1 - beta_t) I + beta_t / K * 11^T``.  Continuous targets
follow the Gaussian chain with cumulative signal rate
``alpha_bar_t = prod_{s <= t} (1 - beta_s)``.

Step indices are 1-based as in the usual DDPM notation; index 0 is the
clean target (``alpha_bar_0 = 1``, ``Q_bar_0 = I``).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

CONTINUOUS = "continuous"
DISCRETE = "discrete"


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption rates ``betas[t - 1] = beta_t`` for t = 1..T."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64).ravel()
        if b.size < 1:
            raise ValueError("schedule needs at least one step")
        if np.any((b < 0) | (b > 1)) or not np.all(np.isfinite(b)):
            raise ValueError("betas must lie in [0, 1]")
        b.flags.writeable = False
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return self.betas.size

    def beta(self, t: int) -> float:
        self._check_step(t, allow_zero=False)
        return float(self.betas[t - 1])

    @cached_property
    def alpha_bars(self) -> np.ndarray:
        """``alpha_bar_t`` for t = 0..T (index 0 is 1)."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def alpha_bar(self, t: int) -> float:
        self._check_step(t, allow_zero=True)
        return float(self.alpha_bars[t])

    def head(self, steps: int) -> NoiseSchedule:
        """The first ``steps`` steps as a schedule of their own."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"cannot take {steps} steps from a {self.T}-step schedule")
        return NoiseSchedule(self.betas[:steps].copy())

    def _check_step(self, t: int, allow_zero: bool) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}


def linear_continuous_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def linear_discrete_schedule(T: int, beta_end: float = 0.5) -> NoiseSchedule:
    betas = np.linspace(1.0 / T, beta_end, T)
    return NoiseSchedule(np.clip(betas, 1e-12, 1.0 - 1e-12))


def schedule_for(kind: str, T: int) -> NoiseSchedule:
    if kind == CONTINUOUS:
        return linear_continuous_schedule(T)
    if kind == DISCRETE:
        return linear_discrete_schedule(T)
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass
class NoisyView:
    """A corrupted target ``y_t`` at step ``t``; ``eps`` is kept for Gaussian noise."""

    y_t: np.ndarray
    t: int
    eps: np.ndarray | None = None


# -- discrete ------------------------------------------------------------


def make_transition_matrix(beta: float, K: int) -> np.ndarray:
    if K < 2:
        raise ValueError(f"need K >= 2 categories, got {K}")
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return (1.0 - beta) * np.eye(K) + (beta / K) * np.ones((K, K))


def cumulative_discrete(schedule: NoiseSchedule, K: int) -> np.ndarray:
    """Stack of ``Q_bar_t`` for t = 0..T, shape (T + 1, K, K)."""
    out = np.empty((schedule.T + 1, K, K))
    out[0] = np.eye(K)
    for t in range(1, schedule.T + 1):
        out[t] = out[t - 1] @ make_transition_matrix(schedule.beta(t), K)
    return out


class DiscreteChain:
    """Caches ``Q_bar_t`` for one schedule and category count."""

    def __init__(self, schedule: NoiseSchedule, K: int):
        self.schedule = schedule
        self.K = K
        self.q_bar = cumulative_discrete(schedule, K)

    def between(self, s: int, t: int) -> np.ndarray:
        """``Q_{s+1} ... Q_t``, the transition from step s to step t."""
        if not 0 <= s <= t <= self.schedule.T:
            raise ValueError(f"need 0 <= s <= t <= T, got s={s}, t={t}")
        m = np.eye(self.K)
        for r in range(s + 1, t + 1):
            m = m @ make_transition_matrix(self.schedule.beta(r), self.K)
        return m

    def posterior(self, y_t: np.ndarray, p0: np.ndarray, t: int, s: int | None = None) -> np.ndarray:
        """Rows of ``sum_c p0[c] q(y_s | y_t, y_0 = c)``.

        ``y_t`` holds one-hot rows; ``p0`` holds one-hot rows (the exact
        posterior) or probability rows (the marginal over a predicted
        clean label).  ``s`` defaults to ``t - 1``.
        """
        s = t - 1 if s is None else s
        if not 0 <= s < t:
            raise ValueError(f"need 0 <= s < t, got s={s}, t={t}")
        y_t = np.atleast_2d(np.asarray(y_t, dtype=np.float64))
        p0 = np.atleast_2d(np.asarray(p0, dtype=np.float64))
        _check_one_hot(y_t, "posterior y_t")
        k = y_t.argmax(axis=1)
        denom = self.q_bar[t][:, k].T  # denom[i, c] = q(y_t = k_i | y_0 = c)
        if np.any((denom == 0) & (p0 > 0)):
            raise ZeroDivisionError("q(y_t | y_0) is zero for a clean label with positive mass")
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(p0 > 0, p0 / denom, 0.0)
        like = self.between(s, t)[:, k].T  # like[i, j] = q(y_t = k_i | y_s = j)
        rows = (w @ self.q_bar[s]) * like
        return rows / rows.sum(axis=1, keepdims=True)


def discrete_posterior(y_t_row, y_0_row, t: int, schedule: NoiseSchedule, s: int | None = None) -> np.ndarray:
    """q(y_{t-1} | y_t, y_0) for single one-hot rows."""
    y_t_row = np.atleast_2d(y_t_row)
    y_0_row = np.atleast_2d(y_0_row)
    _check_one_hot(y_0_row, "posterior y_0")
    chain = DiscreteChain(schedule, y_t_row.shape[1])
    return chain.posterior(y_t_row, y_0_row, t, s)[0]


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One one-hot draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], 1)) * cdf[:, -1:]
    idx = np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)
    return np.eye(probs.shape[1])[idx]


def sample_discrete_forward(
    y0: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator, chain: DiscreteChain | None = None
) -> NoisyView:
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.float64))
    _check_one_hot(y0, "discrete forward")
    if chain is None:
        chain = DiscreteChain(schedule, y0.shape[1])
    if not 0 <= t <= schedule.T:
        raise ValueError(f"step {t} outside [0, {schedule.T}]")
    return NoisyView(sample_categorical(y0 @ chain.q_bar[t], rng), t)


def _check_one_hot(y: np.ndarray, where: str) -> None:
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError(f"{where}: rows must be one-hot")


# -- continuous ----------------------------------------------------------


def sample_continuous_forward(y0: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator) -> NoisyView:
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.float64))
    ab = schedule.alpha_bar(t)
    eps = rng.standard_normal(y0.shape)
    return NoisyView(np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps, t, eps)


def reverse_mean(y_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule, s: int | None = None) -> np.ndarray:
    """Mean of the Gaussian reverse step from t to s (default t - 1).

    For s < t - 1 the step uses the composite rates
    ``alpha = alpha_bar_t / alpha_bar_s`` and ``beta = 1 - alpha``.
    """
    s = t - 1 if s is None else s
    ab_t = schedule.alpha_bar(t)
    if t < 1 or not 0 <= s < t:
        raise ValueError(f"need 0 <= s < t and t >= 1, got s={s}, t={t}")
    if ab_t >= 1.0:
        raise ZeroDivisionError(f"alpha_bar_{t} = 1 leaves no noise to remove")
    alpha = ab_t / schedule.alpha_bar(s)
    beta = 1.0 - alpha
    return (np.asarray(y_t) - beta / np.sqrt(1.0 - ab_t) * np.asarray(eps_hat)) / np.sqrt(alpha)


def reverse_variance(t: int, schedule: NoiseSchedule, s: int | None = None) -> float:
    s = t - 1 if s is None else s
    return 1.0 - schedule.alpha_bar(t) / schedule.alpha_bar(s)


# -- feature perturbation ------------------------------------------------


def perturb_features(
    x: np.ndarray, kind: str, T_per: int, schedule_per: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    """Lightly noise node features with the forward process at a random step.

    The step is drawn uniformly from 1..T_per and applied through the first
    ``T_per`` steps of ``schedule_per``.  ``kind='discrete'`` treats each
    feature row as a one-hot category.
    """
    if T_per < 1:
        raise ValueError("T_per must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    sched = schedule_per.head(T_per) if schedule_per.T != T_per else schedule_per
    s = int(rng.integers(1, T_per + 1))
    if kind == CONTINUOUS:
        return sample_continuous_forward(x, s, sched, rng).y_t
    if kind == DISCRETE:
        if x.shape[1] < 2:
            raise ValueError("discrete perturbation needs at least two feature categories")
        _check_one_hot(x, "discrete perturbation")
        return sample_discrete_forward(x, s, sched, rng).y_t
    raise ValueError(f"unknown perturbation kind {kind!r}")


class LabelDiffusion:
    """Forward process and prior for one label type, with cached matrices."""

    def __init__(self, kind: str, schedule: NoiseSchedule, K: int):
        self.kind = kind
        self.schedule = schedule
        self.K = K
        self.chain = DiscreteChain(schedule, K) if kind == DISCRETE else None

    @classmethod
    def for_task(cls, classification: bool, T: int, K: int) -> LabelDiffusion:
        kind = DISCRETE if classification else CONTINUOUS
        return cls(kind, schedule_for(kind, T), K)

    @property
    def T(self) -> int:
        return self.schedule.T

    def sample(self, y0: np.ndarray, t: int, rng: np.random.Generator) -> NoisyView:
        if self.kind == DISCRETE:
            return sample_discrete_forward(y0, t, self.schedule, rng, self.chain)
        return sample_continuous_forward(y0, t, self.schedule, rng)

    def prior(self, rows: int, rng: np.random.Generator) -> np.ndarray:
        """A draw from the terminal distribution: uniform categories or N(0, I)."""
        if self.kind == DISCRETE:
            return np.eye(self.K)[rng.integers(0, self.K, size=rows)]
        return rng.standard_normal((rows, self.K))
