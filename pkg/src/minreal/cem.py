"""Sampling-based MPC by the cross-entropy method: Gaussian candidate
sampling, world-model scoring, elite refit by maximum likelihood, and a
smoothed policy update, iterated under an optional wall-clock budget.

A planned sequence covers horizon + 1 control steps (rewards are summed from
the current step through the horizon), so policy tensors have H + 1 rows.
Candidate scoring is a pure, vectorized rollout against a frozen model;
scores are reduced in candidate-index order so elite tie-breaking is
deterministic.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from .errors import ConfigError
from .world import rollout_batch

STD_FLOOR = 1e-3


@dataclasses.dataclass(frozen=True)
class PolicyParams:
    """Per-(step, action dim) mean and standard deviation of the proposal."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape:
            raise ValueError("mean and std must have the same shape")
        if np.any(std <= 0.0):
            raise ValueError("std must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", np.maximum(std, STD_FLOOR))


@dataclasses.dataclass(frozen=True)
class CemConfig:
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int = 5
    candidates: int = 10_000
    elite_ratio: float = 0.01
    smoothing: float = 0.4
    max_iters: int = 10
    time_budget: float | None = None  # seconds; None = unlimited
    return_best: bool = False  # return best-scoring candidate instead of mean

    def __post_init__(self):
        lo = np.asarray(self.action_low, dtype=np.float64)
        hi = np.asarray(self.action_high, dtype=np.float64)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ConfigError("action bounds must satisfy low < high per dim")
        object.__setattr__(self, "action_low", lo)
        object.__setattr__(self, "action_high", hi)
        if not (0.0 < self.elite_ratio < 1.0):
            raise ConfigError(f"elite ratio must be in (0, 1), got {self.elite_ratio}")
        if not (0.0 < self.smoothing < 1.0):
            raise ConfigError(f"smoothing must be in (0, 1), got {self.smoothing}")
        if self.horizon < 0:
            raise ConfigError("horizon must be >= 0")
        if int(np.floor(self.elite_ratio * self.candidates)) < 1:
            raise ConfigError(
                f"floor(elite_ratio * candidates) must be >= 1, got "
                f"{self.elite_ratio} * {self.candidates}"
            )

    @property
    def n_elites(self):
        return int(np.floor(self.elite_ratio * self.candidates))

    @property
    def action_dim(self):
        return self.action_low.size

    @property
    def plan_steps(self):
        return self.horizon + 1

    def initial_policy(self) -> PolicyParams:
        shape = (self.plan_steps, self.action_dim)
        return PolicyParams(
            mean=np.zeros(shape),
            std=np.tile(0.5 * (self.action_high - self.action_low), (self.plan_steps, 1)),
        )


@dataclasses.dataclass
class PlanDiagnostics:
    iterations_completed: int
    best_score: float
    wall_seconds: float
    no_iteration_warning: bool = False
    final_policy: PolicyParams | None = None


def sample_candidates(policy: PolicyParams, k, rng):
    """k Gaussian draws around the policy, clipped to the action bounds set
    by the caller via clip_candidates; rng may be a seed or a Generator."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    steps, adim = policy.mean.shape
    draws = policy.mean + policy.std * rng.standard_normal((k, steps, adim))
    return draws


def clip_candidates(candidates, low, high):
    return np.clip(candidates, low, high)


def score_candidates(model, s0, candidates):
    """Total predicted reward per candidate (pure, order-independent)."""
    return rollout_batch(model, s0, candidates)


def select_elites(scores, elite_ratio):
    """Indices of the top floor(ratio * K) scores (at least one), descending,
    ties broken by lower index."""
    scores = np.asarray(scores)
    k = scores.shape[0]
    n = max(1, int(np.floor(elite_ratio * k)))
    order = np.argsort(-scores, kind="stable")
    return order[:n]


def refit_policy(elites) -> PolicyParams:
    """Maximum-likelihood Gaussian fit: mean and population std per
    (step, dim), std floored."""
    elites = np.asarray(elites, dtype=np.float64)
    mean = elites.mean(axis=0)
    std = elites.std(axis=0)  # ddof=0: the MLE
    return PolicyParams(mean=mean, std=np.maximum(std, STD_FLOOR))


def smooth_update(old: PolicyParams, new: PolicyParams, eta) -> PolicyParams:
    """theta <- eta * old + (1 - eta) * new, applied to mean and std."""
    if old.mean.shape != new.mean.shape:
        raise ValueError("policy shapes differ")
    return PolicyParams(
        mean=eta * old.mean + (1.0 - eta) * new.mean,
        std=eta * old.std + (1.0 - eta) * new.std,
    )


def plan(model, s0, config: CemConfig, seed, initial_policy=None):
    """Iterate sample -> score -> elite refit -> smooth update until the
    iteration cap or time budget (checked between iterations) runs out.

    Returns (first action, PlanDiagnostics). With a fixed seed and no time
    budget the result is deterministic. If no iteration completes, the
    initial policy mean is returned with a warning flag.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    policy = initial_policy if initial_policy is not None else config.initial_policy()
    if policy.mean.shape != (config.plan_steps, config.action_dim):
        raise ConfigError(
            f"policy shape {policy.mean.shape} does not match plan steps "
            f"{(config.plan_steps, config.action_dim)}"
        )
    best_score = -np.inf
    best_first_action = policy.mean[0].copy()
    iters = 0
    for _ in range(config.max_iters):
        if config.time_budget is not None and iters > 0:
            if time.perf_counter() - start >= config.time_budget:
                break
        if config.time_budget is not None and config.time_budget <= 0.0:
            break
        candidates = sample_candidates(policy, config.candidates, rng)
        candidates = clip_candidates(candidates, config.action_low, config.action_high)
        scores = score_candidates(model, s0, candidates)
        elite_idx = select_elites(scores, config.elite_ratio)
        top = int(elite_idx[0])
        if scores[top] > best_score:
            best_score = float(scores[top])
            best_first_action = candidates[top, 0].copy()
        policy = smooth_update(policy, refit_policy(candidates[elite_idx]),
                               config.smoothing)
        iters += 1

    wall = time.perf_counter() - start
    diag = PlanDiagnostics(
        iterations_completed=iters,
        best_score=best_score if iters > 0 else float("nan"),
        wall_seconds=wall,
        no_iteration_warning=(iters == 0),
        final_policy=policy,
    )
    if config.return_best and iters > 0:
        action = best_first_action
    else:
        action = policy.mean[0].copy()
    action = np.clip(action, config.action_low, config.action_high)
    return action, diag


def shift_policy(policy: PolicyParams, config: CemConfig) -> PolicyParams:
    """Warm start for the next control step: drop the executed first row,
    append a zero-mean row, reset std to the initial spread."""
    init = config.initial_policy()
    mean = np.vstack([policy.mean[1:], np.zeros((1, config.action_dim))])
    return PolicyParams(mean=mean, std=init.std)
