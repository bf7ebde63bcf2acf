"""Absolute stability of explicit and implicit Euler on dh/dt = lambda*h + psi(t).

Two trajectories started from x and x + eta differ by an error e_k that obeys
the homogeneous recurrence (psi cancels):

    explicit  e_{k+1} = e_k + gamma*lambda*e_k       -> (1 + gamma*lambda)^k * eta
    implicit  e_{k+1} = e_k / (1 - gamma*lambda)     -> eta / (1 - gamma*lambda)^k

The error recurrences run in the compiled kernel when available.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import kernels

EXPLICIT = "explicit"
IMPLICIT = "implicit"
METHODS = (EXPLICIT, IMPLICIT)

DIVERGENCE_CUTOFF = 1e300
CONVERGED = "converged"
DIVERGED = "diverged"


def _zero_forcing(t: float) -> float:
    return 0.0


@dataclass(frozen=True)
class ModelEqParams:
    lam: float
    gamma: float
    eta: float = 1.0
    steps: int = 100
    forcing: Callable[[float], float] = field(default=_zero_forcing, compare=False)

    def __post_init__(self):
        if not self.lam < 0:
            raise ValueError(f"lambda must be negative, got {self.lam}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")


@dataclass
class ErrorTrajectory:
    method: str
    params: ModelEqParams
    errors: np.ndarray
    diverged: bool = False

    def closed_form(self) -> np.ndarray:
        k = np.arange(len(self.errors), dtype=np.float64)
        gl = self.params.gamma * self.params.lam
        if self.method == EXPLICIT:
            return (1.0 + gl) ** k * self.params.eta
        return self.params.eta / (1.0 - gl) ** k


def simulate_error_explicit(p: ModelEqParams) -> ErrorTrajectory:
    errors, diverged = kernels.explicit_errors(p.gamma * p.lam, float(p.eta), int(p.steps), DIVERGENCE_CUTOFF)
    return ErrorTrajectory(EXPLICIT, p, np.asarray(errors), bool(diverged))


def simulate_error_implicit(p: ModelEqParams) -> ErrorTrajectory:
    errors, diverged = kernels.implicit_errors(p.gamma * p.lam, float(p.eta), int(p.steps), DIVERGENCE_CUTOFF)
    return ErrorTrajectory(IMPLICIT, p, np.asarray(errors), bool(diverged))


def simulate_error(method: str, p: ModelEqParams) -> ErrorTrajectory:
    if method == EXPLICIT:
        return simulate_error_explicit(p)
    if method == IMPLICIT:
        return simulate_error_implicit(p)
    raise ValueError(f"unknown method {method!r}")


def simulate_two_trajectories(method: str, p: ModelEqParams, x: float = 1.0) -> np.ndarray:
    """Integrate the forced model equation from x and x + eta and return the
    pointwise difference. Used to check that psi drops out of the error."""
    gl = p.gamma * p.lam
    h, hp = x, x + p.eta
    out = [hp - h]
    for k in range(p.steps):
        # psi is evaluated at the end of the step for implicit, the start for explicit
        if method == EXPLICIT:
            f = p.gamma * p.forcing(k * p.gamma)
            h, hp = h + gl * h + f, hp + gl * hp + f
        else:
            f = p.gamma * p.forcing((k + 1) * p.gamma)
            h, hp = (h + f) / (1.0 - gl), (hp + f) / (1.0 - gl)
        out.append(hp - h)
    return np.array(out)


def is_absolutely_stable(method: str, lam: float, gamma: float) -> bool:
    """Explicit Euler: |1 + gamma*lambda| < 1. Implicit Euler: always."""
    if not lam < 0:
        raise ValueError(f"lambda must be negative, got {lam}")
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if method == EXPLICIT:
        return abs(1.0 + gamma * lam) < 1.0
    if method == IMPLICIT:
        return True
    raise ValueError(f"unknown method {method!r}")


@dataclass
class RegionScan:
    method: str
    lambdas: np.ndarray
    gammas: np.ndarray
    steps: int
    threshold: float
    band: float
    final_errors: np.ndarray  # |e_n| / |eta|, inf where the run diverged

    @property
    def converged(self) -> np.ndarray:
        return self.final_errors < self.threshold

    def predicted(self) -> np.ndarray:
        return np.array([[is_absolutely_stable(self.method, lam, g) for g in self.gammas] for lam in self.lambdas])

    def boundary(self) -> np.ndarray:
        """Cells too close to |1 + gamma*lambda| = 1 to classify at finite n."""
        if self.method == IMPLICIT:
            return np.zeros(self.final_errors.shape, dtype=bool)
        factor = np.abs(1.0 + np.outer(self.lambdas, self.gammas))
        return np.abs(factor - 1.0) < self.band

    def mismatches(self) -> list[tuple[float, float]]:
        bad = (self.converged != self.predicted()) & ~self.boundary()
        return [(float(self.lambdas[i]), float(self.gammas[j])) for i, j in zip(*np.nonzero(bad))]

    def rows(self) -> Iterable[tuple[float, float, str]]:
        conv = self.converged
        for i, lam in enumerate(self.lambdas):
            for j, g in enumerate(self.gammas):
                yield float(lam), float(g), CONVERGED if conv[i, j] else DIVERGED


def stability_region_scan(method: str, lambdas, gammas, steps: int, threshold: float,
                          eta: float = 1.0, band: float | None = None) -> RegionScan:
    """Classify each (lambda, gamma) cell as converged iff |e_n| < threshold*|eta|.

    ``band`` defaults to 10/steps and only affects :meth:`RegionScan.mismatches`.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64).ravel()
    gammas = np.asarray(gammas, dtype=np.float64).ravel()
    if lambdas.size == 0 or gammas.size == 0:
        raise ValueError("lambda and gamma grids must be non-empty")
    if (lambdas >= 0).any():
        raise ValueError("every lambda must be negative")
    if (gammas <= 0).any():
        raise ValueError("every gamma must be positive")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if eta == 0:
        raise ValueError("eta must be non-zero for a relative threshold")
    raw = kernels.scan_final_errors(lambdas, gammas, 1.0, int(steps), method == IMPLICIT, DIVERGENCE_CUTOFF)
    # the recurrence is linear in eta, so a unit start gives |e_n| / |eta| directly
    band = 10.0 / steps if band is None else band
    return RegionScan(method, lambdas, gammas, int(steps), float(threshold), float(band), np.asarray(raw))


def write_trajectory_csv(path, trajectories: Iterable[ErrorTrajectory]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "lambda", "gamma", "step", "error"])
        for tr in trajectories:
            for k, e in enumerate(tr.errors):
                w.writerow([tr.method, repr(tr.params.lam), repr(tr.params.gamma), k, repr(float(e))])


def write_scan_csv(path, scan: RegionScan) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lambda", "gamma", "classification"])
        for lam, g, cls in scan.rows():
            w.writerow([repr(lam), repr(g), cls])


def grid(lo: float, hi: float, n: int) -> np.ndarray:
    return np.linspace(lo, hi, int(n))


def convergence_factor(method: str, lam: float, gamma: float) -> float:
    gl = gamma * lam
    return abs(1.0 + gl) if method == EXPLICIT else 1.0 / abs(1.0 - gl)


def steps_to_reach(method: str, lam: float, gamma: float, threshold: float) -> float:
    """Smallest n with factor**n < threshold (inf if the factor is >= 1)."""
    r = convergence_factor(method, lam, gamma)
    if r == 0.0:
        return 1.0
    if r >= 1.0:
        return math.inf
    return math.floor(math.log(threshold) / math.log(r)) + 1
