"""Inter-layer connections as Euler steps of dh/dt = phi(h).

* monotone:  h_t = phi(h_{t-1})
* explicit:  h_t = h_{t-1} + gamma * phi(h_{t-1})   (gamma = 1 is a residual)
* implicit:  h_t ~ argmin_h ||h - h_{t-1} - gamma * phi(h)||^2, approximated by
  starting from h_{t-1} + phi(h_{t-1}) and running a fixed number of
  gradient-descent steps (the IM-connection).

A layer is any callable mapping a tensor to a tensor of the same shape, with
its parameters closed over.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .tensor import DimensionError, Tape, Tensor, add, mul, sub, sum_of_squares

LayerFn = Callable[[Tensor], Tensor]

MONOTONE = "monotone"
EXPLICIT = "explicit"
IMPLICIT = "implicit"
MODES = (MONOTONE, EXPLICIT, IMPLICIT)


class NumericDivergenceError(FloatingPointError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class EulerConfig:
    """Connection mode plus the step size and inner iteration count.

    ``inner_lr`` overrides the gradient-descent learning rate, which otherwise
    equals ``gamma``. ``loss_without_gamma`` drops gamma from the inner
    residual, i.e. minimises ||h - h_prev - phi(h)||^2 instead.
    """

    mode: str = IMPLICIT
    gamma: float = 0.1
    iterations: int = 5
    inner_lr: float | None = None
    loss_without_gamma: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown connection mode {self.mode!r}; expected one of {MODES}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ValueError(f"iterations must be a non-negative integer, got {self.iterations}")
        if self.inner_lr is not None and not self.inner_lr > 0:
            raise ValueError(f"inner_lr must be positive, got {self.inner_lr}")

    @property
    def learning_rate(self) -> float:
        return self.gamma if self.inner_lr is None else self.inner_lr

    def with_mode(self, mode: str) -> EulerConfig:
        return replace(self, mode=mode)


def _apply(layer: LayerFn, h: Tensor) -> Tensor:
    out = layer(h)
    if out.shape != h.shape:
        raise DimensionError(f"layer changed shape {h.shape} -> {out.shape}")
    return out


def monotone_step(h_prev: Tensor, layer: LayerFn) -> Tensor:
    return _apply(layer, h_prev)


def explicit_step(h_prev: Tensor, layer: LayerFn, gamma: float) -> Tensor:
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return add(h_prev, mul(_apply(layer, h_prev), gamma))


def implicit_residual(h: Tensor, h_prev: Tensor, layer: LayerFn, gamma: float) -> Tensor:
    """||h - h_prev - gamma * phi(h)||^2 as a scalar tensor of shape (1,)."""
    if h.shape != h_prev.shape:
        raise DimensionError(f"implicit_residual: shapes {h.shape} and {h_prev.shape} differ")
    return sum_of_squares(sub(sub(h, h_prev), mul(_apply(layer, h), gamma)))


def _unroll(h_prev: Tensor, layer: LayerFn, cfg: EulerConfig, trace: list | None):
    h = add(h_prev, _apply(layer, h_prev))
    scale = 1.0 if cfg.loss_without_gamma else cfg.gamma
    lr = cfg.learning_rate
    for i in range(cfg.iterations):
        tape = h.tape if h.tape is not None and h.tape.recording else None
        if tape is not None:
            # keep the gradient on the outer tape so training differentiates
            # through every inner step
            loss = implicit_residual(h, h_prev, layer, scale)
            (g,) = tape.grad(loss, [h], create_graph=True)
        else:
            local = Tape()
            hi = local.watch(h)
            loss = implicit_residual(hi, h_prev, layer, scale)
            (g,) = local.grad(loss, [hi])
        value = loss.item()
        if not math.isfinite(value) or not np.isfinite(g.data).all():
            raise NumericDivergenceError(f"inner loop diverged at iteration {i}", iteration=i)
        if trace is not None:
            trace.append((i, value))
        h = sub(h, mul(g, lr))
        if not np.isfinite(h.data).all():
            raise NumericDivergenceError(f"inner iterate became non-finite at iteration {i}", iteration=i)
    return h


def im_connection(h_prev: Tensor, layer: LayerFn, cfg: EulerConfig) -> Tensor:
    """Implicit-Euler connection solved by ``cfg.iterations`` unrolled
    gradient-descent steps on :func:`implicit_residual`.

    When ``h_prev`` (or the layer's parameters) are recorded on a tape, every
    inner step, including the inner gradient, is recorded there too.
    """
    if cfg.mode != IMPLICIT:
        raise ValueError(f"im_connection needs mode 'implicit', got {cfg.mode!r}")
    return _unroll(h_prev, layer, cfg, None)


def inner_loop_trace(h_prev: Tensor, layer: LayerFn, cfg: EulerConfig) -> list[tuple[int, float]]:
    """(iteration, residual loss) before each inner update."""
    if cfg.mode != IMPLICIT:
        raise ValueError(f"inner_loop_trace needs mode 'implicit', got {cfg.mode!r}")
    trace: list[tuple[int, float]] = []
    _unroll(h_prev, layer, cfg, trace)
    return trace


def connect(h_prev: Tensor, layer: LayerFn, cfg: EulerConfig) -> Tensor:
    """Dispatch on ``cfg.mode``."""
    if cfg.mode == MONOTONE:
        return monotone_step(h_prev, layer)
    if cfg.mode == EXPLICIT:
        return explicit_step(h_prev, layer, cfg.gamma)
    return im_connection(h_prev, layer, cfg)
