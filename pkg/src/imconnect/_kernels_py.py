"""Pure-Python/numpy versions of the hot kernels.

Same signatures and the same floating-point operation order as the compiled
``_kernels`` extension, so the scalar recurrences agree bit-for-bit between
the two backends.
"""
import math

import numpy as np

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x2 * x)
    du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x2)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def gelu_grad2(x):
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x2 * x)
    du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x2)
    ddu = SQRT_2_OVER_PI * 6.0 * GELU_CUBIC * x
    t = np.tanh(u)
    s = 1.0 - t * t
    return s * (du + 0.5 * x * (ddu - 2.0 * t * du * du))


def explicit_errors(gl, eta, n, cutoff):
    """Iterate e <- e + gl*e. Returns (errors, diverged)."""
    out = [eta]
    e = eta
    for _ in range(n):
        e = e + gl * e
        out.append(e)
        if abs(e) > cutoff:
            return np.array(out), True
    return np.array(out), False


def implicit_errors(gl, eta, n, cutoff):
    """Iterate e <- e / (1 - gl). Returns (errors, diverged)."""
    out = [eta]
    e = eta
    denom = 1.0 - gl
    for _ in range(n):
        e = e / denom
        out.append(e)
        if abs(e) > cutoff:
            return np.array(out), True
    return np.array(out), False


def scan_final_errors(lambdas, gammas, eta, n, implicit, cutoff):
    """|e_n| for every (lambda, gamma) cell; inf marks a diverged cell."""
    lambdas = np.asarray(lambdas, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    out = np.empty((lambdas.size, gammas.size))
    for i in range(lambdas.size):
        for j in range(gammas.size):
            gl = float(gammas[j]) * float(lambdas[i])
            e = eta
            if implicit:
                denom = 1.0 - gl
                for _ in range(n):
                    e = e / denom
                    if abs(e) > cutoff:
                        e = math.inf
                        break
            else:
                for _ in range(n):
                    e = e + gl * e
                    if abs(e) > cutoff:
                        e = math.inf
                        break
            out[i, j] = abs(e)
    return out
