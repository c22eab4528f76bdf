"""Rectified-flow machinery for action chunks.

The straight interpolation path a^tau = tau*a + (1-tau)*z has time derivative
a - z, so the velocity target is u = a - z and forward Euler integration from
pure noise at tau=0 reaches the clean chunk at tau=1. The pairing of target
and integrator is guaranteed by the exactness test (integrating the exact
field reproduces the chunk), independent of sign conventions elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA_ALPHA_DEFAULT = 1.0
BETA_BETA_DEFAULT = 1.5
EULER_STEPS_DEFAULT = 10


class FlowError(Exception):
    pass


def sample_tau(rng: np.random.Generator, alpha: float = BETA_ALPHA_DEFAULT,
               beta: float = BETA_BETA_DEFAULT) -> float:
    """One Beta(alpha, beta) draw in [0, 1); defaults weight noisier (low) times."""
    if alpha <= 0 or beta <= 0:
        raise FlowError(f"beta shape parameters must be positive, got ({alpha}, {beta})")
    tau = float(rng.beta(alpha, beta))
    return min(tau, np.nextafter(1.0, 0.0))


def sample_noise(rng: np.random.Generator, horizon: int, action_dim: int) -> np.ndarray:
    return rng.standard_normal((horizon, action_dim)).astype(np.float32)


def interpolate(chunk: np.ndarray, noise: np.ndarray, tau: float) -> np.ndarray:
    """tau * a + (1 - tau) * z, elementwise."""
    chunk = np.asarray(chunk, dtype=np.float32)
    noise = np.asarray(noise, dtype=np.float32)
    if chunk.shape != noise.shape:
        raise FlowError(f"chunk shape {chunk.shape} vs noise shape {noise.shape}")
    return (tau * chunk + (1.0 - tau) * noise).astype(np.float32)


def flow_target(chunk: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Velocity of the interpolation path: u = a - z."""
    chunk = np.asarray(chunk, dtype=np.float32)
    noise = np.asarray(noise, dtype=np.float32)
    if chunk.shape != noise.shape:
        raise FlowError(f"chunk shape {chunk.shape} vs noise shape {noise.shape}")
    return chunk - noise


def flow_loss(predicted: np.ndarray, target: np.ndarray) -> float:
    """Plain-array mean squared error (the tape-based loss lives in numerics.mse)."""
    predicted = np.asarray(predicted)
    target = np.asarray(target)
    if predicted.shape != target.shape:
        raise FlowError(f"shape mismatch {predicted.shape} vs {target.shape}")
    d = predicted - target
    return float(np.mean(d * d))


@dataclass
class EulerTrace:
    taus: list[float]
    fields: list[np.ndarray]


def euler_integrate(context, steps: int = EULER_STEPS_DEFAULT, rng: np.random.Generator = None,
                    noise: np.ndarray = None, record_trace: bool = False):
    """Integrate the learned velocity field from noise to a clean action chunk.

    `context` exposes `horizon`, `action_dim` and `velocity(chunk, tau)`; the
    backbone's action decoding session re-runs the action suffix against its
    cached prefix on every call. The initial chunk is z ~ N(0, I) (or the
    supplied noise); the result is clamped to [-1, 1].
    """
    if steps < 1:
        raise FlowError("steps must be >= 1")
    h, d = context.horizon, context.action_dim
    if noise is None:
        if rng is None:
            raise FlowError("euler_integrate needs an rng or an explicit noise draw")
        noise = sample_noise(rng, h, d)
    a = np.asarray(noise, dtype=np.float64).copy()
    delta = 1.0 / steps
    trace = EulerTrace([], []) if record_trace else None
    for k in range(steps):
        tau = k * delta
        v = np.asarray(context.velocity(a.astype(np.float32), tau), dtype=np.float64)
        if v.shape != (h, d):
            raise FlowError(f"velocity shape {v.shape}, expected {(h, d)}")
        if trace is not None:
            trace.taus.append(tau)
            trace.fields.append(v.astype(np.float32))
        a += delta * v
    out = np.clip(a, -1.0, 1.0).astype(np.float32)
    return (out, trace) if record_trace else out
