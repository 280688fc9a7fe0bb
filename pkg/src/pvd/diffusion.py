"""Noise schedule, analog-bit scaling and deterministic DDIM sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument

T_TRAIN = 1000
INFERENCE_STEPS = 4
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    b: float
    gamma: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.gamma.setflags(write=False)


@dataclass(frozen=True)
class DiffusionState:
    x: np.ndarray
    t: int


def make_schedule(T: int = T_TRAIN, b: float = 1.0, s: float = COSINE_OFFSET) -> DiffusionSchedule:
    if T < 1:
        raise InvalidArgument(f"schedule needs T >= 1, got {T}")
    u = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((u + s) / (1 + s) * np.pi / 2) ** 2
    gamma = f / f[0]
    gamma[0] = 1.0
    gamma[-1] = 0.0
    return DiffusionSchedule(T=T, b=float(b), gamma=gamma)


def scale(v, b: float = 1.0) -> np.ndarray:
    """Map values in [0, 1] to analog space [-b, b]."""
    return (2.0 * np.asarray(v) - 1.0) * b


def descale(x, b: float = 1.0) -> np.ndarray:
    """Clamp analog values to [-b, b] and map back to [0, 1]."""
    x = np.clip(np.asarray(x), -b, b)
    return (x / b + 1.0) / 2.0


def _check_t(t: int, sched: DiffusionSchedule):
    if not 0 <= t <= sched.T:
        raise InvalidArgument(f"step {t} outside [0, {sched.T}]")


def forward_diffuse(x0, t: int, eps, sched: DiffusionSchedule) -> DiffusionState:
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise InvalidArgument(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    _check_t(t, sched)
    g = sched.gamma[t]
    return DiffusionState(np.sqrt(g) * x0 + np.sqrt(1.0 - g) * eps, t)


def forward_diffuse_batch(x0: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Row-wise forward noising with one step index per row."""
    g = sched.gamma[np.asarray(t)][:, None]
    return (np.sqrt(g) * x0 + np.sqrt(1.0 - g) * eps).astype(x0.dtype)


def ddim_step(state: DiffusionState, x0_hat, t_next: int, sched: DiffusionSchedule) -> DiffusionState:
    """Deterministic (eta = 0) DDIM update from ``state.t`` to ``t_next``."""
    if t_next >= state.t:
        raise InvalidArgument(f"t_next={t_next} must be below t={state.t}")
    _check_t(t_next, sched)
    b = sched.b
    x0_hat = np.clip(np.asarray(x0_hat), -b, b)
    g, g_next = sched.gamma[state.t], sched.gamma[t_next]
    if g >= 1.0:
        eps_hat = np.zeros_like(x0_hat)
    else:
        eps_hat = (state.x - np.sqrt(g) * x0_hat) / np.sqrt(1.0 - g)
    x_next = np.sqrt(g_next) * x0_hat + np.sqrt(1.0 - g_next) * eps_hat
    return DiffusionState(x_next.astype(np.result_type(state.x, x0_hat)), t_next)


def inference_steps(T: int, steps: int) -> list[int]:
    """Uniformly spaced step indices ``T = t_0 > t_1 > ... > t_steps = 0``."""
    if steps < 1:
        raise InvalidArgument(f"need at least one sampling step, got {steps}")
    ts = [int(round(T * (steps - k) / steps)) for k in range(steps + 1)]
    if len(set(ts)) != len(ts):
        raise InvalidArgument(f"{steps} steps do not fit in T={T}")
    return ts


Denoiser = Callable[[np.ndarray, object, int], np.ndarray]


def initial_noise(seeds: Sequence[int], dim: int) -> np.ndarray:
    return np.stack([np.random.default_rng(int(s)).standard_normal(dim) for s in seeds])


def run_chain(denoiser: Denoiser, condition, x_T: np.ndarray, steps: int, sched: DiffusionSchedule,
              trajectory: list | None = None) -> np.ndarray:
    """Run the reverse chain from ``x_T`` and return the final analog state."""
    ts = inference_steps(sched.T, steps)
    state = DiffusionState(x_T, ts[0])
    for t_next in ts[1:]:
        x0_hat = denoiser(state.x, condition, state.t)
        state = ddim_step(state, x0_hat, t_next, sched)
        if trajectory is not None:
            trajectory.append((state.t, np.clip(np.asarray(x0_hat), -sched.b, sched.b), state.x))
    return state.x


def sample(denoiser: Denoiser, condition, steps: int = INFERENCE_STEPS, sched: DiffusionSchedule | None = None,
           rng_seed: int = 0, dim: int = 76, trajectory: list | None = None) -> np.ndarray:
    """Generate one vertex vector in [0, 1] from Gaussian noise seeded by ``rng_seed``."""
    sched = sched or make_schedule()
    x_T = initial_noise([rng_seed], dim)
    x0 = run_chain(denoiser, condition, x_T, steps, sched, trajectory)
    return descale(x0[0], sched.b)


def sample_batch(denoiser: Denoiser, condition, seeds: Sequence[int], dim: int, steps: int = INFERENCE_STEPS,
                 sched: DiffusionSchedule | None = None, dtype=np.float32) -> np.ndarray:
    """Batched sampling where row ``k`` draws its noise from ``seeds[k]``."""
    sched = sched or make_schedule()
    x_T = initial_noise(seeds, dim).astype(dtype)
    return descale(run_chain(denoiser, condition, x_T, steps, sched), sched.b)
