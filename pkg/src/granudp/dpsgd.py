"""DP-SGD: Poisson lots, per-example clipping, Gaussian noise, descent.

The noisy gradient for a lot is ``(sum_i clip(g_i) + N(0, sigma^2 C^2 I)) / L``
where ``L`` is the configured (expected) lot size, not the realised one.

Any model exposing ``params``, ``with_params``, ``per_example_grads`` and
``loss_and_grad_sum`` can be trained (see :mod:`granudp.models`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .accountant import PrivacyParams, account, steps_for_epochs

# spawn keys separating the random streams derived from one run seed
SAMPLING_STREAM = 0
NOISE_STREAM = 1
INIT_STREAM = 2

AccountantHook = Callable[[float, float, int], PrivacyParams]


class DivergenceError(FloatingPointError):
    """A lot produced a non-finite loss."""


def stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


@dataclass(frozen=True)
class DpSgdConfig:
    clip_bound: float
    noise_multiplier: float
    lot_size: int
    dataset_size: int
    epochs: float
    learning_rate: float
    seed: int = 0
    accumulation_chunk: int = 64
    # linear ramp of the step size over the first steps; it only rescales
    # already-noised gradients, so the privacy guarantee is unaffected
    warmup_steps: int = 0

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValueError(f"clip_bound must be > 0, got {self.clip_bound}")
        if not self.noise_multiplier >= 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if self.noise_multiplier > 0 and math.isinf(self.clip_bound):
            raise ValueError("noise requires a finite clip_bound")
        if self.dataset_size < 1:
            raise ValueError("dataset_size must be >= 1")
        if not 1 <= self.lot_size <= self.dataset_size:
            raise ValueError(f"lot_size must lie in [1, dataset_size], got {self.lot_size}")
        if not self.epochs > 0:
            raise ValueError("epochs must be > 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.accumulation_chunk < 1:
            raise ValueError("accumulation_chunk must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    @property
    def sampling_rate(self) -> float:
        return self.lot_size / self.dataset_size

    @property
    def steps(self) -> int:
        return steps_for_epochs(self.epochs, self.dataset_size, self.lot_size)

    @property
    def clips(self) -> bool:
        return math.isfinite(self.clip_bound)

    def learning_rate_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        return self.learning_rate


@dataclass
class TrainState:
    params: np.ndarray
    step: int
    sample_rng: np.random.Generator = field(repr=False)
    noise_rng: np.random.Generator = field(repr=False)

    @classmethod
    def start(cls, params: np.ndarray, seed: int) -> "TrainState":
        return cls(
            np.array(params, dtype=np.float64, copy=True),
            0,
            stream(seed, SAMPLING_STREAM),
            stream(seed, NOISE_STREAM),
        )


@dataclass(frozen=True)
class StepTrace:
    step: int
    lot_indices: np.ndarray
    preclip_norms: np.ndarray  # empty when clipping is disabled
    postclip_norms: np.ndarray
    noise_norm: float
    update_norm: float
    mean_loss: float

    CSV_FIELDS = ("step", "lot_size_realized", "mean_loss", "mean_preclip_norm", "frac_clipped")

    def row(self, clip_bound: float) -> dict:
        pre = self.preclip_norms
        return {
            "step": self.step,
            "lot_size_realized": int(self.lot_indices.size),
            "mean_loss": self.mean_loss,
            "mean_preclip_norm": float(pre.mean()) if pre.size else float("nan"),
            "frac_clipped": float((pre > clip_bound).mean()) if pre.size else 0.0,
        }


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted distinct indices, each of ``range(n)`` kept independently with probability q."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling probability must lie in [0, 1], got {q}")
    return np.flatnonzero(rng.random(n) < q)


def clip_gradient(g: np.ndarray, clip_bound: float) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    return g / max(1.0, float(np.linalg.norm(g)) / clip_bound)


def noisy_lot_update(
    state: TrainState,
    model,
    lot: Sequence,
    cfg: DpSgdConfig,
    lot_indices: Optional[np.ndarray] = None,
) -> tuple[TrainState, StepTrace]:
    theta = state.params
    if theta.shape != (model.n_params,):
        raise ValueError(f"state has {theta.size} parameters, model expects {model.n_params}")
    current = model.with_params(theta)
    n_params = theta.size

    losses: list[np.ndarray] = []
    pre: list[np.ndarray] = []
    post: list[np.ndarray] = []
    grad_sum = np.zeros(n_params)
    if cfg.clips:
        for start in range(0, len(lot), cfg.accumulation_chunk):
            chunk_losses, grads = current.per_example_grads(lot[start : start + cfg.accumulation_chunk])
            norms = np.linalg.norm(grads, axis=1)
            grads = grads / np.maximum(1.0, norms / cfg.clip_bound)[:, None]
            losses.append(chunk_losses)
            pre.append(norms)
            post.append(np.linalg.norm(grads, axis=1))
            grad_sum += grads.sum(axis=0)
    elif len(lot):
        chunk_losses, grad_sum = current.loss_and_grad_sum(lot)
        losses.append(chunk_losses)

    if cfg.noise_multiplier > 0:
        noise = state.noise_rng.normal(0.0, cfg.noise_multiplier * cfg.clip_bound, size=n_params)
        noise_norm = float(np.linalg.norm(noise))
        grad_sum = grad_sum + noise
    else:
        noise_norm = 0.0

    update = cfg.learning_rate_at(state.step) * grad_sum / cfg.lot_size
    all_losses = np.concatenate(losses) if losses else np.zeros(0)
    trace = StepTrace(
        step=state.step,
        lot_indices=np.asarray(lot_indices if lot_indices is not None else np.arange(len(lot)), dtype=np.int64),
        preclip_norms=np.concatenate(pre) if pre else np.zeros(0),
        postclip_norms=np.concatenate(post) if post else np.zeros(0),
        noise_norm=noise_norm,
        update_norm=float(np.linalg.norm(update)),
        mean_loss=float(all_losses.mean()) if all_losses.size else float("nan"),
    )
    new_state = TrainState(theta - update, state.step + 1, state.sample_rng, state.noise_rng)
    return new_state, trace


def rdp_hook(delta: float) -> AccountantHook:
    def hook(sigma: float, q: float, steps: int) -> PrivacyParams:
        return account(sigma, q, steps, delta)

    return hook


@dataclass
class TrainResult:
    state: TrainState
    privacy: Optional[PrivacyParams]
    loss_history: list[float]
    traces: list[dict]
    max_postclip_norm: float

    @property
    def params(self) -> np.ndarray:
        return self.state.params


def train(
    model,
    dataset: Sequence,
    cfg: DpSgdConfig,
    accountant_hook: Optional[AccountantHook] = None,
    on_step: Optional[Callable[[StepTrace], None]] = None,
) -> TrainResult:
    """Run ``cfg.steps`` noisy lots from ``model.params``.

    Privacy is accounted only when noise is added and a hook is given; a
    noiseless run has no finite guarantee and reports ``None``. Raises
    :class:`DivergenceError` as soon as a lot's mean loss is not finite.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if n != cfg.dataset_size:
        raise ValueError(f"config dataset_size={cfg.dataset_size} but dataset has {n} examples")

    privacy = None
    if accountant_hook is not None and cfg.noise_multiplier > 0:
        privacy = accountant_hook(cfg.noise_multiplier, cfg.sampling_rate, cfg.steps)

    state = TrainState.start(model.params, cfg.seed)
    history: list[float] = []
    rows: list[dict] = []
    max_post = 0.0
    for _ in range(cfg.steps):
        idx = poisson_sample(n, cfg.sampling_rate, state.sample_rng)
        state, trace = noisy_lot_update(state, model, [dataset[i] for i in idx], cfg, idx)
        if idx.size and not math.isfinite(trace.mean_loss):
            raise DivergenceError(f"non-finite loss at step {trace.step}")
        history.append(trace.mean_loss)
        rows.append(trace.row(cfg.clip_bound))
        if trace.postclip_norms.size:
            max_post = max(max_post, float(trace.postclip_norms.max()))
        if on_step is not None:
            on_step(trace)
    return TrainResult(state, privacy, history, rows, max_post)
