"""Adversarial perturbation of per-channel feature statistics.

Given clean features ``f`` with per-channel batch mean ``mu``, the
multiplicative perturbation produces::

    f_adv = delta_sigma * (f - mu) + delta_mu * mu

so the perturbed batch has mean ``delta_mu * mu`` and standard deviation
``|delta_sigma| * sigma``. PGD maximizes the downstream cross-entropy over
``(delta_mu, delta_sigma)`` inside the box ``|delta - 1| <= epsilon``.

The additive variant stores offsets ``(a_mu, a_sigma)`` instead and moves
the statistics to ``(mu + a_mu, sigma + a_sigma)``; offsets are clipped to
``epsilon`` times the largest channel mean / std of the current batch.
"""

from __future__ import annotations

import contextlib
import enum
import itertools
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import Branch, Mode
from .tensor import ShapeError, Tape, Tensor

SIGMA_FLOOR = 1e-8


class PerturbMode(str, enum.Enum):
    MULTIPLICATIVE = "multiplicative"
    ADDITIVE = "additive"


class InitMode(str, enum.Enum):
    IDENTITY = "identity"
    UNIFORM = "uniform"


def repeats_for(epsilon: float) -> int:
    """Step count used for an epsilon sweep with step size 0.2."""
    # guard against 0.6 / 0.2 == 2.9999999999999996
    return int(math.floor(epsilon / 0.2 + 1e-9)) + 1


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 1.1
    tau: float = 0.2
    steps: int = 6
    mode: str = PerturbMode.MULTIPLICATIVE.value
    init: str = InitMode.IDENTITY.value
    repeats_rule: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", PerturbMode(self.mode).value)
        object.__setattr__(self, "init", InitMode(self.init).value)
        if self.repeats_rule:
            object.__setattr__(self, "steps", repeats_for(self.epsilon))

    def validate(self) -> None:
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


@dataclass
class StatPerturbation:
    """Per-channel factors (multiplicative) or offsets (additive), float64."""

    delta_mu: np.ndarray
    delta_sigma: np.ndarray
    mode: str = PerturbMode.MULTIPLICATIVE.value

    @classmethod
    def identity(cls, channels: int, mode=PerturbMode.MULTIPLICATIVE) -> "StatPerturbation":
        mode = PerturbMode(mode)
        fill = 1.0 if mode is PerturbMode.MULTIPLICATIVE else 0.0
        return cls(np.full(channels, fill), np.full(channels, fill), mode.value)

    @property
    def channels(self) -> int:
        return self.delta_mu.shape[0]

    def copy(self) -> "StatPerturbation":
        return StatPerturbation(self.delta_mu.copy(), self.delta_sigma.copy(), self.mode)


@dataclass(frozen=True)
class Bounds:
    """Per-coordinate box for (delta_mu, delta_sigma)."""

    mu_lo: float
    mu_hi: float
    sigma_lo: float
    sigma_hi: float
    # set for the multiplicative box |delta - 1| <= epsilon
    epsilon: float | None = None

    @classmethod
    def for_config(cls, epsilon: float, mode, stats=None) -> "Bounds":
        if PerturbMode(mode) is PerturbMode.MULTIPLICATIVE:
            return cls(1 - epsilon, 1 + epsilon, 1 - epsilon, 1 + epsilon, epsilon)
        if stats is None:
            raise ValueError("additive bounds need the batch statistics")
        mu_max = float(np.max(np.abs(stats[0])))
        sigma_max = float(np.max(stats[1]))
        return cls(-epsilon * mu_max, epsilon * mu_max, -epsilon * sigma_max, epsilon * sigma_max)


def feature_moments(f) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std (no eps) over (N, H, W)."""
    x = f.data if isinstance(f, Tensor) else np.asarray(f)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW features, got shape {x.shape}")
    mean = x.mean(axis=(0, 2, 3))
    c = x - mean[None, :, None, None]
    return mean, np.sqrt((c * c).mean(axis=(0, 2, 3)))


def _as_vec(v, dtype) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor._wrap(np.asarray(v, dtype=dtype))


def apply_perturbation(f, delta_mu, delta_sigma, mode=PerturbMode.MULTIPLICATIVE, stats=None) -> Tensor:
    """Move the batch statistics of ``f`` according to the perturbation.

    ``delta_mu``/``delta_sigma`` may be arrays or tape-tracked tensors. When
    ``stats`` (mean, std) is omitted it is computed from ``f`` on the tape, so
    the result is differentiable in ``f`` including through its statistics;
    supplied stats are treated as constants.
    """
    mode = PerturbMode(mode)
    if f.ndim != 4:
        raise ShapeError(f"expected NCHW features, got shape {f.shape}")
    c = f.shape[1]
    dmu, dsig = _as_vec(delta_mu, f.dtype), _as_vec(delta_sigma, f.dtype)
    if dmu.shape != (c,) or dsig.shape != (c,):
        raise ShapeError(f"perturbation of length {dmu.shape}/{dsig.shape} vs features {f.shape}")

    if stats is None:
        mu = T.channel_mean(f)
        centered = T.sub(f, mu)
        sigma = T.sqrt(T.channel_mean(T.square(centered))) if mode is PerturbMode.ADDITIVE else None
    else:
        mu = Tensor._wrap(np.asarray(stats[0], dtype=f.dtype))
        centered = T.sub(f, mu)
        sigma = Tensor._wrap(np.asarray(stats[1], dtype=f.dtype))

    if mode is PerturbMode.MULTIPLICATIVE:
        return T.add(T.mul(centered, dsig), T.mul(dmu, mu))

    if np.any(sigma.data < SIGMA_FLOOR):
        raise ValueError("additive perturbation needs every channel std >= 1e-8")
    scale = T.div(T.add(sigma, dsig), sigma)
    return T.add(T.mul(centered, scale), T.add(mu, dmu))


def pgd_step(delta: StatPerturbation, grad_mu, grad_sigma, tau: float, bounds) -> StatPerturbation:
    """Signed-gradient ascent step, then projection onto ``bounds``.

    ``bounds`` is a :class:`Bounds` or, for the multiplicative mode, just
    epsilon. ``sign(0) == 0``. The projection is exact: a clipped coordinate never
    sits outside the box after floating-point rounding.
    """
    if not isinstance(bounds, Bounds):
        bounds = Bounds.for_config(float(bounds), delta.mode)
    gm, gs = np.asarray(grad_mu), np.asarray(grad_sigma)
    if gm.shape != delta.delta_mu.shape or gs.shape != delta.delta_sigma.shape:
        raise ShapeError("gradient shape does not match perturbation")
    mu = _project(delta.delta_mu + tau * np.sign(gm), bounds.mu_lo, bounds.mu_hi, bounds.epsilon)
    sig = _project(delta.delta_sigma + tau * np.sign(gs), bounds.sigma_lo, bounds.sigma_hi, bounds.epsilon)
    return StatPerturbation(mu, sig, delta.mode)


def _project(v: np.ndarray, lo: float, hi: float, eps: float | None) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=np.float64), lo, hi)
    if eps is not None:
        # 1 +/- eps is rounded; make |v - 1| <= eps hold exactly as well
        for _ in range(4):
            bad = np.abs(v - 1.0) > eps
            if not bad.any():
                break
            v = np.where(bad, np.nextafter(v, 1.0), v)
    return v


def _init_delta(c: int, cfg: AttackConfig, bounds: Bounds, rng) -> StatPerturbation:
    delta = StatPerturbation.identity(c, cfg.mode)
    if InitMode(cfg.init) is InitMode.UNIFORM:
        if rng is None:
            raise ValueError("uniform initialization needs an rng")
        delta.delta_mu = rng.uniform(bounds.mu_lo, bounds.mu_hi, c)
        delta.delta_sigma = rng.uniform(bounds.sigma_lo, bounds.sigma_hi, c)
    return delta


@contextlib.contextmanager
def _aux_branch(model):
    layers = [layer for _, layer in model.norm_layers() if hasattr(layer, "active_branch")] if hasattr(
        model, "norm_layers"
    ) else []
    saved = [layer.active_branch for layer in layers]
    for layer in layers:
        layer.active_branch = Branch.AUX
    try:
        yield
    finally:
        for layer, b in zip(layers, saved):
            layer.active_branch = b


def suffix_objective(model) -> tuple[Callable[[Tensor], Tensor], object]:
    """Logit function used by the attack: aux branch, batch stats, no EMA updates."""
    if callable(getattr(model, "suffix", None)):
        return (lambda f: model.suffix(f, Mode.TRAIN, update_stats=False)), model.net
    return model, None


def advbn_forward(f, suffix, labels, cfg: AttackConfig, rng=None) -> tuple[Tensor, StatPerturbation]:
    """Run PGD on the statistics of ``f`` against ``suffix``.

    ``suffix`` is either a :class:`~advbn.models.SplitModel` (evaluated on its
    aux branch in train mode with running-stat updates suppressed) or any
    callable mapping features to logits. Returns the perturbed features,
    detached from every tape, and the final perturbation.
    """
    cfg.validate()
    labels = np.asarray(labels)
    feats = Tensor._wrap(np.asarray(f.data if isinstance(f, Tensor) else f))
    if feats.ndim != 4:
        raise ShapeError(f"expected NCHW features, got shape {feats.shape}")
    if labels.shape != (feats.shape[0],):
        raise ShapeError(f"labels {labels.shape} vs batch {feats.shape[0]}")
    stats = feature_moments(feats)
    bounds = Bounds.for_config(cfg.epsilon, cfg.mode, stats)
    delta = _init_delta(feats.shape[1], cfg, bounds, rng)
    logits_fn, owner = suffix_objective(suffix)

    ctx = _aux_branch(owner) if owner is not None else contextlib.nullcontext()
    with ctx:
        for _ in range(cfg.steps):
            gm, gs = delta_gradient(feats, delta, logits_fn, labels, stats)
            delta = pgd_step(delta, gm, gs, cfg.tau, bounds)
    f_adv = apply_perturbation(feats, delta.delta_mu, delta.delta_sigma, delta.mode, stats)
    return f_adv.detach(), delta


def delta_gradient(feats: Tensor, delta: StatPerturbation, logits_fn, labels, stats=None):
    """Gradient of the batch cross-entropy w.r.t. (delta_mu, delta_sigma)."""
    with Tape() as tape:
        dmu = Tensor(delta.delta_mu, dtype=feats.dtype)
        dsig = Tensor(delta.delta_sigma, dtype=feats.dtype)
        tape.watch(dmu, dsig)
        loss = T.softmax_cross_entropy(
            logits_fn(apply_perturbation(feats, dmu, dsig, delta.mode, stats)), labels
        )
    gm, gs = T.backward(loss, [dmu, dsig])
    return gm.astype(np.float64), gs.astype(np.float64)


def perturbed_loss(feats, delta: StatPerturbation, logits_fn, labels, stats=None) -> float:
    """Cross-entropy of ``logits_fn`` on the perturbed features (no tape)."""
    out = apply_perturbation(Tensor._wrap(np.asarray(feats.data)), delta.delta_mu, delta.delta_sigma, delta.mode, stats)
    return T.softmax_cross_entropy(logits_fn(out), labels).item()


def attack_losses(f, suffix, labels, cfg: AttackConfig, rng=None) -> tuple[float, float]:
    """(clean, adversarial) cross-entropy of one batch under the attack objective."""
    feats = Tensor._wrap(np.asarray(f.data if isinstance(f, Tensor) else f))
    _, delta = advbn_forward(feats, suffix, labels, cfg, rng)
    stats = feature_moments(feats)
    logits_fn, owner = suffix_objective(suffix)
    ctx = _aux_branch(owner) if owner is not None else contextlib.nullcontext()
    with ctx:
        clean = perturbed_loss(feats, StatPerturbation.identity(feats.shape[1], delta.mode), logits_fn, labels, stats)
        adv = perturbed_loss(feats, delta, logits_fn, labels, stats)
    return clean, adv


class GridTooLarge(ValueError):
    pass


def grid_search_oracle(f, suffix, labels, epsilon: float, grid_points: int):
    """Exhaustive search of the multiplicative box on a regular grid.

    Returns ``(best_delta, best_loss)``. Ties keep the lowest grid index
    (lexicographic over mu coordinates, then sigma coordinates).
    """
    feats = Tensor._wrap(np.asarray(f.data if isinstance(f, Tensor) else f))
    c = feats.shape[1]
    if c > 4 or grid_points > 7:
        raise GridTooLarge(f"grid of {grid_points}^{2 * c} points exceeds the cap (C<=4, points<=7)")
    labels = np.asarray(labels)
    stats = feature_moments(feats)
    logits_fn, owner = suffix_objective(suffix)
    axis = np.linspace(1 - epsilon, 1 + epsilon, grid_points)
    best, best_loss = None, -np.inf
    ctx = _aux_branch(owner) if owner is not None else contextlib.nullcontext()
    with ctx:
        for point in itertools.product(axis, repeat=2 * c):
            d = StatPerturbation(np.array(point[:c]), np.array(point[c:]))
            loss = perturbed_loss(feats, d, logits_fn, labels, stats)
            if loss > best_loss:
                best, best_loss = d, loss
    return best, best_loss
