"""Per-layer feature divergence between two datasets.

Each channel of a layer's feature map is summarized by a Gaussian fitted
over the whole dataset (all samples and positions). Two fits are compared
with the channel-averaged symmetric KL divergence::

    KL(A||B) = log(sB / sA) + (sA^2 + (mA - mB)^2) / (2 sB^2) - 1/2
    D(A, B)  = mean_c [KL(A_c||B_c) + KL(B_c||A_c)]
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .layers import Branch, Mode
from .tensor import Tensor

SIGMA_FLOOR = 1e-8


@dataclass
class ChannelAccumulator:
    """Mergeable per-channel count / mean / sum of squared deviations."""

    count: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None

    def update(self, feats: np.ndarray) -> "ChannelAccumulator":
        x = np.asarray(feats, dtype=np.float64)
        if x.ndim < 2:
            raise ValueError(f"features need a channel axis, got shape {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        n = x.size // x.shape[1]
        if n == 0:
            return self
        mean = x.mean(axis=axes)
        dev = x - mean.reshape((1, -1) + (1,) * (x.ndim - 2))
        m2 = (dev * dev).sum(axis=axes)
        return self.merge(ChannelAccumulator(n, mean, m2), inplace=True)

    def merge(self, other: "ChannelAccumulator", inplace: bool = False) -> "ChannelAccumulator":
        target = self if inplace else ChannelAccumulator(self.count, self.mean, self.m2)
        if other.count == 0:
            return target
        if target.count == 0:
            target.count, target.mean, target.m2 = other.count, other.mean.copy(), other.m2.copy()
            return target
        n = target.count + other.count
        delta = other.mean - target.mean
        target.mean = target.mean + delta * (other.count / n)
        target.m2 = target.m2 + other.m2 + delta * delta * (target.count * other.count / n)
        target.count = n
        return target

    def fit(self) -> "GaussianFit":
        if self.count < 2:
            raise ValueError("need at least 2 values per channel to fit")
        std = np.sqrt(self.m2 / self.count)
        return GaussianFit(self.mean.copy(), np.maximum(std, SIGMA_FLOOR))


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    std: np.ndarray


def channel_gaussian_fit(batches) -> GaussianFit:
    """Fit per-channel Gaussians over a stream of (N, C, ...) feature arrays."""
    acc = ChannelAccumulator()
    for b in batches:
        acc.update(b.data if isinstance(b, Tensor) else b)
    if acc.count == 0:
        raise ValueError("empty feature stream")
    return acc.fit()


def gaussian_kl(mu_a, sd_a, mu_b, sd_b) -> np.ndarray:
    mu_a, sd_a, mu_b, sd_b = (np.asarray(v, dtype=np.float64) for v in (mu_a, sd_a, mu_b, sd_b))
    if np.any(sd_a <= 0) or np.any(sd_b <= 0):
        raise ValueError("standard deviations must be positive")
    return np.log(sd_b / sd_a) + (sd_a**2 + (mu_a - mu_b) ** 2) / (2 * sd_b**2) - 0.5


def symmetric_kl_channels(a: GaussianFit, b: GaussianFit) -> np.ndarray:
    return gaussian_kl(a.mean, a.std, b.mean, b.std) + gaussian_kl(b.mean, b.std, a.mean, a.std)


def symmetric_kl(a: GaussianFit, b: GaussianFit) -> float:
    """Channel-averaged symmetric KL between two per-channel fits."""
    return float(symmetric_kl_channels(a, b).mean())


@dataclass
class DivergenceReport:
    dataset_a: str
    dataset_b: str
    layers: list[str]
    divergence: dict[str, float]
    per_channel: dict[str, list[float]] = field(default_factory=dict)
    branch: str = Branch.MAIN.value

    def to_dict(self) -> dict:
        return {
            "dataset_a": self.dataset_a,
            "dataset_b": self.dataset_b,
            "branch": self.branch,
            "layers": self.layers,
            "divergence": self.divergence,
            "per_channel": self.per_channel,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        width = max([len("layer")] + [len(n) for n in self.layers])
        lines = [f"{'layer':<{width}}  D({self.dataset_a}||{self.dataset_b})"]
        lines += [f"{n:<{width}}  {self.divergence[n]:.6f}" for n in self.layers]
        return "\n".join(lines) + "\n"

    def to_csv(self, label: str = "") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "layer", "dataset_a", "dataset_b", "divergence"])
        for n in self.layers:
            w.writerow([label, n, self.dataset_a, self.dataset_b, repr(self.divergence[n])])
        return buf.getvalue()


def layer_fits(model, data: Dataset, layers: list[str], branch=Branch.MAIN, batch_size: int = 256) -> dict[str, GaussianFit]:
    """Eval-mode forward over ``data`` collecting per-layer Gaussian fits."""
    accs = {n: ChannelAccumulator() for n in layers}
    model.set_branch(branch)
    try:
        for start in range(0, len(data), batch_size):
            taps: dict[str, Tensor] = {}
            model(Tensor(data.images[start : start + batch_size]), Mode.EVAL, taps=taps)
            for n in layers:
                accs[n].update(taps[n].data)
    finally:
        model.set_branch(Branch.MAIN)
    return {n: a.fit() for n, a in accs.items()}


def available_layers(model) -> list[str]:
    if hasattr(model, "suffix_layer_names"):
        return model.suffix_layer_names()
    return [n for n, _ in model.norm_layers()]


def divergence_report(model, data_a: Dataset, data_b: Dataset, layers=None, branch=Branch.MAIN,
                      batch_size: int = 256) -> DivergenceReport:
    """Per-layer symmetric KL between the features of two datasets.

    ``layers`` defaults to every BN output in the model's fine-tuned suffix
    (or every BN output for an unsplit model), in forward order.
    """
    known = [n for n, _ in model.norm_layers()]
    layers = list(layers) if layers is not None else available_layers(model)
    for n in layers:
        if n not in known:
            raise KeyError(f"unknown layer {n!r}")
    fa = layer_fits(model, data_a, layers, branch, batch_size)
    fb = layer_fits(model, data_b, layers, branch, batch_size)
    per = {n: symmetric_kl_channels(fa[n], fb[n]) for n in layers}
    return DivergenceReport(
        dataset_a=data_a.name,
        dataset_b=data_b.name,
        layers=layers,
        divergence={n: float(per[n].mean()) for n in layers},
        per_channel={n: per[n].tolist() for n in layers},
        branch=Branch(branch).value,
    )
