"""Rendering AdvBN-perturbed features back to images.

A small decoder is trained to invert the frozen prefix of a split
classifier. Perturbed features from the attack are then decoded, which
shows in image space what a statistics shift at the split point looks like.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attack import AttackConfig, advbn_forward, repeats_for
from .data import Dataset
from .layers import Branch, Mode
from .models import SplitModel
from .tensor import Tape, Tensor
from .train import Adam, TrainingDiverged

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- PPM


def to_bytes(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8, rounding half up."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    img = np.clip(img, 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(image: np.ndarray, path) -> None:
    """Binary P6, maxval 255, row-major RGB."""
    px = to_bytes(image)
    h, w, _ = px.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm`; returns (H, W, 3) uint8."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError(f"{path}: unsupported maxval {parts[2]!r}")
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {data.size}")
    return data.reshape(h, w, 3)


def montage(rows: list[list[np.ndarray]], gap: int = 1) -> np.ndarray:
    """Tile (3, H, W) images into a grid with white separators."""
    h, w = rows[0][0].shape[1:]
    nr, nc = len(rows), max(len(r) for r in rows)
    out = np.ones((3, nr * h + (nr - 1) * gap, nc * w + (nc - 1) * gap))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            out[:, i * (h + gap) : i * (h + gap) + h, j * (w + gap) : j * (w + gap) + w] = img
    return out


# ---------------------------------------------------------------- decoder


@dataclass
class DecoderConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0


@dataclass
class Decoder:
    """Nearest-neighbour upsampling + conv stack; no skip connections."""

    layers: list[tuple[str, Tensor | None, Tensor | None]]
    recon_loss: float = float("nan")
    psnr: float = float("nan")
    history: list[float] = field(default_factory=list)

    @classmethod
    def for_prefix(cls, sm: SplitModel, seed: int = 0) -> "Decoder":
        cfg = sm.cfg
        n_prefix_stages = len(sm.prefix_units) - 1
        c = cfg.width * 2 ** (n_prefix_stages - 1)
        rng = np.random.default_rng([seed, 7])
        layers: list[tuple[str, Tensor | None, Tensor | None]] = []

        def conv(cin, cout):
            w = Tensor(rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / (cin * 9)))
            return ("conv", w, Tensor(np.zeros(cout)))

        for _ in range(n_prefix_stages - 1):
            nxt = max(cfg.width, c // 2)
            layers += [("up", None, None), conv(c, nxt), ("relu", None, None)]
            c = nxt
        layers += [conv(c, c), ("relu", None, None), conv(c, cfg.in_channels)]
        return cls(layers)

    def parameters(self) -> list[Tensor]:
        out = []
        for _, w, b in self.layers:
            if w is not None:
                out += [w, b]
        return out

    def __call__(self, f) -> Tensor:
        x = f
        for kind, w, b in self.layers:
            if kind == "up":
                x = T.upsample_nearest(x, 2)
            elif kind == "relu":
                x = T.relu(x)
            else:
                x = T.add(T.conv2d(x, w, 1, 1), b)
        return x


def psnr(recon: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.clip(recon, 0, 1).astype(np.float64) - target) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def reconstruct(sm: SplitModel, decoder: Decoder, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        f = sm.prefix(Tensor(images[start : start + batch_size]), Mode.EVAL)
        out.append(decoder(f).data)
    return np.concatenate(out)


def train_decoder(sm: SplitModel, data: Dataset, cfg: DecoderConfig, held_out: Dataset | None = None) -> Decoder:
    """Fit a decoder to invert ``sm.prefix`` under pixel L2; prefix stays frozen.

    ``cfg.epochs == 0`` returns the untrained decoder (still scored).
    """
    dec = Decoder.for_prefix(sm, cfg.seed)
    params = dec.parameters()
    opt = Adam(params)
    order_rng = np.random.default_rng([cfg.seed, 8])
    feats = [
        sm.prefix(Tensor(data.images[s : s + 256]), Mode.EVAL).data for s in range(0, len(data), 256)
    ]
    feats = np.concatenate(feats)
    total_steps = cfg.epochs * math.ceil(len(data) / cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            lr = 0.5 * cfg.lr * (1 + math.cos(math.pi * step / total_steps))
            with Tape() as tape:
                tape.watch(*params)
                loss = T.mse_loss(dec(Tensor._wrap(feats[sel])), Tensor._wrap(data.images[sel]))
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"decoder loss became {loss.item()} in epoch {epoch}")
            opt.step(T.backward(loss, params), lr)
            dec.history.append(loss.item())
            step += 1
    ref = held_out if held_out is not None else data
    recon = reconstruct(sm, dec, ref.images)
    dec.recon_loss = float(np.mean((recon - ref.images) ** 2))
    dec.psnr = psnr(recon, ref.images)
    return dec


# ---------------------------------------------------------------- perturbed renders


@dataclass
class RenderResult:
    epsilons: list[float]
    images: np.ndarray  # (n_inputs, n_eps, 3, H, W), clipped to [0, 1]
    batches: list[list[int]]
    steps: list[int]

    def column(self, j: int) -> np.ndarray:
        return self.images[:, j]


def render_perturbed(
    images: np.ndarray,
    labels: np.ndarray,
    sm: SplitModel,
    decoder: Decoder,
    epsilons=(0.0, 0.5, 1.1, 1.5),
    tau: float = 0.2,
    steps: int | None = None,
    batch_size: int = 32,
) -> RenderResult:
    """Decode AdvBN outputs for each epsilon in the sweep.

    Batches are taken in index order. ``epsilon == 0`` is the plain
    reconstruction ``decoder(prefix(x))``. With ``steps=None`` each epsilon
    uses the repeats rule ``floor(eps / 0.2) + 1``.
    """
    n = len(images)
    out = np.empty((n, len(epsilons)) + images.shape[1:], dtype=np.float64)
    batches = [list(range(s, min(s + batch_size, n))) for s in range(0, n, batch_size)]
    used_steps = [0 if e == 0 else (steps or repeats_for(e)) for e in epsilons]
    for sel in batches:
        f = sm.prefix(Tensor(images[sel]), Mode.EVAL)
        for j, eps in enumerate(epsilons):
            if eps == 0:
                feats = f
            else:
                cfg = AttackConfig(epsilon=eps, tau=tau, steps=used_steps[j])
                feats, _ = advbn_forward(f, sm, labels[sel], cfg)
            out[sel, j] = np.clip(decoder(feats).data, 0.0, 1.0)
    sm.set_branch(Branch.MAIN)
    return RenderResult(list(epsilons), out, batches, used_steps)


def export_render(result: RenderResult, outdir, indices=None, prefix: str = "render") -> dict:
    """Write one PPM per (input, epsilon), one grid per batch, and an index JSON."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    idx = list(range(len(result.images))) if indices is None else list(indices)
    files = []
    for i in idx:
        for j, eps in enumerate(result.epsilons):
            name = f"{prefix}_{i:04d}_eps{eps:.2f}.ppm"
            write_ppm(result.images[i, j], outdir / name)
            files.append({"input": i, "epsilon": eps, "file": name})
    grids = []
    for b, sel in enumerate(result.batches):
        rows = [[result.images[i, j] for j in range(len(result.epsilons))] for i in sel if i in idx]
        if not rows:
            continue
        name = f"{prefix}_grid_{b:03d}.ppm"
        write_ppm(montage(rows), outdir / name)
        grids.append({"batch": b, "inputs": sel, "file": name, "columns": result.epsilons})
    index = {"epsilons": result.epsilons, "steps": result.steps, "batches": result.batches, "images": files, "grids": grids}
    (outdir / f"{prefix}_index.json").write_text(json.dumps(index, indent=2))
    return index
