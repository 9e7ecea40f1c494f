"""Pretraining, dual-loss AdvBN fine-tuning, evaluation, checkpoints, timing."""

from __future__ import annotations

import copy
import enum
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .attack import AttackConfig, advbn_forward
from .data import Dataset, augment_batch
from .layers import Branch, DualBNLayer, Mode
from .models import MiniResNet, ModelConfig, SplitModel, split
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class Arm(str, enum.Enum):
    """What a fine-tuning run optimizes.

    ``advbn``: clean loss (main BNs) + loss on AdvBN features (aux BNs).
    ``dual_clean``: same two passes, but the aux pass sees unperturbed features.
    ``clean``: clean loss only (augmentation-only control).
    """

    ADVBN = "advbn"
    DUAL_CLEAN = "dual_clean"
    CLEAN = "clean"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.001
    lr_schedule: str = "step"  # "step" | "cosine" | "constant"
    lr_decay: float = 0.1
    decay_epoch: int = 10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = True
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative")
        if self.lr_schedule not in ("step", "cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.lr_schedule == "step" and not 0 < self.decay_epoch < self.epochs:
            raise ValueError("decay_epoch must lie strictly inside (0, epochs)")
        self.attack.validate()

    def lr_at(self, epoch: int, step_in_epoch: int = 0, steps_per_epoch: int = 1) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        if self.lr_schedule == "step":
            return self.lr * (self.lr_decay ** (epoch // self.decay_epoch))
        t = (epoch + step_in_epoch / steps_per_epoch) / self.epochs
        return 0.5 * self.lr * (1 + math.cos(math.pi * t))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "attack" in d and isinstance(d["attack"], dict):
            d["attack"] = AttackConfig(**d["attack"])
        return cls(**d)


PRETRAIN_DEFAULTS = TrainConfig(
    epochs=30, batch_size=128, lr=0.05, lr_schedule="cosine", weight_decay=5e-4, augment=True
)
FINETUNE_DEFAULTS = TrainConfig()


class Streams:
    """Independent RNG streams per purpose, so toggling one leaves the others alone."""

    def __init__(self, seed: int):
        self.order = np.random.default_rng([seed, 0])
        self.augment = np.random.default_rng([seed, 1])
        self.attack = np.random.default_rng([seed, 2])

    def state(self) -> dict:
        return {k: getattr(self, k).bit_generator.state for k in ("order", "augment", "attack")}

    def set_state(self, state: dict) -> None:
        for k, v in state.items():
            getattr(self, k).bit_generator.state = v


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (PyTorch convention)."""

    def __init__(self, params: list[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.bufs = [np.zeros_like(p.data) for p in params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        for p, g, buf in zip(self.params, grads, self.bufs):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= (lr * buf).astype(p.data.dtype)


class Adam:
    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def _check_finite(loss: float, where: str) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} during {where}; lower the learning rate")


@dataclass
class History:
    losses: list[float] = field(default_factory=list)
    clean_losses: list[float] = field(default_factory=list)
    adv_losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    step: int = 0


def _batch(images, streams: Streams, augment: bool):
    x = augment_batch(images, streams.augment) if augment else images
    return Tensor(x)


def pretrain(model: MiniResNet, data: Dataset, cfg: TrainConfig, log_every: int = 0) -> History:
    """Standard supervised training of every parameter on clean data."""
    cfg.validate()
    streams = Streams(cfg.seed)
    params = model.parameters()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    hist = History()
    steps = math.ceil(len(data) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = streams.order.permutation(len(data))
        for i, (xb, yb) in enumerate(data.batches(cfg.batch_size, order)):
            lr = cfg.lr_at(epoch, i, steps)
            x = _batch(xb, streams, cfg.augment)
            with Tape() as tape:
                tape.watch(*params)
                loss = T.softmax_cross_entropy(model(x, Mode.TRAIN), yb)
            _check_finite(loss.item(), f"pretraining epoch {epoch}")
            grads = T.backward(loss, params)
            opt.step(grads, lr)
            hist.losses.append(loss.item())
            hist.lrs.append(lr)
            hist.step += 1
        if log_every and (epoch + 1) % log_every == 0:
            log.info("pretrain epoch %d loss %.4f", epoch + 1, np.mean(hist.losses[-steps:]))
    return hist


@dataclass
class StepRecord:
    """What a replay needs to recompute the main-branch statistics."""

    features: np.ndarray
    suffix_params: list[np.ndarray]


def finetune_advbn(
    sm: SplitModel,
    data: Dataset,
    cfg: TrainConfig,
    arm: Arm | str = Arm.ADVBN,
    on_step: Callable[[StepRecord], None] | None = None,
    log_every: int = 0,
) -> History:
    """Fine-tune the suffix of ``sm`` on the dual loss.

    Per batch: clean features from the frozen prefix (eval mode, off-tape);
    PGD on their statistics through the aux branch; then one aux-branch
    train-mode pass on the perturbed features and one main-branch pass on the
    clean ones, and an SGD step on the sum of the two cross-entropies.
    """
    cfg.validate()
    arm = Arm(arm)
    streams = Streams(cfg.seed)
    params = [p for _, p in sm.suffix_parameters()]
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    hist = History()
    steps = math.ceil(len(data) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = streams.order.permutation(len(data))
        for i, (xb, yb) in enumerate(data.batches(cfg.batch_size, order)):
            lr = cfg.lr_at(epoch, i, steps)
            x = _batch(xb, streams, cfg.augment)
            f = sm.prefix(x, Mode.EVAL)
            if on_step is not None:
                on_step(StepRecord(f.data.copy(), [p.data.copy() for p in params]))

            if arm is Arm.ADVBN:
                f_adv, _ = advbn_forward(f, sm, yb, cfg.attack, streams.attack)
            else:
                f_adv = f
            with Tape() as tape:
                tape.watch(*params)
                if arm is Arm.CLEAN:
                    sm.set_branch(Branch.MAIN)
                    clean = T.softmax_cross_entropy(sm.suffix(f, Mode.TRAIN), yb)
                    adv = None
                    loss = clean
                else:
                    sm.set_branch(Branch.AUX)
                    adv = T.softmax_cross_entropy(sm.suffix(f_adv, Mode.TRAIN), yb)
                    sm.set_branch(Branch.MAIN)
                    clean = T.softmax_cross_entropy(sm.suffix(f, Mode.TRAIN), yb)
                    loss = T.add(adv, clean)
            _check_finite(loss.item(), f"fine-tuning epoch {epoch}")
            opt.step(T.backward(loss, params), lr)
            hist.losses.append(loss.item())
            hist.clean_losses.append(clean.item())
            hist.adv_losses.append(adv.item() if adv is not None else 0.0)
            hist.lrs.append(lr)
            hist.step += 1
        if log_every and (epoch + 1) % log_every == 0:
            log.info("finetune[%s] epoch %d loss %.4f", arm.value, epoch + 1, np.mean(hist.losses[-steps:]))
    sm.set_branch(Branch.MAIN)
    return hist


def prepare_finetune(model: MiniResNet, split_name: str) -> SplitModel:
    return split(model, split_name)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    accuracy: float
    per_class_error: list[float]
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def predict(model, images: np.ndarray, batch_size: int = 256, branch: Branch | str = Branch.MAIN) -> np.ndarray:
    if hasattr(model, "set_branch"):
        model.set_branch(branch)
    out = []
    try:
        for start in range(0, len(images), batch_size):
            logits = model(Tensor(images[start : start + batch_size]), Mode.EVAL)
            out.append(np.argmax(logits.data, axis=1))
    finally:
        if hasattr(model, "set_branch"):
            model.set_branch(Branch.MAIN)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, data: Dataset, branch: Branch | str = Branch.MAIN, n_classes: int | None = None, batch_size: int = 256) -> EvalResult:
    """Eval-mode accuracy; ``branch`` picks which BN statistics dual layers use."""
    pred = predict(model, data.images, batch_size, branch)
    correct = pred == data.labels
    k = n_classes or (model.cfg.classes if hasattr(model, "cfg") else int(data.labels.max()) + 1)
    per_class = []
    for c in range(k):
        sel = data.labels == c
        per_class.append(float(1.0 - correct[sel].mean()) if sel.any() else 0.0)
    return EvalResult(float(correct.mean()) if len(correct) else 0.0, per_class, int(len(correct)))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ABN1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TopologyError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: object
    step: int
    rng_state: dict | None
    extra: dict


def _topology(model) -> dict:
    topo = model.topology()
    topo["dual"] = [name for name, layer in model.norm_layers() if isinstance(layer, DualBNLayer)]
    return topo


def _same_topology(a: dict, b: dict) -> bool:
    # the init seed is recorded for rebuilding but does not change the shape
    return {k: v for k, v in a.items() if k != "seed"} == {k: v for k, v in b.items() if k != "seed"}


def _state_entries(model) -> list[tuple[str, np.ndarray]]:
    entries = [(n, p.data) for n, p in model.named_parameters()]
    entries += [(n, getattr(owner, attr)) for n, owner, attr in model.named_buffers()]
    return entries


def save_checkpoint(path, model, step: int = 0, rng_state: dict | None = None, extra: dict | None = None) -> None:
    """Write ``ABN1 | u32 version | u32 len | manifest JSON | blob | u32 crc32``.

    All integers are little-endian; the blob is the concatenation of every
    parameter and running statistic in manifest order, little-endian.
    """
    entries = _state_entries(model)
    blobs = []
    meta = []
    for name, arr in entries:
        a = np.ascontiguousarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blobs.append(le.tobytes())
        meta.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.name})
    manifest = {
        "topology": _topology(model),
        "entries": meta,
        "step": int(step),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    mjson = json.dumps(manifest, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", len(mjson)) + mjson + b"".join(blobs)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def _read(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an ABN1 checkpoint")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    (version,) = struct.unpack("<I", body[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (mlen,) = struct.unpack("<I", body[8:12])
    manifest = json.loads(body[12 : 12 + mlen])
    return manifest, body[12 + mlen :]


def _build_from_topology(topo: dict):
    fields = {k: v for k, v in topo.items() if k in ModelConfig.__dataclass_fields__}
    net = MiniResNet(ModelConfig(**fields))
    model = split(net, topo["split"]) if topo.get("split") else net
    return model


def load_checkpoint(path, into=None) -> Checkpoint:
    """Read a checkpoint; with ``into``, load into that model after a topology check."""
    manifest, blob = _read(path)
    topo = manifest["topology"]
    if into is None:
        model = _build_from_topology(topo)
    else:
        model = into
        if not _same_topology(_topology(model), topo):
            raise TopologyError(f"checkpoint topology {topo} does not match model {_topology(model)}")
    targets = {n: (p, None) for n, p in model.named_parameters()}
    targets.update({n: (owner, attr) for n, owner, attr in model.named_buffers()})
    offset = 0
    for e in manifest["entries"]:
        if e["name"] not in targets:
            raise TopologyError(f"checkpoint entry {e['name']} has no place in the model")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        arr = arr.astype(dt.newbyteorder("="))
        offset += nbytes
        obj, attr = targets[e["name"]]
        if attr is None:
            if obj.shape != arr.shape:
                raise TopologyError(f"{e['name']}: shape {arr.shape} vs model {obj.shape}")
            obj.data = arr.copy()
        else:
            setattr(obj, attr, arr.copy())
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return Checkpoint(model, manifest["step"], manifest["rng_state"], manifest["extra"])


# ---------------------------------------------------------------- timing


@dataclass
class BenchResult:
    standard_mean: float
    standard_std: float
    advbn_mean: float
    advbn_std: float
    steps: int
    n_iters: int
    suffix_fraction: float
    predicted_ratio: float

    @property
    def measured_ratio(self) -> float:
        return self.advbn_mean / self.standard_mean

    def to_dict(self) -> dict:
        d = asdict(self)
        d["measured_ratio"] = self.measured_ratio
        return d


def _time(fn, n: int) -> tuple[float, float]:
    ts = []
    for _ in range(n):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.mean(ts)), float(np.std(ts))


def bench_iteration(
    model: MiniResNet, split_name: str, attack: AttackConfig, images: np.ndarray, labels: np.ndarray,
    n_iters: int = 100, warmup: int = 3,
) -> BenchResult:
    """Seconds per training iteration: standard full-network step vs AdvBN step.

    The prediction for the ratio is ``1 + (m + 1) * r`` with ``r`` the
    suffix share of a forward pass, measured on the same batch.
    """
    net = copy.deepcopy(model)
    sm = split(copy.deepcopy(model), split_name)
    x = Tensor(images)
    y = np.asarray(labels)
    params = net.parameters()
    sparams = [p for _, p in sm.suffix_parameters()]
    opt = SGD(params, 0.9, 0.0)
    sopt = SGD(sparams, 0.9, 0.0)
    cfg = TrainConfig(epochs=2, decay_epoch=1, attack=attack)

    def standard():
        with Tape() as tape:
            tape.watch(*params)
            loss = T.softmax_cross_entropy(net(x, Mode.TRAIN), y)
        opt.step(T.backward(loss, params), 0.0)

    def advbn():
        f = sm.prefix(x, Mode.EVAL)
        f_adv, _ = advbn_forward(f, sm, y, cfg.attack)
        with Tape() as tape:
            tape.watch(*sparams)
            sm.set_branch(Branch.AUX)
            adv = T.softmax_cross_entropy(sm.suffix(f_adv, Mode.TRAIN), y)
            sm.set_branch(Branch.MAIN)
            clean = T.softmax_cross_entropy(sm.suffix(f, Mode.TRAIN), y)
            loss = T.add(adv, clean)
        sopt.step(T.backward(loss, sparams), 0.0)

    def fwd_prefix():
        sm.prefix(x, Mode.TRAIN, update_stats=False)

    f_fixed = sm.prefix(x, Mode.EVAL)

    def fwd_suffix():
        sm.suffix(f_fixed, Mode.TRAIN, update_stats=False)

    for fn in (standard, advbn, fwd_prefix, fwd_suffix):
        for _ in range(warmup):
            fn()
    tp, _ = _time(fwd_prefix, max(10, n_iters // 5))
    ts, _ = _time(fwd_suffix, max(10, n_iters // 5))
    r = ts / (tp + ts)
    s_mean, s_std = _time(standard, n_iters)
    a_mean, a_std = _time(advbn, n_iters)
    return BenchResult(s_mean, s_std, a_mean, a_std, attack.steps, n_iters, r, 1 + (attack.steps + 1) * r)


__all__ = [
    "Arm",
    "TrainConfig",
    "PRETRAIN_DEFAULTS",
    "FINETUNE_DEFAULTS",
    "SGD",
    "Adam",
    "Streams",
    "History",
    "StepRecord",
    "TrainingDiverged",
    "pretrain",
    "finetune_advbn",
    "prepare_finetune",
    "EvalResult",
    "predict",
    "evaluate",
    "Checkpoint",
    "CheckpointError",
    "TopologyError",
    "save_checkpoint",
    "load_checkpoint",
    "BenchResult",
    "bench_iteration",
]
