"""Small residual classifiers with named split points.

The network is a sequence of named units: ``stem``, ``stage2`` ...
``stage{S+1}``, ``head``. Stage names follow the ResNet convention where the
stem is ``conv1``, so the default 3-stage model has split points
``stage2_end``, ``stage3_end`` and ``stage4_end``.

Parameter count for width ``w``, ``S`` stages of one basic block each,
``K`` classes and RGB input (widths ``c_i = w * 2**i``)::

    stem    27 w + 2 w
    stage i 9 c_in c + 9 c^2 + 4 c   (+ c_in c + 2 c if it downsamples)
    head    c_last K + K

which is 78042 for the default (w=16, S=3, K=10).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .layers import BNLayer, Branch, DualBNLayer, Mode, norm_forward
from .tensor import Tensor, get_default_dtype


@dataclass(frozen=True)
class ModelConfig:
    classes: int = 10
    width: int = 16
    stages: int = 3
    blocks: int = 1
    in_channels: int = 3
    seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def validate(self) -> None:
        if self.stages < 3:
            raise ValueError(f"need at least 3 stages, got {self.stages}")
        if self.classes < 2 or self.width < 1 or self.blocks < 1 or self.in_channels < 1:
            raise ValueError(f"invalid model sizing {self}")

    @property
    def stage_names(self) -> list[str]:
        return [f"stage{i + 2}" for i in range(self.stages)]

    @property
    def split_names(self) -> list[str]:
        return [f"{s}_end" for s in self.stage_names]


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))


def _bn(cfg: ModelConfig, c: int) -> BNLayer:
    return BNLayer.create(c, momentum=cfg.bn_momentum, eps=cfg.bn_eps)


def _iter_norms(obj, prefix: str) -> Iterator[tuple[str, object]]:
    for name, v in vars(obj).items():
        if isinstance(v, (BNLayer, DualBNLayer)):
            yield f"{prefix}{name}", v


def _bn_params(name: str, layer) -> Iterator[tuple[str, Tensor]]:
    if isinstance(layer, DualBNLayer):
        yield from _bn_params(f"{name}.main", layer.main)
        yield from _bn_params(f"{name}.aux", layer.aux)
    else:
        yield f"{name}.gamma", layer.gamma
        yield f"{name}.beta", layer.beta


def _bn_buffers(name: str, layer) -> Iterator[tuple[str, object, str]]:
    """Yields (qualified name, owning BNLayer, attribute)."""
    if isinstance(layer, DualBNLayer):
        yield from _bn_buffers(f"{name}.main", layer.main)
        yield from _bn_buffers(f"{name}.aux", layer.aux)
    else:
        yield f"{name}.running_mean", layer, "running_mean"
        yield f"{name}.running_var", layer, "running_var"


class Unit:
    """Base for network pieces; subclasses define forward and parameter order."""

    def forward(self, x, mode, update_stats=True, taps=None, name=""):
        raise NotImplementedError

    def _own_params(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def _children(self) -> Iterator[tuple[str, "Unit"]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from ((f"{prefix}{n}", p) for n, p in self._own_params())
        for nname, layer in _iter_norms(self, ""):
            yield from _bn_params(f"{prefix}{nname}", layer)
        for cname, child in self._children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = ""):
        for nname, layer in _iter_norms(self, ""):
            yield from _bn_buffers(f"{prefix}{nname}", layer)
        for cname, child in self._children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def norm_layers(self, prefix: str = "") -> Iterator[tuple[str, object]]:
        yield from _iter_norms(self, prefix)
        for cname, child in self._children():
            yield from child.norm_layers(f"{prefix}{cname}.")

    def promote_norms(self) -> None:
        for name, v in list(vars(self).items()):
            if isinstance(v, BNLayer):
                setattr(self, name, DualBNLayer.from_bn(v))
        for _, child in self._children():
            child.promote_norms()


def _tap(taps, key, value):
    if taps is not None:
        taps[key] = value


class Stem(Unit):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.width
        self.conv = _he(rng, (c, cfg.in_channels, 3, 3), cfg.in_channels * 9)
        self.bn = _bn(cfg, c)

    def _own_params(self):
        yield "conv", self.conv

    def forward(self, x, mode, update_stats=True, taps=None, name="stem"):
        y = norm_forward(self.bn, T.conv2d(x, self.conv, 1, 1), mode, update_stats)
        _tap(taps, f"{name}.bn", y)
        return T.relu(y)


class BasicBlock(Unit):
    def __init__(self, cfg: ModelConfig, cin: int, cout: int, stride: int, rng):
        self.stride = stride
        self.conv1 = _he(rng, (cout, cin, 3, 3), cin * 9)
        self.bn1 = _bn(cfg, cout)
        self.conv2 = _he(rng, (cout, cout, 3, 3), cout * 9)
        self.bn2 = _bn(cfg, cout)
        if stride != 1 or cin != cout:
            self.sc_conv = _he(rng, (cout, cin, 1, 1), cin)
            self.sc_bn = _bn(cfg, cout)
        else:
            self.sc_conv = None
            self.sc_bn = None

    def _own_params(self):
        yield "conv1", self.conv1
        yield "conv2", self.conv2
        if self.sc_conv is not None:
            yield "sc_conv", self.sc_conv

    def forward(self, x, mode, update_stats=True, taps=None, name="block"):
        y = norm_forward(self.bn1, T.conv2d(x, self.conv1, self.stride, 1), mode, update_stats)
        _tap(taps, f"{name}.bn1", y)
        y = T.relu(y)
        y = norm_forward(self.bn2, T.conv2d(y, self.conv2, 1, 1), mode, update_stats)
        _tap(taps, f"{name}.bn2", y)
        if self.sc_conv is not None:
            s = norm_forward(self.sc_bn, T.conv2d(x, self.sc_conv, self.stride, 0), mode, update_stats)
            _tap(taps, f"{name}.sc_bn", s)
        else:
            s = x
        return T.relu(T.add(y, s))


class Stage(Unit):
    def __init__(self, cfg: ModelConfig, cin: int, cout: int, stride: int, rng):
        self.blocks = [
            BasicBlock(cfg, cin if i == 0 else cout, cout, stride if i == 0 else 1, rng)
            for i in range(cfg.blocks)
        ]

    def _children(self):
        for i, b in enumerate(self.blocks):
            yield str(i), b

    def forward(self, x, mode, update_stats=True, taps=None, name="stage"):
        for i, b in enumerate(self.blocks):
            x = b.forward(x, mode, update_stats, taps, f"{name}.{i}")
        return x


class Head(Unit):
    def __init__(self, cfg: ModelConfig, cin: int, rng):
        bound = 1.0 / np.sqrt(cin)
        self.weight = Tensor(rng.uniform(-bound, bound, (cfg.classes, cin)))
        self.bias = Tensor(np.zeros(cfg.classes))

    def _own_params(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x, mode, update_stats=True, taps=None, name="head"):
        return T.linear(T.global_avg_pool(x), self.weight, self.bias)


class MiniResNet:
    """Conv stem, ``stages`` residual stages, global pooling and a linear head."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        units: list[tuple[str, Unit]] = [("stem", Stem(cfg, rng))]
        cin = cfg.width
        for i, name in enumerate(cfg.stage_names):
            cout = cfg.width * 2**i
            units.append((name, Stage(cfg, cin, cout, 1 if i == 0 else 2, rng)))
            cin = cout
        units.append(("head", Head(cfg, cin, rng)))
        self.units = units

    # -- structure

    def unit_names(self) -> list[str]:
        return [n for n, _ in self.units]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, u in self.units:
            out.extend(u.named_parameters(f"{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, BNLayer, str]]:
        out = []
        for name, u in self.units:
            out.extend(u.named_buffers(f"{name}."))
        return out

    def norm_layers(self) -> list[tuple[str, object]]:
        out = []
        for name, u in self.units:
            out.extend(u.norm_layers(f"{name}."))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_branch(self, branch: Branch | str) -> None:
        branch = Branch(branch)
        for _, layer in self.norm_layers():
            if isinstance(layer, DualBNLayer):
                layer.active_branch = branch

    def topology(self) -> dict:
        return {"kind": "mini_resnet", **asdict(self.cfg)}

    # -- compute

    def run_units(self, x, units, mode=Mode.EVAL, update_stats=True, taps=None):
        for name, u in units:
            x = u.forward(x, mode, update_stats, taps, name)
        return x

    def __call__(self, x, mode=Mode.EVAL, update_stats=True, taps=None) -> Tensor:
        return self.run_units(x, self.units, mode, update_stats, taps)


def build_mini_resnet(classes: int = 10, width: int = 16, stages: int = 3, seed: int = 0, **kw) -> MiniResNet:
    return MiniResNet(ModelConfig(classes=classes, width=width, stages=stages, seed=seed, **kw))


class SplitModel:
    """A network cut at a stage boundary: frozen prefix, dual-BN suffix."""

    def __init__(self, net: MiniResNet, split_name: str):
        if split_name not in net.cfg.split_names:
            raise ValueError(f"unknown split {split_name!r}; choose from {net.cfg.split_names}")
        self.net = net
        self.split_name = split_name
        cut = net.unit_names().index(split_name[: -len("_end")]) + 1
        self.prefix_units = net.units[:cut]
        self.suffix_units = net.units[cut:]

    @property
    def cfg(self) -> ModelConfig:
        return self.net.cfg

    def prefix(self, x, mode=Mode.EVAL, update_stats=True, taps=None) -> Tensor:
        return self.net.run_units(x, self.prefix_units, mode, update_stats, taps)

    def suffix(self, f, mode=Mode.EVAL, update_stats=True, taps=None) -> Tensor:
        return self.net.run_units(f, self.suffix_units, mode, update_stats, taps)

    def __call__(self, x, mode=Mode.EVAL, update_stats=True, taps=None) -> Tensor:
        return self.suffix(self.prefix(x, mode, update_stats, taps), mode, update_stats, taps)

    def _named(self, units, fn):
        out = []
        for name, u in units:
            out.extend(getattr(u, fn)(f"{name}."))
        return out

    def prefix_parameters(self) -> list[tuple[str, Tensor]]:
        return self._named(self.prefix_units, "named_parameters")

    def suffix_parameters(self) -> list[tuple[str, Tensor]]:
        return self._named(self.suffix_units, "named_parameters")

    def suffix_norm_layers(self) -> list[tuple[str, object]]:
        return self._named(self.suffix_units, "norm_layers")

    def suffix_layer_names(self) -> list[str]:
        """Names of tap points (BN outputs) inside the suffix, in forward order."""
        return [n for n, _ in self.suffix_norm_layers()]

    def set_branch(self, branch: Branch | str) -> None:
        self.net.set_branch(branch)

    def named_parameters(self):
        return self.net.named_parameters()

    def parameters(self):
        return self.net.parameters()

    def norm_layers(self):
        return self.net.norm_layers()

    def named_buffers(self):
        return self.net.named_buffers()

    def topology(self) -> dict:
        return {**self.net.topology(), "split": self.split_name}


def split(model: MiniResNet, split_name: str) -> SplitModel:
    """Cut a copy of ``model`` at ``split_name`` and give the suffix dual BNs."""
    net = copy.deepcopy(model)
    sm = SplitModel(net, split_name)
    for _, u in sm.suffix_units:
        u.promote_norms()
    return sm
