"""Glue between the modules: datasets from a run config, shifted suites,
suite evaluation and the robustness experiment used by the CLI and the
acceptance tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import ALL_FAMILIES, CORRUPTIONS, Dataset, Family, generate_dataset, shift_dataset
from .layers import Branch
from .models import MiniResNet, split
from .train import Arm, evaluate, finetune_advbn, pretrain

log = logging.getLogger(__name__)


def datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    return generate_dataset(d.seed, d.n_classes, d.n_train, d.n_test, d.size)


def shifted_suites(test: Dataset, families, severities, seed: int) -> dict[tuple[str, int], Dataset]:
    """One shifted copy of ``test`` per (family, severity)."""
    return {
        (Family(f).value, int(s)): shift_dataset(test, f, s, seed=seed)
        for f in families
        for s in severities
    }


@dataclass
class SuiteResult:
    clean: float
    shifted: dict[tuple[str, int], float]

    @property
    def mean_shifted(self) -> float:
        return float(np.mean(list(self.shifted.values())))

    def family_means(self) -> dict[str, float]:
        fams = sorted({f for f, _ in self.shifted}, key=lambda f: [x.value for x in Family].index(f))
        return {f: float(np.mean([a for (g, _), a in self.shifted.items() if g == f])) for f in fams}

    def error_matrix(self, families=CORRUPTIONS) -> np.ndarray:
        fams = [Family(f).value for f in families]
        sev = sorted({s for _, s in self.shifted})
        return np.array([[1.0 - self.shifted[(f, s)] for s in sev] for f in fams])

    def to_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean,
            "mean_shifted_accuracy": self.mean_shifted,
            "family_accuracy": self.family_means(),
            "shifted_accuracy": {f"{f}-{s}": a for (f, s), a in self.shifted.items()},
        }


def evaluate_suites(model, test: Dataset, suites: dict, branch=Branch.MAIN, batch_size: int = 256) -> SuiteResult:
    clean = evaluate(model, test, branch, batch_size=batch_size).accuracy
    shifted = {k: evaluate(model, d, branch, batch_size=batch_size).accuracy for k, d in suites.items()}
    return SuiteResult(clean, shifted)


def pretrained_model(cfg: RunConfig, train: Dataset) -> MiniResNet:
    model = MiniResNet(cfg.model_config())
    pretrain(model, train, cfg.pretrain_config())
    return model


@dataclass
class RobustnessRun:
    """Per-seed outcome of the AdvBN-vs-control comparison."""

    seed: int
    base: SuiteResult
    arms: dict[str, SuiteResult] = field(default_factory=dict)
    models: dict[str, object] = field(default_factory=dict)


def robustness_run(cfg: RunConfig, arms: dict[str, tuple[str, str]], keep_models: bool = False,
                   step_hook=None) -> RobustnessRun:
    """Pretrain once, then fine-tune each named arm ``(arm, split)`` from it.

    Evaluation uses every shift family at every severity on the main branch.
    ``step_hook(name, split_model)`` may return an ``on_step`` callback for
    that arm's fine-tuning; it is called before any update.
    """
    train, test = datasets(cfg)
    suites = shifted_suites(test, ALL_FAMILIES, range(1, 6), cfg.data.shift_seed)
    base = pretrained_model(cfg, train)
    run = RobustnessRun(cfg.data.seed, evaluate_suites(base, test, suites))
    if keep_models:
        run.models["base"] = base
    ft = cfg.finetune_config()
    for name, (arm, split_name) in arms.items():
        sm = split(base, split_name)
        on_step = step_hook(name, sm) if step_hook else None
        finetune_advbn(sm, train, ft, Arm(arm), on_step=on_step)
        run.arms[name] = evaluate_suites(sm, test, suites)
        log.info("seed %d %s: clean %.4f shifted %.4f", cfg.data.seed, name,
                 run.arms[name].clean, run.arms[name].mean_shifted)
        if keep_models:
            run.models[name] = sm
    return run
