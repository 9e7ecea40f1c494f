"""Command-line entry point: ``advbn <subcommand> [--config FILE] [overrides]``.

Every invocation resolves a :class:`~advbn.config.RunConfig` (defaults, then
the config file, then flags), validates it, creates a fresh run directory
under ``--out`` / ``$ABN_RUN_DIR`` / ``./runs`` and writes the resolved config
there before doing any work. Re-running with that ``config.json`` reproduces
the run's metrics and checkpoints bit for bit.

Exit codes: 0 success, 1 runtime error, 2 invalid config or missing input.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import divergence_report
from .attack import attack_losses, repeats_for
from .config import ConfigError, RunConfig, json_schema, parse_pair
from .data import CORRUPTIONS, DatasetManifest, compute_mce, shift_dataset
from .layers import Branch, Mode
from .models import MiniResNet, SplitModel, split
from .pipeline import datasets, evaluate_suites, shifted_suites
from .tensor import Tensor
from .train import (
    Arm,
    CheckpointError,
    Streams,
    bench_iteration,
    evaluate,
    finetune_advbn,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .viz import DecoderConfig, export_render, render_perturbed, train_decoder

log = logging.getLogger("advbn")

COMMANDS = ("gen-data", "pretrain", "finetune", "eval", "attack-eval", "divergence", "visualize", "bench")
# subcommand -> config section holding its input checkpoint
CHECKPOINT_SECTION = {
    "finetune": "finetune",
    "eval": "eval",
    "attack-eval": "eval",
    "divergence": "analysis",
    "visualize": "viz",
    "bench": "eval",
}


class InputError(Exception):
    """A required input (file or prior artifact) is missing or unusable."""


# ---------------------------------------------------------------- config resolution


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    cur[keys[-1]] = value


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults <- config file <- flag overrides."""
    d = RunConfig().to_dict()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file {path} not found")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = sorted(set(user) - set(d))
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        d = _merge(d, user)
    flags = {
        "seed": ("data.seed", "model.seed", "pretrain.seed", "finetune.seed"),
        "split": ("finetune.split",),
        "arm": ("finetune.arm",),
        "epsilon": ("finetune.attack.epsilon",),
        "tau": ("finetune.attack.tau",),
        "steps": ("finetune.attack.steps",),
        "mode": ("finetune.attack.mode",),
        "epochs": (f"{'pretrain' if args.command == 'pretrain' else 'finetune'}.epochs",),
        "lr": (f"{'pretrain' if args.command == 'pretrain' else 'finetune'}.lr",),
        "branch": ("analysis.branch" if args.command == "divergence" else "eval.branch",),
        "pair": ("analysis.pair",),
        "severity": ("analysis.severity",),
        "baseline": ("eval.baseline",),
        "iters": ("eval.bench_iters",),
    }
    for attr, paths in flags.items():
        val = getattr(args, attr, None)
        if val is not None:
            for p in paths:
                _set_path(d, p, val)
    if getattr(args, "epsilon_sweep", None):
        try:
            sweep = [float(v) for v in args.epsilon_sweep.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--epsilon-sweep must be comma-separated numbers, got {args.epsilon_sweep!r}") from None
        _set_path(d, "finetune.epsilon_sweep", sweep)
    if getattr(args, "checkpoint", None):
        _set_path(d, f"{CHECKPOINT_SECTION[args.command]}.checkpoint", str(Path(args.checkpoint).resolve()))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(d, key.strip(), _parse_value(raw))
    return RunConfig.from_dict(d)


def make_run_dir(root: str | None, command: str) -> Path:
    base = Path(root or os.environ.get("ABN_RUN_DIR") or "runs")
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    n = 0
    while True:
        path = base / (f"{stamp}-{command}" + (f"-{n}" if n else ""))
        try:
            path.mkdir(parents=True)
            return path
        except FileExistsError:
            n += 1


# ---------------------------------------------------------------- helpers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _load_model(path: str | None, what: str):
    if not path:
        raise InputError(f"{what} needs a checkpoint (--checkpoint or {what}.checkpoint)")
    if not Path(path).is_file():
        raise InputError(f"checkpoint {path} not found")
    try:
        return load_checkpoint(path).model
    except CheckpointError as e:
        raise InputError(str(e)) from None


def _as_split(model, cfg: RunConfig) -> SplitModel:
    return model if isinstance(model, SplitModel) else split(model, cfg.finetune.split)


def _dataset_by_name(name: str, test, cfg: RunConfig, severity: int):
    if name == "clean":
        return test
    return shift_dataset(test, name, severity, seed=cfg.data.shift_seed)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(cfg: RunConfig, out: Path) -> dict:
    d = cfg.data
    manifest = DatasetManifest(d.seed, d.n_classes, d.n_train, d.n_test, d.size)
    (out / "manifest.json").write_text(manifest.to_json() + "\n")
    train, test = datasets(cfg)
    np.savez(out / "data.npz", train_images=train.images, train_labels=train.labels,
             test_images=test.images, test_labels=test.labels)
    return {
        "n_train": len(train),
        "n_test": len(test),
        "train_class_counts": np.bincount(train.labels, minlength=d.n_classes).tolist(),
        "train_pixel_mean": float(train.images.astype(np.float64).mean()),
        "test_pixel_mean": float(test.images.astype(np.float64).mean()),
    }


def cmd_pretrain(cfg: RunConfig, out: Path) -> dict:
    train, test = datasets(cfg)
    model = MiniResNet(cfg.model_config())
    tc = cfg.pretrain_config()
    hist = pretrain(model, train, tc, log_every=1)
    save_checkpoint(out / "model.abn", model, step=hist.step, extra={"stage": "pretrain"})
    _write_csv(out / "history.csv", ["step", "lr", "loss"],
               [(i, repr(lr), repr(l)) for i, (lr, l) in enumerate(zip(hist.lrs, hist.losses))])
    res = evaluate(model, test)
    return {"final_loss": hist.losses[-1], "steps": hist.step, "clean_accuracy": res.accuracy,
            "per_class_error": res.per_class_error, "parameters": model.num_parameters()}


def _finetune_once(base, cfg: RunConfig, train, tc, arm: str):
    sm = split(base, cfg.finetune.split)
    hist = finetune_advbn(sm, train, tc, Arm(arm), log_every=1)
    return sm, hist


def cmd_finetune(cfg: RunConfig, out: Path) -> dict:
    base = _load_model(cfg.finetune.checkpoint, "finetune")
    if not isinstance(base, MiniResNet):
        raise InputError("finetune expects an unsplit (pretrained) checkpoint")
    train, test = datasets(cfg)
    tc = cfg.finetune_config()
    suites = shifted_suites(test, cfg.eval.families, cfg.eval.severities, cfg.data.shift_seed)
    if cfg.finetune.epsilon_sweep:
        rows, results = [], {}
        for eps in cfg.finetune.epsilon_sweep:
            atk = tc.attack.with_(epsilon=eps, steps=repeats_for(eps))
            sm, hist = _finetune_once(base, cfg, train, dataclasses.replace(tc, attack=atk), cfg.finetune.arm)
            res = evaluate_suites(sm, test, suites)
            save_checkpoint(out / f"model_eps{eps:g}.abn", sm, step=hist.step,
                            extra={"stage": "finetune", "epsilon": eps})
            rows.append((repr(eps), atk.steps, repr(res.clean), repr(res.mean_shifted)))
            results[f"{eps:g}"] = {"steps": atk.steps, **res.to_dict()}
        _write_csv(out / "epsilon_sweep.csv", ["epsilon", "steps", "clean_accuracy", "mean_shifted_accuracy"], rows)
        return {"epsilon_sweep": results}
    sm, hist = _finetune_once(base, cfg, train, tc, cfg.finetune.arm)
    save_checkpoint(out / "model.abn", sm, step=hist.step, extra={"stage": "finetune", "arm": cfg.finetune.arm})
    _write_csv(out / "history.csv", ["step", "lr", "loss", "clean_loss", "adv_loss"],
               [(i, repr(a), repr(b), repr(c), repr(e))
                for i, (a, b, c, e) in enumerate(zip(hist.lrs, hist.losses, hist.clean_losses, hist.adv_losses))])
    main = evaluate_suites(sm, test, suites, Branch.MAIN)
    aux = evaluate_suites(sm, test, suites, Branch.AUX)
    return {"steps": hist.step, "final_loss": hist.losses[-1], "main": main.to_dict(), "aux": aux.to_dict()}


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    model = _load_model(cfg.eval.checkpoint, "eval")
    _, test = datasets(cfg)
    suites = shifted_suites(test, cfg.eval.families, cfg.eval.severities, cfg.data.shift_seed)
    res = evaluate_suites(model, test, suites, cfg.eval.branch, cfg.eval.batch_size)
    metrics = {"branch": cfg.eval.branch, **res.to_dict()}
    _write_csv(out / "shifted.csv", ["family", "severity", "accuracy"],
               [(f, s, repr(a)) for (f, s), a in res.shifted.items()])
    corr = [f.value for f in CORRUPTIONS if f.value in cfg.eval.families]
    if cfg.eval.baseline:
        if not corr:
            raise ConfigError("mCE needs at least one corruption family in eval.families")
        base_model = _load_model(cfg.eval.baseline, "eval.baseline")
        base_res = evaluate_suites(base_model, test, shifted_suites(test, corr, cfg.eval.severities,
                                                                     cfg.data.shift_seed), Branch.MAIN)
        mce, ce = compute_mce(res.error_matrix(corr), base_res.error_matrix(corr))
        metrics["mce"] = mce
        metrics["ce_per_family"] = dict(zip(corr, ce.tolist()))
    return metrics


def cmd_attack_eval(cfg: RunConfig, out: Path) -> dict:
    sm = _as_split(_load_model(cfg.eval.checkpoint, "attack-eval"), cfg)
    _, test = datasets(cfg)
    atk = cfg.attack_config()
    rng = Streams(cfg.finetune.seed).attack
    rows = []
    for b, (xb, yb) in enumerate(test.batches(cfg.finetune.batch_size)):
        clean, adv = attack_losses(sm.prefix(Tensor(xb), Mode.EVAL), sm, yb, atk, rng)
        rows.append((b, len(yb), clean, adv))
    _write_csv(out / "batches.csv", ["batch", "size", "clean_ce", "adv_ce"],
               [(b, n, repr(c), repr(a)) for b, n, c, a in rows])
    frac = float(np.mean([a >= c for _, _, c, a in rows]))
    return {
        "attack": atk.to_dict(),
        "split": sm.split_name,
        "batches": len(rows),
        "fraction_adv_ge_clean": frac,
        "mean_clean_ce": float(np.mean([r[2] for r in rows])),
        "mean_adv_ce": float(np.mean([r[3] for r in rows])),
    }


def cmd_divergence(cfg: RunConfig, out: Path) -> dict:
    model = _load_model(cfg.analysis.checkpoint, "divergence")
    _, test = datasets(cfg)
    a, b = parse_pair(cfg.analysis.pair)
    da = _dataset_by_name(a, test, cfg, cfg.analysis.severity)
    db = _dataset_by_name(b, test, cfg, cfg.analysis.severity)
    try:
        rep = divergence_report(model, da, db, cfg.analysis.layers, cfg.analysis.branch)
    except KeyError as e:
        raise ConfigError(f"analysis.layers: {e.args[0]}") from None
    label = Path(cfg.analysis.checkpoint).stem
    (out / "divergence.csv").write_text(rep.to_csv(label))
    (out / "divergence.txt").write_text(rep.to_text())
    return rep.to_dict()


def cmd_visualize(cfg: RunConfig, out: Path) -> dict:
    sm = _as_split(_load_model(cfg.viz.checkpoint, "visualize"), cfg)
    train, test = datasets(cfg)
    v = cfg.viz
    dec = train_decoder(sm, train, DecoderConfig(v.decoder_epochs, v.decoder_batch, v.decoder_lr, v.seed), test)
    n = min(v.n_images, len(test))
    res = render_perturbed(test.images[:n], test.labels[:n], sm, dec, tuple(v.epsilons),
                           tau=cfg.finetune.attack.tau)
    index = export_render(res, out / "images")
    ref = res.images[:, 0]
    dist = [float(np.mean(np.abs(res.images[:, j] - ref))) for j in range(len(res.epsilons))]
    _write_csv(out / "distance.csv", ["epsilon", "steps", "mean_abs_pixel_distance"],
               [(repr(e), s, repr(d)) for e, s, d in zip(res.epsilons, res.steps, dist)])
    return {"decoder_recon_loss": dec.recon_loss, "decoder_psnr": dec.psnr, "epsilons": res.epsilons,
            "steps": res.steps, "mean_distance_from_eps0": dist, "files": len(index["images"])}


def cmd_bench(cfg: RunConfig, out: Path) -> dict:
    path = cfg.eval.checkpoint
    model = _load_model(path, "bench") if path else MiniResNet(cfg.model_config())
    if isinstance(model, SplitModel):
        model = model.net
    train, _ = datasets(cfg)
    n = min(cfg.eval.bench_batch, len(train))
    r = bench_iteration(model, cfg.finetune.split, cfg.attack_config(), train.images[:n], train.labels[:n],
                        n_iters=cfg.eval.bench_iters)
    return r.to_dict()


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "attack-eval": cmd_attack_eval,
    "divergence": cmd_divergence,
    "visualize": cmd_visualize,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="advbn",
        description="Adversarial batch-normalization laboratory. Each subcommand writes a run "
        "directory with the resolved config.json, metrics.json and its outputs.",
        epilog="Config sections: data, model, pretrain, finetune (with finetune.attack), eval, analysis, "
        "viz. Print the JSON schema with --print-schema. Output root: --out, else $ABN_RUN_DIR, else ./runs.",
    )
    p.add_argument("--print-schema", action="store_true", help="print the run-config JSON schema and exit")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_text, checkpoint=True):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="run config JSON (unknown keys are rejected)")
        sp.add_argument("--out", help="output root (default: $ABN_RUN_DIR or ./runs)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override any config value; VALUE is parsed as JSON when possible")
        sp.add_argument("--seed", type=int, help="seed for data, model init, pretraining and fine-tuning")
        sp.add_argument("-v", "--verbose", action="store_true")
        if checkpoint:
            sp.add_argument("--checkpoint", help="input checkpoint")
        return sp

    add("gen-data", "Render the procedural dataset and write it with its manifest.", checkpoint=False)
    sp = add("pretrain", "Train the baseline classifier on clean data.", checkpoint=False)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("finetune", "AdvBN fine-tuning of a pretrained model's suffix.")
    sp.add_argument("--split", help="split point, e.g. stage2_end")
    sp.add_argument("--arm", choices=[a.value for a in Arm])
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--mode", choices=["multiplicative", "additive"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--epsilon-sweep", help="comma-separated epsilons; steps per epsilon = floor(eps/0.2)+1")

    sp = add("eval", "Clean and shifted-suite accuracy (optionally mCE against --baseline).")
    sp.add_argument("--branch", choices=["main", "aux"])
    sp.add_argument("--baseline", help="baseline checkpoint for mCE normalization")

    sp = add("attack-eval", "Clean vs AdvBN cross-entropy per test batch.")
    sp.add_argument("--split")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--steps", type=int)

    sp = add("divergence", "Per-layer symmetric KL between two datasets' features (CSV).")
    sp.add_argument("--pair", help="datasets to compare, e.g. clean:style_affine")
    sp.add_argument("--severity", type=int)
    sp.add_argument("--branch", choices=["main", "aux"])

    sp = add("visualize", "Train a decoder on the prefix and render AdvBN-perturbed images (PPM).")
    sp.add_argument("--split")

    sp = add("bench", "Seconds per training iteration, standard vs AdvBN.")
    sp.add_argument("--split")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--iters", type=int)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse uses 2 for usage errors already
        return int(e.code or 0)
    if args.print_schema:
        print(json.dumps(json_schema(), indent=2))
        return 0
    if not args.command:
        parser.print_help()
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        section = CHECKPOINT_SECTION.get(args.command)
        ckpt = getattr(cfg, section).checkpoint if section else None
        if ckpt and not Path(ckpt).is_file():
            raise InputError(f"checkpoint {ckpt} not found")
    except (ConfigError, InputError) as e:
        print(f"advbn {args.command}: {e}", file=sys.stderr)
        return 2
    out = make_run_dir(args.out, args.command)
    (out / "config.json").write_text(cfg.to_json())
    try:
        metrics = HANDLERS[args.command](cfg, out)
    except (ConfigError, InputError) as e:
        print(f"advbn {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and exit 1
        log.debug("failure", exc_info=True)
        print(f"advbn {args.command}: error: {e}", file=sys.stderr)
        return 1
    _write_json(out / "metrics.json", {"command": args.command, **metrics})
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
