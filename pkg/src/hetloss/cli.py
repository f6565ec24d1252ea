"""Command-line pipeline: gen -> split -> train -> predict -> ensemble -> eval, plus verify.

Every stage reads and writes files under ``--out-dir``:

    dataset.txt, test.txt, ground_truth.json   gen
    folds.json                                 split
    checkpoints/fold{k}.json, logs/fold{k}.csv train
    confidences.csv                            predict
    decisions_theta{θ}.csv, ensemble_stats.csv ensemble
    metrics.csv, subset.csv                    eval
    seeds.json                                 root seed and per-stage subseeds

Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .core import load_dataset, save_dataset, validate_dataset
from .ensemble import HARMONIC, MAX_VOTE, EnsembleConfig, batch_decide, read_confidences_csv, \
    read_decisions_csv, write_confidences_csv, write_decisions_csv
from .loss import write_loss_log
from .metrics import format_table, high_confidence_subset_eval, weighted_f1, write_report_csv
from .model import TrainConfig, load_checkpoint, predict_proba, save_checkpoint, train_two_stage
from .sampler import DEFAULT_TOLERANCE, fold_train_val, load_manifest, save_manifest, stratified_subject_folds
from .synthdata import GenConfig, benchmark_preset, generate
from . import verify as verify_mod

log = logging.getLogger("hetloss")

STAGES = ("gen", "split", "train", "predict")
DEFAULT_THETAS = (0.95, 0.98)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class RuntimeFailure(RuntimeError):
    pass


# -- configuration ------------------------------------------------------------

EXTRA_KEYS = {
    "data": {"test_subjects_per_class": 2},
    "split": {"k": 7, "tolerance_ratio": DEFAULT_TOLERANCE},
    "predict": {"views": 1, "jitter": 0.0},
    "ensemble": {"thetas": DEFAULT_THETAS, "epsilon_clamp": 1e-6},
}


def _defaults() -> dict[str, dict]:
    gen = {f.name: getattr(benchmark_preset(0), f.name) for f in fields(GenConfig) if f.name != "seed"}
    train = {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}
    return {"gen": gen, "train": train, **{k: dict(v) for k, v in EXTRA_KEYS.items()}}


def _parse_value(section: str, key: str, raw: str, default):
    name = f"{section}.{key}"
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, tuple) or (key == "subjects_per_class" and "," in text):
            elem = float if key == "thetas" else int
            return tuple(elem(v) for v in text.split(",") if v.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {type(default).__name__}") from None


def load_config(path: str | None) -> dict[str, dict]:
    """Sectioned key=value file merged over the defaults; unknown sections or keys are rejected."""
    cfg = _defaults()
    if path is None:
        return cfg
    if not Path(path).is_file():
        raise ConfigError("--config", f"no such file {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError("--config", str(exc).splitlines()[0]) from None
    for section in parser.sections():
        if section not in cfg:
            raise ConfigError(section, f"unknown section (expected one of {sorted(cfg)})")
        for key, raw in parser.items(section):
            if key not in cfg[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            cfg[section][key] = _parse_value(section, key, raw, cfg[section][key])
    return cfg


def gen_config(cfg: dict, seed: int) -> GenConfig:
    spc = cfg["gen"]["subjects_per_class"]
    extra = cfg["data"]["test_subjects_per_class"]
    if extra < 0:
        raise ConfigError("data.test_subjects_per_class", "must be >= 0")
    spc = tuple(v + extra for v in spc) if isinstance(spc, tuple) else spc + extra
    return GenConfig(**dict(cfg["gen"], subjects_per_class=spc, seed=seed))


def train_config(cfg: dict, seed: int) -> TrainConfig:
    try:
        return TrainConfig(**dict(cfg["train"], seed=seed))
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None


def derive_seeds(root: int) -> dict[str, int]:
    """Independent per-stage subseeds expanded from one root seed."""
    state = np.random.SeedSequence(root).generate_state(len(STAGES))
    return {"root": int(root), **{name: int(v) for name, v in zip(STAGES, state)}}


def _record_seeds(out: Path, root: int) -> dict[str, int]:
    seeds = derive_seeds(root)
    (out / "seeds.json").write_text(json.dumps(seeds, indent=1, sort_keys=True) + "\n")
    return seeds


# -- stages -------------------------------------------------------------------

def cmd_gen(args, cfg) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _record_seeds(out, args.seed)
    gcfg = gen_config(cfg, seeds["gen"])
    ds, truth = generate(gcfg)
    # the last subjects of each class become the unseen test population
    extra = cfg["data"]["test_subjects_per_class"]
    train_s, test_s = [], []
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.subject_class == c).tolist()
        if extra >= len(members):
            raise ConfigError("data.test_subjects_per_class", f"class {c} has only {len(members)} subjects")
        cut = len(members) - extra
        train_s += members[:cut]
        test_s += members[cut:]
    train_ds = ds.select_subjects(train_s)
    problems = validate_dataset(train_ds)
    if problems:
        raise RuntimeFailure("; ".join(problems))
    save_dataset(train_ds, out / "dataset.txt")
    if test_s:
        save_dataset(ds.select_subjects(test_s), out / "test.txt")
    sidecar = truth.to_dict()
    sidecar["train_subjects"] = train_s
    sidecar["test_subjects"] = test_s
    (out / "ground_truth.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(train_ds)} samples / {train_ds.n_subjects} subjects to {out / 'dataset.txt'}, "
          f"{len(ds) - len(train_ds)} held-out samples / {len(test_s)} subjects")
    return 0


def cmd_split(args, cfg) -> int:
    out = Path(args.out_dir)
    seeds = _record_seeds(out, args.seed)
    ds = load_dataset(out / "dataset.txt")
    k = args.k if args.k is not None else cfg["split"]["k"]
    plan = stratified_subject_folds(ds, k=k, seed=seeds["split"], tolerance_ratio=cfg["split"]["tolerance_ratio"])
    save_manifest(plan, out / "folds.json")
    status = "within" if plan.within_tolerance else "OUTSIDE"
    print(f"{k} folds, per-class image-count max/min ratio {plan.achieved_ratio:.3f} "
          f"({status} tolerance {plan.tolerance_ratio})")
    return 0


def _train_fold(out: str, fold: int, tcfg: TrainConfig) -> tuple[int, list[str], float]:
    out = Path(out)
    ds = load_dataset(out / "dataset.txt")
    plan = load_manifest(out / "folds.json")
    train_idx, val_idx = fold_train_val(plan, fold, ds)
    res = train_two_stage(replace(tcfg, seed=tcfg.seed + fold), ds, train_idx, val_idx)
    save_checkpoint(res.best, out / "checkpoints" / f"fold{fold}.json")
    write_loss_log([r.loss_row() for r in res.history], out / "logs" / f"fold{fold}.csv")
    return fold, res.aborted, res.best.val_f1


def _folds(spec: str, k: int) -> list[int]:
    if spec == "all":
        return list(range(k))
    try:
        fold = int(spec)
    except ValueError:
        raise ConfigError("--fold", f"expected an index or 'all', got {spec!r}") from None
    if not 0 <= fold < k:
        raise ConfigError("--fold", f"{fold} out of range 0..{k - 1}")
    return [fold]


def cmd_train(args, cfg) -> int:
    out = Path(args.out_dir)
    if not (out / "folds.json").is_file():
        raise ConfigError("manifest", f"missing {out / 'folds.json'}; run split first")
    seeds = _record_seeds(out, args.seed)
    tcfg = train_config(cfg, seeds["train"])
    folds = _folds(args.fold, load_manifest(out / "folds.json").k)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    if args.jobs > 1 and len(folds) > 1:
        # fold workers read their own copies of the inputs and write disjoint files
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_train_fold, [str(out)] * len(folds), folds, [tcfg] * len(folds)))
    else:
        results = [_train_fold(str(out), f, tcfg) for f in folds]
    failures = []
    for fold, aborted, val in results:
        print(f"fold {fold}: best validation weighted-F1 {val:.4f}")
        failures += [f"fold {fold}: {a}" for a in aborted]
    if failures:
        raise RuntimeFailure("; ".join(failures))
    return 0


def _checkpoint_paths(out: Path) -> list[Path]:
    paths = sorted((out / "checkpoints").glob("fold*.json"), key=lambda p: int(p.stem[4:]))
    if not paths:
        raise ConfigError("checkpoints", f"none found under {out / 'checkpoints'}; run train first")
    return paths


def cmd_predict(args, cfg) -> int:
    out = Path(args.out_dir)
    seeds = _record_seeds(out, args.seed)
    ds = load_dataset(args.dataset or out / "test.txt")
    views = args.views if args.views is not None else cfg["predict"]["views"]
    jitter = args.jitter if args.jitter is not None else cfg["predict"]["jitter"]
    if views < 1:
        raise ConfigError("--views", "must be >= 1")
    if jitter < 0:
        raise ConfigError("--jitter", "must be >= 0")
    probs = []
    for path in _checkpoint_paths(out):
        model_id = int(path.stem[4:])
        params = load_checkpoint(path).params
        probs.append(predict_proba(params, ds.features, views=views, jitter=jitter,
                                   seed=seeds["predict"] + model_id))
    write_confidences_csv(out / "confidences.csv", range(len(ds)), probs)
    print(f"{len(probs)} models x {len(ds)} samples -> {out / 'confidences.csv'}")
    return 0


def _thetas(args, cfg) -> list[float]:
    thetas = args.theta or list(cfg["ensemble"]["thetas"])
    for t in thetas:
        try:
            EnsembleConfig(theta=t)
        except ValueError as exc:
            raise ConfigError("--theta", str(exc)) from None
    return thetas


def _theta_tag(theta: float) -> str:
    return f"{theta:g}"


def cmd_ensemble(args, cfg) -> int:
    out = Path(args.out_dir)
    ids, per_sample = read_confidences_csv(out / "confidences.csv")
    rows = [["theta", "n", MAX_VOTE, HARMONIC]]
    for theta in _thetas(args, cfg):
        ecfg = EnsembleConfig(theta=theta, epsilon_clamp=cfg["ensemble"]["epsilon_clamp"])
        res = batch_decide(per_sample, ecfg)
        write_decisions_csv(out / f"decisions_theta{_theta_tag(theta)}.csv", ids, res.decisions)
        fr = res.rule_fractions
        rows.append([_theta_tag(theta), len(ids), f"{fr[MAX_VOTE]:.6f}", f"{fr[HARMONIC]:.6f}"])
        print(f"theta {theta:g}: max-vote {fr[MAX_VOTE]:.1%}, harmonic {fr[HARMONIC]:.1%}")
    with open(out / "ensemble_stats.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return 0


def cmd_eval(args, cfg) -> int:
    out = Path(args.out_dir)
    ds = load_dataset(args.dataset or out / "test.txt")
    truth = ds.classes
    ids, per_sample = read_confidences_csv(out / "confidences.csv")
    if len(ids) != len(ds):
        raise ConfigError("confidences.csv", f"{len(ids)} samples but dataset has {len(ds)}")
    P = np.stack(per_sample)  # (n, K, n_c)
    named, subset_rows = [], [["model", "theta", "count", "fraction", "subset_weighted_f1", "full_weighted_f1"]]
    thetas = _thetas(args, cfg)
    for k in range(P.shape[1]):
        pred, conf = P[:, k].argmax(axis=1), P[:, k].max(axis=1)
        full = weighted_f1(pred, truth, ds.n_classes)
        named.append((f"model{k}", full))
        for theta in thetas:
            sub = high_confidence_subset_eval(pred, conf, truth, theta, ds.n_classes)
            subset_rows.append([f"model{k}", _theta_tag(theta), sub.count, f"{sub.fraction:.6f}",
                                "" if sub.empty else f"{sub.result.weighted_f1:.6f}", f"{full.weighted_f1:.6f}"])
    for theta in thetas:
        path = out / f"decisions_theta{_theta_tag(theta)}.csv"
        if not path.is_file():
            raise ConfigError("--theta", f"no decisions for theta {theta:g}; run ensemble first")
        _, decisions = read_decisions_csv(path)
        pred = np.array([d.label for d in decisions])
        named.append((f"ensemble@{_theta_tag(theta)}", weighted_f1(pred, truth, ds.n_classes)))
    write_report_csv(named, out / "metrics.csv")
    with open(out / "subset.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(subset_rows)
    print(format_table(named))
    return 0


def cmd_verify(args, cfg) -> int:
    results = verify_mod.run_all(fault=args.inject_fault)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise RuntimeFailure("verification failed: " + ", ".join(failed))
    return 0


# -- entry point --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value file: gen, data, split, train, predict, ensemble")
    common.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    common.add_argument("--out-dir", default="run", help="working directory for all stage files")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="hetloss", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset and held-out test subjects")
    sp = sub.add_parser("split", parents=[common], help="subject-stratified folds")
    sp.add_argument("--k", type=int)
    tp = sub.add_parser("train", parents=[common], help="two-stage training per fold")
    tp.add_argument("--fold", default="all", help="fold index or 'all'")
    tp.add_argument("--jobs", type=int, default=1, help="train folds in parallel processes")
    pp = sub.add_parser("predict", parents=[common], help="per-model confidences")
    pp.add_argument("--dataset", help="dataset file (default: test.txt in the out dir)")
    pp.add_argument("--views", type=int)
    pp.add_argument("--jitter", type=float)
    ep = sub.add_parser("ensemble", parents=[common], help="thresholded max-vote / harmonic-mean decisions")
    ep.add_argument("--theta", type=float, action="append", help="repeatable; default 0.95 and 0.98")
    vp = sub.add_parser("eval", parents=[common], help="weighted-F1 report and high-confidence subset table")
    vp.add_argument("--dataset")
    vp.add_argument("--theta", type=float, action="append")
    xp = sub.add_parser("verify", parents=[common], help="gradient checks and oracle equivalences")
    xp.add_argument("--inject-fault", metavar="GROUP", help=argparse.SUPPRESS)
    return p


COMMANDS = {"gen": cmd_gen, "split": cmd_split, "train": cmd_train, "predict": cmd_predict,
            "ensemble": cmd_ensemble, "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (RuntimeFailure, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
