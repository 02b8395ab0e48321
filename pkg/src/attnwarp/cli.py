"""Command-line entry point: generate data, pre-train, train, evaluate, export.

Every command writes a JSON run manifest (command, resolved config, seed,
paths, input checksums) before doing any work, and adds output checksums
once all artifacts are written.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import data as D
from .core import TrainingConfig, WarpError
from .dtw import dtw_align, dtw_metric, local_cost_matrix, path_to_matrix, softmax_rows
from .evaluation import classification_report, verification_report
from .train import DtwTargetCache, PairSampler, TrainState, pretrain, train_contrastive
from .warpnet import WarpNetMetric, init_params, load_checkpoint, preset_arch, save_checkpoint

log = logging.getLogger("attnwarp")

THREADS_ENV = "ATTNWARP_THREADS"

PRESETS = {
    "unipen-like": {
        "W": 64, "K": 2, "arch": "small", "batch_size": 512, "margin": 1.0,
        "match_ratio": None, "task": "classify", "learning_rate": 1e-4,
    },
    "mcyt-like": {
        "W": 256, "K": 64, "arch": "large", "batch_size": 15, "margin": 1.0,
        "match_ratio": (1, 2), "task": "verify", "learning_rate": 1e-4,
    },
}


class CliError(Exception):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, path: Path, command: str, config: dict, seed: int, inputs: List[str], outputs: List[str]):
        self.path = Path(path)
        self.record = {
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": {p: sha256(p) for p in inputs},
            "outputs": {p: None for p in outputs},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.record, indent=2, sort_keys=True, default=str) + "\n")

    def finish(self):
        self.record["outputs"] = {p: sha256(p) for p in self.record["outputs"]}
        self._write()


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


def _positive(name):
    def conv(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}")
        if value < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {value}")
        return value

    return conv


def _nonneg(name):
    def conv(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}")
        if value < 0:
            raise argparse.ArgumentTypeError(f"{name} must be >= 0, got {value}")
        return value

    return conv


def _ratio(text):
    try:
        m, n = (int(t) for t in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--ratio must look like 1:2, got {text!r}")
    if n <= 0 or m < 0:
        raise argparse.ArgumentTypeError("--ratio needs m >= 0 and n > 0")
    return (m, n)


def _preset(args) -> dict:
    return dict(PRESETS[args.preset]) if getattr(args, "preset", None) else {}


def _pick(value, preset: dict, key: str, default):
    if value is not None:
        return value
    return preset.get(key, default)


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {path}")
    return p


# --- commands -----------------------------------------------------------------


def cmd_generate(args) -> None:
    pre = _preset(args)
    out = Path(args.out)
    task = _pick(args.task, pre, "task", "classify")
    W = _pick(args.w, pre, "W", 32)
    K = _pick(args.k, pre, "K", 2)
    arch = preset_arch(_pick(args.arch, pre, "arch", "small"), K)
    if task == "classify":
        cfg = D.SynthConfig(
            n_classes=args.classes, samples_per_class=args.per_class, W=W, K=K,
            warp_strength=args.warp_strength, noise_std=args.noise, reorder_fraction=args.reorder,
            seed=args.seed, val_per_class=args.val_per_class, test_per_class=args.test_per_class,
            class_similarity=args.similarity, divisor=2 ** arch.pooling_stages,
        )
    else:
        cfg = D.VerifConfig(
            n_subjects=args.subjects, genuine_per_subject=args.genuine, forgeries_per_subject=args.forgeries,
            W=W, K=K, warp_strength=args.warp_strength, noise_std=args.noise,
            forgery_strength=args.forgery_strength, train_fraction=args.train_fraction,
            seed=args.seed, divisor=2 ** arch.pooling_stages,
        )
    man = Manifest(_manifest_path(out), "generate", {"task": task, **asdict(cfg), "normalize": args.normalize},
                   args.seed, [], [str(out)])
    ds = D.generate_synthetic(cfg) if task == "classify" else D.generate_verification(cfg)
    ds = D.normalize(ds, args.normalize)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save_dataset(ds, out)
    man.finish()
    print(f"wrote {len(ds)} records to {out}")


def _training_config(args, pre: dict, task_default: str = "classify") -> TrainingConfig:
    return TrainingConfig(
        margin=_pick(args.margin, pre, "margin", 1.0),
        learning_rate=_pick(args.lr, pre, "learning_rate", 1e-4),
        batch_size=_pick(args.batch_size, pre, "batch_size", 512),
        max_epochs=_pick(getattr(args, "epochs", None), pre, "max_epochs", 20),
        match_ratio=_pick(args.ratio, pre, "match_ratio", None),
        seed=args.seed,
        steps_per_epoch=_pick(getattr(args, "steps_per_epoch", None), pre, "steps_per_epoch", 50),
        pretrain_steps=_pick(getattr(args, "steps", None), pre, "pretrain_steps", 2000),
        pretrain_learning_rate=_pick(getattr(args, "pretrain_lr", None), pre, "pretrain_learning_rate", 1e-3),
        micro_batch=args.micro_batch,
        knn_k=args.knn_k,
        task=_pick(args.task, pre, "task", task_default),
        n_refs=args.refs,
        dtype=args.dtype,
    )


def _write_log(path: Optional[str], records: List[dict]) -> None:
    if path:
        with open(path, "w") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def _config_record(cfg: TrainingConfig, **extra) -> dict:
    d = asdict(cfg)
    d.update(extra)
    return d


def _load_data(path: str) -> D.Dataset:
    return D.load_dataset(_require_file(path))


def cmd_pretrain(args) -> None:
    pre = _preset(args)
    ds = _load_data(args.data)
    cfg = _training_config(args, pre)
    arch_name = _pick(args.arch, pre, "arch", "small")
    out = Path(args.out)
    outputs = [str(out)] + ([args.log] if args.log else [])
    man = Manifest(_manifest_path(out), "pretrain", _config_record(cfg, arch=arch_name),
                   cfg.seed, [args.data], outputs)
    X, labels = ds.arrays("train")
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    params = init_params(preset_arch(arch_name, ds.K), seed=cfg.seed, dtype=dtype)
    state = TrainState(params, seed=cfg.seed)
    matchable = (lambda lab: not lab.endswith(":f")) if cfg.task == "verify" else None
    sampler = PairSampler(labels, cfg.batch_size, cfg.match_ratio, cfg.seed, matchable)
    pretrain(state, X, sampler, cfg, cache=DtwTargetCache(X))
    save_checkpoint(out, state.params, seed=cfg.seed, step=state.step,
                    extra={"stage": "pretrain", "arch_preset": arch_name})
    _write_log(args.log, state.history)
    man.finish()
    print(f"pre-trained {state.step} steps; checkpoint {out}")


def cmd_train(args) -> None:
    pre = _preset(args)
    ds = _load_data(args.data)
    cfg = _training_config(args, pre)
    out = Path(args.out)
    outputs = [str(out)] + ([args.log] if args.log else [])
    inputs = [args.data]
    if args.init.startswith("pretrained:"):
        ckpt_path = args.init.split(":", 1)[1]
        _require_file(ckpt_path)
        inputs.append(ckpt_path)
    elif args.init != "he":
        raise CliError(f"--init must be 'he' or 'pretrained:<path>', got {args.init!r}")
    arch_name = _pick(args.arch, pre, "arch", "small")
    man = Manifest(_manifest_path(out), "train", _config_record(cfg, init=args.init, arch=arch_name),
                   cfg.seed, inputs, outputs)
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    if args.init == "he":
        params = init_params(preset_arch(arch_name, ds.K), seed=cfg.seed, dtype=dtype)
        step = 0
    else:
        ck = load_checkpoint(ckpt_path)
        params, step = ck.params.to(dtype), ck.step
    state = TrainState(params, seed=cfg.seed, step=step)
    train = ds.arrays("train")
    val = ds.arrays("val")
    train_contrastive(state, train, val if len(val[0]) else None, cfg)
    save_checkpoint(out, state.params, seed=cfg.seed, step=state.step,
                    extra={"stage": "train", "epochs": state.epoch, "best_val": state.best_metric})
    _write_log(args.log, state.history)
    man.finish()
    print(f"trained {state.epoch} epochs; best validation {state.best_metric}; checkpoint {out}")


def _evaluate(ds: D.Dataset, metric, task: str, k: int, refs: int, bins: int, split: str):
    if task == "classify":
        train = ds.arrays("train")
        test = ds.arrays(split)
        if not len(train[0]) or not len(test[0]):
            raise CliError(f"dataset needs non-empty 'train' and '{split}' splits")
        return classification_report(test[0], test[1], train[0], train[1], metric, k=k, bins=bins)
    X, labels = ds.arrays(split)
    if not len(X):
        raise CliError(f"dataset has an empty '{split}' split")
    return verification_report(X, labels, metric, n_refs=refs, bins=bins)


def _emit_report(report, out_dir: Path, info: dict) -> List[str]:
    report.info.update({k: str(v) for k, v in info.items()})
    report_path = out_dir / "report.txt"
    hist_path = out_dir / "histogram.csv"
    report.write(report_path)
    paths = [str(report_path)]
    if report.histogram is not None:
        report.histogram.to_csv(hist_path)
        paths.append(str(hist_path))
    return paths


def _run_eval(args, metric, command: str, inputs: List[str]) -> None:
    pre = _preset(args)
    ds = _load_data(args.data)
    task = _pick(args.task, pre, "task", "classify")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = {"task": task, "k": args.knn_k, "refs": args.refs, "bins": args.bins, "split": args.split}
    outputs = [str(out_dir / "report.txt")] + ([str(out_dir / "histogram.csv")])
    man = Manifest(out_dir / "manifest.json", command, cfg, 0, inputs, outputs)
    report = _evaluate(ds, metric(ds), task, args.knn_k, args.refs, args.bins, args.split)
    written = _emit_report(report, out_dir, {"command": command, "dataset": args.data})
    man.record["outputs"] = {p: None for p in written}
    man.finish()
    key = "accuracy" if task == "classify" else "eer"
    print(f"{key} = {report.metrics[key]:.6f}")


def cmd_eval(args) -> None:
    _require_file(args.checkpoint)
    ck = load_checkpoint(args.checkpoint)
    _run_eval(args, lambda ds: WarpNetMetric(ck.params), "eval", [args.data, args.checkpoint])


def cmd_dtw(args) -> None:
    _run_eval(args, lambda ds: dtw_metric, "dtw", [args.data])


def _block(name: str, m: np.ndarray) -> str:
    rows = "\n".join(",".join(repr(float(v)) for v in row) for row in np.atleast_2d(m))
    return f"[{name} {m.shape[0]}x{m.shape[1]}]\n{rows}\n"


def cmd_export_warp(args) -> None:
    _require_file(args.checkpoint)
    ds = _load_data(args.data)
    try:
        i, j = (int(t) for t in args.pair.split(","))
        a, b = ds.items[i].series.values, ds.items[j].series.values
    except (ValueError, IndexError):
        raise CliError(f"--pair must be two item indices 'i,j' within [0, {len(ds)}), got {args.pair!r}")
    out = Path(args.out)
    man = Manifest(_manifest_path(out), "export-warp", {"pair": [i, j]}, 0, [args.data, args.checkpoint], [str(out)])
    ck = load_checkpoint(args.checkpoint)
    mats = WarpNetMetric(ck.params).matrices(a, b)
    cost = local_cost_matrix(a, b)
    path = dtw_align(cost).path
    blocks = [
        ("A", a), ("B", b), ("DTW_cost", cost), ("P_DTW", softmax_rows(path_to_matrix(path, len(a)))),
        ("P", mats["P"]), ("P_s", mats["P_s"]), ("P_t", mats["P_t"]), ("P_sB", mats["P_sB"]), ("P_tA", mats["P_tA"]),
    ]
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(_block(n, m) for n, m in blocks), encoding="utf-8")
    man.finish()
    print(f"wrote warp matrices for pair ({i}, {j}) to {out}")


def read_blocks(path) -> dict:
    """Parse an export-warp file into ``name -> ndarray``."""
    out, name, rows = {}, None, []
    for line in Path(path).read_text(encoding="utf-8").splitlines() + [""]:
        if line.startswith("["):
            name = line[1:-1].split()[0]
            rows = []
        elif line.strip():
            rows.append([float(v) for v in line.split(",")])
        elif name is not None:
            out[name] = np.array(rows)
            name = None
    return out


# --- argument parsing ------------------------------------------------------------


def _add_train_flags(p, pretraining: bool):
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--arch", choices=["tiny", "small", "large"])
    p.add_argument("--task", choices=["classify", "verify"])
    p.add_argument("--batch-size", type=_positive("--batch-size"))
    p.add_argument("--ratio", type=_ratio, help="matching:non-matching pairs per batch, e.g. 1:2")
    p.add_argument("--lr", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--micro-batch", type=_positive("--micro-batch"), default=64)
    p.add_argument("--knn-k", type=_positive("--knn-k"), default=3)
    p.add_argument("--refs", type=_positive("--refs"), default=5)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--log", help="line-delimited JSON training log")
    if pretraining:
        p.add_argument("--steps", type=_nonneg("--steps"), help="pre-training step budget (default 2000)")
        p.add_argument("--pretrain-lr", type=float)
    else:
        p.add_argument("--init", default="he", help="'he' or 'pretrained:<checkpoint>'")
        p.add_argument("--epochs", type=_nonneg("--epochs"))
        p.add_argument("--steps-per-epoch", type=_positive("--steps-per-epoch"))


def _add_eval_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--task", choices=["classify", "verify"])
    p.add_argument("--k", dest="knn_k", type=_positive("--k"), default=3)
    p.add_argument("--refs", type=_positive("--refs"), default=5)
    p.add_argument("--bins", type=_positive("--bins"), default=20)
    p.add_argument("--split", default="test")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnwarp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--task", choices=["classify", "verify"])
    g.add_argument("--arch", choices=["tiny", "small", "large"], help="network the data must fit (W divisibility)")
    g.add_argument("--classes", type=_positive("--classes"), default=3)
    g.add_argument("--per-class", type=_positive("--per-class"), default=40)
    g.add_argument("--val-per-class", type=_nonneg("--val-per-class"), default=5)
    g.add_argument("--test-per-class", type=_nonneg("--test-per-class"), default=10)
    g.add_argument("--subjects", type=_positive("--subjects"), default=10)
    g.add_argument("--genuine", type=_positive("--genuine"), default=10)
    g.add_argument("--forgeries", type=_positive("--forgeries"), default=10)
    g.add_argument("--forgery-strength", type=float, default=0.5)
    g.add_argument("--train-fraction", type=float, default=0.6)
    g.add_argument("--w", type=_positive("--w"))
    g.add_argument("--k", type=_positive("--k"))
    g.add_argument("--warp-strength", type=float, default=0.3)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--reorder", type=float, default=0.0)
    g.add_argument("--similarity", type=float, default=0.0)
    g.add_argument("--normalize", choices=["zscore", "none"], default="zscore")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="DTW-guided pre-training")
    _add_train_flags(p, pretraining=True)
    p.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="contrastive training with validation-based model selection")
    _add_train_flags(t, pretraining=False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (k-NN accuracy or EER)")
    e.add_argument("--checkpoint", required=True)
    _add_eval_flags(e)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dtw", help="evaluate the DTW baseline")
    _add_eval_flags(d)
    d.set_defaults(func=cmd_dtw)

    x = sub.add_parser("export-warp", help="dump A, B, DTW and learned warping matrices for one pair")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--pair", required=True, help="item indices 'i,j'")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_warp)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    try:
        args.func(args)
    except (CliError, WarpError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
