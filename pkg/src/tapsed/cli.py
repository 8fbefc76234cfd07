"""``tapsed`` command line: params, gradcheck, synth, train, eval.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

logger = logging.getLogger("tapsed")


class UsageError(Exception):
    pass


def _load_run_config(path: Optional[str]):
    from . import config

    if path is None:
        return config.RunConfig()
    try:
        return config.load(path)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


# -- params ----------------------------------------------------------------------

def cmd_params(args) -> int:
    from .model import build_model, count_params, param_breakdown, preset

    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        cfg = _load_run_config(args.config).model
    else:
        try:
            cfg = preset(args.preset or "baseline")
        except KeyError as exc:
            raise UsageError(str(exc)) from exc
    model = build_model(cfg, 0)
    total = count_params(model)
    for name, n in param_breakdown(model).items():
        print(f"{name}\t{n}")
    print(f"total\t{total}\t{total / 1e6:.3f} M")
    if args.expect is not None:
        dev = abs(total / 1e6 - args.expect) / args.expect * 100
        ok = dev <= args.tol
        print(f"expect {args.expect:.3f} M +/- {args.tol}%: deviation {dev:.2f}% -> {'PASS' if ok else 'FAIL'}")
        return EXIT_OK if ok else EXIT_CHECK
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITES, run_suite

    names = [args.module] if args.module else list(SUITES)
    if args.module and args.module not in SUITES:
        raise UsageError(f"unknown module {args.module!r}; choose from {', '.join(SUITES)}")
    failed = 0
    for name in names:
        r = run_suite(name, seeds=args.seeds)
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}\t{name}\tmax_rel_err={r.max_error:.3e}\ttol={r.tolerance:.0e}\tseeds={r.seeds}")
        failed += not r.passed
    return EXIT_CHECK if failed else EXIT_OK


# -- synth -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import synthesize

    cfg = _load_run_config(args.spec)
    seed = cfg.seed if args.seed is None else args.seed
    truth = synthesize(cfg.synth, args.out, seed)
    for split, clips in truth.items():
        n_ev = sum(len(v) for v in clips.values())
        print(f"{split}\t{len(clips)} clips\t{n_ev} events")
    return EXIT_OK


# -- train -----------------------------------------------------------------------

def cmd_train(args) -> int:
    from . import config
    from .data import load_dataset
    from .model import save_checkpoint
    from .training import LOG_HEADER, Trainer

    cfg = _load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.training.epochs = args.epochs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(args.data, clip_seconds=cfg.synth.clip_seconds)
    if cfg.model.n_classes != len(data.classes):
        raise UsageError(f"model.n_classes={cfg.model.n_classes} but the data has {len(data.classes)} classes")
    config.save(cfg, out / "config.txt")
    log_path = out / "train_log.tsv"
    with open(log_path, "w") as log:
        log.write(LOG_HEADER + "\n")
        print(LOG_HEADER)

        def on_epoch(rec):
            log.write(rec.line() + "\n")
            log.flush()
            print(rec.line(), flush=True)

        trainer = Trainer(cfg.model, cfg.training, cfg.seed)
        trainer.fit(data, on_epoch=on_epoch)
    save_checkpoint(out / "checkpoint.bin", trainer.state_tensors(), config.serialize(cfg))
    print(f"checkpoint\t{out / 'checkpoint.bin'}")
    return EXIT_OK


# -- eval ------------------------------------------------------------------------

def _load_model(path, which: str):
    from . import config
    from .model import build_model, load_checkpoint

    tensors, text = load_checkpoint(path)
    cfg = config.parse(text)
    model = build_model(cfg.model, cfg.seed)
    prefix = f"{which}."
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if not state:
        raise UsageError(f"{path}: no '{which}' weights in checkpoint")
    model.astype(np.dtype(cfg.training.dtype))
    model.load_state_dict(state)
    return model, cfg


def evaluate(model, cfg, data_dir, split: str = "validation", psds1: bool = True, f1: bool = True) -> Dict:
    """Score ``model`` on a split; returns a flat metrics dict and the 0.5-threshold detections."""
    from .data import load_split
    from .evaluation import classwise_f1, decode_batch, psds
    from .evaluation.io import read_strong_tsv
    from .frontend import HOP, SAMPLE_RATE
    from .synth import CLASSES, TRANSIENT
    from .training import predict_arrays

    ev = cfg.eval
    names, x = load_split(data_dir, split, cfg.synth.clip_seconds)
    truth_all = read_strong_tsv(Path(data_dir) / "metadata" / f"{split}.tsv")
    truth = {n: truth_all.get(n, []) for n in names}
    strong, weak = predict_arrays(model, x)
    frame_s = HOP * cfg.model.time_pool / SAMPLE_RATE
    classes = list(CLASSES)
    kw = dict(frame_seconds=frame_s, clip_seconds=cfg.synth.clip_seconds, median_length=ev.median_length,
              mask_mode=ev.mask_mode)
    metrics: Dict[str, float] = {}
    pc = ev.psds_config()
    if psds1:
        dets = decode_batch(strong, weak, names, pc.thresholds, classes, **kw)
        metrics["psds1"] = psds([dets[float(t)] for t in pc.thresholds], truth, classes, pc).score
    at_half = decode_batch(strong, weak, names, [ev.f1_threshold], classes, **kw)[float(ev.f1_threshold)]
    if f1:
        scores = classwise_f1(at_half, truth, classes, ev.dtc, ev.gtc)
        for c in classes:
            metrics[f"f1.{c}"] = scores[c]
        metrics["f1.mean_transient"] = float(np.mean([scores[c] for c in TRANSIENT]))
        metrics["f1.mean_stationary"] = float(np.mean([scores[c] for c in classes if c not in TRANSIENT]))
    return {"metrics": metrics, "detections": at_half}


def _anova_report(pattern: str) -> List[str]:
    from .evaluation import anova_oneway, tukey_hsd

    files = sorted(glob.glob(pattern))
    if not files:
        raise FileNotFoundError(f"no run files match {pattern!r}")
    groups: Dict[str, List[float]] = {}
    for f in files:
        rec = json.loads(Path(f).read_text())
        groups.setdefault(rec.get("model", Path(f).parent.name), []).append(float(rec["metrics"]["psds1"]))
    names = sorted(groups)
    if len(names) < 2:
        raise UsageError("ANOVA needs runs of at least two models")
    data = [groups[n] for n in names]
    an = anova_oneway(data)
    tk = tukey_hsd(data, names)
    lines = [f"anova.F = {an.F:.6g}", f"anova.p = {an.p:.6g}", f"tukey.ordering = {tk.ordering}"]
    for n, g in zip(names, data):
        lines.append(f"runs.{n} = {len(g)} mean {np.mean(g):.6f}")
    return lines


def cmd_eval(args) -> int:
    from .evaluation.io import write_strong_tsv

    out_lines: List[str] = []
    result = None
    if args.checkpoint:
        if not args.data:
            raise UsageError("--checkpoint needs --data")
        model, cfg = _load_model(args.checkpoint, args.which)
        do_psds = args.psds1 or not args.classwise_f1
        result = evaluate(model, cfg, args.data, args.split, psds1=do_psds, f1=args.classwise_f1 or not args.psds1)
        out_lines += [f"{k} = {v:.6f}" for k, v in result["metrics"].items()]
        out = Path(args.out) if args.out else Path(args.checkpoint).parent
        out.mkdir(parents=True, exist_ok=True)
        write_strong_tsv(out / "predictions.tsv", result["detections"])
        (out / "metrics.txt").write_text("\n".join(out_lines) + "\n")
        record = {"model": args.name or cfg.model.variant + ("+tap" if cfg.model.context_pooling == "tap" else ""),
                  "seed": cfg.seed, "metrics": result["metrics"]}
        (out / "metrics.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    if args.anova:
        if not args.runs:
            raise UsageError("--anova needs --runs <glob>")
        out_lines += _anova_report(args.runs)
    if not args.checkpoint and not args.anova:
        raise UsageError("nothing to do: give --checkpoint/--data and/or --runs/--anova")
    print("\n".join(out_lines))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tapsed", description="Frequency-dynamic CRNN sound event detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("params", help="parameter count and per-module breakdown")
    s.add_argument("--config")
    s.add_argument("--preset", help="baseline, fdy, dfd, pfd, tfd, mdfd, tap_pfd, tap_mdfd")
    s.add_argument("--expect", type=float, help="expected size in millions")
    s.add_argument("--tol", type=float, default=1.0, help="tolerance in percent")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--module")
    s.add_argument("--seeds", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate the synthetic dataset")
    s.add_argument("--spec", help="run config; only seed and synth.* are used")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="mean-teacher training")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint and/or compare runs")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--split", default="validation")
    s.add_argument("--which", choices=("student", "teacher"), default="student")
    s.add_argument("--psds1", action="store_true")
    s.add_argument("--classwise-f1", action="store_true")
    s.add_argument("--runs", help="glob of metrics.json files")
    s.add_argument("--anova", action="store_true")
    s.add_argument("--name", help="model label stored in metrics.json")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, EOFError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
