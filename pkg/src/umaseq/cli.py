"""Command-line front end: gen | train | eval | decode | inspect | bench.

Every command reads one JSON config file with data/model/train sections,
applies repeatable dotted-key overrides (--set train.peak_lr=0.002), and
rejects unknown keys. Exit codes: 0 success, 2 usage or input error, 3
numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import ctc
from . import model as model_mod
from . import numcore as nc
from . import synthdata as sd
from . import traineval as te
from . import uma

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

SECTIONS = {
    "data": sd.SynthConfig,
    "model": model_mod.ModelConfig,
    "train": te.TrainConfig,
}


def _coerce(raw, current):
    if isinstance(current, tuple):
        if not isinstance(raw, (list, tuple)):
            raise UsageError(f"expected a list, got {raw!r}")
        return tuple(raw)
    if isinstance(current, bool):
        if not isinstance(raw, bool):
            raise UsageError(f"expected true/false, got {raw!r}")
        return raw
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or int(raw) != raw:
            raise UsageError(f"expected an integer, got {raw!r}")
        return int(raw)
    if isinstance(current, float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise UsageError(f"expected a number, got {raw!r}")
        return float(raw)
    if current is None:
        return raw
    return type(current)(raw)


def build_run_config(config_path=None, sets=(), seed=None) -> dict:
    """Defaults, then the config file, then --set overrides; unknown keys fail.

    Each section is validated once after every override has landed, so field
    order never matters.
    """
    defaults = {name: cls() for name, cls in SECTIONS.items()}
    pending: dict[str, dict] = {name: {} for name in SECTIONS}

    def apply(section: str, key: str, raw, where: str) -> None:
        if section not in defaults:
            raise UsageError(f"{where}: unknown section {section!r} "
                             f"(expected one of {sorted(SECTIONS)})")
        obj = defaults[section]
        valid = {f.name for f in fields(obj)}
        if key not in valid:
            raise UsageError(f"{where}: unknown key {section}.{key}")
        try:
            pending[section][key] = _coerce(raw, getattr(obj, key))
        except (ValueError, TypeError, UsageError) as exc:
            raise UsageError(f"{where}: bad value for {section}.{key}: {exc}") from exc

    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        for section, body in loaded.items():
            if not isinstance(body, dict):
                raise UsageError(f"config section {section!r} must be an object")
            for key, raw in body.items():
                apply(section, key, raw, f"config file {config_path}")

    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set needs key=value, got {item!r}")
        dotted, raw_text = item.split("=", 1)
        if dotted.count(".") != 1:
            raise UsageError(f"--set key must be section.field, got {dotted!r}")
        section, key = dotted.split(".")
        try:
            raw = json.loads(raw_text)
        except json.JSONDecodeError:
            raw = raw_text
        apply(section, key, raw, "--set")

    if seed is not None:
        for section in SECTIONS:
            pending[section]["seed"] = seed

    cfg = {}
    for name in SECTIONS:
        try:
            cfg[name] = replace(defaults[name], **pending[name])
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid {name} config: {exc}") from exc
    return cfg


def config_as_dict(cfg: dict) -> dict:
    return {name: asdict(obj) for name, obj in cfg.items()}


def echo_config(cfg: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config_as_dict(cfg), sort_keys=True, indent=2) + "\n")


def _check_model_matches_data(mcfg: model_mod.ModelConfig, header: dict) -> None:
    data_cfg = header["config"]
    if mcfg.d_in != data_cfg["d_in"] or mcfg.vocab != data_cfg["vocab"]:
        raise UsageError(
            f"model expects d_in={mcfg.d_in}, vocab={mcfg.vocab} but the dataset has "
            f"d_in={data_cfg['d_in']}, vocab={data_cfg['vocab']}"
        )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = build_run_config(args.config, args.set, args.seed)
    out = Path(args.out)
    dataset = sd.gen_split(cfg["data"], args.n)
    try:
        sd.save_dataset(out, dataset)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {out}: {exc}") from exc
    echo_config(cfg, out)
    all_utts = dataset.train + dataset.dev + dataset.test
    mean_t = np.mean([u.features.shape[0] for u in all_utts])
    mean_u = np.mean([len(u.tokens) for u in all_utts])
    print(f"wrote {len(dataset.train)}/{len(dataset.dev)}/{len(dataset.test)} "
          f"train/dev/test utterances to {out}")
    print(f"mean frames per utterance: {mean_t:.1f}")
    print(f"mean tokens per utterance: {mean_u:.1f}")
    return EXIT_OK


def _load_split_or_fail(data_dir, split: str) -> list[sd.Utterance]:
    try:
        return sd.load_split(data_dir, split)
    except FileNotFoundError as exc:
        raise UsageError(f"dataset not found under {data_dir}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = build_run_config(args.config, args.set, args.seed)
    try:
        header = sd.load_header(args.data)
    except FileNotFoundError as exc:
        raise UsageError(f"dataset not found under {args.data}") from exc
    _check_model_matches_data(cfg["model"], header)
    train_utts = _load_split_or_fail(args.data, "train")
    dev_utts = _load_split_or_fail(args.data, "dev")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)

    optimizer = None
    start_epoch = 0
    if args.resume:
        last = out / "last.ckpt"
        if not last.exists():
            raise UsageError(f"--resume: no checkpoint at {last}")
        params, meta, extras = model_mod.load_checkpoint(last)
        if params.config != cfg["model"]:
            raise UsageError("--resume: checkpoint model config differs from the requested one")
        optimizer = te.AdamState(params)
        optimizer.load_arrays(extras, meta["step"])
        start_epoch = meta["epoch"]
        print(f"resuming from epoch {start_epoch}, step {meta['step']}")
    else:
        params = model_mod.init_params(cfg["model"])

    with open(out / "metrics.jsonl", "a") as log_fp:
        result = te.train(params, train_utts, dev_utts, cfg["train"],
                          out_dir=out, log_fp=log_fp,
                          optimizer=optimizer, start_epoch=start_epoch)
    print(f"finished at step {result.steps}; skipped {result.skipped} infeasible visits")
    print(f"best dev CER {result.best_dev_cer:.4f} at epoch {result.best_epoch}")
    print(f"checkpoints and logs in {out}")
    return EXIT_OK


def _load_checkpoint_or_fail(path):
    try:
        return model_mod.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {path}") from exc
    except model_mod.CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def cmd_eval(args) -> int:
    params, _, _ = _load_checkpoint_or_fail(args.ckpt)
    utts = _load_split_or_fail(args.data, args.split)
    report = te.evaluate(params, utts)
    sys.stdout.write(te.format_report(report))
    if args.out:
        te.save_report(report, args.out)
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    params, _, _ = _load_checkpoint_or_fail(args.ckpt)
    utts = _load_split_or_fail(args.data, args.split)
    for utt in utts:
        trace = model_mod.model_forward(params, utt.features)
        hyp = ctc.greedy_decode(trace.logits.data)
        print(f"{utt.uid}\t{' '.join(map(str, hyp))}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    params, _, _ = _load_checkpoint_or_fail(args.ckpt)
    utts = _load_split_or_fail(args.data, args.split)
    matches = [u for u in utts if u.uid == args.utt]
    if not matches:
        raise UsageError(f"utterance {args.utt!r} not in split {args.split}")
    utt = matches[0]
    trace = model_mod.model_forward(params, utt.features)
    seg = trace.segmentation
    alpha = trace.alpha.data.ravel()
    s = params.config.subsample
    valley_set = set(seg.valleys)
    mapped_bounds = {
        int(np.clip(round(end / s), 1, seg.n_frames)) for _, end in utt.boundaries
    }
    # first segment covering each step; overlap frames report the earlier one
    seg_of_step = {}
    for i, (start, end) in enumerate(seg.segments, start=1):
        for t in range(start, end + 1):
            seg_of_step.setdefault(t, i)

    out_path = Path(args.out)
    with open(out_path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["step", "alpha", "is_valley", "segment", "is_true_boundary"])
        for t in range(1, seg.n_frames + 1):
            writer.writerow([
                t,
                f"{alpha[t - 1]:.6f}",
                int(t in valley_set),
                seg_of_step[t],
                int(t in mapped_bounds),
            ])
    print(f"wrote {seg.n_frames} rows for {utt.uid} to {out_path} "
          f"({seg.num_segments} segments, {len(utt.tokens)} tokens)")
    return EXIT_OK


def cmd_bench(args) -> int:
    params, _, _ = _load_checkpoint_or_fail(args.ckpt)
    utts = _load_split_or_fail(args.data, args.split)
    if args.limit:
        utts = utts[: args.limit]
    cfg = params.config
    consts = {k: nc.constant(v) for k, v in params.arrays.items()}

    pooled_time = 0.0
    bypass_time = 0.0
    ratios = []
    for utt in utts:
        h, _ = model_mod.encoder_forward(consts, cfg, utt.features)
        alpha = model_mod.weight_head(consts, h)
        c, seg = uma.uma_op(h, alpha)
        ratios.append(seg.num_segments / seg.n_frames)
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            model_mod.decoder_forward(consts, cfg, c)
            pooled_time += time.perf_counter() - t0
            t0 = time.perf_counter()
            model_mod.decoder_forward(consts, cfg, h)  # aggregation bypassed
            bypass_time += time.perf_counter() - t0

    n_runs = len(utts) * args.repeats
    pooled_ms = pooled_time / n_runs * 1e3
    bypass_ms = bypass_time / n_runs * 1e3
    report = {
        "utterances": len(utts),
        "repeats": args.repeats,
        "mean_length_ratio": round(float(np.mean(ratios)), 3),
        "decoder_ms_pooled": round(pooled_ms, 4),
        "decoder_ms_bypassed": round(bypass_ms, 4),
        "decoder_time_ratio": round(pooled_ms / bypass_ms, 4),
        "method": "wall-clock perf_counter around the decoder stack only, "
                  "summed over utterances x repeats; encoder and pooling run "
                  "once per utterance outside the timers",
        "model_config": asdict(cfg),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file with data/model/train sections")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.peak_lr=0.002 (repeatable)")
    p.add_argument("--seed", type=int, help="override every section's seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umaseq")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=2500, help="total utterances (80/10/10 split)")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in --out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="dev", choices=sd.SPLITS)
    p.add_argument("--out", help="directory for report.txt / report.json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("decode", help="print greedy decodes for a split")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=sd.SPLITS)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("inspect", help="dump per-step weights and valleys as CSV")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="dev", choices=sd.SPLITS)
    p.add_argument("--utt", required=True, help="utterance id, e.g. u000042")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("bench", help="decoder throughput with and without pooling")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="dev", choices=sd.SPLITS)
    p.add_argument("--limit", type=int, default=0, help="cap utterance count (0 = all)")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", help="directory for bench.json")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except te.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
