"""``fhvae`` command line: data generation, training, evaluation and benchmarks.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import subprocess
import sys
from contextlib import nullcontext
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as tn
from .data import (DataError, SegmentDataset, SequenceRecord, SynthSpec, feature_stats, load_manifest, load_truth,
                   save_manifest, save_truth, split_records, standardize, synth_generate, wav_fbank, write_features)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .objective import LOG_COLUMNS
from .trainer import NonFiniteGradient, TrainConfig, stream, train_flat, train_hierarchical

log = logging.getLogger("fhvae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT = "checkpoint.fhck"
RUN_CONFIG = "run.cfg"


class ConfigError(Exception):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# key=value config files

_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig) if f.name != "frame_dim"}
_RUN_KEYS = {"data": "str", "shift": "int", "standardize": "bool", "train_split": "str", "valid_split": "str"}
RUN_DEFAULTS = {"data": "", "shift": 0, "standardize": False, "train_split": "train", "valid_split": "valid"}
ALL_KEYS = {**_TRAIN_KEYS, **_MODEL_KEYS, **_RUN_KEYS}


def _convert(key: str, raw: str):
    kind = ALL_KEYS[key]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw


def parse_assignment(text: str, where: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"{where}: expected key=value, got {text!r}")
    key, raw = (s.strip() for s in text.split("=", 1))
    if key not in ALL_KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return key, _convert(key, raw)
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key}: {e}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` per line; ``#`` starts a comment. Errors name the line."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line, f"{source}:{lineno}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_config(values: dict) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


def resolve_config(args) -> dict:
    """File values, then dedicated flags, then ``--set`` overrides."""
    values = dict(RUN_DEFAULTS)
    values.update({k: getattr(TrainConfig(), k) for k in _TRAIN_KEYS})
    values.update({k: getattr(ModelConfig(), k) for k in _MODEL_KEYS})
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    flag_map = {"seed": "seed", "K": "K", "bs": "bs", "bseg": "B_seg", "alpha": "alpha", "lr": "lr",
                "max_steps": "max_steps", "patience": "patience_steps", "data": "data"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    for i, item in enumerate(args.set or [], 1):
        key, value = parse_assignment(item, f"--set #{i}")
        values[key] = value
    return values


def split_config(values: dict, frame_dim: int) -> tuple[TrainConfig, ModelConfig]:
    try:
        tc = TrainConfig(**{k: values[k] for k in _TRAIN_KEYS})
        mc = ModelConfig(frame_dim=frame_dim, **{k: values[k] for k in _MODEL_KEYS})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return tc, mc


# ---------------------------------------------------------------------------
# run bookkeeping


def version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True, text=True,
                             timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(out: Path, command: str, seed: int, config_text: str) -> None:
    payload = {
        "command": command,
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": seed,
        "version": version_string(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _load_records(path) -> list:
    if not path:
        raise DataError("no data directory given (use --data or data=... in the config)")
    records = load_manifest(path)
    if not records:
        raise DataError(f"{path}: manifest lists no sequences")
    return records


def _run_dir(ckpt: str) -> tuple[Path, Path]:
    p = Path(ckpt)
    if p.is_dir():
        p = p / CHECKPOINT
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    return p.parent, p


def _load_run(args):
    """Params, checkpoint extras, run config and the (scaled) records of the requested split."""
    run_dir, ckpt = _run_dir(args.ckpt)
    try:
        params, extra = load_checkpoint(ckpt)
    except ValueError as e:
        raise DataError(str(e)) from None
    cfg_path = run_dir / RUN_CONFIG
    values = dict(RUN_DEFAULTS)
    if cfg_path.exists():
        values.update(parse_config_text(cfg_path.read_text(), str(cfg_path)))
    data = args.data or values.get("data")
    records = _load_records(data)
    parts = split_records(records)
    split = args.split
    if split == "auto":
        split = "test" if "test" in parts else ("valid" if "valid" in parts else "train")
    if split != "all":
        if split not in parts:
            raise DataError(f"{data}: no sequences in split {split!r}")
        records = parts[split]
    stats = extra.get("standardize")
    if stats:
        records = standardize(records, stats["mean"], stats["std"])
    ds = SegmentDataset(records, params.config.seg_len, int(values.get("shift") or 0) or None)
    if len(ds) == 0:
        raise DataError("no sequence is long enough to yield a segment")
    return params, extra, values, ds, Path(data)


def _out_dir(args, default: Path) -> Path:
    out = Path(args.out) if args.out else default
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    spec = SynthSpec(M=args.M, segs_per_seq=args.segs, n_factors=args.factors, n_classes=args.classes,
                     z1_dim=args.z1_dim, z2_dim=args.z2_dim, frame_dim=args.frame_dim, seg_len=args.seg_len,
                     noise=args.noise, n_valid=args.n_valid, n_test=args.n_test, seed=args.seed or 0)
    data = synth_generate(spec)
    out = _out_dir(args, Path("synth"))
    save_manifest(data.records, out)
    save_truth(data, out)
    write_run_manifest(out, "synth-data", spec.seed, json.dumps(asdict(spec), sort_keys=True))
    print(f"wrote {len(data.records)} sequences to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    wav_dir = Path(args.wav_dir)
    wavs = sorted(wav_dir.glob("*.wav"))
    if not wavs:
        raise DataError(f"no .wav files in {wav_dir}")
    records = [SequenceRecord(w.stem, wav_fbank(w, expected_rate=args.rate, n_filters=args.n_filters))
               for w in wavs]
    out = _out_dir(args, Path("features"))
    save_manifest(records, out)
    write_run_manifest(out, "ingest", 0, f"rate={args.rate}\nn_filters={args.n_filters}\n")
    print(f"wrote {len(records)} feature files to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = resolve_config(args)
    records = _load_records(values["data"])
    parts = split_records(records)
    train_recs = parts.get(values["train_split"], [])
    if not train_recs:
        raise DataError(f"no sequences in training split {values['train_split']!r}")
    valid_recs = parts.get(values["valid_split"], [])
    tc, mc = split_config(values, train_recs[0].features.shape[1])

    out = Path(args.out)
    if (out / CHECKPOINT).exists() and not args.force:
        raise UsageError(f"{out / CHECKPOINT} exists; pass --force to overwrite")

    stats = None
    if values["standardize"]:
        mean, std = feature_stats(train_recs)
        stats = {"mean": mean.tolist(), "std": std.tolist()}
        train_recs = standardize(train_recs, mean, std)
        valid_recs = standardize(valid_recs, mean, std)
    shift = values["shift"] or None
    train = SegmentDataset(train_recs, mc.seg_len, shift)
    valid = SegmentDataset(valid_recs, mc.seg_len, shift) if valid_recs else None
    if len(train) == 0:
        raise DataError("no training sequence is long enough to yield a segment")

    trainer = train_flat if args.flat else train_hierarchical
    res = trainer(train, tc, valid=valid, model_config=mc, timing=args.timing)

    out.mkdir(parents=True, exist_ok=True)
    extra = {"train_config": asdict(tc), "flat": bool(args.flat), "best_step": res.best_step, "steps": res.steps,
             "standardize": stats}
    save_checkpoint(res.params, out / CHECKPOINT, extra)
    write_rows(out / "train_log.csv", LOG_COLUMNS, ([r[c] for c in LOG_COLUMNS] for r in res.log))
    write_rows(out / "val_log.csv", ["step", "bound"], res.val_history)
    cfg_text = format_config(values)
    (out / RUN_CONFIG).write_text(cfg_text)
    write_run_manifest(out, "train --flat" if args.flat else "train", tc.seed, cfg_text)
    print(f"trained {res.steps} steps (best validation step {res.best_step}); checkpoint {out / CHECKPOINT}")
    return EXIT_OK


def cmd_eval_sv(args) -> int:
    from .evaluation import eer, score_trials
    params, _, values, ds, _ = _load_run(args)
    run_dir, _ = _run_dir(args.ckpt)
    trials = score_trials(params, ds, label=args.label, max_trials=args.max_trials, seed=args.seed or 0)
    rate = eer(trials)
    out = _out_dir(args, run_dir)
    trials.write_csv(out / "trials.csv")
    (out / "eer.txt").write_text(f"{rate!r}\n")
    write_run_manifest(out, "eval-sv", args.seed or 0, format_config(values) + f"label={args.label}\n")
    print(f"EER {rate:.6f} over {len(trials.scores)} trials")
    return EXIT_OK


def cmd_embed_tsne(args) -> int:
    from .evaluation import dump_embeddings
    from .tsne import tsne_embed
    params, _, values, ds, _ = _load_run(args)
    run_dir, _ = _run_dir(args.ckpt)
    seq_keys = sorted({k for s in ds.seq_ids for k in ds.records[s].labels})
    seg_keys = sorted({k for s in ds.seq_ids for k in ds.records[s].segment_labels})
    dump = dump_embeddings(params, ds, seq_keys, seg_keys)
    rows = np.arange(len(dump))
    if args.max_points and len(dump) > args.max_points:
        rows = np.sort(stream(args.seed or 0, "eval").choice(len(dump), args.max_points, replace=False))
    out = _out_dir(args, run_dir)
    dump.write_csv(out / "embeddings.csv")
    names = sorted(dump.labels)
    for latent in ("z1", "z2"):
        res = tsne_embed(getattr(dump, latent)[rows], perplexity=args.perplexity, iterations=args.iterations,
                         seed=args.seed or 0)
        write_rows(out / f"tsne_{latent}.csv", ["seq_id", "index", "y1", "y2", *names],
                   ([dump.seq_ids[r], int(dump.indices[r]), float(y[0]), float(y[1]),
                     *[dump.labels[n][r] for n in names]] for r, y in zip(rows, res.embedding)))
        print(f"t-SNE {latent}: KL {res.initial_kl:.4f} -> {res.kl:.4f}")
    write_run_manifest(out, "embed-tsne", args.seed or 0, format_config(values)
                       + f"perplexity={args.perplexity}\niterations={args.iterations}\n")
    return EXIT_OK


def cmd_recombine(args) -> int:
    from .evaluation import draw_pairs, recombine_pairs
    params, extra, values, ds, data_dir = _load_run(args)
    run_dir, _ = _run_dir(args.ckpt)
    if len(ds) < 2:
        raise DataError("recombination needs at least two sequences")
    rng = stream(args.seed or 0, "eval")
    truth = load_truth(data_dir)["mu2"] if (data_dir / "truth.json").exists() else None
    pairs = draw_pairs(ds, args.pairs, rng)
    res = recombine_pairs(params, ds, pairs, rng, truth_mu2=truth)
    stats = extra.get("standardize")
    frames = res.frames
    if stats:
        frames = frames * np.asarray(stats["std"]) + np.asarray(stats["mean"])
    out = _out_dir(args, run_dir)
    (out / "recombined").mkdir(exist_ok=True)
    for i, f in enumerate(frames):
        write_features(out / "recombined" / f"pair_{i:03d}.fbnk", f)
    header = ["pair", "seq_a", "index_a", "seq_b", "index_b"]
    rows = [[i, *p] for i, p in enumerate(pairs)]
    if truth is not None:
        header += ["dist_to_a", "dist_to_b"]
        rows = [r + [float(da), float(db)] for r, da, db in zip(rows, res.dist_a, res.dist_b)]
    write_rows(out / "recombine.csv", header, rows)
    write_run_manifest(out, "recombine", args.seed or 0, format_config(values) + f"pairs={args.pairs}\n")
    if truth is not None:
        print(f"{args.pairs} pairs; re-encoded z2 nearer the B source in {res.fraction_nearer_b:.1%}")
    else:
        print(f"{args.pairs} pairs written to {out / 'recombined'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_step_time, write_bench_csv
    values = resolve_config(args)
    K_list = [int(k) for k in args.K_grid.split(",") if k.strip()]
    if not K_list or min(K_list) < 1:
        raise UsageError("--K must be a comma-separated list of positive integers")
    _, mc = split_config(values, args.frame_dim)
    rows = bench_step_time(K_list, mc, bs=values["bs"], reps=args.reps, warmup=args.warmup,
                           alpha=values["alpha"], seed=values["seed"])
    out = _out_dir(args, Path("bench"))
    write_bench_csv(rows, out / "bench.csv")
    write_run_manifest(out, "bench", values["seed"], format_config(values) + f"K={args.K_grid}\n")
    for r in rows:
        print(f"K={r.K}: median {r.median_ms:.2f} ms (alpha=0: {r.alpha_zero_median_ms:.2f} ms)")
    return EXIT_OK


def cmd_denominator(args) -> int:
    from .evaluation import denominator_scaling
    M_list = [int(m) for m in args.M_grid.split(",") if m.strip()]
    res = denominator_scaling(args.d, M_list, draws=args.draws, seed=args.seed or 0, var=args.var)
    out = _out_dir(args, Path("denominator"))
    res.write_csv(out / "denominator_means.csv", out / "denominator_hist.csv")
    write_run_manifest(out, "denominator-scaling", args.seed or 0, f"d={args.d}\nM={args.M_grid}\n"
                       f"draws={args.draws}\nvar={args.var}\n")
    print(f"slope of mean log-denominator vs ln M: {res.slope:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _train_flags(p: argparse.ArgumentParser, cache_size: bool = True) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", help="directory holding manifest.csv")
    if cache_size:
        p.add_argument("--K", type=int)
    p.add_argument("--bs", type=int)
    p.add_argument("--bseg", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--patience", type=int, help="early-stopping patience in steps (0 disables)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", required=True, help="run directory or checkpoint file")
    p.add_argument("--data", help="override the run's data directory")
    p.add_argument("--split", default="auto", help="split to evaluate (auto: test, else valid, else train; or all)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fhvae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)
        return p

    p = add("synth-data", cmd_synth_data, "generate a synthetic two-level dataset")
    p.add_argument("--M", type=int, default=60)
    p.add_argument("--segs", type=int, default=25)
    p.add_argument("--factors", type=int, default=4)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--z1-dim", dest="z1_dim", type=int, default=4)
    p.add_argument("--z2-dim", dest="z2_dim", type=int, default=4)
    p.add_argument("--frame-dim", dest="frame_dim", type=int, default=8)
    p.add_argument("--seg-len", dest="seg_len", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--n-valid", dest="n_valid", type=int, default=8)
    p.add_argument("--n-test", dest="n_test", type=int, default=20)

    p = add("ingest", cmd_ingest, "log-Mel features for a directory of 16-bit mono WAV files")
    p.add_argument("--wav-dir", dest="wav_dir", required=True)
    p.add_argument("--rate", type=int, default=16000)
    p.add_argument("--n-filters", dest="n_filters", type=int, default=80)

    p = add("train", cmd_train, "train a model (hierarchical sampling unless --flat)")
    _train_flags(p)
    p.add_argument("--flat", action="store_true", help="original scheme with a cache over every sequence")
    p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    p.add_argument("--timing", action="store_true", help="fill the wall_ms log column (breaks byte-identity)")

    p = add("eval-sv", cmd_eval_sv, "s-vector verification EER on held-out sequences")
    _eval_flags(p)
    p.add_argument("--label", default="factor", help="sequence label that defines same-source trials")
    p.add_argument("--max-trials", dest="max_trials", type=int, default=0)

    p = add("embed-tsne", cmd_embed_tsne, "dump latent means and 2-D t-SNE coordinates")
    _eval_flags(p)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--max-points", dest="max_points", type=int, default=1000)

    p = add("recombine", cmd_recombine, "decode z1 of one segment with z2 of another")
    _eval_flags(p)
    p.add_argument("--pairs", type=int, default=10)

    p = add("bench", cmd_bench, "optimization step time over a grid of cache sizes")
    _train_flags(p, cache_size=False)
    p.add_argument("--K", dest="K_grid", default="10,100,1000", help="comma-separated cache sizes")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--frame-dim", dest="frame_dim", type=int, default=8)

    p = add("denominator-scaling", cmd_denominator, "Monte-Carlo log-denominator against cache size")
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--M", dest="M_grid", default="100,1000,10000")
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--var", type=float, default=2.0)
    return parser


def _thread_limit():
    n = os.environ.get("FHVAE_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"fhvae: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"fhvae: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (tn.NonFiniteError, tn.DomainError, NonFiniteGradient, FloatingPointError) as e:
        print(f"fhvae: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
