"""Command-line entry point: ``brpsnn <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import PRESETS, ConfigError, RunConfig, apply_overrides, dump_config, load_config
from .core import ContractError
from .data import (
    DataFormatError,
    Dataset,
    read_cifar10_bin,
    read_event_stream,
    read_idx,
    synth_temporal,
    write_event_stream,
)
from .encode import EncoderConfig, rate_encode
from .layers import Network
from .learn import TrainState, evaluate, train_epoch
from .metrics import CSV_COLUMNS, EpochMetrics, OpCount, RunMetrics, emit_csv, fit_affine

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


@contextlib.contextmanager
def thread_limit(threads: int | None, deterministic: bool):
    """Cap BLAS threads; deterministic mode always runs single-threaded."""
    from threadpoolctl import threadpool_limits

    n = 1 if deterministic or threads is None else threads
    with threadpool_limits(limits=n):
        yield


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    cfg.check_paths()
    if cfg.kind == "mnist":
        train = read_idx(cfg.train_images, cfg.train_labels)
        test = read_idx(cfg.test_images, cfg.test_labels)
    elif cfg.kind == "cifar10":
        train = read_cifar10_bin(cfg.train_files)
        test = read_cifar10_bin(cfg.test_files)
    elif cfg.kind == "event":
        train = read_event_stream(cfg.train_events)
        test = read_event_stream(cfg.test_events)
        if train.x.shape[1:] != test.x.shape[1:]:
            raise DataFormatError("train and test event streams have different frame shapes")
        if train.t_bins != cfg.T:
            raise ConfigError(f"event files have t_bins={train.t_bins} but T={cfg.T}")
    else:
        kw = dict(T=cfg.T, length=cfg.synth_length, num_classes=cfg.num_classes)
        try:
            train = synth_temporal(cfg.synth_kind, cfg.synth_train, cfg.seed, **kw)
            test = synth_temporal(cfg.synth_kind, cfg.synth_test, cfg.seed + 1, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if cfg.train_subset:
        train = train.subset(min(cfg.train_subset, len(train)))
    if cfg.test_subset:
        test = test.subset(min(cfg.test_subset, len(test)))
    return train, test


def build_network(cfg: RunConfig, data: Dataset) -> Network:
    try:
        net = Network.build(cfg.topology, data.feature_shape, lif=cfg.lif_params(),
                            seed=cfg.seed, init_scale=cfg.init_scale,
                            conv_init_scale=cfg.conv_init_scale)
    except ContractError as exc:
        raise ConfigError(f"topology {cfg.topology!r}: {exc}") from None
    if net.num_classes != data.num_classes:
        raise ConfigError(f"topology has {net.num_classes} outputs but the data has "
                          f"{data.num_classes} classes")
    return net


def _eval_row(epoch: int, split: str, res, wall_ms: int) -> EpochMetrics:
    return EpochMetrics(epoch, split, res.accuracy, res.loss, res.silent_conv, res.silent_fc,
                        res.ops.forward_ops, 0, wall_ms)


def run_training(cfg: RunConfig, quiet: bool = False, timing: bool = True) -> RunMetrics:
    """Train for ``cfg.epochs``, writing ``metrics.csv`` and ``model.ckpt`` to ``cfg.out_dir``.

    With ``timing=False`` the wall-clock column is written as 0 so the CSV
    depends only on (config, seed).
    """
    train, test = load_datasets(cfg)
    net = build_network(cfg, train)
    tcfg = cfg.train_config()
    state = TrainState.create(net, tcfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8", newline="\n")
    metrics = RunMetrics()
    for _ in range(cfg.epochs):
        m = train_epoch(net, train, tcfg, state)
        t0 = time.perf_counter()
        res = evaluate(net, test, tcfg)
        ev = _eval_row(m.epoch, "test", res, int(round((time.perf_counter() - t0) * 1000)))
        if not timing:
            m.wall_ms = ev.wall_ms = 0
        metrics.add(m)
        metrics.add(ev)
        emit_csv(metrics, out / "metrics.csv")
        if not quiet:
            log(f"epoch {m.epoch}: train acc {m.accuracy:.4f} loss {m.loss:.4f} | "
                f"test acc {res.accuracy:.4f} | silent conv {res.silent_conv:.3f} "
                f"fc {res.silent_fc:.3f}")
    emit_csv(metrics, out / "metrics.csv")
    ckpt.save(out / "model.ckpt", ckpt.from_training(net, state))
    return metrics


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    cfg.validate()
    with thread_limit(args.threads, args.deterministic):
        metrics = run_training(cfg, quiet=args.quiet, timing=not args.no_timing)
    last = metrics.last("test")
    acc = last.accuracy if last else float("nan")
    print(f"final test accuracy {acc:.4f}; artifacts in {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    cfg.validate()
    ck = ckpt.load(args.checkpoint, lif=cfg.lif_params())
    train, test = load_datasets(cfg)
    data = train if args.split == "train" else test
    if ck.net.input_shape != data.feature_shape or ck.net.num_classes != data.num_classes:
        raise ConfigError("checkpoint network does not fit the configured dataset")
    with thread_limit(args.threads, args.deterministic):
        t0 = time.perf_counter()
        res = evaluate(ck.net, data, cfg.train_config())
        wall = 0 if args.no_timing else int(round((time.perf_counter() - t0) * 1000))
    row = _eval_row(ck.epoch, args.split, res, wall)
    print(f"{args.split} accuracy {res.accuracy:.4f}")
    w = csv.writer(sys.stdout, lineterminator="\n")
    if args.csv:
        metrics = RunMetrics()
        metrics.add(row)
        emit_csv(metrics, args.csv)
    else:
        w.writerow(CSV_COLUMNS)
        w.writerow(row.row())
    return EXIT_OK


BENCH_COLUMNS = ("mode", "width", "depth", "fwd_ops", "upd_ops", "ratio_vs_brp")


def bench_network(width: int, depth: int, classes: int, seed: int = 0) -> Network:
    """``depth`` learnable fc layers: ``depth - 1`` hidden layers of ``width`` and the output."""
    topo = "-".join([f"FC{width}"] * (depth - 1) + [f"FC{classes}"])
    return Network.build(topo, (width,), seed=seed, init_scale=3.0)


def run_bench(widths, depths, modes=("brp", "pseudo_bp"), T: int = 20, samples: int = 50,
              classes: int = 10, seed: int = 0) -> list[dict]:
    """Instrumented single-epoch runs on random analog inputs; one row per (mode, width, depth)."""
    from .learn import TrainConfig

    rows = []
    for width in widths:
        rng = np.random.default_rng([seed, width])
        x = rng.random((samples, width)).astype(np.float32)
        y = np.arange(samples) % classes
        data = Dataset(x, y, classes, "analog", "bench")
        for depth in depths:
            per_mode = {}
            for mode in modes:
                net = bench_network(width, depth, classes, seed)
                tcfg = TrainConfig(mode=mode, T=T, batch=samples, seed=seed)
                m = train_epoch(net, data, tcfg, TrainState.create(net, tcfg))
                per_mode[mode] = (m.fwd_ops, m.upd_ops)
            for mode in modes:
                fwd, upd = per_mode[mode]
                base = per_mode.get("brp", (0, 0))[1]
                rows.append(dict(mode=mode, width=width, depth=depth, fwd_ops=fwd, upd_ops=upd,
                                 ratio_vs_brp=f"{upd / base:.6f}" if base else ""))
    return rows


def cmd_bench(args) -> int:
    widths = _int_list(args.widths, "--widths")
    depths = _int_list(args.depths, "--depths")
    if any(d < 1 for d in depths) or any(w < 1 for w in widths):
        raise ConfigError("widths and depths must be >= 1")
    with thread_limit(args.threads, args.deterministic):
        rows = run_bench(widths, depths, T=args.T, samples=args.samples, classes=args.classes,
                         seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for width in widths:
        sel = [r for r in rows if r["mode"] == "brp" and r["width"] == width]
        if len(sel) >= 2:
            a, b, r2 = fit_affine([r["depth"] for r in sel], [r["upd_ops"] for r in sel])
            print(f"width {width}: brp upd_ops = {a:.1f}*K + {b:.1f} (R^2 = {r2:.6f})")
        ratios = [r["ratio_vs_brp"] for r in rows if r["mode"] == "pseudo_bp" and r["width"] == width]
        if ratios:
            print(f"width {width}: pseudo_bp/brp ratios by depth: {', '.join(ratios)}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    try:
        ds = synth_temporal(args.kind, args.n, args.seed, T=args.T, length=args.length,
                            num_classes=args.classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_event_stream(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def _load_image(args) -> np.ndarray:
    if args.image:
        p = Path(args.image)
        if not p.is_file():
            raise DataFormatError(f"image file not found: {p}")
        if p.suffix == ".npy":
            try:
                img = np.load(p, allow_pickle=False)
            except ValueError as exc:
                raise DataFormatError(f"{p}: {exc}") from None
            img = np.asarray(img, dtype=np.float64)
            if img.size and img.max() > 1.0:
                img = img / 255.0
            return img
        # any IDX image file; pick one sample
        from .data import IDX_IMAGES, _read_idx_file

        imgs = _read_idx_file(p, IDX_IMAGES, 3)
        if not 0 <= args.index < len(imgs):
            raise DataFormatError(f"index {args.index} out of range for {len(imgs)} images")
        return imgs[args.index].astype(np.float64) / 255.0
    cfg = load_config(args.config).validate()
    train, _ = load_datasets(cfg)
    if not 0 <= args.index < len(train):
        raise DataFormatError(f"index {args.index} out of range for {len(train)} samples")
    if train.modality == "event":
        raise ConfigError("event datasets are already spikes; nothing to encode")
    return train.x[args.index].astype(np.float64)


def cmd_encode_preview(args) -> int:
    img = _load_image(args)
    try:
        enc = EncoderConfig(args.T, args.alpha, args.polarity)
        train = rate_encode(img, enc, np.random.default_rng(args.seed))
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    raster = train.data.reshape(args.T, -1)
    if args.format == "csv":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["t"] + [f"p{i}" for i in range(raster.shape[1])])
        for t, row in enumerate(raster):
            w.writerow([t] + row.tolist())
    else:
        for row in raster:
            print("".join("|" if s else "." for s in row))
    return EXIT_OK


def cmd_preset(args) -> int:
    print(dump_config(PRESETS[args.name]), end="")
    return EXIT_OK


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from None


def _parse_sets(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _resolve_config(args) -> RunConfig:
    overrides = _parse_sets(args.set)
    if args.config:
        return load_config(args.config, overrides)
    if args.preset:
        return apply_overrides(PRESETS[args.preset], overrides)
    raise ConfigError("give --config PATH or --preset NAME")


def _add_common(p, config: bool = True):
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: library choice)")
    p.add_argument("--deterministic", action="store_true", help="force single-threaded accumulation")
    if config:
        p.add_argument("--config", help="run config file")
        p.add_argument("--preset", choices=sorted(PRESETS), help="use a built-in preset")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--no-timing", action="store_true",
                       help="write 0 for wall-clock columns so output bytes depend only on config")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="brpsnn", description="Spiking network training with reward propagation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write metrics.csv + model.ckpt")
    _add_common(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--csv", help="write the result row to this CSV file instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="operation-count scaling over fc depth")
    _add_common(p, config=False)
    p.add_argument("--widths", default="64")
    p.add_argument("--depths", default="2,4,8")
    p.add_argument("--T", type=int, default=20)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-synth", help="write a synthetic temporal task as an event stream")
    p.add_argument("--kind", choices=("order2", "ramp"), default="order2")
    p.add_argument("--n", type=int, required=True, help="samples per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=20)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("encode-preview", help="print the spike raster of one encoded image")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help=".npy array or IDX image file")
    src.add_argument("--config", help="take the image from this config's training set")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--T", type=int, default=20)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--polarity", choices=("intensity", "literal"), default="intensity")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("ascii", "csv"), default="ascii")
    p.set_defaults(func=cmd_encode_preview)

    p = sub.add_parser("preset", help="print a built-in config preset")
    p.add_argument("name", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_preset)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log(f"config error: {exc}")
        return EXIT_CONFIG
    except ckpt.CheckpointError as exc:
        log(f"checkpoint error: {exc}")
        return EXIT_CHECKPOINT
    except DataFormatError as exc:
        log(f"data error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
