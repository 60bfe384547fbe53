"""Command-line entry point: synth, partition, train, eval, info.

Every command resolves its configuration as defaults <- JSON config file
(--config) <- explicit flags, echoes the resolved values plus their
content hash to ``run_config.json`` in the output directory, and exits
0 on success, 2 on usage/config errors, 3 on data/parse errors, 4 on
numeric failure (non-finite training loss).
"""

import argparse
import hashlib
import json
import os
import struct
import sys
import time

import numpy as np

from . import hsidata, kernels, specview, unmixeval
from . import model as net
from .errors import ConfigError, DSANetError, NonFiniteLossError, ParseError

DEFAULTS = {
    "data": None,
    "p": 4,
    "k": 3,
    "hidden": 64,
    "dropout": 0.1,
    "lambda1": 1.0,
    "lambda2": 1e-3,
    "lr": 1e-3,
    "batch": 64,
    "epochs": 200,
    "m": 4,
    "n": 4,
    "sample_size": 10000,
    "seed": 0,
    "repeats": 1,
    "backend": None,
    "out": ".",
    "threads": 1,
}

# wall-clock and thread count cannot change results, so they stay out of
# the content hash; everything else identifies the run
_UNHASHED = ("out", "threads")


def resolve_config(args, extra_fields=()):
    """defaults <- config file <- explicit CLI flags, as a plain dict."""
    resolved = dict(DEFAULTS)
    for key in extra_fields:
        resolved[key] = None
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{config_path}: invalid JSON ({exc.msg})", exc.pos)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        for key, value in loaded.items():
            if key not in resolved:
                raise ConfigError(f"{config_path}: unknown config key {key!r}")
            resolved[key] = value
    for key in resolved:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    if resolved.get("backend") is None:
        resolved["backend"] = kernels.get_backend()
    return resolved


def config_hash(resolved):
    hashed = {k: v for k, v in sorted(resolved.items()) if k not in _UNHASHED}
    blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


def _echo_config(resolved, out_dir, command):
    digest = config_hash(resolved)
    payload = dict(resolved)
    payload["command"] = command
    payload["config_hash"] = digest
    path = os.path.join(out_dir, "run_config.json")
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest


def _prepare_out(resolved):
    out_dir = resolved["out"]
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _apply_backend(resolved):
    kernels.set_backend(resolved["backend"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    resolved = resolve_config(args, extra_fields=("h", "w", "l", "snr", "alpha"))
    for key in ("h", "w", "l"):
        if resolved[key] is None:
            raise ConfigError(f"synth requires --{key}")
    if resolved["snr"] is None:
        resolved["snr"] = 30.0
    if resolved["alpha"] is None:
        resolved["alpha"] = 0.5
    out_dir = _prepare_out(resolved)
    cube, gt = hsidata.generate_synthetic(
        resolved["h"],
        resolved["w"],
        resolved["l"],
        resolved["p"],
        resolved["snr"],
        resolved["alpha"],
        resolved["seed"],
    )
    cube_path = os.path.join(out_dir, args.name + ".hsib")
    hsidata.save_cube(cube, cube_path)
    hsidata.save_gt(gt, cube.height, cube.width, hsidata.gt_path(cube_path))
    _echo_config(resolved, out_dir, "synth")
    print(f"wrote {cube_path} and {hsidata.gt_path(cube_path)}")
    return 0


def _compute_partition(cube, resolved):
    corr = specview.band_correlation(
        cube, sample_size=resolved["sample_size"], seed=resolved["seed"]
    )
    labels = specview.cluster_bands(corr, resolved["m"])
    return specview.partition_views(labels, resolved["n"])


def cmd_partition(args):
    resolved = resolve_config(args)
    if resolved["data"] is None:
        raise ConfigError("partition requires --data")
    out_dir = _prepare_out(resolved)
    cube, _ = hsidata.load_cube(resolved["data"])
    partition = _compute_partition(cube, resolved)
    path = os.path.join(out_dir, "partition.txt")
    specview.save_partition(partition, path)
    _echo_config(resolved, out_dir, "partition")
    print(f"wrote {path}")
    return 0


def _model_config(resolved, partition, seed):
    return net.ModelConfig(
        n_end=int(resolved["p"]),
        partition=partition,
        window=int(resolved["k"]),
        hidden=int(resolved["hidden"]),
        dropout=float(resolved["dropout"]),
        lambda_sad=float(resolved["lambda1"]),
        lambda_sparse=float(resolved["lambda2"]),
        learning_rate=float(resolved["lr"]),
        batch_size=int(resolved["batch"]),
        epochs=int(resolved["epochs"]),
        seed=int(seed),
    )


def _load_training_inputs(args, resolved):
    cube, gt = hsidata.load_cube(resolved["data"])
    cube = hsidata.normalize_cube(cube)
    partition_path = getattr(args, "partition_file", None)
    if partition_path:
        partition = specview.load_partition(partition_path)
        if partition.n_bands != cube.bands:
            raise ConfigError(
                f"partition covers {partition.n_bands} bands, cube has {cube.bands}"
            )
    else:
        partition = _compute_partition(cube, resolved)
    return cube, gt, partition


def cmd_train(args):
    resolved = resolve_config(args)
    if resolved["data"] is None:
        raise ConfigError("train requires --data")
    _apply_backend(resolved)
    out_dir = _prepare_out(resolved)
    cube, _, partition = _load_training_inputs(args, resolved)
    resolved["partition_views"] = [v.tolist() for v in partition.views]
    cfg = _model_config(resolved, partition, resolved["seed"])
    model, history = net.train(cube, cfg)
    ckpt = os.path.join(out_dir, "model.dsan")
    net.save_model(model, ckpt)
    hist_path = os.path.join(out_dir, "history.csv")
    with open(hist_path, "w", encoding="ascii") as fh:
        for epoch, value in enumerate(history, start=1):
            fh.write(f"{epoch},{value!r}\n")
    _echo_config(resolved, out_dir, "train")
    print(f"wrote {ckpt} and {hist_path}")
    return 0


def _single_eval(cube, gt, model, threads):
    t0 = time.perf_counter()
    result = net.infer(cube, model, threads=threads)
    report = unmixeval.evaluate(result, gt, runtime_s=time.perf_counter() - t0)
    return result, report


def cmd_eval(args):
    resolved = resolve_config(args, extra_fields=("checkpoint",))
    if resolved["data"] is None:
        raise ConfigError("eval requires --data")
    _apply_backend(resolved)
    out_dir = _prepare_out(resolved)
    repeats = int(resolved["repeats"])
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    checkpoint = resolved["checkpoint"]
    if checkpoint and repeats != 1:
        raise ConfigError("--repeats needs training config, not a fixed checkpoint")

    if checkpoint:
        cube, gt = hsidata.load_cube(resolved["data"])
        if gt is None:
            raise ConfigError(f"no ground-truth sidecar found for {resolved['data']}")
        cube = hsidata.normalize_cube(cube)
        model = net.load_model(checkpoint)
        t0 = time.perf_counter()
        result = net.infer(cube, model, threads=resolved["threads"])
        report = unmixeval.evaluate(result, gt, runtime_s=time.perf_counter() - t0)
        reports = [report]
        results = [result]
    else:
        cube, gt, partition = _load_training_inputs(args, resolved)
        if gt is None:
            raise ConfigError(f"no ground-truth sidecar found for {resolved['data']}")
        resolved["partition_views"] = [v.tolist() for v in partition.views]
        reports = []
        results = []
        for r in range(repeats):
            cfg = _model_config(resolved, partition, resolved["seed"] + r)
            t0 = time.perf_counter()
            model, _ = net.train(cube, cfg)
            result = net.infer(cube, model, threads=resolved["threads"])
            report = unmixeval.evaluate(
                result, gt, runtime_s=time.perf_counter() - t0
            )
            reports.append(report)
            results.append(result)

    digest = _echo_config(resolved, out_dir, "eval")
    unmixeval.export_abundance_maps(results[0], out_dir)
    unmixeval.export_endmembers_csv(results[0], os.path.join(out_dir, "endmembers.csv"))
    extra = {"config_hash": digest, "seed": resolved["seed"]}
    if repeats == 1:
        unmixeval.export_report_json(
            reports[0], os.path.join(out_dir, "report.json"), extra=extra
        )
    else:
        per_em_sad = np.array([r.sad_per_em for r in reports])
        per_em_rmse = np.array([r.rmse_per_em for r in reports])
        sad_avgs = np.array([r.sad_avg for r in reports])
        rmse_avgs = np.array([r.rmse_avg for r in reports])
        aggregate = {
            "repeats": repeats,
            "seeds": [resolved["seed"] + r for r in range(repeats)],
            "sad_avg_mean": float(sad_avgs.mean()),
            "sad_avg_std": float(sad_avgs.std(ddof=1)),
            "rmse_avg_mean": float(rmse_avgs.mean()),
            "rmse_avg_std": float(rmse_avgs.std(ddof=1)),
            "sad_per_em_mean": per_em_sad.mean(axis=0).tolist(),
            "sad_per_em_std": per_em_sad.std(axis=0, ddof=1).tolist(),
            "rmse_per_em_mean": per_em_rmse.mean(axis=0).tolist(),
            "rmse_per_em_std": per_em_rmse.std(axis=0, ddof=1).tolist(),
            "config_hash": digest,
        }
        with open(os.path.join(out_dir, "report.json"), "w", encoding="ascii") as fh:
            json.dump(aggregate, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for r, report in enumerate(reports):
            unmixeval.export_report_json(
                report,
                os.path.join(out_dir, f"report_seed{resolved['seed'] + r}.json"),
                extra={"config_hash": digest, "seed": resolved["seed"] + r},
            )
    sad_avg = reports[0].sad_avg if repeats == 1 else float(sad_avgs.mean())
    print(f"wrote {os.path.join(out_dir, 'report.json')} (mean SAD {sad_avg:.4f} rad)")
    return 0


def cmd_info(args):
    path = args.path
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == hsidata.HSIB_MAGIC:
        cube, gt = hsidata.load_cube(path)
        print(f"HSIB cube: H={cube.height} W={cube.width} L={cube.bands}")
        if gt is not None:
            print(f"ground-truth sidecar: P={gt.n_endmembers}")
    elif head == hsidata.HSGT_MAGIC:
        with open(path, "rb") as fh:
            buf = fh.read(24)
        if len(buf) < 24:
            raise ParseError(f"{path}: truncated header", len(buf))
        _version, p, l, h, w = struct.unpack_from("<5I", buf, 4)
        print(f"HSGT ground truth: P={p} L={l} H={h} W={w}")
    elif head == net.DSAN_MAGIC:
        cfg = net.read_checkpoint_config(path)
        part = cfg.partition
        print(
            f"DSAN checkpoint: P={cfg.n_end} k={cfg.window} D={cfg.hidden} "
            f"N={part.n_views} M={part.n_clusters} L={part.n_bands} "
            f"seed={cfg.seed} epochs={cfg.epochs}"
        )
    else:
        raise ParseError(f"{path}: unrecognized magic {head!r}", 0)
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def _add_common(sub):
    sub.add_argument("--config", help="JSON config file; flags override its values")
    sub.add_argument("--seed", type=int, help="base rng seed")
    sub.add_argument("-o", "--out", help="output directory")
    sub.add_argument("--threads", type=int, help="inference thread count")
    sub.add_argument(
        "--backend", choices=("numpy", "numba"), help="kernel backend override"
    )


def _add_model_flags(sub):
    sub.add_argument("--data", help="input HSIB cube")
    sub.add_argument("--p", type=int, help="endmember count")
    sub.add_argument("--k", type=int, help="odd spatial window side")
    sub.add_argument("--hidden", type=int, help="spatial encoder width")
    sub.add_argument("--dropout", type=float, help="dropout rate in [0, 1)")
    sub.add_argument("--lambda1", type=float, help="spectral-angle loss weight")
    sub.add_argument("--lambda2", type=float, help="sparsity loss weight")
    sub.add_argument("--lr", type=float, help="Adam learning rate")
    sub.add_argument("--batch", type=int, help="mini-batch size")
    sub.add_argument("--epochs", type=int, help="training epochs")
    sub.add_argument("--m", type=int, help="band similarity cluster count")
    sub.add_argument("--n", type=int, help="spectral view count")
    sub.add_argument("--sample-size", dest="sample_size", type=int,
                     help="pixels sampled for band correlation")
    sub.add_argument("--partition", dest="partition_file",
                     help="reuse a partition file instead of recomputing")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dsanet",
        description="Dual-stream attention network for hyperspectral unmixing",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    synth = subs.add_parser("synth", help="generate a synthetic cube + ground truth")
    synth.add_argument("--h", type=int, help="image height")
    synth.add_argument("--w", type=int, help="image width")
    synth.add_argument("--l", type=int, help="band count")
    synth.add_argument("--p", type=int, required=True, help="endmember count")
    synth.add_argument("--snr", type=float, help="target SNR in dB (inf disables noise)")
    synth.add_argument("--alpha", type=float, help="Dirichlet concentration")
    synth.add_argument("--name", default="synthetic", help="output file stem")
    _add_common(synth)
    synth.set_defaults(func=cmd_synth)

    part = subs.add_parser("partition", help="cluster bands and emit spectral views")
    part.add_argument("--data", help="input HSIB cube")
    part.add_argument("--m", type=int, help="band similarity cluster count")
    part.add_argument("--n", type=int, help="spectral view count")
    part.add_argument("--sample-size", dest="sample_size", type=int,
                      help="pixels sampled for band correlation")
    _add_common(part)
    part.set_defaults(func=cmd_partition)

    train = subs.add_parser("train", help="train a model on a cube")
    _add_model_flags(train)
    _add_common(train)
    train.set_defaults(func=cmd_train)

    evalp = subs.add_parser("eval", help="infer, score against ground truth, export")
    _add_model_flags(evalp)
    evalp.add_argument("--checkpoint", help="evaluate an existing checkpoint")
    evalp.add_argument("--repeats", type=int,
                       help="retrain with seeds seed..seed+R-1 and aggregate")
    _add_common(evalp)
    evalp.set_defaults(func=cmd_eval)

    info = subs.add_parser("info", help="dump the header of an HSIB/HSGT/DSAN file")
    info.add_argument("path")
    info.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DSANetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
