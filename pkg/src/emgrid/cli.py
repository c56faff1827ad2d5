"""Command-line front end: simulate -> snr -> train -> evaluate/attack -> render.

Every subcommand reads/writes files named by flags and logs progress as
line-delimited JSON on stderr; stdout stays silent. All randomness comes from
explicit seeds (config file or --seed), so a fixed command line produces
byte-identical artifacts, independent of --threads.

Exit codes: 0 success; 1 I/O or malformed file; 2 usage/config; 3 analysis
precondition (e.g. mixed keys where a fixed key is required).
"""

import argparse
import json
import math
import os
import sys
from dataclasses import replace

from .errors import AnalysisError, ConfigError, DataFormatError
from .evaluation import (
    evaluate_classifier_grid,
    evaluate_cpa_grid,
    evaluate_hybrid_grid,
    evaluate_snr_grid,
)
from .heatmap import Heatmap, heatmap_from_csv, heatmap_to_csv, heatmap_to_svg
from .grid import GridGeometry
from .leakage import (
    FIRST_ROUND_SBOX_INPUT,
    FIRST_ROUND_SBOX_OUTPUT,
    LAST_ROUND_HD,
    LeakageModel,
)
from .profiler import (
    CLASSIFIER_256,
    HD_REGRESSOR_16,
    TrainConfig,
    load_model,
    multiplace_train,
    save_model,
    second_half_mean,
    select_leaky_positions,
    select_top_n_positions,
)
from .simulator import load_sim_config, simulate_grid_dataset
from .traceset import SPLIT_CODES, SPLIT_TEST, SPLIT_TRAIN, read_arrays

TARGET_KINDS = {
    "sbox-input": FIRST_ROUND_SBOX_INPUT,
    "sbox-output": FIRST_ROUND_SBOX_OUTPUT,
    "last-round-hd": LAST_ROUND_HD,
}


def _log(event: str, **fields):
    safe = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v)
            for k, v in fields.items()}
    print(json.dumps({"event": event, **safe}, sort_keys=True), file=sys.stderr)


def _split_code(name: str) -> int:
    return SPLIT_CODES[name]


def _target(args) -> LeakageModel:
    return LeakageModel(TARGET_KINDS[args.target], args.byte)


def _load_split_arrays(path, *splits):
    """Read only the requested splits from a dataset file."""
    want = set(splits)
    header, arrays = read_arrays(path, where=lambda pos, split: split in want)
    return header, arrays


def _write_heatmap_csvs(h: Heatmap, path: str):
    """One CSV per z layer; single-layer grids write exactly `path`."""
    if h.geometry.nz == 1:
        layers = [(None, h)]
    else:
        layers = [(iz, h.slice_z(iz)) for iz in range(h.geometry.nz)]
    for iz, layer in layers:
        if iz is None:
            target = path
        else:
            stem, ext = os.path.splitext(path)
            target = f"{stem}_z{iz}{ext}"
        with open(target, "w") as f:
            f.write(heatmap_to_csv(layer) + "\n")
        _log("wrote", path=target, metric=h.metric)


# ------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    if not os.path.isfile(args.config):
        raise ConfigError(f"config file not found: {args.config}")
    config = load_sim_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    total = config.total_traces
    step = max(1, total // 20)

    def progress(done, total_traces):
        if done % step == 0 or done == total_traces:
            _log("progress", done=done, total=total_traces)

    header = simulate_grid_dataset(config, args.out, progress)
    _log("dataset", path=args.out, positions=config.geometry.position_count,
         per_position=dict(config.traces_per_position), total=header.trace_count,
         m=header.m, seed=config.seed)
    return 0


def cmd_snr(args) -> int:
    split = _split_code(args.split)
    header, arrays = _load_split_arrays(args.dataset, split)
    h = evaluate_snr_grid(arrays, header.geometry, split, _target(args),
                          threads=args.threads,
                          progress=lambda d: _log("position", **d))
    _write_heatmap_csvs(h, args.out_heatmap)
    return 0


def cmd_cpa(args) -> int:
    split = _split_code(args.split)
    header, arrays = _load_split_arrays(args.dataset, split)
    disc, rank = evaluate_cpa_grid(
        arrays, header.geometry, split, _target(args), budget=args.budget,
        checkpoint_interval=args.checkpoint, threads=args.threads,
        progress=lambda d: _log("position", **d))
    _write_heatmap_csvs(disc, args.out_disclosure)
    _write_heatmap_csvs(rank, args.out_ranks)
    return 0


def _select_positions(args, arrays):
    if args.mode == "single":
        if not args.positions or len(args.positions) != 1:
            raise ConfigError("mode single needs exactly one --positions entry")
        return args.positions
    if args.mode == "multiplace":
        if args.positions:
            return sorted(set(args.positions))
        if args.heatmap is None:
            raise ConfigError(
                "mode multiplace needs --positions or --heatmap to select from")
        with open(args.heatmap) as f:
            values = heatmap_from_csv(f.read()).ravel()
        selected = sorted(select_leaky_positions(values, args.threshold))
        if not selected:
            raise AnalysisError(
                f"no position has mean rank <= {args.threshold}")
        return selected
    if args.mode == "topn":
        if args.heatmap is None or args.n is None:
            raise ConfigError("mode topn needs --heatmap and --n")
        with open(args.heatmap) as f:
            values = heatmap_from_csv(f.read()).ravel()
        return select_top_n_positions(values, args.n)
    # mode all
    return sorted({int(p) for p in arrays.positions[arrays.splits == SPLIT_TRAIN]})


def cmd_train(args) -> int:
    header, arrays = _load_split_arrays(args.dataset, SPLIT_TRAIN, SPLIT_TEST)
    train = arrays.subset(arrays.splits == SPLIT_TRAIN)
    val = arrays.subset(arrays.splits == SPLIT_TEST)
    positions = _select_positions(args, arrays)
    _log("selected", mode=args.mode, positions=[int(p) for p in positions])
    config = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                         epochs=args.epochs, steps_per_epoch=args.steps,
                         seed=args.seed, data_cap=args.data_cap)
    kind = CLASSIFIER_256 if args.model_kind == "classifier" else HD_REGRESSOR_16
    result = multiplace_train(train, val, positions, _target(args), config,
                              kind=kind)
    metric_name = "val_mean_rank" if kind == CLASSIFIER_256 else "val_mse"
    for i, v in enumerate(result.val_history):
        _log("epoch", index=i, **{metric_name: v})
    save_model(result.model, args.out_model)
    summary = {"path": args.out_model, "kind": kind,
               "traces": result.n_train, "positions": len(positions)}
    if result.val_history:
        summary["second_half_mean"] = second_half_mean(result.val_history)
    _log("model", **summary)
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    if model.kind != CLASSIFIER_256:
        raise ConfigError("evaluate expects a classifier model; "
                          "attack regressors with the hybrid command")
    split = _split_code(args.split)
    header, arrays = _load_split_arrays(args.dataset, split)
    byte = model.byte_index if args.byte is None else args.byte
    target = LeakageModel(TARGET_KINDS[args.target], byte)
    h = evaluate_classifier_grid(model, arrays, header.geometry, split, target,
                                 threads=args.threads,
                                 progress=lambda d: _log("position", **d))
    _write_heatmap_csvs(h, args.out_heatmap)
    return 0


def cmd_hybrid(args) -> int:
    model = load_model(args.model)
    if model.kind != HD_REGRESSOR_16:
        raise ConfigError("hybrid expects an HD regressor model")
    split = _split_code(args.split)
    header, arrays = _load_split_arrays(args.dataset, split)
    disc, rank = evaluate_hybrid_grid(
        model, arrays, header.geometry, split, budget=args.budget,
        checkpoint_interval=args.checkpoint, threads=args.threads,
        progress=lambda d: _log("position", **d))
    _write_heatmap_csvs(disc, args.out_disclosure)
    _write_heatmap_csvs(rank, args.out_ranks)
    return 0


def cmd_render(args) -> int:
    with open(args.csv) as f:
        grid = heatmap_from_csv(f.read())
    ny, nx = grid.shape
    geometry = GridGeometry(nx, ny, 1, 1.0, 1.0, (0.0, 0.0, 0.0))
    h = Heatmap(geometry, grid.ravel(), args.metric,
                mask_threshold=args.mask_threshold)
    svg = heatmap_to_svg(h, vmin=args.vmin, vmax=args.vmax)
    with open(args.svg, "w") as f:
        f.write(svg)
    _log("wrote", path=args.svg, cells=int(nx * ny))
    return 0


# ------------------------------------------------------------------ parser

def _add_threads(p):
    p.add_argument("--threads", type=int, default=1,
                   help="worker parallelism bound; never changes results")


def _add_dataset(p):
    p.add_argument("--in", dest="dataset", required=True, help="dataset file")


def _add_target(p, default="sbox-input"):
    p.add_argument("--target", choices=sorted(TARGET_KINDS), default=default)
    p.add_argument("--byte", type=int, default=0, help="target byte index")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emgrid",
        description="grid-annotated EM trace simulation and key-recovery analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a grid dataset from a config")
    p.add_argument("--config", required=True, help="simulation config JSON")
    p.add_argument("--out", required=True, help="output dataset file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    _add_threads(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("snr", help="per-position peak-SNR map")
    _add_dataset(p)
    _add_target(p)
    p.add_argument("--split", choices=sorted(SPLIT_CODES), default="train")
    p.add_argument("--out-heatmap", required=True)
    _add_threads(p)
    p.set_defaults(func=cmd_snr)

    p = sub.add_parser("cpa", help="per-position CPA disclosure map")
    _add_dataset(p)
    _add_target(p, default="last-round-hd")
    p.add_argument("--split", choices=sorted(SPLIT_CODES), default="holdout")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--checkpoint", type=int, default=1000)
    p.add_argument("--out-disclosure", required=True)
    p.add_argument("--out-ranks", required=True)
    _add_threads(p)
    p.set_defaults(func=cmd_cpa)

    p = sub.add_parser("train", help="fit a profiling model")
    _add_dataset(p)
    p.add_argument("--mode", choices=["single", "multiplace", "topn", "all"],
                   required=True)
    p.add_argument("--positions", type=int, nargs="+", default=None)
    p.add_argument("--heatmap", default=None,
                   help="mean-rank CSV to select positions from")
    p.add_argument("--threshold", type=float, default=120.0)
    p.add_argument("--n", type=int, default=None, help="top-n position count")
    p.add_argument("--model-kind", choices=["classifier", "hd-regressor"],
                   default="classifier")
    _add_target(p)
    p.add_argument("--data-cap", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-model", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="classifier mean-rank map")
    p.add_argument("--model", required=True)
    _add_dataset(p)
    p.add_argument("--split", choices=sorted(SPLIT_CODES), default="test")
    p.add_argument("--target", choices=sorted(TARGET_KINDS), default="sbox-input")
    p.add_argument("--byte", type=int, default=None,
                   help="target byte (default: the model's)")
    p.add_argument("--out-heatmap", required=True)
    _add_threads(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("hybrid", help="regressor-to-CPA disclosure map")
    p.add_argument("--model", required=True)
    _add_dataset(p)
    p.add_argument("--split", choices=sorted(SPLIT_CODES), default="holdout")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--checkpoint", type=int, default=1000)
    p.add_argument("--out-disclosure", required=True)
    p.add_argument("--out-ranks", required=True)
    _add_threads(p)
    p.set_defaults(func=cmd_hybrid)

    p = sub.add_parser("render", help="heatmap CSV to SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--svg", required=True)
    p.add_argument("--metric", default="heatmap", help="figure title")
    p.add_argument("--mask-threshold", type=float, default=None)
    p.add_argument("--vmin", type=float, default=None)
    p.add_argument("--vmax", type=float, default=None)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataFormatError, OSError) as e:
        _log("error", kind=type(e).__name__, message=str(e))
        return 1
    except ConfigError as e:
        _log("error", kind="ConfigError", message=str(e))
        return 2
    except AnalysisError as e:
        _log("error", kind="AnalysisError", message=str(e))
        return 3


if __name__ == "__main__":
    sys.exit(main())
