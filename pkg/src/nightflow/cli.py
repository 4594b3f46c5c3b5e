"""``nightflow`` command line: synth, train, eval, viz, gradcheck.

Exit codes: 0 on success, 1 on validation failures, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import boundary, flowcore
from .errors import CheckpointError, DegenerateInputError, NumericError
from .evaluation import evaluate, flow_to_color, validate_report
from .synthdata import (
    DatasetError,
    MotionSpec,
    NoiseSpec,
    SampleConfig,
    accumulate_full,
    generate_dataset,
    read_dataset,
    read_flo,
    write_dataset,
    write_png16,
)
from .trainer import TrainConfig, load_stage, make_batchset, predict, predict_events, run_stage, split

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DATA_KEYS = {"height", "width", "max_disp", "noise_sigma", "substeps"}


def load_config(path, seed=None, overrides=()):
    """``(TrainConfig, data options)`` from an optional TOML file plus ``key=value`` overrides.

    Top-level keys are :class:`TrainConfig` fields; an optional ``[data]``
    table sets the synthetic sample size, motion and noise.
    """
    raw = {}
    if path is not None:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    data = raw.pop("data", {})
    unknown = set(data) - DATA_KEYS
    if unknown:
        raise ValueError(f"unknown [data] keys: {sorted(unknown)}")
    cfg = TrainConfig.from_dict(raw).override(overrides)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg, data


def sample_config(cfg: TrainConfig, data):
    sc = SampleConfig(C=cfg.C)
    sc = replace(sc, height=data.get("height", sc.height), width=data.get("width", sc.width))
    if "max_disp" in data:
        sc = replace(sc, motion=MotionSpec(max_disp=data["max_disp"]))
    if "noise_sigma" in data:
        sc = replace(sc, noise=NoiseSpec(sigma=data["noise_sigma"]))
    if "substeps" in data:
        sc = replace(sc, substeps=data["substeps"])
    return sc


def _common(p):
    p.add_argument("--config", type=Path, help="TOML file of TrainConfig fields")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")


def build_parser():
    ap = argparse.ArgumentParser(prog="nightflow", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic day/night/event dataset")
    _common(p)
    p.add_argument("--samples", type=int, default=20)

    p = sub.add_parser("train", help="run one training stage")
    _common(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--init", type=Path, help="previous-stage checkpoint (default: OUT/stage{n-1}.npz)")

    p = sub.add_parser("eval", help="evaluate a checkpoint or a directory of .flo predictions")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--flows", type=Path, help="directory of <id>.flo predictions")
    p.add_argument("--model", choices=("night", "day", "event", "day-on-night"), default="night")
    p.add_argument("--split", choices=("test", "all"), default="all")

    p = sub.add_parser("viz", help="flow PNGs, correlation maps and the correlation histogram")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--limit", type=int, default=4, help="number of samples to render")

    p = sub.add_parser("gradcheck", help="finite-difference checks of every loss")
    _common(p)
    return ap


def _inputs(models, data, model):
    if model == "day":
        return predict(models.day, data.day_t, data.day_t1)
    if model == "day-on-night":
        return predict(models.day, data.night_t, data.night_t1)
    if model == "event":
        if not data.has_events:
            raise ValueError("dataset has no events")
        return predict_events(models.event, data.events)
    if models.night is None:
        raise CheckpointError("checkpoint has no night model (run stage 2 first)")
    return predict(models.night, data.night_t, data.night_t1)


def cmd_synth(args, cfg, data_opts):
    if args.samples < 1:
        raise ValueError("--samples must be >= 1")
    samples = generate_dataset(args.samples, cfg.seed, sample_config(cfg, data_opts))
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args, cfg, data_opts):
    samples = read_dataset(args.data)
    _, report = run_stage(args.stage, samples, cfg, args.out, args.init)
    print(json.dumps(report["metrics"], sort_keys=True))


def cmd_eval(args, cfg, data_opts):
    samples = read_dataset(args.data)
    ids = list(range(len(samples)))
    if args.split == "test":
        _, ids = split(len(samples), cfg.holdout)
        if not ids:
            raise ValueError("hold-out split is empty")
    gts = [samples[i].gt_flow for i in ids]
    if args.flows is not None:
        flows = [read_flo(args.flows / f"{i:06d}.flo") for i in ids]
    else:
        models, _, _ = load_stage(args.checkpoint)
        data = make_batchset([samples[i] for i in ids], cfg.n_slices, ids)
        flows = [flowcore.flow_array(f) for f in _inputs(models, data, args.model)]
    report = evaluate(flows, gts, ids)
    args.out.mkdir(parents=True, exist_ok=True)
    text = report.to_json()
    validate_report(json.loads(text))
    (args.out / "report.json").write_text(text)
    with open(args.out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["id", "epe", "fl_all", "boundary_epe", "boundary_pixels"])
        w.writeheader()
        w.writerows(report.samples)
    print(f"EPE {report.epe:.4f}  Fl-all {report.fl_all:.2f}%  boundary EPE {report.boundary_epe}  n={report.count}")


def _write_rgb(path, rgb):
    import cv2

    if not cv2.imwrite(str(path), np.ascontiguousarray(rgb[..., ::-1])):
        raise OSError(f"could not write {path}")


def cmd_viz(args, cfg, data_opts):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    samples = read_dataset(args.data)[: args.limit]
    models, _, _ = load_stage(args.checkpoint)
    data = make_batchset(samples, cfg.n_slices)
    flows = _inputs(models, data, "night" if models.night is not None else "day-on-night")
    args.out.mkdir(parents=True, exist_ok=True)
    all_corr = []
    for i, s in enumerate(samples):
        pred = flowcore.flow_array(flows[i])
        scale = float(np.percentile(np.sqrt((s.gt_flow**2).sum(-1)), 99))
        _write_rgb(args.out / f"{i:06d}_flow.png", flow_to_color(pred, scale or None))
        _write_rgb(args.out / f"{i:06d}_gt.png", flow_to_color(s.gt_flow, scale or None))
        if s.events is not None:
            dL = torch.as_tensor(accumulate_full(s.events))
            st = boundary.image_st_gradient(s.night_t, flows[i : i + 1].double())
            corr = boundary.correlation_map(dL, st, cfg.patch)[0, 0].numpy()
            write_png16(args.out / f"{i:06d}_corr.png", corr)
            all_corr.append(corr)
    if all_corr:
        edges, counts = boundary.correlation_histogram(np.stack(all_corr), bins=cfg.K)
        with open(args.out / "correlation_hist.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_edge_low", "bin_edge_high", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([f"{lo:.6f}", f"{hi:.6f}", int(c)])
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="k")
        ax.set_xlabel("normalised correlation distance")
        ax.set_ylabel("pixels")
        fig.tight_layout()
        fig.savefig(args.out / "correlation_hist.png", dpi=80, metadata={"Software": None})
        plt.close(fig)
    print(f"wrote visualisations for {len(samples)} samples to {args.out}")


def cmd_gradcheck(args, cfg, data_opts):
    from .gradcheck import DEFAULT_TOL, format_results, results_table, run_all

    results = run_all(cfg.seed)
    print(format_results(results))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "gradcheck.json").write_text(json.dumps(results_table(results), indent=2))
    failed = [r.name for r in results if not r.passed(DEFAULT_TOL)]
    if failed:
        raise NumericError(f"gradient checks above {DEFAULT_TOL}: {', '.join(failed)}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "viz": cmd_viz, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        cfg, data_opts = load_config(args.config, args.seed, args.overrides)
        COMMANDS[args.command](args, cfg, data_opts)
    except (ValueError, OSError, DatasetError, CheckpointError, DegenerateInputError, NumericError, tomllib.TOMLDecodeError) as e:
        print(f"nightflow {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
