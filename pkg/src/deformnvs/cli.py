"""Command-line entry points.

Subcommands: synth (write a synthetic dataset), train (msssr/fscr/ft),
render (one frame from a checkpoint), eval (metrics on held-out frames),
masktrack (pick one candidate mask per frame).

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric abort.
All logging goes to stderr; machine-readable outputs go to files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import tenio
from .dataset import DatasetError, load_dataset
from .encoder import EncoderConfig, make_source_view
from .losses import LossWeights
from .nerformer import NerformerConfig
from .synth import SceneSpec, write_candidates, write_dataset
from .tenio import TenFormatError
from .training import (
    N_SRC_SWEEP,
    NumericError,
    TrackerFModel,
    TrainConfig,
    evaluate,
    frame_split,
    make_report,
    mean_metrics,
    nearest_known_sources,
    render_frame,
    run_fscr,
    run_ft,
    run_msssr,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _from_dict(cls, data: dict):
    """Build a (possibly nested) config dataclass, rejecting unknown keys."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    nested = {"enc": EncoderConfig, "net": NerformerConfig, "loss": LossWeights}
    for key, value in data.items():
        if key in nested and isinstance(value, dict):
            kwargs[key] = _from_dict(nested[key], value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return data


def _cse_false_color(cse: np.ndarray) -> np.ndarray:
    """First three embedding channels mapped to [0,1] for preview images."""
    vis = cse[..., :3].astype(np.float64)
    lo, hi = vis.min(), vis.max()
    if hi - lo < 1e-12:
        return np.zeros_like(vis)
    return (vis - lo) / (hi - lo)


def cmd_synth(args) -> int:
    data = _load_config(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    spec = _from_dict(SceneSpec, data)
    out = Path(args.out)
    write_dataset(spec, out)
    if args.candidates:
        write_candidates(out, args.candidates, noise=0.1, seed=spec.seed + 1)
    _log(f"wrote dataset to {out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    data = _load_config(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.steps is not None:
        data["max_steps"] = args.steps
    if args.task is not None:
        data["task"] = args.task
    return _from_dict(TrainConfig, data)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    datasets = [load_dataset(d) for d in args.data]
    if cfg.task == "msssr":
        if len(datasets) != 1:
            raise ValueError("msssr takes exactly one --data directory")
        report = run_msssr(datasets[0], cfg, args.out, log=_log)
    elif cfg.task == "fscr":
        if len(datasets) < 2:
            raise ValueError("fscr needs at least two --data directories (last one is the test scene)")
        report = run_fscr(datasets[:-1], datasets[-1], cfg, args.out, log=_log)
    elif cfg.task == "ft":
        if len(datasets) != 1:
            raise ValueError("ft takes exactly one --data directory")
        if not args.init:
            raise ValueError("ft requires --init <checkpoint dir>")
        report = run_ft(args.init, datasets[0], cfg, args.out, log=_log)
    else:
        raise ValueError(f"unknown task '{cfg.task}'")
    if "mean" in report:
        _log(f"done; mean metrics: {report['mean']}")
    return EXIT_OK


def _eval_config(args, model) -> TrainConfig:
    """Rendering/sampling settings for render and eval; enc/net come from the checkpoint."""
    data = _load_config(args.config)
    data.pop("enc", None)
    data.pop("net", None)
    data["seed"] = args.seed or 0
    cfg = _from_dict(TrainConfig, data)
    return dataclasses.replace(cfg, enc=model.enc, net=model.net)


def cmd_render(args) -> int:
    model, _ = TrackerFModel.load(args.ckpt)
    dataset = load_dataset(args.data)
    if not (0 <= args.frame < len(dataset)):
        raise ValueError(f"frame {args.frame} outside dataset of {len(dataset)} frames")
    cfg = _eval_config(args, model)
    known = frame_split(len(dataset))
    n_src = args.n_src or min(cfg.n_src_max, int(known.sum()) - 1)
    srcs = nearest_known_sources(dataset, known, args.frame, n_src)
    views = [make_source_view(model.store, model.enc, dataset.frames[s]) for s in srcs]
    res = render_frame(model, dataset, views, args.frame, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tenio.save_ten(out / "color.ten", res["color"].astype(np.float32))
    tenio.save_ten(out / "mask.ten", res["mask"].astype(np.float32))
    tenio.save_ppm(out / "color.ppm", res["color"])
    tenio.save_ppm(out / "mask.ppm", np.repeat(res["mask"][..., None], 3, axis=-1))
    if "cse" in res:
        tenio.save_ten(out / "cse.ten", res["cse"].astype(np.float32))
        tenio.save_ppm(out / "cse.ppm", _cse_false_color(res["cse"]))
    _log(f"rendered frame {args.frame} from {len(srcs)} sources into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = TrackerFModel.load(args.ckpt)
    dataset = load_dataset(args.data)
    cfg = _eval_config(args, model)
    known = frame_split(len(dataset))
    if args.split != "unseen":
        raise ValueError("only --split unseen is supported")
    steps = int(extra.get("step", 0))
    if args.n_src_sweep:
        rows = []
        for n_src in N_SRC_SWEEP:
            per_frame, _ = evaluate(model, dataset, known, cfg, n_src=n_src)
            rows.append(
                make_report("eval", dataset.scene_id, per_frame, cfg, steps, 0.0, n_src=n_src)
            )
        report = {"task": "eval", "rows": rows, "seed": cfg.seed, "config_hash": cfg.config_hash()}
    else:
        n_src = args.n_src or min(cfg.n_src_max, int(known.sum()) - 1)
        per_frame, _ = evaluate(model, dataset, known, cfg, n_src=n_src)
        report = make_report("eval", dataset.scene_id, per_frame, cfg, steps, 0.0, n_src=n_src)
        _log(f"mean metrics: {mean_metrics(per_frame)}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_masktrack(args) -> int:
    from .masktrack import load_candidates, viterbi_track, write_track

    candidates, confidences = load_candidates(args.candidates)
    path = viterbi_track(candidates, confidences)
    write_track(args.out, candidates, path)
    _log(f"tracked {len(path)} frames into {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformnvs", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="write a synthetic deforming-scene dataset")
    sp.add_argument("--config", default=None, help="JSON scene spec overrides (default: none)")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--seed", type=int, default=None, help="scene seed (default: from config or 0)")
    sp.add_argument("--candidates", type=int, default=0,
                    help="also write this many candidate masks per frame (default: 0)")
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="train a model (msssr, fscr, or ft)")
    tp.add_argument("--data", nargs="+", required=True,
                    help="dataset directories; for fscr the last one is the test scene")
    tp.add_argument("--task", choices=["msssr", "fscr", "ft"], default=None,
                    help="protocol (default: msssr or config value)")
    tp.add_argument("--out", required=True, help="output directory (checkpoint + report)")
    tp.add_argument("--init", default=None, help="checkpoint to fine-tune from (ft only)")
    tp.add_argument("--config", default=None, help="JSON training config overrides (default: none)")
    tp.add_argument("--seed", type=int, default=None, help="training seed (default: 0)")
    tp.add_argument("--steps", type=int, default=None, help="override max steps (default: 5000)")
    tp.set_defaults(fn=cmd_train)

    rp = sub.add_parser("render", help="render one frame from a checkpoint")
    rp.add_argument("--ckpt", required=True, help="checkpoint directory")
    rp.add_argument("--data", required=True, help="dataset directory")
    rp.add_argument("--frame", type=int, required=True, help="frame index to render")
    rp.add_argument("--n-src", type=int, default=None, help="source view count (default: protocol max)")
    rp.add_argument("--config", default=None,
                    help="JSON overrides for rendering settings (default: none)")
    rp.add_argument("--out", required=True, help="output directory for renders")
    rp.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    rp.set_defaults(fn=cmd_render)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on held-out frames")
    ep.add_argument("--ckpt", required=True, help="checkpoint directory")
    ep.add_argument("--data", required=True, help="dataset directory")
    ep.add_argument("--split", default="unseen", help="evaluation split (default: unseen)")
    ep.add_argument("--n-src", type=int, default=None, help="source view count (default: protocol max)")
    ep.add_argument("--n-src-sweep", action="store_true",
                    help="emit one metrics row per source count in {5,10,15,20,25}")
    ep.add_argument("--config", default=None,
                    help="JSON overrides for rendering settings (default: none)")
    ep.add_argument("--out", required=True, help="metrics JSON output file")
    ep.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    ep.set_defaults(fn=cmd_eval)

    mp = sub.add_parser("masktrack", help="choose one candidate mask per frame")
    mp.add_argument("--candidates", required=True, help="directory of NNNN.masks.ten stacks")
    mp.add_argument("--out", required=True, help="output directory (masks + indices.json)")
    mp.add_argument("--seed", type=int, default=0, help="seed (default: 0; tracking is deterministic)")
    mp.set_defaults(fn=cmd_masktrack)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    try:
        return args.fn(args)
    except (NumericError, FloatingPointError) as e:
        _log(f"error: numeric: {e}")
        return EXIT_NUMERIC
    except (DatasetError, TenFormatError, FileNotFoundError, ValueError, KeyError, TypeError) as e:
        _log(f"error: data: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
