"""Command-line entry point: ``fluff <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite training loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import analyzer, gradcheck
from .bench import benchmark
from .config import ConvLayer, PriorMap, RunConfig, fluff_model, load_config, load_scene
from .detector import Detector, detections_to_jsonl, evaluate_map
from .synth import DatasetError, SceneSpec, load_dataset, write_dataset
from .tensor import TensorFileError
from .train import CheckpointError, NumericError, load_checkpoint, predict_dataset, save_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


def _emit(text: str, out: str | None, name: str | None = None) -> None:
    """Print ``text``; also write it to ``out`` (a file, or a directory when ``name`` is given)."""
    print(text)
    if out:
        path = Path(out)
        if name is not None:
            path.mkdir(parents=True, exist_ok=True)
            path = path / name
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")


def _config(path) -> RunConfig:
    try:
        return load_config(path)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e


def _data(path, what: str):
    if not path:
        raise ConfigError(f"config has no data.{what}")
    return load_dataset(path)


# -- commands ----------------------------------------------------------------


def cmd_analyze(args) -> int:
    if args.preset:
        desc = analyzer.PRESETS[args.preset]()
        size = args.input_size or 300
    else:
        cfg = _config(args.config)
        desc = Detector(cfg.model).describe()
        size = args.input_size or cfg.model.image_size
    report = analyzer.analyze(desc, size)
    print(analyzer.format_report(report))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(analyzer.report_json(report) + "\n")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        s = load_scene(args.spec)
    except FileNotFoundError as e:
        raise ConfigError(f"spec file not found: {args.spec}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid spec {args.spec}:\n{e}") from e
    spec = SceneSpec(**s.model_dump(exclude={"n_images"}))
    out = write_dataset(args.out, spec, s.n_images)
    print(json.dumps({"out": str(out), "n_images": s.n_images, "spec": spec.to_dict()}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config)
    data = _data(cfg.data.train_dir, "train_dir")
    det = Detector(cfg.model, seed=cfg.train.seed)
    print(f"model: {det.num_params():,} parameters, {det.num_priors} priors; {len(data)} training images")
    log = train(det, data, cfg.train, log=print)
    out = Path(args.out)
    save_checkpoint(det, out)
    (out / "train_log.json").write_text(json.dumps(log.to_dict(), indent=2) + "\n")
    (out / "config.json").write_text(cfg.to_json() + "\n")
    print(f"checkpoint written to {out}")
    return EXIT_OK


def _load(cfg: RunConfig, path) -> Detector:
    try:
        return load_checkpoint(path, cfg.model)
    except CheckpointError as e:
        raise ConfigError(f"checkpoint {path} does not match the config: {e}") from e


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    det = _load(cfg, args.checkpoint)
    data = _data(cfg.data.test_dir, "test_dir")
    dets = predict_dataset(det, data, cfg.eval)
    res = evaluate_map(dets, data.ground_truth(), cfg.eval.map_iou)
    report = {"map": res["map"], "iou_threshold": res["iou_threshold"],
              "ap": {str(k): v for k, v in res["ap"].items()}, "n_images": len(data)}
    _emit(json.dumps(report, indent=2, sort_keys=True), args.out, "eval.json" if args.out else None)
    if args.out:
        (Path(args.out) / "detections.jsonl").write_text(detections_to_jsonl(dets))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args.config)
    det = _load(cfg, args.checkpoint) if args.checkpoint else Detector(cfg.model, seed=cfg.train.seed)
    s = cfg.bench
    if args.threads is not None:
        s = s.model_copy(update={"threads": None if args.threads == 0 else args.threads})
    report = benchmark(det, s, cfg.eval)
    print(report.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json() + "\n")
    return EXIT_OK


def _gradcheck_network() -> Detector:
    cfg = fluff_model(image_size=16, backbone=[ConvLayer(out_channels=4, stride=2)], backbone_maps=[0],
                      extra_layers=[ConvLayer(out_channels=4, stride=2)],
                      priors=[PriorMap(scale=0.3, aspect_ratios=[1.0, 2.0]), PriorMap(scale=0.6)])
    return Detector(cfg, seed=0)


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(seed=args.seed, repeats=args.repeats)
    if args.network:
        results += gradcheck.check_network(_gradcheck_network(), np.random.default_rng(args.seed))
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    _emit("\n".join(lines), args.out)
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fluff", description="Latticed dilated-conv fusion blocks and a small detector.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="parameter, MAC and receptive-field report")
    g = a.add_mutually_exclusive_group(required=True)
    g.add_argument("--config", help="run config JSON; analyses its detector")
    g.add_argument("--preset", choices=sorted(analyzer.PRESETS), help="static reference model")
    a.add_argument("--input-size", type=int, help="input side length (default: config image size, 300 for presets)")
    a.add_argument("--out", help="write the JSON report here")
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("gen-data", help="write a synthetic dataset")
    d.add_argument("--spec", required=True, help="scene spec JSON")
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mAP of a checkpoint on the test set")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="directory for eval.json and detections.jsonl")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time prediction and suppression")
    b.add_argument("--config", required=True)
    b.add_argument("--checkpoint", help="checkpoint directory (default: freshly initialised model)")
    b.add_argument("--threads", type=int, help="BLAS threads; 0 leaves the library default")
    b.add_argument("--out", help="write the JSON report here")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--repeats", type=int, default=5, help="random shapes per op and dtype")
    c.add_argument("--no-network", dest="network", action="store_false", help="skip the whole-network spot check")
    c.add_argument("--out", help="write the report here")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, TensorFileError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
