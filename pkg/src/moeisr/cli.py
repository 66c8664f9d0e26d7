"""Command-line entry point: ``moeisr {train,infer,eval,profile}``.

Exit codes: 0 success, 1 runtime or IO failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

from . import training
from .data import load_image, save_image
from .errors import ParseError, UsageError
from .flops import export_expert_map, profile_model
from .models import load_checkpoint
from .training import TrainConfig

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _out_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


_FLAG_KEYS = {"seed": "seed", "variant": "variant", "weights": "weights", "tau": "tau", "alpha": "alpha",
              "beta": "beta", "mapper_layers": "mapper_layers", "experts": "experts", "steps": "steps"}


def _coerce(key: str, value):
    default = TrainConfig.__dataclass_fields__[key].default
    if key == "weights":
        return _floats(value) if isinstance(value, str) else [float(v) for v in value]
    if key == "expert_hidden":
        return None if value in (None, "none", "") else int(value)
    if isinstance(default, bool):
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def build_config(args) -> TrainConfig:
    """Config file values, overridden by ``--set`` pairs, overridden by named flags."""
    values: dict = {}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {args.config} must be a JSON object")
        values.update(loaded)
    for pair in args.set or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not key=value")
        values[key.strip().replace("-", "_")] = value
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    known = set(TrainConfig.keys())
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
    try:
        return TrainConfig(**{k: _coerce(k, v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moeisr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=["b", "s"])
    t.add_argument("--weights", type=_floats, metavar="w1,..,wJ")
    t.add_argument("--tau", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--mapper-layers", dest="mapper_layers", type=int)
    t.add_argument("--experts", type=int, metavar="J")
    t.add_argument("--steps", type=int)
    t.add_argument("--dataset", required=True)
    t.add_argument("--checkpoint", required=True)

    i = sub.add_parser("infer", help="upscale one image with hard routing")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    size = i.add_mutually_exclusive_group(required=True)
    size.add_argument("--scale", type=float)
    size.add_argument("--out-size", dest="out_size", type=_out_size, metavar="HxW")
    i.add_argument("--out", required=True)
    i.add_argument("--map-out", dest="map_out", help="expert map PPM (default: <out>_experts.ppm)")

    e = sub.add_parser("eval", help="mean PSNR and FLOPs ratio per scale, as TSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--scale", type=_floats, default=[2.0, 3.0, 4.0], metavar="s1,s2,..")

    f = sub.add_parser("profile", help="FLOPs report for one reconstruction")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--input", required=True)
    size = f.add_mutually_exclusive_group(required=True)
    size.add_argument("--scale", type=float)
    size.add_argument("--out-size", dest="out_size", type=_out_size, metavar="HxW")
    f.add_argument("--out", help="write the report here instead of stdout")
    return p


def _target_size(args, lr_shape) -> tuple[int, int]:
    if args.out_size:
        return args.out_size
    if args.scale < 1:
        raise ConfigError(f"scale must be >= 1, got {args.scale}")
    return round(lr_shape[0] * args.scale), round(lr_shape[1] * args.scale)


def _shares_text(counts) -> str:
    total = sum(counts)
    return ",".join(f"{c / total:.4f}" for c in counts)


def cmd_train(args, out) -> int:
    config = build_config(args)
    for key in TrainConfig.keys():
        print(f"config {key} {getattr(config, key)}", file=out)
    if not Path(args.dataset).is_dir():
        raise FileNotFoundError(f"dataset directory not found: {args.dataset}")
    training.train(args.dataset, config, args.checkpoint, emit=lambda line: print(line, file=out))
    print(f"checkpoint {args.checkpoint}", file=out)
    return EXIT_OK


def cmd_infer(args, out) -> int:
    params = load_checkpoint(args.checkpoint)
    lr = load_image(args.input)
    h, w = _target_size(args, lr.shape)
    img, dec, _ = training.reconstruct(params, lr, h, w)
    save_image(args.out, img)
    map_path = args.map_out or str(Path(args.out).with_suffix("")) + "_experts.ppm"
    export_expert_map(dec, map_path)
    counts = [int((dec == j).sum()) for j in range(params.n_experts)]
    print(f"output {args.out} {h}x{w}", file=out)
    print(f"expert_map {map_path}", file=out)
    print(f"shares {_shares_text(counts)}", file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    params = load_checkpoint(args.checkpoint)
    images = training.load_dataset(args.dataset)
    print("scale\tpsnr\tflops_ratio", file=out)
    for s in args.scale:
        r = training.evaluate(params, images, s)
        print(f"{s:g}\t{r.mean_psnr:.4f}\t{r.mean_ratio:.6f}", file=out)
    return EXIT_OK


def cmd_profile(args, out) -> int:
    params = load_checkpoint(args.checkpoint)
    lr = load_image(args.input)
    h, w = _target_size(args, lr.shape)
    _, dec, _ = training.reconstruct(params, lr, h, w)
    report = profile_model(params, lr.shape[:2], (h, w), dec)
    if args.out:
        Path(args.out).write_text(report.to_text())
        print(f"report {args.out}", file=out)
    else:
        out.write(report.to_text())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "profile": cmd_profile}


def _thread_limit():
    n = os.environ.get("MOEISR_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
