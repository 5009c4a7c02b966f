"""Command-line entry point: ``docdewarp {generate,train,dewarp,eval,gradcheck,selftest}``.

Exit codes:
    0  success
    1  usage or configuration error
    2  data error (missing/corrupt files, degenerate warps beyond the retry budget)
    3  numeric error (NaN loss, failed gradient or self checks)

Results go to stdout, diagnostics to stderr. ``DEWARP_THREADS`` caps the
BLAS thread pool and the number of generation workers.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from threadpoolctl import threadpool_limits

from docdewarp.errors import (ConfigError, DataIntegrityError, DegenerateWarpError, NumericError,
                              UsageError)

log = logging.getLogger("docdewarp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags, which would collide with the data code
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _threads() -> int | None:
    raw = os.environ.get("DEWARP_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DEWARP_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"DEWARP_THREADS must be a positive integer, got {raw!r}")
    return n


def _print_config(title: str, items: dict) -> None:
    print(f"# {title}")
    for k, v in items.items():
        print(f"{k}={v}")
    sys.stdout.flush()


def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_png(path: str | os.PathLike) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() != ".png":
        raise UsageError(f"only PNG images are supported: {p}")
    try:
        with Image.open(p) as im:
            return np.asarray(im.convert("RGB"))
    except UnidentifiedImageError as exc:
        raise DataIntegrityError(f"cannot decode {p}: {exc}") from exc


def write_png(path: str | os.PathLike, image: np.ndarray) -> None:
    p = Path(path)
    if p.suffix.lower() != ".png":
        raise UsageError(f"only PNG images are supported: {p}")
    p.parent.mkdir(parents=True, exist_ok=True)
    arr = image if image.dtype == np.uint8 else np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(p)


# ------------------------------------------------------------------ generate

def cmd_generate(args) -> int:
    from docdewarp.model import parse_key_values
    from docdewarp.synth.dataset import GenerationConfig, generate_samples, write_dataset

    values = {}
    if args.config:
        values.update(parse_key_values(Path(args.config).read_text(encoding="utf-8"), GenerationConfig))
    values["size"] = args.size if args.size is not None else values.get("size", 256)
    if args.pages:
        values["flat_dir"] = args.pages
    if args.textures:
        values["texture_dir"] = args.textures
    for d in (values.get("flat_dir"), values.get("texture_dir")):
        if d and not Path(d).is_dir():
            raise DataIntegrityError(f"not a directory: {d}")
    try:
        cfg = GenerationConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    workers = args.workers
    cap = _threads()
    if cap is not None:
        workers = min(workers, cap)
    _print_config("generate", {"count": args.count, "out": args.out, "seed": args.seed, "workers": workers,
                               **cfg.to_dict()})
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIntegrityError(f"cannot create {out}: {exc}") from exc
    records = write_dataset(generate_samples(args.seed, args.count, cfg, workers=workers), out)
    retried = sum(1 for r in records if r.get("attempt", 0))
    print(f"wrote {len(records)} samples to {out} ({retried} redrawn after degenerate warps)")
    return EXIT_OK


# ------------------------------------------------------------------ train

def _train_config(args):
    from docdewarp.trainer import TrainConfig

    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    overrides = _overrides(args.set or [])
    for flag, key in (("data", "data_path"), ("out", "out_dir"), ("seed", "seed"), ("epochs", "epochs"),
                      ("max_steps", "max_steps"), ("batch_size", "batch_size"), ("lr", "learning_rate")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    cfg = TrainConfig.from_text(text, overrides)
    if args.preset:
        from dataclasses import replace

        from docdewarp.trainer import ablation_presets

        cfg = replace(cfg, model=ablation_presets(cfg.model)[args.preset])
    return cfg


def cmd_train(args) -> int:
    from docdewarp.trainer import train

    cfg = _train_config(args)
    if not cfg.data_path:
        raise UsageError("train needs a dataset: --data DIR or data_path= in the config")
    _print_config("train", dict(line.split("=", 1) for line in cfg.to_text().splitlines()))

    def progress(rec):
        if args.log_every and rec.step % args.log_every == 0:
            edge = "-" if rec.edge_loss is None else f"{rec.edge_loss:.5f}"
            print(f"step {rec.step:6d} epoch {rec.epoch:4d} grid {rec.grid_loss:.6f} edge {edge}", file=sys.stderr)

    result = train(cfg, on_step=progress)
    last = result.log[-1] if result.log else None
    print(f"checkpoint {result.checkpoint}")
    if last is not None:
        print(f"steps {last.step} final grid_loss {last.grid_loss:.6g} combined_loss {last.combined_loss:.6g}")
    return EXIT_OK


# ------------------------------------------------------------------ dewarp

def cmd_dewarp(args) -> int:
    from docdewarp.model import load_model
    from docdewarp.trainer import predict_grid, rectify

    model = load_model(args.checkpoint)
    image = read_png(args.input)
    _print_config("dewarp", {"checkpoint": args.checkpoint, "input": args.input, "output": args.output,
                             "native_res": args.native_res, "input_size": model.config.input_size,
                             "architecture": model.config.architecture})
    grid = predict_grid(model, image)
    out = rectify(image, grid, native=args.native_res)
    write_png(args.output, out)
    print(f"wrote {args.output} ({out.shape[1]}x{out.shape[0]})")
    return EXIT_OK


# ------------------------------------------------------------------ eval

def _dump_figures(model, items, report, out_dir: Path, native: bool) -> None:
    from docdewarp.nn import Tensor, no_grad
    from docdewarp.nn import functional as F
    from docdewarp.synth.pages import resize_rgb
    from docdewarp.trainer import image_to_input, predict_grid, rectify

    out_dir.mkdir(parents=True, exist_ok=True)
    for it in items:
        grid = predict_grid(model, it.warped)
        flat = it.flat.astype(np.float64) / 255.0
        rect = rectify(it.warped, grid, native=native, size=flat.shape[:2])
        h, w = rect.shape[:2]
        warped = resize_rgb(it.warped.astype(np.float64) / 255.0, (h, w))
        flat = resize_rgb(flat, (h, w))
        write_png(out_dir / f"pair_{it.index:06d}.png", np.concatenate([warped, rect, flat], axis=1))
        with no_grad():
            output = model(Tensor(image_to_input(it.warped, model.config.input_size)[None]))
        if output.edge_logits is not None:
            edges = F.sigmoid(output.edge_logits).data[0, 0]
            write_png(out_dir / f"edges_{it.index:06d}.png", np.stack([edges] * 3, axis=-1))
    with open(out_dir / "ssim_levels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["level", "mean_ssim"])
        for i, v in enumerate(report.mean_ssim_levels, start=1):
            writer.writerow([i, f"{v:.6f}"])


def cmd_eval(args) -> int:
    from docdewarp.model import load_model
    from docdewarp.synth.dataset import read_dataset
    from docdewarp.trainer import evaluate, identity_baseline

    model = load_model(args.checkpoint)
    native = not args.model_res
    _print_config("eval", {"checkpoint": args.checkpoint, "data": args.data, "original_resolution": native,
                           "csv": args.csv or "", "dump_figures": args.dump_figures or "",
                           "input_size": model.config.input_size})
    items = list(read_dataset(args.data))
    if args.limit:
        items = items[: args.limit]
    report = evaluate(model, items, original_resolution=native)
    print(report.table())
    if args.baseline:
        base = identity_baseline(items, model.config.input_size, native)
        print(f"identity baseline MS-SSIM {base.mean_ms_ssim:.4f}")
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    if args.dump_figures:
        _dump_figures(model, items, report, Path(args.dump_figures), native)
    return EXIT_OK


# ------------------------------------------------------------------ checks

def cmd_gradcheck(args) -> int:
    from docdewarp.selfcheck import layer_grad_checks, model_grad_check

    _print_config("gradcheck", {"scale": args.scale, "size": args.size, "rel_tol": args.rel_tol,
                                "layer_rel_tol": args.layer_rel_tol, "max_entries": args.max_entries,
                                "seed": args.seed})
    ok = True
    print(f"{'layer':<20} {'max rel err':>12}  status")
    for name, rep in layer_grad_checks(rel_tol=args.layer_rel_tol, seed=args.seed):
        ok &= rep.passed
        print(f"{name:<20} {rep.max_rel_error:>12.3e}  {'ok' if rep.passed else 'FAIL'}")
    if not args.layers_only:
        rep = model_grad_check(scale=args.scale, size=args.size, rel_tol=args.rel_tol,
                               max_entries=args.max_entries, seed=args.seed)
        ok &= rep.passed
        print()
        print(rep.table())
        print(f"end-to-end max rel err {rep.max_rel_error:.3e} ({'ok' if rep.passed else 'FAIL'})")
    if not ok:
        raise NumericError("gradient check failed")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from docdewarp.selfcheck import run_selftest

    _print_config("selftest", {"seed": 0})

    def show(res):
        print(f"{'PASS' if res.passed else 'FAIL'}  {res.name:<22} {res.seconds:7.1f}s  {res.detail}", flush=True)

    results = run_selftest(show)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f"self test failed: {', '.join(failed)}")
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="docdewarp", description=__doc__.split("\n\n")[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="synthesize a warped-document dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pages", help="directory of flat page images (default: built-in generator)")
    p.add_argument("--textures", help="directory of background textures (default: built-in generator)")
    p.add_argument("--size", type=int, default=None, help="sample side in pixels (default 256)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config", help="key=value generation config file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--preset", choices=("full", "no_gate", "shared_decoders", "single_decoder"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--log-every", dest="log_every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dewarp", help="rectify one PNG image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--native-res", dest="native_res", action="store_true",
                   help="upsample the grid and sample the input at its own resolution")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; inference is deterministic")
    p.set_defaults(func=cmd_dewarp)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv")
    p.add_argument("--dump-figures", dest="dump_figures", metavar="DIR")
    p.add_argument("--model-res", dest="model_res", action="store_true",
                   help="compare at the model input size instead of the original resolution")
    p.add_argument("--baseline", action="store_true", help="also report the identity-grid baseline")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scale", type=float, default=0.125)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--rel-tol", dest="rel_tol", type=float, default=1e-3)
    p.add_argument("--layer-rel-tol", dest="layer_rel_tol", type=float, default=1e-4)
    p.add_argument("--max-entries", dest="max_entries", type=int, default=2)
    p.add_argument("--layers-only", dest="layers_only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the built-in invariant suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataIntegrityError, DegenerateWarpError, FileNotFoundError, IsADirectoryError,
            PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
