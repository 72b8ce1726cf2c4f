"""Batch command-line front end.

Subcommands: ``transfer`` adapts a directory of source images toward a
directory of target images, ``sweep`` renders one source/target pair at a
range of window sizes, ``fuse`` turns cached probability maps into
pseudo-labels, ``eval`` scores predictions against ground truth.

Every run writes a ``run_manifest.txt`` next to its outputs. The manifest's
``key = value`` lines are valid config-file syntax, so a recorded run can
be replayed with ``--config run_manifest.txt``. Exit codes: 0 on success,
1 when some items failed, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .dataprep import (
    RNG_ALGORITHM_ID,
    LabelRemap,
    PrepConfig,
    load_image,
    load_label,
    make_stream,
    pair_source_target,
    prep_image,
    remap_labels,
    resize_bilinear,
    save_image,
)
from .errors import (
    DataError,
    DimensionError,
    FormatError,
    MemoryBudgetError,
    ParameterError,
)
from .eval import ClassIouReport, ConfusionMatrix, class_iou, confusion_accumulate, default_class_names, iou_table
from .fusion import DEFAULT_THRESHOLD, read_manifest, streaming_fuse
from .spectral import beta_sweep, spectral_transfer

__all__ = ["main"]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

DEFAULT_BETA = 0.01
DEFAULT_BETAS = (0.01, 0.05, 0.09)
DEFAULT_RESIZE = (1280, 720)
DEFAULT_CROP = (1024, 512)

MANIFEST_NAME = "run_manifest.txt"

_ITEM_ERRORS = (OSError, DataError, DimensionError, FormatError, ParameterError)


class _UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files and option resolution

def _read_config(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise _UsageError(f"cannot read config '{path}': {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise _UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _cfg_str(s):
    return s


def _cfg_int(s):
    try:
        return int(s)
    except ValueError as exc:
        raise _UsageError(f"expected an integer, got '{s}'") from exc


def _cfg_float(s):
    try:
        return float(s)
    except ValueError as exc:
        raise _UsageError(f"expected a number, got '{s}'") from exc


def _cfg_bool(s):
    lowered = s.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise _UsageError(f"expected true/false, got '{s}'")


def _cfg_size(s):
    parts = s.replace(",", " ").split()
    if len(parts) != 2:
        raise _UsageError(f"expected 'WIDTH HEIGHT', got '{s}'")
    return [_cfg_int(p) for p in parts]


def _cfg_floats(s):
    parts = s.replace(",", " ").split()
    if not parts:
        raise _UsageError("expected at least one number")
    return [_cfg_float(p) for p in parts]


class _Options:
    """Effective option values: flags override config, config overrides
    defaults. Unknown config keys are rejected."""

    def __init__(self, args, spec):
        config = _read_config(args.config) if args.config else {}
        unknown = sorted(set(config) - set(spec))
        if unknown:
            raise _UsageError(f"unknown config key '{unknown[0]}'")
        self.effective = {}
        for name, (convert, default) in spec.items():
            value = getattr(args, name, None)
            if value is None and name in config:
                value = convert(config[name])
            if value is None:
                value = default
            setattr(self, name, value)
            self.effective[name] = value

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                flag = "--" + name.replace("_", "-")
                raise _UsageError(f"{flag} is required (flag or config file)")


def _fmt_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return " ".join(_fmt_value(v) for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def _write_manifest(directory: Path, command: str, options: dict, lines) -> None:
    out = [f"# command = {command}", f"# rng_algorithm = {RNG_ALGORITHM_ID}"]
    for key in sorted(options):
        out.append(f"{key} = {_fmt_value(options[key])}")
    out.extend(f"# {line}" for line in lines)
    (directory / MANIFEST_NAME).write_text("\n".join(out) + "\n", encoding="utf-8")


def _list_images(directory) -> dict:
    root = Path(directory)
    if not root.is_dir():
        raise _UsageError(f"'{directory}' is not a readable directory")
    found = {}
    for path in sorted(root.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES or not path.is_file():
            continue
        if path.stem in found:
            raise _UsageError(f"duplicate image id '{path.stem}' in '{directory}'")
        found[path.stem] = path
    if not found:
        raise _UsageError(f"no images found in '{directory}'")
    return found


def _check_beta(beta: float) -> float:
    if not 0.0 <= beta < 0.5:
        raise _UsageError(f"beta must be in [0, 0.5), got {beta:g}")
    return beta


def _pool_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# transfer

_TRANSFER_SPEC = {
    "source_dir": (_cfg_str, None),
    "target_dir": (_cfg_str, None),
    "out": (_cfg_str, None),
    "beta": (_cfg_float, DEFAULT_BETA),
    "seed": (_cfg_int, None),
    "workers": (_cfg_int, 1),
    "resize": (_cfg_size, list(DEFAULT_RESIZE)),
    "crop": (_cfg_size, list(DEFAULT_CROP)),
    "no_prep": (_cfg_bool, False),
    "verbose": (_cfg_bool, False),
}


def cmd_transfer(args) -> int:
    opts = _Options(args, _TRANSFER_SPEC)
    opts.require("source_dir", "target_dir", "out")
    if opts.seed is None:
        raise _UsageError("--seed is required: batch runs must be replayable")
    _check_beta(opts.beta)
    if opts.workers < 1:
        raise _UsageError(f"--workers must be >= 1, got {opts.workers}")

    sources = _list_images(opts.source_dir)
    targets = _list_images(opts.target_dir)
    try:
        config = PrepConfig(tuple(opts.resize), tuple(opts.crop), seed=opts.seed)
    except (ParameterError, DimensionError) as exc:
        raise _UsageError(str(exc)) from exc

    pairs = pair_source_target(sorted(sources), sorted(targets), opts.seed)
    out_dir = Path(opts.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def adapt(pair):
        sid, tid = pair
        try:
            src = load_image(sources[sid])
            tgt = load_image(targets[tid])
            if opts.no_prep:
                src_off = tgt_off = None
            else:
                # crop offsets are drawn from per-image streams so results
                # do not depend on worker count or completion order
                src, src_off = prep_image(src, config, make_stream(opts.seed, f"crop:src:{sid}"))
                tgt, tgt_off = prep_image(tgt, config, make_stream(opts.seed, f"crop:tgt:{sid}"))
            adapted = spectral_transfer(src, tgt, opts.beta)
            out_path = out_dir / f"{sid}.png"
            save_image(adapted, out_path)
        except _ITEM_ERRORS as exc:
            return sid, None, f"{type(exc).__name__}: {exc}"
        line = (
            f"pair {sid} -> {tid} src_crop={_fmt_value(src_off)} "
            f"tgt_crop={_fmt_value(tgt_off)} out={out_path.name}"
        )
        if opts.verbose:
            print(line, file=sys.stderr)
        return sid, line, None

    results = _pool_map(adapt, pairs, opts.workers)

    lines, failures = [], []
    for sid, line, error in sorted(results, key=lambda r: r[0]):
        if error is None:
            lines.append(line)
        else:
            failures.append(f"failed {sid}: {error}")
            print(f"warning: {sid}: {error}", file=sys.stderr)
    _write_manifest(out_dir, "transfer", opts.effective, lines + failures)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# sweep

_SWEEP_SPEC = {
    "source": (_cfg_str, None),
    "target": (_cfg_str, None),
    "out": (_cfg_str, None),
    "betas": (_cfg_floats, list(DEFAULT_BETAS)),
    "resize": (_cfg_size, list(DEFAULT_RESIZE)),
    "no_prep": (_cfg_bool, False),
    "seed": (_cfg_int, 0),
    "workers": (_cfg_int, 1),
    "verbose": (_cfg_bool, False),
}


def cmd_sweep(args) -> int:
    opts = _Options(args, _SWEEP_SPEC)
    opts.require("source", "target", "out")
    betas = [_check_beta(b) for b in opts.betas]
    if any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
        raise _UsageError("--betas must be strictly ascending")

    out_dir = Path(opts.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(opts.source).stem
    try:
        src = load_image(opts.source)
        tgt = load_image(opts.target)
        if not opts.no_prep:
            # resize only: the sweep is a side-by-side comparison, so no crop
            src = resize_bilinear(src, *opts.resize)
            tgt = resize_bilinear(tgt, *opts.resize)
        points = beta_sweep(src, tgt, betas)
        lines = []
        for point in points:
            name = f"{stem}_beta{point.beta:g}.png"
            save_image(point.image, out_dir / name)
            lines.append(f"beta {point.beta:g} out={name} l2_distance={point.l2_distance:.6f}")
            if opts.verbose:
                print(lines[-1], file=sys.stderr)
    except _ITEM_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        _write_manifest(out_dir, "sweep", opts.effective, [f"failed: {exc}"])
        return 1
    distances = "".join(f"{p.beta:g}\t{p.l2_distance:.6f}\n" for p in points)
    (out_dir / "distances.txt").write_text(distances, encoding="utf-8")
    _write_manifest(out_dir, "sweep", opts.effective, lines)
    return 0


# ---------------------------------------------------------------------------
# fuse

_FUSE_SPEC = {
    "manifest": (_cfg_str, None),
    "out": (_cfg_str, None),
    "threshold": (_cfg_float, None),
    "top_fraction": (_cfg_float, None),
    "memory_budget": (_cfg_int, None),
    "seed": (_cfg_int, 0),
    "workers": (_cfg_int, 1),
    "verbose": (_cfg_bool, False),
}


def cmd_fuse(args) -> int:
    opts = _Options(args, _FUSE_SPEC)
    opts.require("manifest", "out")
    if opts.threshold is not None and opts.top_fraction is not None:
        raise _UsageError("--threshold and --top-fraction are mutually exclusive")
    if opts.threshold is None and opts.top_fraction is None:
        opts.threshold = DEFAULT_THRESHOLD
        opts.effective["threshold"] = DEFAULT_THRESHOLD
    if opts.workers < 1:
        raise _UsageError(f"--workers must be >= 1, got {opts.workers}")

    try:
        manifest = read_manifest(opts.manifest, opts.memory_budget)
    except (OSError, FormatError) as exc:
        raise _UsageError(f"manifest: {exc}") from exc

    out_dir = Path(opts.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        report = streaming_fuse(
            manifest,
            out_dir,
            threshold=opts.threshold,
            top_fraction=opts.top_fraction,
            workers=opts.workers,
        )
    except ParameterError as exc:
        raise _UsageError(str(exc)) from exc

    lines = [
        f"images_processed = {report.images_processed}",
        f"peak_buffer_bytes = {report.peak_buffer_bytes}",
        f"model_count = {report.model_count}",
    ]
    lines += [f"failed {image_id}: {error}" for image_id, error in report.failures]
    (out_dir / "fusion_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(out_dir, "fuse", opts.effective, lines)
    for image_id, error in report.failures:
        print(f"warning: {image_id}: {error}", file=sys.stderr)
    if opts.verbose:
        print(f"fused {report.images_processed} images, peak {report.peak_buffer_bytes} bytes", file=sys.stderr)
    return 1 if report.failures else 0


# ---------------------------------------------------------------------------
# eval

_EVAL_SPEC = {
    "pred_dir": (_cfg_str, None),
    "gt_dir": (_cfg_str, None),
    "classes": (_cfg_int, 19),
    "remap": (_cfg_str, None),
    "report": (_cfg_str, None),
    "from_per_class": (_cfg_str, None),
    "seed": (_cfg_int, 0),
    "workers": (_cfg_int, 1),
    "verbose": (_cfg_bool, False),
}


def _per_class_report(path) -> ClassIouReport:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise _UsageError(f"cannot read '{path}': {exc}") from exc
    names, values = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            values.append(float(tokens[-1]))
        except ValueError as exc:
            raise _UsageError(f"{path}:{lineno}: '{tokens[-1]}' is not a number") from exc
        names.append(" ".join(tokens[:-1]))
    if not values:
        raise _UsageError(f"'{path}' lists no values")
    if all(names):
        return ClassIouReport.from_values(values, names)
    if any(names):
        raise _UsageError(f"'{path}' mixes named and unnamed lines")
    return ClassIouReport.from_values(values, default_class_names(len(values)))


def _write_reports(report: ClassIouReport, directory: Path, opts) -> None:
    (directory / "iou_report.txt").write_text(iou_table(report, "text"), encoding="utf-8")
    (directory / "iou_report.csv").write_text(iou_table(report, "csv"), encoding="utf-8")
    _write_manifest(directory, "eval", opts.effective, [f"miou = {report.miou!r}"])


def cmd_eval(args) -> int:
    opts = _Options(args, _EVAL_SPEC)
    if opts.workers < 1:
        raise _UsageError(f"--workers must be >= 1, got {opts.workers}")

    if opts.from_per_class is not None:
        report = _per_class_report(opts.from_per_class)
        print(iou_table(report, "text"), end="")
        if opts.report:
            directory = Path(opts.report)
            directory.mkdir(parents=True, exist_ok=True)
            _write_reports(report, directory, opts)
        return 0

    opts.require("pred_dir", "gt_dir")
    preds = _list_images(opts.pred_dir)
    gts = _list_images(opts.gt_dir)
    shared = sorted(set(preds) & set(gts))
    for missing in sorted(set(preds) - set(gts)):
        print(f"warning: no ground truth for '{missing}', skipped", file=sys.stderr)
    for missing in sorted(set(gts) - set(preds)):
        print(f"warning: no prediction for '{missing}', skipped", file=sys.stderr)
    if not shared:
        print("error: no ids shared between the two directories", file=sys.stderr)
        return 1

    try:
        remap = LabelRemap.from_file(opts.remap) if opts.remap else None
    except (OSError, FormatError) as exc:
        raise _UsageError(f"remap: {exc}") from exc

    def score(image_id):
        try:
            pred = load_label(preds[image_id])
            gt = load_label(gts[image_id])
            if remap is not None:
                gt = remap_labels(gt, remap)
            cm = confusion_accumulate(pred, gt, ConfusionMatrix.zeros(opts.classes))
        except _ITEM_ERRORS as exc:
            return image_id, None, f"{type(exc).__name__}: {exc}"
        return image_id, cm, None

    results = _pool_map(score, shared, opts.workers)

    total = ConfusionMatrix.zeros(opts.classes)
    scored, failures = [], []
    for image_id, cm, error in sorted(results, key=lambda r: r[0]):
        if error is None:
            total = total + cm
            scored.append(image_id)
        else:
            failures.append(f"failed {image_id}: {error}")
            print(f"warning: {image_id}: {error}", file=sys.stderr)
    if not scored:
        print("error: every image pair failed to score", file=sys.stderr)
        return 1

    report = class_iou(total, default_class_names(opts.classes))
    print(iou_table(report, "text"), end="")
    if opts.verbose:
        print(f"scored {len(scored)} image pairs, ignored {total.ignored_pixels} pixels", file=sys.stderr)
    if opts.report:
        directory = Path(opts.report)
        directory.mkdir(parents=True, exist_ok=True)
        _write_reports(report, directory, opts)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# parser

def _add_common(parser):
    parser.add_argument("--config", help="key = value file supplying defaults")
    parser.add_argument("--seed", type=int, help="master seed for all randomness")
    parser.add_argument("--workers", type=int, help="worker threads (default 1)")
    parser.add_argument("--verbose", action="store_true", default=None, help="per-item progress on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdakit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transfer", help="adapt source images toward target style")
    p.add_argument("--source-dir", dest="source_dir")
    p.add_argument("--target-dir", dest="target_dir")
    p.add_argument("--out")
    p.add_argument("--beta", type=float, help=f"window size (default {DEFAULT_BETA})")
    p.add_argument("--resize", nargs=2, type=int, metavar=("W", "H"))
    p.add_argument("--crop", nargs=2, type=int, metavar=("W", "H"))
    p.add_argument("--no-prep", dest="no_prep", action="store_true", default=None,
                   help="skip resize and crop, use images as stored")
    _add_common(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("sweep", help="render one pair at several window sizes")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--out")
    p.add_argument("--betas", nargs="+", type=float,
                   help="ascending window sizes (default %s)" % " ".join(f"{b:g}" for b in DEFAULT_BETAS))
    p.add_argument("--resize", nargs=2, type=int, metavar=("W", "H"))
    p.add_argument("--no-prep", dest="no_prep", action="store_true", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fuse", help="fuse cached probability maps into pseudo-labels")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, help="keep pixels with winning score >= t")
    p.add_argument("--top-fraction", dest="top_fraction", type=float,
                   help="keep the best fraction of each class's pixels")
    p.add_argument("--memory-budget", dest="memory_budget", type=int, help="bytes")
    _add_common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred-dir", dest="pred_dir")
    p.add_argument("--gt-dir", dest="gt_dir")
    p.add_argument("--classes", type=int)
    p.add_argument("--remap", help="label remap table applied to ground truth")
    p.add_argument("--report", help="directory for report files")
    p.add_argument("--from-per-class", dest="from_per_class",
                   help="aggregate a file of per-class IoU values instead of scoring images")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MemoryBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
