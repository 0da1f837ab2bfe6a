"""Batch driver: segment feature bundles, calibrate, evaluate, colorize.

Subcommands:
    segment   --config <path> --features <dir> --out <dir>
    calibrate --config <path> --gt <dir> --features <dir> --out <dir>
    eval      --pred <dir> --gt <dir> [--background K] [--cliou] [--csv path]
    colorize  --in <map.tns> --out <image.ppm> [--seed S]

Feature bundles are one directory per image holding a manifest plus
tensors: either f_lr + f_hr + attention, or f_lr + queries + keys, in
which case attention and the high-res features are computed here. The
EASE_THREADS variable bounds the worker pool. Exit codes: 0 ok, 1 usage,
2 I/O trouble, 3 data invariant violation.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from ease import agg, calib, crs, evalx, hmerge, sauce
from ease.tensors import (
    FeatureMap,
    LabelMap,
    TensorFileError,
    read_array,
    read_label_map,
)

USAGE_ERROR = 1
IO_ERROR = 2
DATA_ERROR = 3


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    """Required path neither given on the command line nor in the config."""


@dataclass(frozen=True)
class PipelineConfig:
    tau: float = 0.97
    refine_iters: int = 5
    alpha: float = 0.75
    beta: float = 0.25
    top_n: int = 40
    theta_hi: float = 0.99
    theta_lo: float = 0.30
    delta: float = 0.001
    beta_bnd: float = 0.0
    min_segment: int = 50
    longest_side: int = 640  # applied by the exporter; recorded for provenance
    smoothing: bool = True
    majority_threshold: float = 0.625
    gradient_percentile: float = 75.0
    seed: int = 0
    features_dir: str = ""
    gt_dir: str = ""
    out_dir: str = ""

    def hm_config(self) -> hmerge.HmConfig:
        return hmerge.HmConfig(
            theta_hi=self.theta_hi,
            theta_lo=self.theta_lo,
            delta=self.delta,
            beta_bnd=self.beta_bnd,
            min_segment=self.min_segment,
            top_n=self.top_n,
        )

    def agg_config(self) -> agg.AggConfig:
        return agg.AggConfig(
            alpha=self.alpha,
            beta=self.beta,
            smoothing=self.smoothing,
            majority_threshold=self.majority_threshold,
            gradient_percentile=self.gradient_percentile,
        )


def parse_config(text: str) -> PipelineConfig:
    """Line-oriented key=value with # comments; unknown keys are rejected."""
    spec = {f.name: f.type for f in fields(PipelineConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in spec:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val, spec[key])
    try:
        return PipelineConfig(**values)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _coerce(key, val, ftype):
    ftype = str(ftype)
    try:
        if "bool" in ftype:
            if val.lower() in ("true", "1", "yes", "on"):
                return True
            if val.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {val!r}")
        if "int" in ftype:
            return int(val)
        if "float" in ftype:
            return float(val)
        return val
    except ValueError as e:
        raise ConfigError(f"key {key!r}: {e}") from e


def serialize_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# feature bundles
# ---------------------------------------------------------------------------


def _read_bundle_manifest(bundle: Path) -> dict:
    manifest = bundle / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{bundle}: no manifest.txt")
    entries = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, rest = line.split("=", 1)
        entries[key.strip()] = rest.strip().split(":", 1)[0]
    return entries


def load_bundle(bundle) -> tuple[FeatureMap, FeatureMap, "np.ndarray"]:
    """Returns (f_lr, f_hr, attention rows) for one image bundle."""
    bundle = Path(bundle)
    entries = _read_bundle_manifest(bundle)

    def arr(name):
        return read_array(bundle / entries[name])

    if "f_lr" not in entries:
        raise FileNotFoundError(f"{bundle}: bundle lacks f_lr")
    f_lr = FeatureMap(arr("f_lr"))

    if "f_hr" in entries and "attention" in entries:
        f_hr = FeatureMap(arr("f_hr"))
        attn = arr("attention")
    elif "queries" in entries and "keys" in entries:
        q = arr("queries")  # (d_qk, H, W)
        k = arr("keys")  # (d_qk, h, w)
        if q.ndim != 3 or k.ndim != 3:
            raise ValueError(f"{bundle}: queries/keys must be 3-D grids")
        hr_shape = q.shape[1:]
        queries = q.reshape(q.shape[0], -1).T
        keys = k.reshape(k.shape[0], -1).T
        values = f_lr.pixels()
        if keys.shape[0] != values.shape[0]:
            raise ValueError(f"{bundle}: key grid does not match f_lr tokens")
        f_hr, attn_map = sauce.cross_attention_upsample(queries, keys, values, hr_shape)
        attn = attn_map.rows
    else:
        raise FileNotFoundError(
            f"{bundle}: need f_hr+attention or queries+keys alongside f_lr"
        )
    if attn.ndim != 2 or attn.shape != (f_hr.height * f_hr.width, f_lr.height * f_lr.width):
        raise ValueError(f"{bundle}: attention shape {attn.shape} does not match grids")
    return f_lr, f_hr, np.asarray(attn, dtype=np.float32)


def stage2_labels(f_lr: FeatureMap, f_hr: FeatureMap, attn_rows, cfg: PipelineConfig) -> LabelMap:
    """CRS then AGG: the dense per-pixel assignment the sweep starts from."""
    from ease.tensors import AttentionMap

    attention = AttentionMap(attn_rows)
    d = crs.crs_refine(f_lr, f_hr, attention, tau=cfg.tau, max_iters=cfg.refine_iters)
    g = agg.group_matrix(f_lr.pixels(), d)
    a_m = agg.pool_attention(attention, g)
    y = agg.assign_labels(f_hr, d, a_m, cfg.agg_config())
    if cfg.smoothing:
        y = agg.edge_smooth(y, f_hr, cfg.majority_threshold, cfg.gradient_percentile)
    return y


def segment_bundle(f_lr: FeatureMap, f_hr: FeatureMap, attn_rows, cfg: PipelineConfig):
    """CRS -> AGG -> HM for one image; returns the emitted hierarchy levels."""
    y = stage2_labels(f_lr, f_hr, attn_rows, cfg)
    levels = hmerge.build_hierarchy(y, f_hr, cfg.hm_config())
    if not levels:
        # nothing merged (e.g. a single prototype): the stage-2 map is the output
        compacted = y.compact()
        snap = hmerge.HierarchySnapshot(
            labels=compacted,
            tau=cfg.theta_hi,
            k=len(compacted.segment_ids()),
            tau_floor=cfg.theta_hi,
        )
        levels = [
            hmerge.HierarchyLevel(
                snapshot=snap,
                score=0.0,
                cost_hat=0.0,
                ch_hat=0.0,
                bonus=0.0,
                merged=compacted,
                granularity=hmerge.granularity_scores(compacted, f_hr),
            )
        ]
    return levels


def _bundles_in(features_dir: Path) -> list[Path]:
    bundles = sorted(
        p for p in features_dir.iterdir() if p.is_dir() and (p / "manifest.txt").exists()
    )
    if not bundles:
        raise FileNotFoundError(f"{features_dir}: no feature bundles found")
    return bundles


def _worker_count() -> int:
    env = os.environ.get("EASE_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _required_path(flag_value, cfg_value, name) -> Path:
    value = flag_value or cfg_value
    if not value:
        raise UsageError(f"--{name} is required (or set {name}_dir in the config)")
    return Path(value)


def cmd_segment(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    features_dir = _required_path(args.features, cfg.features_dir, "features")
    out_dir = _required_path(args.out, cfg.out_dir, "out")
    if not features_dir.is_dir():
        raise FileNotFoundError(f"features directory {features_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    bundles = _bundles_in(features_dir)

    def run(bundle: Path):
        f_lr, f_hr, attn = load_bundle(bundle)
        levels = segment_bundle(f_lr, f_hr, attn, cfg)
        hmerge.write_hierarchy(out_dir / bundle.name, levels)
        return bundle.name, len(levels)

    failures = []
    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        futures = {pool.submit(run, b): b for b in bundles}
        for fut, bundle in futures.items():
            try:
                name, n = fut.result()
                print(f"{name}: {n} levels")
            except Exception as e:  # noqa: BLE001 - reported per image
                failures.append((bundle.name, e))
    for name, e in failures:
        print(f"error: {name}: {e}", file=sys.stderr)
    if failures:
        raise failures[0][1]
    return 0


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    gt_dir = _required_path(args.gt, cfg.gt_dir, "gt")
    features_dir = _required_path(args.features, cfg.features_dir, "features")
    out_dir = _required_path(args.out, cfg.out_dir, "out")
    if not gt_dir.is_dir() or not features_dir.is_dir():
        raise FileNotFoundError("calibration needs existing --gt and --features dirs")
    out_dir.mkdir(parents=True, exist_ok=True)

    bundles = _bundles_in(features_dir)
    # the smaller of 200 images or 10% of the available split, at least one
    subset = bundles[: max(1, min(200, len(bundles) // 10))]

    label_maps, feats, gts = [], [], []
    for bundle in subset:
        gt_path = gt_dir / f"{bundle.name}.tns"
        if not gt_path.exists():
            raise FileNotFoundError(f"missing ground truth {gt_path}")
        f_lr, f_hr, attn = load_bundle(bundle)
        # the sweep inside beta_sweep starts from the stage-2 partition
        label_maps.append(stage2_labels(f_lr, f_hr, attn, cfg))
        feats.append(f_hr)
        gts.append(read_label_map(gt_path))

    result = calib.beta_sweep(
        label_maps, feats, gts, cfg.hm_config(), background=args.background
    )
    report = out_dir / "calibration.txt"
    calib.write_report(report, result)
    print(report.read_text(), end="")
    return 0


def _paired_maps(pred_dir: Path, gt_dir: Path):
    preds = sorted(pred_dir.glob("*.tns"))
    if not preds:
        raise FileNotFoundError(f"{pred_dir}: no .tns predictions")
    for p in preds:
        g = gt_dir / p.name
        if not g.exists():
            raise FileNotFoundError(f"missing ground truth {g}")
        yield read_label_map(p), read_label_map(g)


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise FileNotFoundError("eval needs existing --pred and --gt dirs")
    mious, accs, clious = [], [], []
    class_ious: dict[int, list[float]] = {}
    for pred, gt in _paired_maps(pred_dir, gt_dir):
        cm = evalx.confusion(pred, gt, ignore={0})
        _, per_class, miou = evalx.hungarian_miou(cm, args.background)
        mious.append(miou)
        accs.append(evalx.pixel_accuracy(cm, args.background))
        for c, v in per_class.items():
            class_ious.setdefault(c, []).append(v)
        if args.cliou:
            clious.append(evalx.cl_iou(pred.labels > 0, gt.labels > 0))
    lines = [
        f"images={len(mious)}",
        f"miou={np.mean(mious):.9f}",
        f"pixel_accuracy={np.mean(accs):.9f}",
    ]
    if args.cliou:
        lines.append(f"cliou={np.mean(clious):.9f}")
    print("\n".join(lines))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("class,iou\n")
            for c in sorted(class_ious):
                fh.write(f"{c},{np.mean(class_ious[c]):.9f}\n")
    return 0


_M64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64


def label_color(label: int, seed: int = 0) -> tuple[int, int, int]:
    """Deterministic palette; label 0 is always black."""
    if label == 0:
        return (0, 0, 0)
    h = _splitmix64(_splitmix64(seed) ^ label)
    rgb = (h & 0xFF, (h >> 8) & 0xFF, (h >> 16) & 0xFF)
    if rgb == (0, 0, 0):
        rgb = (1, 1, 1)  # keep black reserved for the background
    return rgb


def colorize(labels: LabelMap, seed: int = 0) -> bytes:
    """Render a label map as a binary PPM (P6) image."""
    lut = {int(i): label_color(int(i), seed) for i in np.unique(labels.labels)}
    h, w = labels.height, labels.width
    img = np.zeros((h, w, 3), dtype=np.uint8)
    for i, rgb in lut.items():
        img[labels.labels == i] = rgb
    header = f"P6\n{w} {h}\n255\n".encode()
    return header + img.tobytes()


def cmd_colorize(args) -> int:
    labels = read_label_map(args.infile)
    data = colorize(labels, args.seed)
    with open(args.out, "wb") as fh:
        fh.write(data)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits 2 by default; usage problems are exit code 1 here
        self.print_usage(sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ease", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="run the full grouping stack on feature bundles")
    p.add_argument("--config", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("calibrate", help="fit the granularity target and sweep the boundary penalty")
    p.add_argument("--config", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--background", type=int, default=None)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--background", type=int, default=None)
    p.add_argument("--cliou", action="store_true")
    p.add_argument("--csv", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("colorize", help="render a label map to a PPM image")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_colorize)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (FileNotFoundError, PermissionError, IsADirectoryError, TensorFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return IO_ERROR
    except (ConfigError, ValueError, KeyError, calib.CalibrationFailed, calib.SweepFailed) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
