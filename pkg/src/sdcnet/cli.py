"""``sdcnet`` command line: synth, preprocess, train, eval, gradcheck, rf.

Settings are resolved in three layers: the preset's built-in defaults, then
an optional JSON ``--config`` file, then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

from .gradcheck import run_all
from .network import SdcnConfig, load_checkpoint, save_checkpoint
from .sdconv import DilationVector, receptive_field
from .synth import SynthConfig, iter_synthetic_dataset
from .tensor import FormatError, ShapeError, save_sgt
from .train import MetricError, TrainConfig, evaluate, load_segments, read_manifest, train_loop
from .wavelet import CwtConfig, build_scalogram, read_clip, segment_clip, write_clip

log = logging.getLogger("sdcnet")

SEGMENT_SECONDS = 30.0
MANIFEST = "manifest.jsonl"
CLIP_INDEX = "clips.jsonl"
CHECKPOINT = "model.sdcn"
METRICS = "metrics.jsonl"

# 12000-sample segments decimated by 47 give 256 columns. The upper band
# edge sits well above 50 Hz so per-channel standardisation keeps a
# contrast between low and high rows.
PRESETS: dict[str, dict[str, Any]] = {
    "desk": {
        "cwt": CwtConfig(n_freqs=64, f_min_hz=0.5, f_max_hz=150.0, morlet_omega0=6.0, time_decimation=47),
        "model": SdcnConfig.desk(),
        "synth": SynthConfig(n_channels=4),
        "train": TrainConfig(),
    },
    "full": {
        "cwt": CwtConfig(),
        "model": SdcnConfig.full(),
        "synth": SynthConfig(n_channels=16),
        "train": TrainConfig(),
    },
}


class CliError(RuntimeError):
    """A user-facing failure; reported on stderr with a nonzero exit code."""


@dataclass
class RunConfig:
    command: str
    preset: str = "desk"
    seed: int | None = None
    segment_seconds: float = SEGMENT_SECONDS
    cwt: CwtConfig = field(default_factory=CwtConfig)
    model: SdcnConfig = field(default_factory=SdcnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict[str, Any]:
        """Everything that affects results; file paths are deliberately left out."""
        return json.loads(
            json.dumps(
                {
                    "command": self.command,
                    "preset": self.preset,
                    "seed": self.seed,
                    "segment_seconds": self.segment_seconds,
                    "cwt": asdict(self.cwt),
                    "model": self.model.to_dict(),
                    "train": asdict(self.train),
                    "synth": asdict(self.synth),
                }
            )
        )


# flag dest -> (section, field)
FLAG_FIELDS = {
    "clips": ("synth", "n_clips"),
    "clip_seconds": ("synth", "clip_seconds"),
    "sample_rate": ("synth", "sample_rate_hz"),
    "channels": ("synth", "n_channels"),
    "gain": ("synth", "gain"),
    "band_hz": ("synth", "band_hz"),
    "noise_level": ("synth", "noise_level"),
    "n_freqs": ("cwt", "n_freqs"),
    "f_min": ("cwt", "f_min_hz"),
    "f_max": ("cwt", "f_max_hz"),
    "omega0": ("cwt", "morlet_omega0"),
    "decimation": ("cwt", "time_decimation"),
    "filters": ("model", "filters"),
    "fc_sizes": ("model", "fc_sizes"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "learning_rate"),
    "patience": ("train", "patience"),
    "train_fraction": ("train", "train_fraction"),
    "threshold": ("train", "threshold"),
}


def _update(obj, values: dict[str, Any], where: str):
    known = {f.name for f in fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise CliError(f"unknown {where} settings: {sorted(unknown)}")
    return replace(obj, **values)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = PRESETS[args.preset]
    run = RunConfig(args.command, args.preset, **{k: base[k] for k in ("cwt", "model", "train", "synth")})
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        for section in ("cwt", "model", "train", "synth"):
            if section in doc:
                setattr(run, section, _update(getattr(run, section), doc[section], section))
        run.seed = doc.get("seed", run.seed)
        run.segment_seconds = doc.get("segment_seconds", run.segment_seconds)
    overrides: dict[str, dict[str, Any]] = {}
    for dest, (section, name) in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides.setdefault(section, {})[name] = value
    for section, values in overrides.items():
        setattr(run, section, _update(getattr(run, section), values, section))
    if getattr(args, "segment_seconds", None) is not None:
        run.segment_seconds = args.segment_seconds
    if args.seed is not None:
        run.seed = args.seed
    if run.seed is not None:
        run.synth = replace(run.synth, seed=run.seed)
        run.model = replace(run.model, seed=run.seed)
        run.train = replace(run.train, seed=run.seed)
    run.synth.validate()
    run.train.validate()
    return run


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _dilation(text: str) -> DilationVector:
    vals = _int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"dilation must be d_h,d_w; got {text!r}")
    d = DilationVector(*vals)
    try:
        d.validate()
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    return d


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# --- subcommands -------------------------------------------------------------


def cmd_synth(run: RunConfig, args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index, counts = [], {0: 0, 1: 0}
    for clip in iter_synthetic_dataset(run.synth):
        write_clip(out / f"{clip.clip_id}.clip", clip)
        index.append({"clip_id": clip.clip_id, "label": clip.label, "path": f"{clip.clip_id}.clip"})
        counts[clip.label] += 1
    _write_jsonl(out / CLIP_INDEX, index)
    print(f"wrote {counts[0]} interictal and {counts[1]} preictal clips to {out}")
    return 0


def cmd_preprocess(run: RunConfig, args: argparse.Namespace) -> int:
    src = Path(args.data)
    clips = sorted(src.glob("*.clip"))
    if not clips:
        raise CliError(f"no .clip files in {src}")
    out = Path(args.out or src)
    seg_dir = out / "segments"
    seg_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in clips:
        clip = read_clip(path)
        run.cwt.validate(clip.sample_rate_hz)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore" if args.quiet else "default")
            segments = segment_clip(clip, run.segment_seconds)
        for seg in segments:
            s = build_scalogram(seg, run.cwt)
            rel = f"segments/{clip.clip_id}_{s.segment_index:03d}.sgt"
            save_sgt(out / rel, s.as_tensor4())
            rows.append(
                {
                    "clip_id": s.clip_id,
                    "segment_index": s.segment_index,
                    "label": s.label,
                    "sgt_path": rel,
                    "freqs": [round(float(f), 6) for f in s.freqs_hz],
                }
            )
        log.info("%s: %d segments", clip.clip_id, len(segments))
    _write_jsonl(out / MANIFEST, rows)
    print(f"wrote {len(rows)} segments from {len(clips)} clips to {out / MANIFEST}")
    return 0


def _manifest_path(args: argparse.Namespace) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if args.data:
        return Path(args.data) / MANIFEST
    raise CliError("pass --manifest or --data")


def _load_manifest(path: Path) -> list[dict]:
    if not path.is_file():
        raise CliError(f"manifest not found: {path}")
    return read_manifest(path)


def _model_height(rows_h: int) -> int:
    """Smallest multiple of 8 reachable from ``rows_h`` by symmetric zero rows."""
    h = 8 * math.ceil(rows_h / 8)
    while (h - rows_h) % 2:
        h += 8
    return h


def cmd_train(run: RunConfig, args: argparse.Namespace) -> int:
    manifest = _manifest_path(args)
    rows = _load_manifest(manifest)
    probe = load_segments(rows[:1], manifest.parent)
    _, c, h, w = probe.x.shape
    height = _model_height(h)
    run.model = replace(run.model, height=height, width=w, n_channels=c)
    data = load_segments(rows, manifest.parent, height=height)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / METRICS
    with open(metrics, "w") as fh:
        fh.write(json.dumps({"config": run.to_dict()}, sort_keys=True) + "\n")
    result = train_loop(data, run.model, run.train, metrics_path=metrics)
    result.model.meta["manifest_rows"] = len(rows)
    save_checkpoint(result.model, out / CHECKPOINT)
    best = result.model.meta["best_metrics"]
    print(
        f"best epoch {result.best_epoch}: clip AUC {best['clip_auc']:.4f}, "
        f"segment AUC {best['seg_auc']:.4f}, sensitivity {best['sens']:.4f}"
    )
    print(f"checkpoint: {out / CHECKPOINT}")
    return 0


def cmd_eval(run: RunConfig, args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    manifest = _manifest_path(args)
    rows = _load_manifest(manifest)
    meta = model.meta or {}
    if not args.all and meta.get("val_clips"):
        keep = set(meta["val_clips"])
        rows = [r for r in rows if r["clip_id"] in keep]
        if not rows:
            raise CliError("none of the checkpoint's validation clips are in the manifest")
    data = load_segments(rows, manifest.parent, height=model.config.height)
    train_meta = meta.get("train", {})
    batch = args.batch_size or train_meta.get("batch_size", 16)
    threshold = args.threshold if args.threshold is not None else train_meta.get("threshold", 0.5)
    m = evaluate(model, data, batch, threshold)
    summary = {"seg_auc": m["seg_auc"], "clip_auc": m["clip_auc"], "sens": m["sens"], "n_clips": len(m["clip_scores"])}
    print(json.dumps(summary, sort_keys=True))
    for c in m["clip_scores"]:
        print(json.dumps(asdict(c), sort_keys=True))
    return 0


def cmd_gradcheck(run: RunConfig, args: argparse.Namespace) -> int:
    results = run_all(run.seed or 0)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_rf(run: RunConfig, args: argparse.Namespace) -> int:
    dilations = args.d or [DilationVector(1, 1)]
    ks = args.k or [3]
    pairs = [(k, d) for k in ks for d in dilations]
    for k in ks:
        if k < 1 or k % 2 == 0:
            raise CliError(f"kernel size must be odd and positive, got {k}")
    for k, d in pairs:
        rf_h, rf_w = receptive_field(k, d)
        if len(pairs) == 1:
            print(f"{rf_h}x{rf_w}")
        else:
            print(f"k={k} d={d.d_h},{d.d_w} {rf_h}x{rf_w}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "rf": cmd_rf,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with cwt/model/train/synth sections")
    common.add_argument("--seed", type=int, help="overrides every seed in the run")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sdcnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic clips")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, help="clips per class")
    p.add_argument("--clip-seconds", type=float)
    p.add_argument("--sample-rate", type=float)
    p.add_argument("--channels", type=int)
    p.add_argument("--gain", type=float, help="preictal in-band power ratio (1 = no contrast)")
    p.add_argument("--band-hz", type=float)
    p.add_argument("--noise-level", type=float)

    p = sub.add_parser("preprocess", parents=[common], help="clips -> scalogram segments")
    p.add_argument("--data", required=True, help="directory of .clip files")
    p.add_argument("--out", help="output directory (default: --data)")
    p.add_argument("--segment-seconds", type=float)
    p.add_argument("--n-freqs", type=int)
    p.add_argument("--f-min", type=float)
    p.add_argument("--f-max", type=float)
    p.add_argument("--omega0", type=float)
    p.add_argument("--decimation", type=int)
    p.add_argument("--quiet", action="store_true", help="suppress dropped-sample warnings")

    p = sub.add_parser("train", parents=[common], help="train on a segment manifest")
    p.add_argument("--data", help="directory holding manifest.jsonl")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--filters", type=_int_list)
    p.add_argument("--fc-sizes", type=_int_list)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory holding manifest.jsonl")
    p.add_argument("--manifest")
    p.add_argument("--all", action="store_true", help="score every clip, not just validation clips")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--threshold", type=float)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference and oracle self-checks")

    p = sub.add_parser("rf", parents=[common], help="receptive field of a k x k kernel")
    p.add_argument("--k", type=int, action="append")
    p.add_argument("--d", type=_dilation, action="append", help="d_h,d_w (repeatable)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run = resolve_config(args)
        return COMMANDS[args.command](run, args)
    except (CliError, FormatError, ShapeError, MetricError, ValueError, OSError) as exc:
        print(f"sdcnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
