"""``rawdn`` command line: simulate, calibrate, train, denoise, eval, gradcheck, inspect.

Structured results go to stdout as JSON. Failures print one JSON line to stderr
and exit with 2 (usage), 3 (data/format) or 4 (numeric failure).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from rawdn import errors
from rawdn.denoise_net import count_macs, count_params, denoise_sequence, load_weights, save_weights
from rawdn.metrics import evaluate, save_report
from rawdn.noise_model import NoiseParams, add_noise, calibrate, load_noise_params, save_calibration
from rawdn.raw_data import (
    BayerPattern,
    RawFrame,
    Sequence,
    pack_sequence,
    read_sequence,
    undo_unify,
    unify_pattern,
    unpack_cfa,
    PackedFrame,
    write_sequence,
)
from rawdn.train_engine import PRESETS, TrainExample, load_config, sample_crops, synth_scene, train
from rawdn.train_engine import gradcheck as run_gradcheck

log = logging.getLogger("rawdn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _emit(doc) -> None:
    print(json.dumps(doc, indent=2, default=str))


def _echo_config(name: str, doc: dict) -> None:
    log.info("%s config: %s", name, json.dumps(doc, default=str, sort_keys=True))


# simulate -------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = NoiseParams(args.noise_a, args.noise_b, args.iso)
    h, w = args.size
    rng = np.random.default_rng(args.seed)
    n_val = max(1, args.scenes // 4) if args.scenes > 1 else 0
    scenes = []
    for i in range(args.scenes):
        scene_seed, noise_seed = (int(v) for v in rng.integers(0, 2**63 - 1, size=2))
        clean = synth_scene(scene_seed, args.frames, h, w, args.motion)
        noisy = add_noise(clean, params, noise_seed)
        name = f"scene_{i:03d}"
        write_sequence(clean, out / f"{name}_clean.rvds")
        write_sequence(noisy, out / f"{name}_noisy.rvds")
        scenes.append({"name": name, "clean": f"{name}_clean.rvds", "noisy": f"{name}_noisy.rvds",
                       "split": "val" if i >= args.scenes - n_val else "train",
                       "scene_seed": scene_seed, "noise_seed": noise_seed})
    flats = []
    if args.flat_levels:
        (out / "flats").mkdir(exist_ok=True)
        for j, level in enumerate(args.flat_levels):
            flat = Sequence(np.full((args.flat_frames, 4, h // 2, w // 2), level), BayerPattern.RGGB)
            noisy = add_noise(flat, params, int(rng.integers(0, 2**63 - 1)))
            rel = f"flats/flat_{j:02d}.rvds"
            write_sequence(noisy, out / rel)
            flats.append({"level": level, "path": rel})
    manifest = {"noise": {"a": params.a, "b": params.b, "iso": params.iso}, "size": [h, w],
                "frames": args.frames, "motion": args.motion, "seed": args.seed, "scenes": scenes, "flats": flats}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    _emit({"out": str(out), "scenes": len(scenes), "flats": len(flats)})
    return EXIT_OK


def _manifest(data_dir: Path) -> dict:
    path = data_dir / MANIFEST
    if not path.exists():
        raise errors.DataError(f"{data_dir}: no {MANIFEST}")
    return json.loads(path.read_text())


def _manifest_params(manifest: dict) -> NoiseParams:
    n = manifest["noise"]
    return NoiseParams(float(n["a"]), float(n["b"]), n.get("iso"))


def _scenes(manifest: dict, split: str) -> list[dict]:
    return [s for s in manifest["scenes"] if split == "all" or s["split"] == split]


# calibrate ------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    paths = sorted(Path(args.flats).glob("*.rvds"))
    if not paths:
        raise errors.DataError(f"{args.flats}: no .rvds flat stacks found")
    cal = calibrate([read_sequence(p) for p in paths], iso=args.iso)
    save_calibration(cal, args.out)
    _emit(cal.to_json())
    return EXIT_OK


# train ------------------------------------------------------------------------------

def _train_config(args):
    config = load_config(args.config) if args.config else PRESETS[args.preset]
    return config.replace(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, crop=args.crop,
                          seq_len=args.seq_len, crops_per_seq=args.crops_per_seq, scales=args.scales,
                          widths=args.widths, seed=args.seed, val_interval=args.val_interval)


def cmd_train(args) -> int:
    data = Path(args.data)
    manifest = _manifest(data)
    params = _manifest_params(manifest)
    config = _train_config(args)
    _echo_config("train", config.to_json())
    dataset = []
    for i, scene in enumerate(_scenes(manifest, "train")):
        clean = read_sequence(data / scene["clean"])
        dataset += sample_crops(clean, config, [config.seed, i], params)
    validation = [TrainExample(read_sequence(data / s["noisy"]), read_sequence(data / s["clean"]), params)
                  for s in _scenes(manifest, "val")]
    if not dataset:
        raise errors.DataError(f"{data}: no training scenes")
    w, history = train(config, dataset, validation)
    save_weights(w, args.out)
    if args.log:
        history.write_jsonl(args.log)
    figures = []
    if args.figures:
        from rawdn.plotting import plot_training

        figures = [str(p) for p in plot_training(history.records, args.figures)]
    last = history.records[-1]
    _emit({"checkpoint": str(args.out), "iterations": len(history.records), "final": last,
           "params": count_params(w), "figures": figures})
    return EXIT_OK


# denoise ------------------------------------------------------------------------------

def _noise_from_args(args) -> NoiseParams:
    if args.noise:
        return load_noise_params(args.noise)
    if args.noise_a is None or args.noise_b is None:
        raise UsageError("denoise: give --noise-a and --noise-b, or --noise FILE")
    return NoiseParams(args.noise_a, args.noise_b)


def cmd_denoise(args) -> int:
    w = load_weights(args.ckpt)
    params = _noise_from_args(args)
    seq = read_sequence(args.input)
    _echo_config("denoise", {"ckpt": args.ckpt, "input": args.input, "a": params.a, "b": params.b})
    if seq.channels == 1:
        packed = pack_sequence(seq.data, seq.source_pattern)
        out = denoise_sequence(packed, params, w)
        flips = unify_pattern(RawFrame(seq.data[0, 0], seq.source_pattern))[1]
        raw = [undo_unify(unpack_cfa(PackedFrame(f)), flips).data for f in out.data]
        result = Sequence(np.stack(raw)[:, None], seq.source_pattern)
    else:
        result = denoise_sequence(seq, params, w)
    write_sequence(result, args.out)
    _emit({"out": str(args.out), "frames": result.length})
    return EXIT_OK


# eval ----------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    data = Path(args.data)
    manifest = _manifest(data)
    params = _manifest_params(manifest)
    w = load_weights(args.ckpt)
    scenes = _scenes(manifest, args.split)
    if not scenes:
        raise errors.DataError(f"{data}: no scenes in split {args.split!r}")
    pairs = [(read_sequence(data / s["noisy"]), read_sequence(data / s["clean"]), params) for s in scenes]
    report = evaluate(w, pairs).to_json()
    save_report(report, args.report)
    if args.figures:
        from rawdn.plotting import plot_frames, plot_report

        plot_report(report, Path(args.figures) / "quality_report.png")
        noisy, clean, _ = pairs[0]
        out = denoise_sequence(noisy, params, w)
        plot_frames({"noisy": noisy.data[-1], "denoised": out.data[-1], "clean": clean.data[-1]},
                    Path(args.figures) / "frames.png")
    from rawdn.metrics import dumps_report

    print(dumps_report(report))
    return EXIT_OK


# gradcheck ----------------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    result = run_gradcheck(args.seed, size=args.size, frames=args.frames, scales=args.scales, widths=args.widths,
                           step=args.step, tolerance=args.tolerance)
    _emit(result.to_json())
    log.info("max relative error %.3e (kink entries re-checked: %d, worst %.3e)",
             result.max_rel_error, result.kinks, result.kink_max_rel_error)
    if not result.passed:
        raise errors.NumericError(f"gradient check failed: max relative error {result.max_rel_error:.3e}")
    return EXIT_OK


# inspect -------------------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    w = load_weights(args.ckpt)
    h, wd = args.size
    doc = {
        "checkpoint": str(args.ckpt),
        "config": w.config(),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in w.named_tensors().items()],
        "params": count_params(w),
        "size": [h, wd],
        "frames": args.frames,
        "macs": count_macs(w, h // 2, wd // 2, args.frames),
    }
    _emit(doc)
    return EXIT_OK


# parser --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap torch worker threads (1 = deterministic)")

    p = _Parser(prog="rawdn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="write synthetic clean/noisy RVDS pairs")
    s.add_argument("--scenes", type=int, default=8)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--size", type=_size, default=(64, 64), help="raw HxW")
    s.add_argument("--motion", type=int, default=2)
    s.add_argument("--noise-a", type=float, default=0.01)
    s.add_argument("--noise-b", type=float, default=4e-4)
    s.add_argument("--iso", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--flat-levels", type=_floats, default=None, help="comma list of flat-field intensities")
    s.add_argument("--flat-frames", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", parents=[common], help="fit shot/read noise from flat stacks")
    c.add_argument("--flats", required=True)
    c.add_argument("--iso", default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("train", parents=[common], help="train a model on a simulate directory")
    t.add_argument("--data", required=True)
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--config", default=None, help="JSON config file (flags override it)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--crop", type=int)
    t.add_argument("--seq-len", type=int)
    t.add_argument("--crops-per-seq", type=int)
    t.add_argument("--scales", type=int)
    t.add_argument("--widths", type=_ints)
    t.add_argument("--seed", type=int)
    t.add_argument("--val-interval", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None)
    t.add_argument("--figures", default=None, help="directory for loss/quality plots")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", parents=[common], help="denoise one RVDS sequence")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--noise-a", type=float)
    d.add_argument("--noise-b", type=float)
    d.add_argument("--noise", default=None, help="calibration JSON instead of --noise-a/--noise-b")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM report on a simulate directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("val", "train", "all"), default="val")
    e.add_argument("--report", required=True)
    e.add_argument("--figures", default=None)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--size", type=int, default=8, help="packed crop size")
    g.add_argument("--frames", type=int, default=3)
    g.add_argument("--scales", type=int, default=2)
    g.add_argument("--widths", type=_ints, default=(4, 6, 4))
    g.add_argument("--step", type=float, default=1e-4)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", parents=[common], help="list checkpoint tensors and costs")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--size", type=_size, default=(128, 128), help="raw HxW for the MAC count")
    i.add_argument("--frames", type=int, default=25)
    i.set_defaults(func=cmd_inspect)
    return p


def _fail(code: int, exc: BaseException) -> int:
    origin = type(exc).__module__
    print(json.dumps({"error": type(exc).__name__, "origin": origin, "exit": code, "message": str(exc)}),
          file=sys.stderr)
    return code


def _setup_logging() -> None:
    level = os.environ.get("RAWDN_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


# file outputs whose parent directories are created on demand
OUTPUT_ARGS = ("out", "log", "report")


def run(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.threads:
            torch.set_num_threads(args.threads)
        for name in OUTPUT_ARGS:
            if getattr(args, name, None):
                Path(getattr(args, name)).parent.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except errors.NumericError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (errors.RawdnError, OSError, ValueError, KeyError) as exc:
        return _fail(EXIT_DATA, exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
