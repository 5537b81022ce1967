"""Command-line front end: ``python -m vindit <verb> ...``.

Every failure on a contract violation prints one line to stderr,

    error: <ExceptionType>: <message>

and exits with status 2.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import metrics, profiler, runs
from .numcore import NumcoreError
from .patchio import VideoTensor, export_png_frames, read_video, write_video

EXIT_ERROR = 2


class CLIError(ValueError):
    pass


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.seed is not None:
        cfg = cfgmod.loads(cfgmod.dumps(cfg) + f"run.seed = {args.seed}\n")
    return cfg


def _restore(args):
    if not args.checkpoint:
        raise CLIError("--checkpoint is required for this command")
    expect = cfgmod.load(args.config) if args.config else None
    ck = ckpt.load(args.checkpoint, expect)
    ens, _ = ckpt.restore(ck)
    return ck.config, ens


def cmd_train(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg.run.out)
    cfgmod.save(out / "config.txt", cfg)
    log = (out / "loss.csv").open("w", newline="")
    writer = csv.writer(log, lineterminator="\n")
    writer.writerow(["step", "loss"])
    every = cfg.optim.checkpoint_every

    def on_step(step, loss, ens, opt):
        writer.writerow([step, repr(loss)])
        if step % every == 0:
            ckpt.save(out / f"checkpoint_{step:06d}.bin", cfg, step, ens, opt)

    try:
        res = runs.train(cfg, on_step=on_step)
    finally:
        log.close()
    ckpt.save(out / "checkpoint.bin", cfg, res.step, res.ens, res.opt)
    print(f"trained {res.step} steps in {res.seconds:.1f}s -> {out / 'checkpoint.bin'}")


def cmd_sample(args) -> None:
    cfg, ens = _restore(args)
    mode = args.mode or "vin"
    seed = 0 if args.seed is None else args.seed
    video = runs.sample_video(cfg, ens, mode, args.frames, seed)
    out = _out_dir(args, "samples")
    path = out / f"{mode}_seed{seed}_f{video.F}.vinv"
    write_video(path, video)
    if args.png:
        export_png_frames(video, out / path.stem)
    print(path)


def _report_files(out: Path, stem: str, report: metrics.MetricReport) -> None:
    metrics.write_report(out / f"{stem}.metrics.txt", report)
    write_video(out / f"{stem}.series.vinv", metrics.series_video(report))


def cmd_eval(args) -> None:
    if not args.videos:
        raise CLIError("eval needs at least one video file")
    out = _out_dir(args, "eval")
    reports = []
    for name in args.videos:
        report = metrics.evaluate(read_video(name))
        _report_files(out, Path(name).stem, report)
        reports.append(report)
        print(f"{name}: MAWE={metrics._fmt(report.mawe)} W={report.warp_error:.6g} OFS={report.flow_strength:.6g}")
    agg = metrics.aggregate(reports)
    lines = [f"{k} = {v!r}" for k, v in vars(agg).items()]
    (out / "aggregate.txt").write_text("\n".join(lines) + "\n")
    print(f"aggregate over {agg.count} videos: MAWE={agg.mawe:.6g} ({agg.mawe_undefined} undefined excluded)")


def cmd_ablate(args) -> None:
    cfg, ens = _restore(args)
    mode = args.mode or "no-global-tokens"
    runs.ablation_settings(cfg, mode)  # fail fast on unknown modes
    seed = 0 if args.seed is None else args.seed
    rows = [runs.evaluate_mode(cfg, ens, m, frames=args.frames, seed=seed) for m in dict.fromkeys(("full", mode))]
    table = runs.ablation_table(rows)
    out = _out_dir(args, "ablate")
    (out / f"ablate_{mode}.txt").write_text(table)
    print(table, end="")


def cmd_profile(args) -> None:
    out = _out_dir(args, "profile")
    proxy = profiler.LARGE_PROXY
    frames = args.frames or 256
    (out / f"cost_{frames}f.txt").write_text(profiler.cost_report(proxy.shape(frames)))
    rows = profiler.sweep(proxy)
    (out / "sweep.csv").write_text(profiler.sweep_csv(rows))
    print(profiler.sweep_csv(rows), end="")


def cmd_inspect_attn(args) -> None:
    from . import numcore as nc
    from .patchio import voxel_rows
    from .vin import export_attention

    cfg, ens = _restore(args)
    if not args.videos:
        raise CLIError("inspect-attn needs a video file")
    video = read_video(args.videos[0])
    rows = voxel_rows(video.values, ens.patch)
    index_map = ens.index_map(video.F)
    X = ens.tokenize(rows, index_map)
    key_rows = ens.keyframe_rows(index_map)
    keys = nc.take_rows(X, key_rows)
    att = export_attention(keys, ens.params["vin.z_init"], ens.params, ens.vin)
    gh, gw, _ = ens.patch.grid(ens.H, ens.W, video.F)
    n_key_frames = len(key_rows) // (gh * gw)
    # Heads x globals x keys -> per keyframe, per head: attention mass averaged over global tokens.
    w = att.weights.mean(axis=1).reshape(ens.vin.heads, n_key_frames, gh, gw)
    out = _out_dir(args, "attention")
    write_video(out / "attention_heads.vinv", VideoTensor(np.transpose(w, (2, 3, 1, 0)), fps=1.0))
    raw = att.weights.transpose(1, 2, 0)[None]  # 1 x globals x keys x heads
    write_video(out / "attention_raw.vinv", VideoTensor(raw, fps=1.0))
    print(f"{n_key_frames} keyframes, {ens.vin.heads} heads -> {out}")


VERBS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "profile": cmd_profile,
    "inspect-attn": cmd_inspect_attn,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vindit", description="VIN + DiT chunk-parallel video diffusion at toy scale")
    ap.add_argument("verb", choices=sorted(VERBS))
    ap.add_argument("videos", nargs="*", help="video files (eval, inspect-attn)")
    ap.add_argument("--config")
    ap.add_argument("--checkpoint")
    ap.add_argument("--mode", help=f"sampling mode ({', '.join(runs.SAMPLE_MODES)}) or ablation "
                                   f"({', '.join(runs.ABLATIONS)})")
    ap.add_argument("--frames", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    ap.add_argument("--png", action="store_true", help="also export PNG frames when sampling")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        VERBS[args.verb](args)
    except (ValueError, LookupError, OSError, RuntimeError, FloatingPointError, NumcoreError) as e:
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
