"""Command-line entry points.

Every subcommand reads a flat ``key = value`` config (``--config``), applies ``--set``
overrides and writes its artifacts below ``--out``. Exit codes: 0 success, 1 a reported
error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import Animal2VecError, DivergenceError
from . import checkpoint as ckpt
from . import config as conf
from . import pipeline
from .corpus import AudioClip, load_clip, resample
from .frontend import band_mass, cumulative_frequency_response, mel_initialize
from .masking import MaskConfig, mask_statistics, sample_mask
from .network import transformer_forward

log = logging.getLogger("animal2vec")


def _config(args) -> dict:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise conf.ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "data", None):
        overrides["data.dir"] = args.data
    if getattr(args, "fold", None) is not None:
        overrides["data.fold"] = str(args.fold)
    cfg = conf.load(args.config, overrides)
    cfg["seed"] = args.seed
    return cfg


def _trailer(cfg: dict, seed: int) -> str:
    return f"# config_hash={conf.config_hash(cfg)} seed={seed}\n"


def cmd_pretrain(args):
    cfg = _config(args)
    res = pipeline.run_pretrain(cfg, args.out, args.seed, resume=args.resume, steps=args.steps)
    last = res["history"][-1] if res["history"] else {}
    print(json.dumps({"checkpoint": str(res["checkpoint"]), **last}, sort_keys=True))


def cmd_finetune(args):
    cfg = _config(args)
    res = pipeline.run_finetune(cfg, args.out, args.seed, pretrained=args.pretrained,
                                labels_fraction=args.labels_fraction,
                                random_init=args.random_init)
    print(json.dumps({"checkpoint": str(res["checkpoint"]), "train_clips": len(res["train_ids"]),
                      **(res["history"][-1] if res["history"] else {})}, sort_keys=True))


def cmd_evaluate(args):
    cfg = _config(args)
    res = pipeline.run_evaluate(cfg, args.out, args.seed, args.checkpoint, manifest=args.manifest)
    print(json.dumps({"micro_ap": res["summary"]["micro_ap"],
                      "macro_ap": res["summary"]["macro_ap"]}, sort_keys=True))


def cmd_mask_stats(args):
    cfg = _config(args)
    mc = MaskConfig(cfg["mask.p"], cfg["mask.M"], cfg["mask.clones"], args.seed)
    plan = sample_mask(args.frames, mc)
    rate = conf.frontend_config(cfg).effective_rate
    coverage, hist, mode_ms = mask_statistics(plan, 1000.0 / rate)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_length_frames", "count"])
    for length, count in hist.items():
        w.writerow([length, count])
    line = f"coverage={coverage:.6f} mode_ms={mode_ms:.6f}"
    union = f"union_coverage={plan.union_coverage:.6f} clones={mc.clones}"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mask_stats.csv").write_text(buf.getvalue() + line + "\n" + union + "\n"
                                        + _trailer(cfg, args.seed), encoding="utf-8")
    print(line)
    print(union)


def cmd_cfr(args):
    cfg = _config(args)
    if args.checkpoint:
        model, _ = pipeline.load_model(args.checkpoint)
        filters = model.frontend.sinc.filters()
        sr = model.frontend_cfg.sample_rate
    else:
        fc = conf.frontend_config(cfg)
        filters, sr = mel_initialize(fc), fc.sample_rate
    freqs, resp = cumulative_frequency_response(filters, sr, args.bins)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["freq_hz", "response"])
    for f, r in zip(freqs, resp):
        w.writerow([f"{f:.6f}", f"{r:.12e}"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cfr.csv").write_text(buf.getvalue() + _trailer(cfg, args.seed), encoding="utf-8")
    peak = float(freqs[int(np.argmax(resp))])
    report = {"peak_hz": peak}
    if args.band:
        report["band_mass"] = band_mass(freqs, resp, args.band[0], args.band[1])
    print(json.dumps(report, sort_keys=True))


def cmd_attention(args):
    cfg = _config(args)
    model, meta = pipeline.load_model(args.checkpoint)
    clip = load_clip(args.audio)
    sr = model.frontend_cfg.sample_rate
    if clip.sample_rate != sr:
        clip = resample(clip, sr)
    wave = clip.samples[: int(round(args.max_s * sr))] if args.max_s else clip.samples
    with torch.no_grad():
        feats = model.frontend(torch.as_tensor(wave, dtype=torch.float32)[None])
        _, maps = transformer_forward(feats, model.encoder, collect=True)
    averaged = maps["averaged"][0].numpy()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save_arrays(out / "attention.a2v",
                     {"maps": maps["maps"][:, 0].numpy(), "averaged": averaged},
                     {"kind": "attention", "source": str(args.audio),
                      "checkpoint_hash": meta.get("config_hash"),
                      "config_hash": conf.config_hash(cfg), "seed": args.seed})
    buf = io.StringIO()
    np.savetxt(buf, averaged, delimiter=",", fmt="%.9e")
    (out / "attention_avg.csv").write_text(buf.getvalue() + _trailer(cfg, args.seed),
                                           encoding="utf-8")
    L = len(averaged)
    diag = float(np.trace(averaged) / L)
    off = float((averaged.sum() - np.trace(averaged)) / max(L * L - L, 1))
    print(json.dumps({"frames": L, "mean_diagonal": diag, "mean_off_diagonal": off},
                     sort_keys=True))


def cmd_synth(args):
    from .synthdata import SynthSpec, generate, labeled_fraction
    spec = SynthSpec(n_clips=args.clips, clip_s=args.clip_s, seed=args.seed)
    clips, events, _ = generate(spec, args.out)
    print(json.dumps({"clips": len(clips), "events": sum(map(len, events.values())),
                      "labeled_fraction": labeled_fraction(clips, events)}, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="a2v", description="Self-distillation pretraining, finetuning and event metrics "
                                "on raw audio.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="key = value config file (defaults if omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        if data:
            p.add_argument("--data", help="corpus directory (overrides data.dir)")
            p.add_argument("--fold", type=int, help="evaluation fold (overrides data.fold)")
        return p

    p = common(sub.add_parser("pretrain", help="self-distillation pretraining"))
    p.add_argument("--resume", help="pretraining checkpoint to continue from")
    p.add_argument("--steps", type=int, help="stop after this step (schedule unchanged)")
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("finetune", help="supervised finetuning"))
    p.add_argument("--pretrained", help="pretraining checkpoint")
    p.add_argument("--random-init", action="store_true", help="skip pretraining (ablation)")
    p.add_argument("--labels-fraction", type=float, default=1.0)
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("evaluate", help="per-event metrics on the evaluation fold"))
    p.add_argument("--checkpoint", required=True, help="finetuned checkpoint")
    p.add_argument("--manifest", help="labels CSV restricting the evaluated clips")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("mask-stats", help="Monte Carlo mask coverage and run lengths"),
               data=False)
    p.add_argument("--frames", type=int, default=1_000_000)
    p.set_defaults(func=cmd_mask_stats)

    p = common(sub.add_parser("cfr", help="cumulative frequency response of the filterbank"),
               data=False)
    p.add_argument("--checkpoint", help="checkpoint; Mel initialization if omitted")
    p.add_argument("--bins", type=int, default=512)
    p.add_argument("--band", type=float, nargs=2, metavar=("LOW_HZ", "HIGH_HZ"))
    p.set_defaults(func=cmd_cfr)

    p = common(sub.add_parser("attention", help="export attention maps for one clip"),
               data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True, help="16-bit mono WAV")
    p.add_argument("--max-s", type=float, default=2.0, help="seconds of audio to use")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clips", type=int, default=200)
    p.add_argument("--clip-s", type=float, default=5.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (Animal2VecError, conf.ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
