"""End-to-end runs: corpus loading, pretraining, finetuning and evaluation with artifacts."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import DivergenceError, MetricError, StateError
from . import checkpoint as ckpt
from . import config as conf
from .corpus import (AudioClip, ClassTable, LabelEvent, SplitPlan, fewshot_subsample,
                     frame_targets, load_clip, load_manifest, resample, stratified_kfold)
from .evaluate import (aggregate, metrics_csv, pr_points_csv, score_clips, summary)
from .finetune import Finetuner, LabeledClip, predict_likelihoods
from .frontend import frame_center_offset_s
from .network import Animal2Vec
from .pretrain import Pretrainer, derive_seed

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    clips: dict  # id -> AudioClip
    events: dict  # id -> list[LabelEvent]
    table: ClassTable


def check_corpus_dir(data_dir) -> Path:
    d = Path(data_dir)
    for rel in ("audio", "labels.csv", "classes.txt"):
        if not (d / rel).exists():
            raise FileNotFoundError(f"corpus at {d} lacks {rel}")
    return d


def load_corpus(data_dir, sample_rate: int) -> Corpus:
    d = check_corpus_dir(data_dir)
    table = ClassTable.load(d / "classes.txt")
    events = load_manifest(d / "labels.csv", table)
    clips = {}
    for path in sorted((d / "audio").glob("*.wav")):
        clip = load_clip(path)
        if clip.sample_rate != sample_rate:
            clip = resample(clip, sample_rate)
        clips[clip.id] = clip
    unknown = set(events) - set(clips)
    if unknown:
        raise StateError(f"labels reference missing clips: {sorted(unknown)[:5]}")
    return Corpus(clips, {cid: events.get(cid, []) for cid in clips}, table)


def split(corpus: Corpus, cfg: dict, seed: int) -> SplitPlan:
    items = [(cid, corpus.events[cid]) for cid in sorted(corpus.clips)]
    return stratified_kfold(items, cfg["data.folds"], seed)


def build_model(cfg: dict, n_classes: int, seed: int) -> Animal2Vec:
    torch.manual_seed(derive_seed(seed, "init"))
    return Animal2Vec(conf.frontend_config(cfg), conf.network_config(cfg, n_classes))


def _provenance(cfg: dict, seed: int) -> dict:
    return {"config_hash": conf.config_hash(cfg), "seed": seed}


def _set_determinism():
    workers = int(os.environ.get("A2V_WORKERS", "0"))
    if workers == 0:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


class JsonLog:
    def __init__(self, path, provenance: dict, append: bool = False):
        self.fh = open(path, "a" if append else "w", encoding="utf-8")
        self.provenance = provenance

    def write(self, record: dict):
        self.fh.write(json.dumps({**record, **self.provenance}, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _truncate_log(path: Path, step: int):
    """Drop log lines past ``step`` so a resumed run appends cleanly."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text(encoding="utf-8").splitlines()
            if ln.strip() and json.loads(ln).get("step", 0) <= step]
    path.write_text("".join(ln + "\n" for ln in keep), encoding="utf-8")


# ---------------------------------------------------------------------------
# pretraining


def save_pretrain(path, trainer: Pretrainer, cfg: dict, seed: int):
    arrays = ckpt.module_arrays("model", trainer.model)
    arrays.update(ckpt.module_arrays("teacher", trainer.teacher))
    opt_arrays, groups = ckpt.optimizer_arrays("optim", trainer.optimizer)
    arrays.update(opt_arrays)
    arrays["rng.torch"] = torch.get_rng_state()
    meta = {"kind": "pretrain", "config": cfg, "step": trainer.step, "optim_groups": groups,
            "n_classes": 0, **_provenance(cfg, seed)}
    ckpt.save_arrays(path, arrays, meta)


def restore_pretrain(path, trainer: Pretrainer):
    arrays, meta = ckpt.load_arrays(path)
    if meta.get("kind") != "pretrain":
        raise StateError(f"{path} is not a pretraining checkpoint")
    ckpt.load_module(trainer.model, "model", arrays)
    ckpt.load_module(trainer.teacher, "teacher", arrays)
    ckpt.load_optimizer(trainer.optimizer, "optim", arrays, meta["optim_groups"])
    torch.set_rng_state(torch.as_tensor(arrays["rng.torch"]))
    trainer.step = meta["step"]
    return meta


def run_pretrain(cfg: dict, out_dir, seed: int, resume=None, corpus: Corpus | None = None,
                 steps: int | None = None) -> dict:
    """Pretrain on the training folds. Returns a dict with paths and the final stats.

    ``steps`` stops early (for resume tests) without changing the schedule.
    """
    _set_determinism()
    if corpus is None:
        check_corpus_dir(cfg["data.dir"])
        corpus = load_corpus(cfg["data.dir"], cfg["data.sample_rate"])
    plan = split(corpus, cfg, seed)
    train_ids = sorted(plan.train_ids(cfg["data.fold"]))
    waves = [corpus.clips[cid].samples for cid in train_ids]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, 0, seed)
    trainer = Pretrainer(model, conf.pretrain_config(cfg, seed))
    log_path = out / "pretrain_log.jsonl"
    if resume:
        restore_pretrain(resume, trainer)
        _truncate_log(log_path, trainer.step)
    jlog = JsonLog(log_path, _provenance(cfg, seed), append=bool(resume))
    total = cfg["pretrain.total_steps"] if steps is None else min(steps, cfg["pretrain.total_steps"])
    every, keep = cfg["checkpoint.every"], cfg["checkpoint.keep"]
    saved: list[Path] = sorted(out.glob("pretrain_step*.a2v"))
    history = []
    try:
        while trainer.step < total:
            stats = trainer.distill_step(trainer.make_batch(waves))
            history.append(stats)
            jlog.write(stats)
            if every and trainer.step % every == 0:
                path = out / f"pretrain_step{trainer.step:07d}.a2v"
                save_pretrain(path, trainer, cfg, seed)
                saved.append(path)
                while keep and len(saved) > keep:
                    saved.pop(0).unlink(missing_ok=True)
    finally:
        jlog.close()
    final = out / "pretrained.a2v"
    save_pretrain(final, trainer, cfg, seed)
    return {"checkpoint": final, "log": log_path, "history": history, "trainer": trainer}


# ---------------------------------------------------------------------------
# finetuning


def labeled_clips(corpus: Corpus, ids, model: Animal2Vec) -> list[LabeledClip]:
    fc = model.frontend_cfg
    offset = frame_center_offset_s(fc)
    out = []
    for cid in ids:
        clip = corpus.clips[cid]
        n = model.frontend.output_length(len(clip.samples))
        y = frame_targets(corpus.events[cid], clip.duration_s, fc.effective_rate, corpus.table,
                          n_frames=n, offset_s=offset).frames
        out.append(LabeledClip(cid, clip.samples, y))
    return out


def save_finetuned(path, finetuner: Finetuner, cfg: dict, seed: int, table: ClassTable,
                   extra: dict | None = None):
    model = finetuner.model
    arrays = ckpt.module_arrays("model.frontend", model.frontend)
    arrays.update(ckpt.module_arrays("model.encoder", model.encoder))
    arrays.update(ckpt.module_arrays("model.head", model.head))
    opt_arrays, groups = ckpt.optimizer_arrays("optim", finetuner.optimizer)
    arrays.update(opt_arrays)
    arrays["rng.torch"] = torch.get_rng_state()
    meta = {"kind": "finetune", "config": cfg, "step": finetuner.step, "optim_groups": groups,
            "n_classes": len(table), "classes": table.dumps(), **_provenance(cfg, seed),
            **(extra or {})}
    ckpt.save_arrays(path, arrays, meta)


def load_pretrained_into(model: Animal2Vec, path):
    arrays, meta = ckpt.load_arrays(path)
    if meta.get("kind") != "pretrain":
        raise StateError(f"{path} is not a pretraining checkpoint")
    ckpt.load_module(model.frontend, "model.frontend", arrays)
    ckpt.load_module(model.encoder, "model.encoder", arrays)
    return meta


def load_finetuned(path) -> tuple[Animal2Vec, ClassTable, dict]:
    arrays, meta = ckpt.load_arrays(path)
    if meta.get("kind") != "finetune":
        raise StateError(f"{path} is not a finetuned checkpoint")
    cfg = meta["config"]
    table = ClassTable.parse(meta["classes"])
    model = Animal2Vec(conf.frontend_config(cfg), conf.network_config(cfg, len(table)))
    ckpt.load_module(model.frontend, "model.frontend", arrays)
    ckpt.load_module(model.encoder, "model.encoder", arrays)
    ckpt.load_module(model.head, "model.head", arrays)
    model.eval()
    return model, table, meta


def load_model(path) -> tuple[Animal2Vec, dict]:
    """Frontend and encoder (plus head when present) from either checkpoint kind."""
    arrays, meta = ckpt.load_arrays(path)
    if meta.get("kind") not in ("pretrain", "finetune"):
        raise StateError(f"{path}: unknown checkpoint kind {meta.get('kind')!r}")
    cfg = meta["config"]
    model = Animal2Vec(conf.frontend_config(cfg), conf.network_config(cfg, meta["n_classes"]))
    ckpt.load_module(model.frontend, "model.frontend", arrays)
    ckpt.load_module(model.encoder, "model.encoder", arrays)
    if model.head is not None:
        ckpt.load_module(model.head, "model.head", arrays)
    model.eval()
    return model, meta


def run_finetune(cfg: dict, out_dir, seed: int, pretrained=None, labels_fraction: float = 1.0,
                 corpus: Corpus | None = None, random_init: bool = False) -> dict:
    """Finetune on (a stratified fraction of) the training folds.

    ``pretrained`` is required unless ``random_init`` asks for the no-pretraining ablation.
    """
    _set_determinism()
    if not random_init:
        if pretrained is None or not Path(pretrained).exists():
            raise StateError(f"pretrained checkpoint {pretrained} not found")
    if corpus is None:
        check_corpus_dir(cfg["data.dir"])
        corpus = load_corpus(cfg["data.dir"], cfg["data.sample_rate"])
    plan = split(corpus, cfg, seed)
    train_ids = sorted(plan.train_ids(cfg["data.fold"]))
    subset = fewshot_subsample(plan, train_ids, labels_fraction, seed,
                               labels={cid: corpus.events[cid] for cid in train_ids})

    model = build_model(cfg, len(corpus.table), seed)
    if not random_init:
        load_pretrained_into(model, pretrained)
    finetuner = Finetuner(model, conf.finetune_config(cfg, seed))
    clips = labeled_clips(corpus, subset, model)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "finetune_log.jsonl"
    jlog = JsonLog(log_path, _provenance(cfg, seed))
    history = []
    try:
        while finetuner.step < cfg["finetune.total_steps"]:
            stats = finetuner.finetune_step(finetuner.make_batch(clips))
            history.append(stats)
            jlog.write(stats)
    finally:
        jlog.close()
    final = out / "finetuned.a2v"
    save_finetuned(final, finetuner, cfg, seed, corpus.table,
                   {"labels_fraction": labels_fraction, "train_ids": subset,
                    "random_init": random_init})
    return {"checkpoint": final, "log": log_path, "history": history, "train_ids": subset,
            "model": model}


# ---------------------------------------------------------------------------
# evaluation


def predict_corpus(model: Animal2Vec, corpus: Corpus, ids) -> dict:
    return {cid: predict_likelihoods(model, corpus.clips[cid].samples) for cid in ids}


def score(model: Animal2Vec, corpus: Corpus, ids, cfg: dict):
    lik = predict_corpus(model, corpus, ids)
    fc = model.frontend_cfg
    per_class = score_clips(lik, {cid: corpus.events[cid] for cid in ids}, corpus.table,
                            fc.effective_rate, threshold=cfg["eval.threshold"],
                            pool_width_s=cfg["eval.pool_s"],
                            time_offset_s=frame_center_offset_s(fc), iou_min=cfg["eval.iou"])
    micro, macro, curves = aggregate(per_class, corpus.table, cfg["eval.levels"])
    return micro, macro, curves, per_class, lik


def run_evaluate(cfg: dict, out_dir, seed: int, checkpoint, manifest=None,
                 corpus: Corpus | None = None) -> dict:
    """Score a finetuned checkpoint on the evaluation fold (or the clips of ``manifest``)."""
    _set_determinism()
    model, table, meta = load_finetuned(checkpoint)
    if corpus is None:
        check_corpus_dir(cfg["data.dir"])
        corpus = load_corpus(cfg["data.dir"], cfg["data.sample_rate"])
    if manifest is not None:
        ids = sorted(cid for cid in load_manifest(manifest, corpus.table) if cid in corpus.clips)
    else:
        ids = sorted(split(corpus, cfg, seed).fold(cfg["data.fold"]))
    if not ids or not any(corpus.events[cid] for cid in ids):
        raise MetricError("evaluation split holds no labeled events")
    micro, macro, curves, per_class, _ = score(model, corpus, ids, cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg, seed)
    trailer = f"# config_hash={prov['config_hash']} seed={seed}\n"
    (out / "metrics.csv").write_text(metrics_csv(curves, per_class, table) + trailer,
                                     encoding="utf-8")
    (out / "pr_points.csv").write_text(pr_points_csv(curves, table, micro) + trailer,
                                       encoding="utf-8")
    summ = summary(micro, macro, curves, per_class, table)
    (out / "summary.json").write_text(json.dumps(summ, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    (out / "provenance.json").write_text(json.dumps({**prov, "checkpoint_hash":
                                                     meta.get("config_hash"), "eval_ids": ids},
                                                    indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return {"summary": summ, "micro": micro, "macro": macro, "curves": curves,
            "per_class": per_class}
