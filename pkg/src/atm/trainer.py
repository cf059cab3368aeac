"""Run orchestration: corpus prep, training loops, scoring, analysis, probes.

Every run writes into its own output directory: a JSONL metrics stream whose
first line is a header embedding the fully resolved config, plus checkpoint
containers that embed the same config. Metric lines are flushed as written;
a truncated final line (crash) is tolerated and repaired on resume. Feature
extraction and scoring fan out over threads (capped by ``ATM_NUM_WORKERS``);
training loops are sequential and deterministic.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import autodiff as ad
from .audio import Utterance
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, config_from_dict
from .ctc import ctc_loss, edit_distance, greedy_decode, min_feasible_frames
from .errors import ConfigError, DataError, FormatError
from .features import FeatureSequence, logmel, normalize_features
from .masking import STRATEGIES, MaskStrategy, make_plan, mask_stats
from .msm import BatchItem, MsmModel, msm_step
from .optim import Adam
from .layers import Linear
from .rng import derive_rng
from .scorer import (ConfidenceTrack, ScorerModel, load_confidence_cache,
                     save_confidence_cache, score_frames, train_scorer)
from .synth import load_manifest

logger = logging.getLogger(__name__)


def worker_count() -> int:
    env = os.environ.get("ATM_NUM_WORKERS", "")
    if env.strip():
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def extract_features(corpus: list[Utterance]) -> dict[str, np.ndarray]:
    """Raw log-mel frames per utterance, computed in parallel."""
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        frames = list(pool.map(lambda u: logmel(u).frames, corpus))
    return {u.utt_id: f for u, f in zip(corpus, frames)}


class MetricsWriter:
    """Append-only JSONL metrics stream with a config header line."""

    def __init__(self, path, config: dict, resume: bool = False):
        self.path = Path(path)
        if resume and self.path.exists():
            self._repair_truncated_tail()
            self._fh = open(self.path, "a", encoding="utf-8")
        else:
            self._fh = open(self.path, "w", encoding="utf-8")
            self.write({"type": "header", "config": config})

    def _repair_truncated_tail(self):
        raw = self.path.read_bytes()
        if not raw or raw.endswith(b"\n"):
            return
        keep = raw.rfind(b"\n") + 1
        logger.warning("dropping truncated final metrics line in %s", self.path)
        self.path.write_bytes(raw[:keep])

    def write(self, record: dict):
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> tuple[dict, list[dict]]:
    """Returns (header config, records); ignores a truncated final line."""
    header: dict = {}
    records: list[dict] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                continue
            if row.get("type") == "header":
                header = row.get("config", {})
            else:
                records.append(row)
    return header, records


# -- scorer checkpoints ----------------------------------------------------------


def save_scorer_checkpoint(path, model: ScorerModel, optimizer: Adam | None, cfg: RunConfig):
    arrays = {name: p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    meta = {"kind": "scorer", "steps_trained": model.steps_trained,
            "label_count": model.label_count,
            "opt_step": optimizer.step_count if optimizer else 0}
    save_checkpoint(path, arrays, config=cfg.to_dict(), meta=meta)


def load_scorer_checkpoint(path, with_optimizer: bool = False
                           ) -> tuple[ScorerModel, Adam | None, dict]:
    arrays, config, meta = load_checkpoint(path)
    if meta.get("kind") != "scorer":
        raise FormatError(f"{path} is not a scorer checkpoint (kind={meta.get('kind')!r})")
    cfg = config_from_dict(config) if config else RunConfig()
    model = ScorerModel(meta["label_count"], dim=cfg.scorer_dim, heads=cfg.scorer_heads,
                        blocks=cfg.scorer_blocks, max_frames=cfg.max_frames,
                        conv_channels=cfg.conv_channels, ffn_mult=cfg.ffn_mult,
                        use_conv_block=cfg.conv_subblock, seed=cfg.seed)
    model.load_state(arrays)
    model.steps_trained = int(meta.get("steps_trained", 0))
    optimizer = None
    if with_optimizer:
        optimizer = Adam(model.named_parameters(), peak_lr=cfg.peak_lr,
                         warmup_steps=cfg.warmup_steps, beta1=cfg.adam_beta1,
                         beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        optimizer.load_state_arrays(arrays, int(meta.get("opt_step", 0)))
    return model, optimizer, meta


def save_msm_checkpoint(path, model: MsmModel, optimizer: Adam | None, cfg: RunConfig,
                        step: int):
    arrays = {name: p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    meta = {"kind": "msm", "variant": model.variant, "step": step,
            "opt_step": optimizer.step_count if optimizer else 0}
    save_checkpoint(path, arrays, config=cfg.to_dict(), meta=meta)


def load_msm_checkpoint(path, with_optimizer: bool = False
                        ) -> tuple[MsmModel, Adam | None, RunConfig, dict]:
    arrays, config, meta = load_checkpoint(path)
    if meta.get("kind") != "msm":
        raise FormatError(f"{path} is not a pretraining checkpoint (kind={meta.get('kind')!r})")
    cfg = config_from_dict(config) if config else RunConfig()
    model = build_msm_model(cfg)
    model.load_state(arrays)
    optimizer = None
    if with_optimizer:
        optimizer = Adam(model.named_parameters(), peak_lr=cfg.peak_lr,
                         warmup_steps=cfg.warmup_steps, beta1=cfg.adam_beta1,
                         beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        optimizer.load_state_arrays(arrays, int(meta.get("opt_step", 0)))
    return model, optimizer, cfg, meta


def build_msm_model(cfg: RunConfig) -> MsmModel:
    return MsmModel(variant=cfg.variant, dim=cfg.dim, codebook_size=cfg.codebook_size,
                    codebook_dim=cfg.codebook_dim, heads=cfg.heads,
                    context_blocks=cfg.context_blocks,
                    second_context_blocks=cfg.second_context_blocks,
                    conv_channels=cfg.conv_channels, ffn_mult=cfg.ffn_mult,
                    max_frames=cfg.max_frames, use_conv_block=cfg.conv_subblock,
                    seed=cfg.seed)


# -- commands ----------------------------------------------------------------------


def run_train_scorer(cfg: RunConfig, out_dir, resume_from: str = "") -> Path:
    cfg.validate()
    cfg.require_paths("corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_manifest(cfg.corpus)
    if any(not u.labels for u in corpus):
        raise DataError("scorer training needs a fully labeled corpus")

    if resume_from:
        model, optimizer, _ = load_scorer_checkpoint(resume_from, with_optimizer=True)
    else:
        model = ScorerModel(cfg.label_count, dim=cfg.scorer_dim, heads=cfg.scorer_heads,
                            blocks=cfg.scorer_blocks, max_frames=cfg.max_frames,
                            conv_channels=cfg.conv_channels, ffn_mult=cfg.ffn_mult,
                            use_conv_block=cfg.conv_subblock, seed=cfg.seed)
        optimizer = Adam(model.named_parameters(), peak_lr=cfg.peak_lr,
                         warmup_steps=cfg.warmup_steps, beta1=cfg.adam_beta1,
                         beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    ckpt_path = out_dir / "scorer.ckpt"
    with MetricsWriter(out_dir / "metrics.jsonl", cfg.to_dict(),
                       resume=bool(resume_from)) as writer:
        remaining = max(0, cfg.steps - optimizer.step_count)
        model, _ = train_scorer(
            corpus, steps=remaining, seed=cfg.seed, label_count=cfg.label_count,
            batch_size=cfg.batch_size, model=model, optimizer=optimizer,
            normalize=cfg.normalize_features, log_fn=writer.write)
    save_scorer_checkpoint(ckpt_path, model, optimizer, cfg)
    return ckpt_path


def _score_with_scorer(cfg: RunConfig, corpus, features) -> dict[str, ConfidenceTrack]:
    model, _, _ = load_scorer_checkpoint(cfg.scorer_ckpt)

    def one(u: Utterance) -> ConfidenceTrack:
        track, _ = score_frames(model, FeatureSequence(frames=features[u.utt_id]),
                                normalize=cfg.normalize_features,
                                exclude_blank=cfg.confidence_excludes_blank,
                                allow_untrained=True)
        return track

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(one, corpus))
    return {u.utt_id: t for u, t in zip(corpus, results)}


def compute_tracks(cfg: RunConfig, corpus: list[Utterance],
                   features: dict[str, np.ndarray]) -> dict[str, ConfidenceTrack]:
    """Confidence per utterance, from the cache file or a live scorer."""
    if cfg.confidence_cache:
        cfg.require_paths("confidence_cache")
        tracks = load_confidence_cache(cfg.confidence_cache)
        missing = [u.utt_id for u in corpus if u.utt_id not in tracks]
        if missing:
            raise DataError(f"confidence cache missing utterances (e.g. {missing[0]!r})")
        return {u.utt_id: tracks[u.utt_id] for u in corpus}
    cfg.require_paths("scorer_ckpt")
    return _score_with_scorer(cfg, corpus, features)


def run_score(cfg: RunConfig, out_dir) -> Path:
    cfg.validate()
    cfg.require_paths("corpus", "scorer_ckpt")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_manifest(cfg.corpus)
    features = extract_features(corpus)
    tracks = _score_with_scorer(cfg, corpus, features)
    cache_path = out_dir / "confidence.jsonl"
    save_confidence_cache(cache_path, tracks)
    return cache_path


def tau_at(cfg: RunConfig, step: int) -> float:
    if cfg.steps <= 1:
        return cfg.tau_start
    frac = (step - 1) / (cfg.steps - 1)
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac


def run_pretrain(cfg: RunConfig, out_dir, resume_from: str = "") -> Path:
    cfg.validate()
    cfg.require_paths("corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_manifest(cfg.corpus)
    if not corpus:
        raise DataError("pretraining corpus is empty")
    features = extract_features(corpus)

    tracks: dict[str, ConfidenceTrack] = {}
    if cfg.strategy != "random" or cfg.scale_mode != "none":
        if not (cfg.confidence_cache or cfg.scorer_ckpt):
            raise ConfigError("strategy/scale mode needs confidence_cache or scorer_ckpt")
        tracks = compute_tracks(cfg, corpus, features)

    if resume_from:
        model, optimizer, _, meta = load_msm_checkpoint(resume_from, with_optimizer=True)
        done = int(meta.get("step", 0))
    else:
        model = build_msm_model(cfg)
        optimizer = Adam(model.named_parameters(), peak_lr=cfg.peak_lr,
                         warmup_steps=cfg.warmup_steps, beta1=cfg.adam_beta1,
                         beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        done = 0

    params = model.named_parameters()
    strategy = MaskStrategy(kind=cfg.strategy, mask_fraction=cfg.mask_fraction,
                            context=cfg.context)
    batches_per_epoch = max(1, -(-len(corpus) // cfg.batch_size))
    ckpt_path = out_dir / "msm.ckpt"

    with MetricsWriter(out_dir / "metrics.jsonl", cfg.to_dict(),
                       resume=bool(resume_from)) as writer:
        for step in range(done + 1, cfg.steps + 1):
            t0 = time.monotonic()
            epoch, slot = divmod(step - 1, batches_per_epoch)
            order = derive_rng(cfg.seed, "pretrain-order", epoch).permutation(len(corpus))
            chosen = order[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
            batch = [BatchItem(utt_id=corpus[i].utt_id, frames=features[corpus[i].utt_id],
                               track=tracks.get(corpus[i].utt_id)) for i in chosen]
            optimizer.zero_grad()
            loss, breakdown = msm_step(
                model, batch, strategy, scale_mode=cfg.scale_mode, tau=tau_at(cfg, step),
                seed=cfg.seed, step=step, n_distractors=cfg.n_distractors, kappa=cfg.kappa,
                div_weight=cfg.div_weight, frame_participation=cfg.frame_participation,
                gumbel_noise=cfg.gumbel_noise, diversity_masked_only=cfg.diversity_masked_only,
                normalize=cfg.normalize_features, max_crop_frames=cfg.max_crop_frames)
            ad.backward(loss, params)
            optimizer.step()
            if step % cfg.log_every == 0 or step == cfg.steps:
                record = {"step": step, "l_ctr": breakdown.l_ctr, "l_div": breakdown.l_div,
                          "l_ce": breakdown.l_ce, "l_total": breakdown.l_total,
                          "l_scaled": breakdown.l_scaled,
                          "codebook_usage_pct": breakdown.codebook_usage_pct,
                          "msm_accuracy": breakdown.msm_accuracy,
                          "realized_coverage": breakdown.realized_coverage,
                          "mean_masked_confidence": breakdown.mean_masked_confidence}
                if cfg.log_timing:
                    record["wall_ms"] = (time.monotonic() - t0) * 1000.0
                writer.write(record)
            if cfg.ckpt_every and step % cfg.ckpt_every == 0:
                save_msm_checkpoint(out_dir / f"msm_step{step:06d}.ckpt", model, optimizer,
                                    cfg, step)
    save_msm_checkpoint(ckpt_path, model, optimizer, cfg, cfg.steps)
    return ckpt_path


def run_sweep(cfg: RunConfig, out_dir) -> Path:
    cfg.validate()
    cfg.require_paths("corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    fractions = []
    for frac in cfg.sweep_fractions:
        if frac in fractions:
            logger.warning("duplicate sweep fraction %s dropped", frac)
            continue
        fractions.append(frac)

    rows = []
    for frac in fractions:
        for strat in cfg.sweep_strategies:
            sub = apply_overrides(cfg, {"mask_fraction": frac, "strategy": strat})
            sub_dir = out_dir / f"sweep_p{int(round(frac * 100)):03d}_{strat}"
            run_pretrain(sub, sub_dir)
            _, records = read_metrics(sub_dir / "metrics.jsonl")
            tail = records[-min(20, len(records)):]
            acc = [r["msm_accuracy"] for r in tail if r.get("msm_accuracy") is not None]
            rows.append({
                "fraction": frac,
                "strategy": strat,
                "final_l_total": float(np.mean([r["l_total"] for r in tail])),
                "msm_accuracy": float(np.mean(acc)) if acc else "",
                "realized_coverage": float(np.mean([r["realized_coverage"] for r in records])),
            })

    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["fraction", "strategy", "final_l_total",
                                               "msm_accuracy", "realized_coverage"])
        writer.writeheader()
        writer.writerows(rows)
    return csv_path


def run_analyze_mask(cfg: RunConfig, out_dir) -> Path:
    """Per-utterance mask statistics for every strategy, without training."""
    cfg.validate()
    cfg.require_paths("corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_manifest(cfg.corpus)
    features = extract_features(corpus)
    if not (cfg.confidence_cache or cfg.scorer_ckpt):
        raise ConfigError("analyze-mask needs confidence_cache or scorer_ckpt")
    tracks = compute_tracks(cfg, corpus, features)

    samples: dict[str, list[float]] = {s: [] for s in STRATEGIES}
    dump_path = out_dir / "mask_plans.jsonl"
    with open(dump_path, "w", encoding="utf-8") as f:
        for u in corpus:
            track = tracks[u.utt_id]
            length = len(track)
            for strat_name in STRATEGIES:
                strategy = MaskStrategy(kind=strat_name, mask_fraction=cfg.mask_fraction,
                                        context=cfg.context)
                for plan_i in range(cfg.plans_per_utt):
                    rng = derive_rng(cfg.seed, "analyze", u.utt_id, strat_name, plan_i)
                    plan = make_plan(track, length, strategy, rng)
                    stat = mask_stats(plan, track)
                    samples[strat_name].append(stat["mean_masked_confidence"])
                    if plan_i == 0:
                        f.write(json.dumps({"utt_id": u.utt_id, "strategy": strat_name,
                                            "starts": plan.starts, **stat}) + "\n")

    def ordering(a: str, b: str):
        t_stat, p_val = sps.ttest_ind(samples[a], samples[b], equal_var=False,
                                      alternative="greater")
        return {"comparison": f"{a}>{b}", "t": float(t_stat), "p": float(p_val)}

    summary = {
        "plans_per_strategy": {k: len(v) for k, v in samples.items()},
        "mean_masked_confidence": {k: float(np.mean(v)) for k, v in samples.items()},
        "ordering_tests": [ordering("high", "random"), ordering("random", "low"),
                           ordering("high", "low")],
    }
    (out_dir / "mask_summary.json").write_text(json.dumps(summary, indent=2) + "\n",
                                               encoding="utf-8")
    return dump_path


def frozen_representations(model: MsmModel, features: dict[str, np.ndarray],
                           corpus: list[Utterance], normalize: bool) -> dict[str, np.ndarray]:
    """Final context-network outputs over unmasked inputs, as constants."""
    def one(u: Utterance) -> np.ndarray:
        frames = normalize_features(features[u.utt_id]) if normalize else features[u.utt_id]
        encoded = model.encode(frames)
        context_out, second_out = model.run_context(encoded)
        final = second_out if second_out is not None else context_out
        return final.data.copy()

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        reps = list(pool.map(one, corpus))
    return {u.utt_id: r for u, r in zip(corpus, reps)}


def run_probe(cfg: RunConfig, out_dir) -> Path:
    """Linear CTC probe on frozen pretrained representations; reports token
    error rate per domain."""
    cfg.validate()
    cfg.require_paths("probe_corpus", "msm_ckpt")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_manifest(cfg.probe_corpus)
    if any(not u.labels for u in corpus):
        raise DataError("probe corpus must be labeled")
    features = extract_features(corpus)
    model, _, _, _ = load_msm_checkpoint(cfg.msm_ckpt)
    reps = frozen_representations(model, features, corpus, cfg.normalize_features)

    head = Linear(model.dim, cfg.label_count + 1, derive_rng(cfg.seed, "probe-init"))
    optimizer = Adam(head.named_parameters(), peak_lr=cfg.peak_lr,
                     warmup_steps=cfg.warmup_steps, beta1=cfg.adam_beta1,
                     beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    params = head.named_parameters()
    blank = cfg.label_count
    batches_per_epoch = max(1, -(-len(corpus) // cfg.batch_size))

    for step in range(1, cfg.probe_steps + 1):
        epoch, slot = divmod(step - 1, batches_per_epoch)
        order = derive_rng(cfg.seed, "probe-order", epoch).permutation(len(corpus))
        chosen = order[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
        optimizer.zero_grad()
        total = None
        used = 0
        for i in chosen:
            u = corpus[i]
            rep = reps[u.utt_id]
            if rep.shape[0] < min_feasible_frames(u.labels):
                logger.warning("probe skip %s: too few frames for target", u.utt_id)
                continue
            loss = ctc_loss(head(ad.Tensor(rep)), u.labels, blank=blank)
            total = loss if total is None else total + loss
            used += 1
        if total is None:
            continue
        ad.backward(total * (1.0 / used), params)
        optimizer.step()

    per_domain: dict[str, dict[str, int]] = {}
    per_utt = []
    for u in corpus:
        logits = head(ad.Tensor(reps[u.utt_id])).data
        hyp = greedy_decode(logits, blank=blank)
        dist = edit_distance(u.labels, hyp)
        bucket = per_domain.setdefault(u.domain, {"edits": 0, "ref_len": 0})
        bucket["edits"] += dist
        bucket["ref_len"] += len(u.labels)
        per_utt.append({"utt_id": u.utt_id, "domain": u.domain, "edits": dist,
                        "ref_len": len(u.labels)})

    report = {
        "probe_steps": cfg.probe_steps,
        "ter": {d: v["edits"] / max(1, v["ref_len"]) for d, v in sorted(per_domain.items())},
        "per_utt": per_utt,
    }
    report_path = out_dir / "probe_report.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report_path
