"""Frame-synchronous CTC scorer and per-frame confidence extraction.

The scorer is a small conformer-lite recognizer over a closed label set.
Once trained, its framewise max posterior is the confidence score consumed
by guided masking; scores align 1:1 with the pretraining encoder's frames
because both front ends subsample by the same factor of 4.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import Utterance
from .ctc import ctc_loss, min_feasible_frames
from .errors import ContractViolation, DataError
from .features import FeatureSequence, logmel, normalize_features
from .layers import ConvSubsampler, LayerNorm, Linear, Module, PositionalEmbedding, TransformerBlock
from .optim import Adam
from .rng import derive_rng

logger = logging.getLogger(__name__)


@dataclass
class PosteriorGrid:
    """Row-stochastic (frames x labels+blank) posterior matrix."""
    probs: np.ndarray


@dataclass
class ConfidenceTrack:
    scores: np.ndarray  # per encoded frame, in [0, 1]
    utterance_mean: float

    def __len__(self) -> int:
        return self.scores.shape[0]


class ScorerModel(Module):
    def __init__(self, label_count: int, dim: int = 128, heads: int = 4,
                 blocks: int = 2, max_frames: int = 512, conv_channels: int = 32,
                 ffn_mult: int = 4, use_conv_block: bool = True, seed: int = 0):
        rng = derive_rng(seed, "scorer-init")
        self.label_count = label_count
        self.frontend = ConvSubsampler(80, conv_channels, dim, rng)
        self.pos = PositionalEmbedding(max_frames, dim, rng)
        self.blocks = [TransformerBlock(dim, heads, rng, ffn_mult=ffn_mult,
                                        use_conv=use_conv_block) for _ in range(blocks)]
        self.ln_out = LayerNorm(dim)
        self.head = Linear(dim, label_count + 1, rng)
        self.steps_trained = 0

    @property
    def blank(self) -> int:
        return self.label_count

    def __call__(self, frames: np.ndarray):
        x = self.frontend(frames)
        x = x + self.pos(x.shape[0])
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_out(x))


def score_frames(model: ScorerModel, feats: FeatureSequence, *,
                 normalize: bool = True, exclude_blank: bool = False,
                 allow_untrained: bool = False) -> tuple[ConfidenceTrack, PosteriorGrid]:
    """Per-frame confidences: the max posterior of each encoded frame.

    Blank participates in the max by default; ``exclude_blank`` restricts the
    max to real labels for ablation.
    """
    if model.steps_trained == 0 and not allow_untrained:
        raise ContractViolation("scorer is untrained; pass allow_untrained=True to score anyway")
    frames = normalize_features(feats.frames) if normalize else feats.frames
    logits = model(frames)
    probs = ad.softmax(logits, axis=-1).data
    cols = probs[:, :model.label_count] if exclude_blank else probs
    scores = cols.max(axis=-1).astype(np.float32)
    return ConfidenceTrack(scores=scores, utterance_mean=float(scores.mean())), PosteriorGrid(probs)


# -- training ------------------------------------------------------------------


def train_scorer(corpus: list[Utterance], *, steps: int, batch_size: int = 8,
                 peak_lr: float = 1e-3, warmup_steps: int = 500, seed: int = 0,
                 label_count: int | None = None, model: ScorerModel | None = None,
                 optimizer: Adam | None = None, normalize: bool = True,
                 log_fn=None, **model_kwargs) -> tuple[ScorerModel, list[dict]]:
    """Minimize CTC loss on a labeled corpus; returns (model, per-step log).

    Deterministic given (corpus, config, seed). Pass a ``model``/``optimizer``
    pair restored from a checkpoint to resume; steps continue from the
    optimizer's step counter.
    """
    unlabeled = [u.utt_id for u in corpus if not u.labels]
    if unlabeled:
        raise DataError(f"corpus has unlabeled utterances (e.g. {unlabeled[0]!r}); "
                        "the scorer needs labels")
    if label_count is None:
        label_count = 1 + max(max(u.labels) for u in corpus)
    for u in corpus:
        if max(u.labels) >= label_count:
            raise DataError(f"label id {max(u.labels)} out of range for label_count {label_count}")

    if model is None:
        model = ScorerModel(label_count, seed=seed, **model_kwargs)
    if optimizer is None:
        optimizer = Adam(model.named_parameters(), peak_lr=peak_lr, warmup_steps=warmup_steps)

    feats = [normalize_features(logmel(u).frames) if normalize else logmel(u).frames
             for u in corpus]
    encoded_len = [-(-f.shape[0] // 4) for f in feats]
    params = model.named_parameters()
    log: list[dict] = []
    batches_per_epoch = max(1, -(-len(corpus) // batch_size))

    for _ in range(steps):
        step = optimizer.step_count + 1
        epoch, slot = divmod(step - 1, batches_per_epoch)
        order = derive_rng(seed, "scorer-order", epoch).permutation(len(corpus))
        batch = order[slot * batch_size:(slot + 1) * batch_size]

        optimizer.zero_grad()
        total = None
        used = 0
        for i in batch:
            if encoded_len[i] < min_feasible_frames(corpus[i].labels):
                logger.warning("skipping %s: %d encoded frames cannot align %d labels",
                               corpus[i].utt_id, encoded_len[i], len(corpus[i].labels))
                continue
            loss = ctc_loss(model(feats[i]), corpus[i].labels, blank=model.blank)
            total = loss if total is None else total + loss
            used += 1
        if total is None:
            raise DataError("every utterance in the batch was CTC-infeasible")
        mean_loss = total * (1.0 / used)
        ad.backward(mean_loss, params)
        lr = optimizer.step()
        model.steps_trained = optimizer.step_count
        record = {"step": optimizer.step_count, "ctc_loss": float(mean_loss.data), "lr": lr}
        log.append(record)
        if log_fn is not None:
            log_fn(record)
    return model, log


# -- confidence cache ----------------------------------------------------------


def save_confidence_cache(path, tracks: dict[str, ConfidenceTrack]):
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, track in tracks.items():
            row = {"utt_id": utt_id,
                   "scores": [float(s) for s in track.scores],
                   "s_u": float(track.utterance_mean)}
            f.write(json.dumps(row) + "\n")


def load_confidence_cache(path) -> dict[str, ConfidenceTrack]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"confidence cache not found: {path}")
    tracks: dict[str, ConfidenceTrack] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            tracks[row["utt_id"]] = ConfidenceTrack(
                scores=np.asarray(row["scores"], dtype=np.float32),
                utterance_mean=float(row["s_u"]))
    return tracks
