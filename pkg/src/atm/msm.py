"""Masked-prediction pretraining core.

One model holds the convolutional feature encoder (x4 subsampling), a learned
mask embedding, a Gumbel-softmax quantizer over a single codebook, a context
network of conformer-lite blocks, and (for the ``w2v-bert`` variant) a second
context stack plus a cross-entropy head. The per-step losses:

* contrastive: cosine InfoNCE between projected context outputs and the
  quantized vectors at masked positions, distractors drawn from the same
  utterance's other masked positions;
* diversity: codebook-entropy penalty ``(L - exp(H(p_bar))) / L`` over the
  mean soft code distribution, weighted 0.1;
* cross-entropy (``w2v-bert`` only): masked-position code prediction against
  the quantizer's argmax targets, which also yields the masked-prediction
  accuracy diagnostic.

Loss scaling modes: ``none``, ``utterance`` (multiply an utterance's total by
its mean confidence), and ``frame`` (for a Bernoulli-selected subset of
utterances, weight each masked frame's contrastive/CE term by that frame's
confidence; the diversity term has no per-frame decomposition and is never
frame-scaled).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, LengthError, NumericFailure
from .features import normalize_features
from .layers import ConvSubsampler, LayerNorm, Linear, Module, PositionalEmbedding, TransformerBlock
from .masking import MaskPlan, MaskStrategy, make_plan, mask_stats
from .rng import derive_rng
from .scorer import ConfidenceTrack

logger = logging.getLogger(__name__)

VARIANTS = ("w2v2", "w2v-bert")


@dataclass
class QuantizerOutput:
    soft: Tensor               # (T, L) soft code probabilities
    hard: np.ndarray           # (T, L) one-hot selections
    targets: np.ndarray        # (T,) argmax code ids
    vectors: Tensor            # (T, codebook_dim) straight-through codebook rows


@dataclass
class LossBreakdown:
    l_ctr: float
    l_div: float
    l_ce: float
    l_total: float
    l_scaled: float
    codebook_usage_pct: float
    msm_accuracy: float | None
    mean_masked_confidence: float | None
    realized_coverage: float


class MsmModel(Module):
    def __init__(self, variant: str = "w2v-bert", dim: int = 128, codebook_size: int = 64,
                 codebook_dim: int = 64, heads: int = 4, context_blocks: int = 2,
                 second_context_blocks: int = 2, conv_channels: int = 32, ffn_mult: int = 4,
                 max_frames: int = 512, use_conv_block: bool = True, seed: int = 0):
        if variant not in VARIANTS:
            raise ContractViolation(f"variant must be one of {VARIANTS}, got {variant!r}")
        rng = derive_rng(seed, "msm-init")
        self.variant = variant
        self.dim = dim
        self.codebook_size = codebook_size
        self.encoder_frontend = ConvSubsampler(80, conv_channels, dim, rng)
        self.mask_emb = ad.parameter(rng.normal(0.0, 0.1, size=(dim,)))
        self.pos = PositionalEmbedding(max_frames, dim, rng)
        self.quant_proj = Linear(dim, codebook_size, rng)
        self.codebook = ad.parameter(rng.normal(0.0, 0.5, size=(codebook_size, codebook_dim)))
        self.context = [TransformerBlock(dim, heads, rng, ffn_mult=ffn_mult,
                                         use_conv=use_conv_block) for _ in range(context_blocks)]
        self.contr_proj = Linear(dim, codebook_dim, rng)
        if variant == "w2v-bert":
            self.second_context = [TransformerBlock(dim, heads, rng, ffn_mult=ffn_mult,
                                                    use_conv=use_conv_block)
                                   for _ in range(second_context_blocks)]
            self.ce_head = Linear(dim, codebook_size, rng)

    # -- forward pieces --------------------------------------------------------

    def encode(self, frames: np.ndarray) -> Tensor:
        """Feature frames (T', 80) -> encoded sequence (ceil(T'/4), dim)."""
        if frames.shape[0] < 4:
            raise LengthError(f"need >= 4 feature frames to encode, got {frames.shape[0]}")
        return self.encoder_frontend(frames)

    def run_context(self, masked_encoded: Tensor) -> tuple[Tensor, Tensor | None]:
        """Context network(s) over the masked encoded sequence."""
        x = masked_encoded + self.pos(masked_encoded.shape[0])
        for block in self.context:
            x = block(x)
        if self.variant != "w2v-bert":
            return x, None
        h = x
        for block in self.second_context:
            h = block(h)
        return x, h

    def ce_logits(self, second_context_out: Tensor) -> Tensor:
        if self.variant != "w2v-bert":
            raise ContractViolation("cross-entropy head exists only on the w2v-bert variant")
        return self.ce_head(second_context_out)


def apply_mask(encoded: Tensor, plan: MaskPlan, mask_emb: Tensor) -> Tensor:
    """Replace rows at the plan's masked indices with the mask embedding."""
    if plan.length != encoded.shape[0]:
        raise ContractViolation(f"plan length {plan.length} != encoded length {encoded.shape[0]}")
    col = Tensor(plan.mask.astype(encoded.data.dtype)[:, None])
    return encoded * (1.0 - col) + mask_emb.reshape(1, -1) * col


def quantize(model: MsmModel, encoded: Tensor, tau: float,
             rng: np.random.Generator | None, noise: bool = True) -> QuantizerOutput:
    """Gumbel-softmax code selection with a straight-through estimator."""
    if tau <= 0.0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    logits = model.quant_proj(encoded)
    if noise:
        if rng is None:
            raise ContractViolation("gumbel noise requires an rng")
        u = rng.random(logits.shape)
        gumbel = -np.log(-np.log(u + 1e-12) + 1e-12)
        logits = logits + Tensor(gumbel)
    soft = ad.softmax(logits * (1.0 / tau), axis=-1)
    targets = np.argmax(soft.data, axis=-1)
    hard = np.zeros_like(soft.data)
    hard[np.arange(targets.size), targets] = 1.0
    straight_through = soft + Tensor(hard - soft.data)
    vectors = straight_through @ model.codebook
    return QuantizerOutput(soft=soft, hard=hard, targets=targets, vectors=vectors)


# -- losses --------------------------------------------------------------------


def _normalize_rows(x: Tensor) -> Tensor:
    norm = (x * x).sum(axis=1, keepdims=True).sqrt()
    return x / (norm + 1e-12)


def contrastive_loss(context_proj: Tensor, quant_vectors: Tensor, masked: np.ndarray,
                     n_distractors: int, kappa: float,
                     rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
    """InfoNCE over masked positions; returns (mean, per-frame vector).

    For each masked position the candidate set is its own quantized vector
    plus ``n_distractors`` quantized vectors sampled uniformly from the other
    masked positions. With zero distractors the loss is exactly zero.
    """
    masked = np.asarray(masked, dtype=np.int64)
    n = masked.size
    if n < 1:
        raise ContractViolation("contrastive loss needs at least one masked position")
    if n_distractors < 0:
        raise ContractViolation(f"n_distractors must be >= 0, got {n_distractors}")
    k = min(n_distractors, n - 1)
    if k < n_distractors:
        logger.debug("only %d masked positions; clamping distractors %d -> %d",
                     n, n_distractors, k)

    c = _normalize_rows(ad.take_rows(context_proj, masked))
    q = _normalize_rows(ad.take_rows(quant_vectors, masked))
    sims = c @ q.transpose(1, 0)  # (n, n) cosine matrix

    idx = np.zeros((n, k + 1), dtype=np.int64)
    idx[:, 0] = np.arange(n)
    if k > 0:
        for j in range(n):
            others = rng.choice(n - 1, size=k, replace=False)
            idx[j, 1:] = others + (others >= j)
    picked = ad.take_along(sims, idx) * (1.0 / kappa)
    log_probs = ad.log_softmax(picked, axis=-1)
    per_frame = -log_probs[:, 0]
    return per_frame.mean(), per_frame


def diversity_loss(soft_probs: Tensor, codebook_size: int) -> Tensor:
    """(L - exp(H(p_bar))) / L over the mean soft code distribution:
    0 when every code is used equally, (L-1)/L at full collapse."""
    p_bar = soft_probs.mean(axis=0)
    entropy = -(p_bar * (p_bar + 1e-12).log()).sum()
    return (float(codebook_size) - entropy.exp()) * (1.0 / codebook_size)


def ce_loss_masked(logits: Tensor, targets: np.ndarray,
                   masked: np.ndarray) -> tuple[Tensor, Tensor, float]:
    """Masked-position cross-entropy; returns (mean, per-frame, accuracy)."""
    masked = np.asarray(masked, dtype=np.int64)
    if masked.size < 1:
        raise ContractViolation("cross-entropy needs at least one masked position")
    rows = ad.take_rows(logits, masked)
    log_probs = ad.log_softmax(rows, axis=-1)
    target_rows = np.asarray(targets, dtype=np.int64)[masked]
    per_frame = -ad.take_along(log_probs, target_rows[:, None])[:, 0]
    accuracy = float(np.mean(np.argmax(rows.data, axis=-1) == target_rows))
    return per_frame.mean(), per_frame, accuracy


@dataclass
class FrameTerms:
    """Per-masked-frame loss decomposition needed for frame-level scaling."""
    ctr_terms: Tensor
    ce_terms: Tensor | None
    masked: np.ndarray
    div_term: Tensor
    div_weight: float


SCALE_MODES = ("none", "utterance", "frame")


def scale_loss(l_total: Tensor, track: ConfidenceTrack | None, mode: str,
               frame_participation: float = 0.0, rng: np.random.Generator | None = None,
               frame_terms: FrameTerms | None = None) -> Tensor:
    """Confidence-weighted rescaling of one utterance's loss.

    ``utterance`` multiplies the whole objective by the utterance's mean
    confidence. ``frame`` draws Bernoulli(frame_participation) per utterance;
    selected utterances have each masked frame's contrastive/CE term weighted
    by that frame's confidence before reduction (the diversity term keeps its
    unscaled weight). Unselected utterances pass through unchanged.
    """
    if mode not in SCALE_MODES:
        raise ContractViolation(f"scale mode must be one of {SCALE_MODES}, got {mode!r}")
    if mode == "none":
        return l_total
    if track is None:
        raise ContractViolation(f"scale mode {mode!r} requires a confidence track")
    if mode == "utterance":
        return l_total * float(track.utterance_mean)
    if not (0.0 <= frame_participation <= 1.0):
        raise ContractViolation(f"frame_participation must be in [0, 1], got {frame_participation}")
    if rng is None:
        raise ContractViolation("frame scaling requires an rng for participation draws")
    if rng.random() >= frame_participation:
        return l_total
    if frame_terms is None:
        raise ContractViolation("frame scaling requires the per-frame loss decomposition")
    weights = Tensor(track.scores[frame_terms.masked])
    scaled = (frame_terms.ctr_terms * weights).mean()
    if frame_terms.ce_terms is not None:
        scaled = scaled + (frame_terms.ce_terms * weights).mean()
    return scaled + frame_terms.div_term * frame_terms.div_weight


# -- one pretraining step ------------------------------------------------------


@dataclass
class BatchItem:
    utt_id: str
    frames: np.ndarray                 # raw log-mel (T', 80)
    track: ConfidenceTrack | None = None


def msm_step(model: MsmModel, batch: list[BatchItem], strategy: MaskStrategy,
             scale_mode: str = "none", tau: float = 1.0, *, seed: int = 0, step: int = 1,
             n_distractors: int = 10, kappa: float = 0.1, div_weight: float = 0.1,
             frame_participation: float = 0.0, gumbel_noise: bool = True,
             diversity_masked_only: bool = True, normalize: bool = True,
             max_crop_frames: int = 0) -> tuple[Tensor, LossBreakdown]:
    """Forward pass and loss assembly for one batch; returns (loss, metrics).

    Deterministic given (model state, batch, seed, step): every stochastic
    choice draws from a stream keyed by (seed, purpose, utterance, step).
    """
    if not batch:
        raise ContractViolation("empty batch")
    strategy.validate()
    if strategy.kind != "random" or scale_mode != "none":
        missing = [it.utt_id for it in batch if it.track is None]
        if missing:
            raise ContractViolation(
                f"strategy {strategy.kind!r} / scale {scale_mode!r} needs confidence "
                f"tracks; missing for {missing[0]!r}")

    per_utt = []
    soft_sum: Tensor | None = None
    soft_count = 0
    usage: set[int] = set()
    masked_conf: list[np.ndarray] = []
    coverage = []

    for item in batch:
        frames, track = item.frames, item.track
        if max_crop_frames > 0 and frames.shape[0] > max_crop_frames:
            frames, track = _crop(frames, track, max_crop_frames, seed, item.utt_id, step)
        if normalize:
            frames = normalize_features(frames)
        encoded = model.encode(frames)
        t_enc = encoded.shape[0]
        if track is not None and len(track) != t_enc:
            raise ContractViolation(
                f"{item.utt_id}: confidence track length {len(track)} != encoded length {t_enc}")

        plan = make_plan(track, t_enc, strategy, derive_rng(seed, "mask", item.utt_id, step))
        quant = quantize(model, encoded, tau, derive_rng(seed, "gumbel", item.utt_id, step),
                         noise=gumbel_noise)
        masked_seq = apply_mask(encoded, plan, model.mask_emb)
        context_out, second_out = model.run_context(masked_seq)

        masked = plan.masked_indices
        ctr_mean, ctr_terms = contrastive_loss(
            model.contr_proj(context_out), quant.vectors, masked, n_distractors, kappa,
            derive_rng(seed, "distractors", item.utt_id, step))
        ce_mean = ce_terms = None
        accuracy = None
        if model.variant == "w2v-bert":
            ce_mean, ce_terms, accuracy = ce_loss_masked(
                model.ce_logits(second_out), quant.targets, masked)

        soft_rows = ad.take_rows(quant.soft, masked) if diversity_masked_only else quant.soft
        rows_sum = soft_rows.sum(axis=0)
        soft_sum = rows_sum if soft_sum is None else soft_sum + rows_sum
        soft_count += soft_rows.shape[0]

        usage.update(int(c) for c in np.unique(quant.targets))
        coverage.append(masked.size / t_enc)
        if track is not None:
            masked_conf.append(track.scores[masked])
        per_utt.append((item, ctr_mean, ctr_terms, ce_mean, ce_terms, masked, accuracy, track))

    p_bar_rows = (soft_sum * (1.0 / soft_count)).reshape(1, -1)
    div = diversity_loss(p_bar_rows, model.codebook_size)

    totals, scaleds, ctrs, ces, accs = [], [], [], [], []
    for item, ctr_mean, ctr_terms, ce_mean, ce_terms, masked, accuracy, track in per_utt:
        total_u = ctr_mean + div * div_weight
        if ce_mean is not None:
            total_u = total_u + ce_mean
        terms = FrameTerms(ctr_terms=ctr_terms, ce_terms=ce_terms, masked=masked,
                           div_term=div, div_weight=div_weight)
        scaled_u = scale_loss(total_u, track, scale_mode, frame_participation,
                              derive_rng(seed, "frame-scale", item.utt_id, step), terms)
        totals.append(total_u)
        scaleds.append(scaled_u)
        ctrs.append(float(ctr_mean.data))
        if ce_mean is not None:
            ces.append(float(ce_mean.data))
            accs.append(accuracy)

    loss = _mean_of(scaleds)
    total = _mean_of(totals)
    if not np.isfinite(loss.data):
        raise NumericFailure("non-finite pretraining loss", node_id=loss.node_id, op=loss.op)

    breakdown = LossBreakdown(
        l_ctr=float(np.mean(ctrs)),
        l_div=float(div.data),
        l_ce=float(np.mean(ces)) if ces else 0.0,
        l_total=float(total.data),
        l_scaled=float(loss.data),
        codebook_usage_pct=100.0 * len(usage) / model.codebook_size,
        msm_accuracy=float(np.mean(accs)) if accs else None,
        mean_masked_confidence=(float(np.concatenate(masked_conf).mean())
                                if masked_conf else None),
        realized_coverage=float(np.mean(coverage)),
    )
    return loss, breakdown


def _mean_of(tensors: list[Tensor]) -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = total + t
    return total * (1.0 / len(tensors))


def _crop(frames: np.ndarray, track: ConfidenceTrack | None, max_frames: int,
          seed: int, utt_id: str, step: int):
    """Random contiguous crop, snapped to the x4 subsampling grid so cached
    confidence tracks stay aligned with the encoder output."""
    max_frames = (max_frames // 4) * 4
    if max_frames < 4:
        raise ContractViolation(f"max_crop_frames must allow >= 4 frames, got {max_frames}")
    rng = derive_rng(seed, "crop", utt_id, step)
    latest = frames.shape[0] - max_frames
    start = 4 * int(rng.integers(latest // 4 + 1))
    cropped = frames[start:start + max_frames]
    if track is None:
        return cropped, None
    enc_start = start // 4
    enc_len = -(-cropped.shape[0] // 4)
    scores = track.scores[enc_start:enc_start + enc_len]
    return cropped, ConfidenceTrack(scores=scores, utterance_mean=float(scores.mean()))
