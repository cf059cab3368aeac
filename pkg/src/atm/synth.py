"""Synthetic labeled pseudo-speech corpus with controllable domain shift.

Each utterance is a sequence of 50-300 ms segments. A segment carrying label
``v`` is the sum of two sinusoids at label-specific frequencies plus white
noise at a domain-specific SNR; the "shifted" domain adds a frequency offset
and a lower SNR. Generation is fully deterministic given the seed, and a
manifest row can either point at a rendered WAV file or embed the generation
plan inline for on-the-fly rendering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, Utterance, load_wav, save_wav
from .errors import ConfigError, DataError
from .rng import derive_rng

TONE_AMPLITUDE = 0.3
BASE_HZ = 300.0
SPACING_HZ = 250.0
PAIR_OFFSET_HZ = 125.0


@dataclass
class SynthConfig:
    label_count: int = 8
    count: int = 200
    duration_range_s: tuple[float, float] = (1.0, 4.0)
    segment_ms: tuple[int, int] = (50, 300)
    domain_weights: dict[str, float] = field(default_factory=lambda: {"clean": 1.0})
    snr_db: dict[str, float] = field(default_factory=lambda: {"clean": 20.0, "shifted": 5.0})
    freq_shift_hz: dict[str, float] = field(default_factory=lambda: {"clean": 0.0, "shifted": 120.0})

    def validate(self):
        if self.label_count < 2:
            raise ConfigError(f"label_count must be >= 2, got {self.label_count}")
        if self.count < 0:
            raise ConfigError(f"count must be >= 0, got {self.count}")
        lo, hi = self.duration_range_s
        if not (0 < lo <= hi):
            raise ConfigError(f"bad duration range {self.duration_range_s}")
        smin, smax = self.segment_ms
        if smin < 10 or smax < 2 * smin:
            raise ConfigError(f"segment range must satisfy 2*min <= max, got {self.segment_ms}")
        if lo * 1000.0 < smin:
            raise ConfigError("minimum duration shorter than one segment")
        max_shift = max(self.freq_shift_hz.get(d, 0.0) for d in self.domain_weights)
        top = label_frequencies(self.label_count - 1, max_shift)[1]
        if top >= 7600.0:
            raise ConfigError(f"label frequencies reach {top:.0f} Hz, outside the mel range")
        for d in self.domain_weights:
            if d not in self.snr_db or d not in self.freq_shift_hz:
                raise ConfigError(f"domain {d!r} missing snr_db or freq_shift_hz")


def label_frequencies(label: int, shift_hz: float = 0.0) -> tuple[float, float]:
    """The two designated sinusoid frequencies for a label id."""
    f1 = BASE_HZ + SPACING_HZ * label + shift_hz
    return f1, f1 + PAIR_OFFSET_HZ


@dataclass
class UttPlan:
    utt_id: str
    domain: str
    segments: list[tuple[int, int]]  # (label, n_samples)
    seed: int


def plan_corpus(cfg: SynthConfig, seed: int) -> list[UttPlan]:
    cfg.validate()
    domains = list(cfg.domain_weights.keys())
    weights = np.array([cfg.domain_weights[d] for d in domains], dtype=np.float64)
    weights = weights / weights.sum()
    smin = int(round(cfg.segment_ms[0] * SAMPLE_RATE / 1000.0))
    smax = int(round(cfg.segment_ms[1] * SAMPLE_RATE / 1000.0))
    plans = []
    for i in range(cfg.count):
        rng = derive_rng(seed, "synth-plan", i)
        lo, hi = cfg.duration_range_s
        total = int(round((lo + (hi - lo) * rng.random()) * SAMPLE_RATE))
        domain = domains[int(rng.choice(len(domains), p=weights))]
        segments: list[tuple[int, int]] = []
        remaining = total
        while remaining > 0:
            if remaining <= smax:
                n = remaining
            else:
                n = int(rng.integers(smin, min(smax, remaining - smin) + 1))
            segments.append((int(rng.integers(cfg.label_count)), n))
            remaining -= n
        plans.append(UttPlan(utt_id=f"utt{i:05d}", domain=domain, segments=segments, seed=seed))
    return plans


def render(plan: UttPlan, cfg: SynthConfig) -> Utterance:
    rng = derive_rng(plan.seed, "synth-render", plan.utt_id)
    shift = cfg.freq_shift_hz[plan.domain]
    snr = cfg.snr_db[plan.domain]
    noise_sigma = TONE_AMPLITUDE / (10.0 ** (snr / 20.0))
    pieces = []
    for label, n in plan.segments:
        f1, f2 = label_frequencies(label, shift)
        t = np.arange(n, dtype=np.float64) / SAMPLE_RATE
        ph1, ph2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
        tone = TONE_AMPLITUDE * (np.sin(2 * np.pi * f1 * t + ph1)
                                 + np.sin(2 * np.pi * f2 * t + ph2))
        pieces.append(tone)
    samples = np.concatenate(pieces)
    samples = samples + noise_sigma * rng.standard_normal(samples.size)
    samples = np.clip(samples, -1.0, 1.0).astype(np.float32)
    return Utterance(samples=samples, labels=[lab for lab, _ in plan.segments],
                     domain=plan.domain, utt_id=plan.utt_id)


def synth_corpus(cfg: SynthConfig, seed: int) -> list[Utterance]:
    return [render(plan, cfg) for plan in plan_corpus(cfg, seed)]


# -- manifest I/O --------------------------------------------------------------


def write_corpus(out_dir, cfg: SynthConfig, seed: int, inline: bool = False) -> Path:
    """Render the corpus into ``out_dir`` and return the manifest path.

    With ``inline=True`` no WAV files are written; manifest rows carry the
    generation plan instead.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as mf:
        for plan in plan_corpus(cfg, seed):
            row = {"id": plan.utt_id, "labels": [lab for lab, _ in plan.segments],
                   "domain": plan.domain}
            if inline:
                row["synth"] = {
                    "seed": plan.seed,
                    "segments": [[lab, n] for lab, n in plan.segments],
                    "snr_db": cfg.snr_db[plan.domain],
                    "freq_shift_hz": cfg.freq_shift_hz[plan.domain],
                }
            else:
                wav_name = f"{plan.utt_id}.wav"
                save_wav(out_dir / wav_name, render(plan, cfg).samples)
                row["path"] = wav_name
            mf.write(json.dumps(row) + "\n")
    return manifest_path


def load_manifest(manifest_path) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    utterances = []
    with open(manifest_path, "r", encoding="utf-8") as mf:
        for line_no, line in enumerate(mf, 1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "path" in row:
                utt = load_wav(base / row["path"])
            elif "synth" in row:
                gen = row["synth"]
                plan = UttPlan(utt_id=row["id"], domain=row["domain"],
                               segments=[(int(l), int(n)) for l, n in gen["segments"]],
                               seed=int(gen["seed"]))
                cfg = SynthConfig(
                    snr_db={row["domain"]: float(gen["snr_db"])},
                    freq_shift_hz={row["domain"]: float(gen["freq_shift_hz"])},
                    domain_weights={row["domain"]: 1.0})
                utt = render(plan, cfg)
            else:
                raise DataError(f"{manifest_path}:{line_no}: row has neither 'path' nor 'synth'")
            utt.utt_id = row["id"]
            utt.domain = row.get("domain", "clean")
            labels = row.get("labels")
            utt.labels = [int(v) for v in labels] if labels is not None else None
            utterances.append(utt)
    return utterances
