"""WAV ingestion and the utterance container.

Only RIFF/WAVE PCM16 mono at 16 kHz is accepted; there is no resampler, so
other rates are rejected outright.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

SAMPLE_RATE = 16000


@dataclass
class Utterance:
    samples: np.ndarray  # float32 in [-1, 1]
    sample_rate: int = SAMPLE_RATE
    labels: list[int] | None = None
    domain: str = "clean"
    utt_id: str = ""

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def load_wav(path) -> Utterance:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            comp = wf.getcomptype()
            n = wf.getnframes()
            if comp != "NONE":
                raise FormatError(f"{path}: compression type {comp!r} unsupported (field: comptype)")
            if channels != 1:
                raise FormatError(f"{path}: expected mono, got {channels} channels (field: nchannels)")
            if width != 2:
                raise FormatError(f"{path}: expected PCM16 (2-byte samples), got {width} (field: sampwidth)")
            if rate != SAMPLE_RATE:
                raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} (field: framerate)")
            raw = wf.readframes(n)
    except wave.Error as exc:
        raise FormatError(f"{path}: malformed RIFF/WAVE header ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    samples = (pcm.astype(np.float32)) / 32768.0
    return Utterance(samples=samples, sample_rate=SAMPLE_RATE, utt_id=path.stem)


def save_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.astype("<i2").tobytes())
