"""Audio and annotation I/O.

WAV support is deliberately narrow: RIFF/WAVE containers with 16-bit PCM,
24-bit PCM, or 32-bit float samples, mono or stereo. Everything is folded
down to a mono float buffer in [-1, 1] at 44100 Hz.

Annotation files are plain UTF-8 text, one onset time in seconds per line,
'#' starting a comment line; ".onsets" extension by convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AnnotationError,
    AudioFormatError,
    EmptyInputError,
    SampleRateError,
)

TARGET_RATE = 44100

# two annotation times closer than this are considered the same onset
DEDUP_SECONDS = 0.001


@dataclass(frozen=True)
class AudioClip:
    """Mono sample buffer with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("audio contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class OnsetAnnotations:
    """Strictly ascending onset times in seconds.

    Construction sorts the input and collapses times closer than 1 ms
    (keeping the earliest of each cluster), so every instance satisfies
    the ordering invariant.
    """

    times: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        t = np.sort(np.asarray(self.times, dtype=np.float64))
        if t.size and t[0] < 0:
            raise AnnotationError("negative onset time")
        if t.size:
            keep = [0]
            for i in range(1, len(t)):
                if t[i] - t[keep[-1]] >= DEDUP_SECONDS:
                    keep.append(i)
            t = t[keep]
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return len(self.times)


def _read_chunks(data: bytes) -> dict[bytes, bytes]:
    """Split a RIFF/WAVE payload into its chunks (first occurrence wins)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError("not a RIFF/WAVE file")
    chunks: dict[bytes, bytes] = {}
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    return chunks


def _decode_samples(raw: bytes, fmt_tag: int, bits: int, n_channels: int) -> np.ndarray:
    if fmt_tag == 1 and bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif fmt_tag == 1 and bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8)
        b = b[: len(b) - len(b) % 3].reshape(-1, 3)
        # sign-extend little-endian 24-bit into int32
        x = (
            b[:, 0].astype(np.int32)
            | (b[:, 1].astype(np.int32) << 8)
            | (b[:, 2].astype(np.int32) << 16)
        )
        x = np.where(x >= 1 << 23, x - (1 << 24), x).astype(np.float64) / float(1 << 23)
    elif fmt_tag == 3 and bits == 32:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    else:
        raise AudioFormatError(f"unsupported WAV encoding (format {fmt_tag}, {bits}-bit)")
    if n_channels > 1:
        x = x[: len(x) - len(x) % n_channels].reshape(-1, n_channels).mean(axis=1)
    return x


def load_audio(path: str | Path, resample: bool = False) -> AudioClip:
    """Load a WAV file as a mono clip at 44100 Hz.

    Stereo channels are averaged. If the source rate differs from 44100 Hz,
    `resample=True` enables linear-interpolation resampling; otherwise a
    SampleRateError is raised.
    """
    data = Path(path).read_bytes()
    if not data:
        raise EmptyInputError(f"empty file: {path}")
    chunks = _read_chunks(data)
    if b"fmt " not in chunks or b"data" not in chunks:
        raise AudioFormatError("missing fmt or data chunk")
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise AudioFormatError("truncated fmt chunk")
    fmt_tag, n_channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if fmt_tag == 0xFFFE:  # WAVE_FORMAT_EXTENSIBLE: sub-format GUID leads with the tag
        if len(fmt) >= 40:
            (fmt_tag,) = struct.unpack_from("<H", fmt, 24)
        else:
            raise AudioFormatError("truncated extensible fmt chunk")
    if n_channels not in (1, 2):
        raise AudioFormatError(f"unsupported channel count {n_channels}")
    samples = _decode_samples(chunks[b"data"], fmt_tag, bits, n_channels)
    if samples.size == 0:
        raise EmptyInputError(f"no samples in {path}")
    if rate != TARGET_RATE:
        if not resample:
            raise SampleRateError(f"{path}: {rate} Hz (expected {TARGET_RATE}; pass resample)")
        samples = _resample_linear(samples, rate, TARGET_RATE)
    peak = np.max(np.abs(samples))
    if peak > 1.0:
        samples = samples / peak
    return AudioClip(samples=samples, sample_rate=TARGET_RATE)


def _resample_linear(x: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    """Linear-interpolation resampling; output length = round(n * dst/src)."""
    n_out = int(round(len(x) * dst_rate / src_rate))
    src_pos = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(src_pos, np.arange(len(x)), x)


def save_wav(clip: AudioClip, path: str | Path) -> None:
    """Write a clip as 16-bit PCM mono WAV."""
    x = np.clip(clip.samples, -1.0, 1.0)
    # scale by 32768 (the load-side divisor) so the pair inverts exactly
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
    hdr = b"WAVE" + b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16
    )
    body = hdr + b"data" + struct.pack("<I", len(pcm)) + pcm
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def load_annotations(path: str | Path) -> OnsetAnnotations:
    """Parse an onset annotation file.

    One decimal number per non-empty line; lines starting with '#' are
    ignored. Times are sorted and duplicates within 1 ms collapsed.
    """
    times = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                t = float(stripped)
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: not a number: {stripped!r}") from None
            if t < 0:
                raise AnnotationError(f"{path}:{lineno}: negative onset time {t}")
            times.append(t)
    return OnsetAnnotations(times=np.array(times))


def save_annotations(onsets: OnsetAnnotations, path: str | Path) -> None:
    """Write onset times, one per line with 4 decimal places."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in onsets.times:
            fh.write(f"{t:.4f}\n")
