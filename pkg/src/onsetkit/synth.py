"""Deterministic synthetic percussion corpora with exact onset ground truth.

Instruments come in two rhythmic roles: time-keeping instruments place hits
on the beat grid of a fixed tempo (~2.5 hits/s), voicing instruments fill a
16th-note grid with a seeded per-file pattern plus small timing jitter
(~8.9 hits/s).  Every hit is an exponentially decaying carrier (noise burst,
damped tone, or a mix) added to the clip at an exact sample position, and
that sample position is what lands in the annotation list, so the ground
truth is exact by construction.

All randomness flows through one numpy Generator per file, seeded from
(corpus seed, crc32(instrument name), file index), so corpus bytes are a
pure function of the spec and files can be rendered in any order or in
parallel without changing the output.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, OnsetAnnotations, TARGET_RATE, save_annotations, save_wav
from .errors import ConfigError, DataError

ROLES = ("time-keeping", "voicing")
SPECTRAL_MODES = ("noise-burst", "damped-tone", "mixed")

# role statistics the generators aim for (hits per second)
TIME_KEEPING_DENSITY = 2.5
VOICING_DENSITY = 8.9

MANIFEST_NAME = "manifest.txt"
MANIFEST_MAGIC = "onsetkit-corpus"
MANIFEST_VERSION = 1

# envelope span is the time it takes a hit to decay to exp(-5) ~ -43 dB
_DECAY_TAU_DIV = 5.0
_END_MARGIN = 0.1  # s kept free of hits at the end of a file


@dataclass(frozen=True)
class InstrumentProfile:
    """Acoustic and rhythmic description of one synthetic instrument."""

    name: str
    role: str
    decay_span: tuple[float, float]  # envelope span range in ms
    spectral_mode: str
    center_freq: float  # Hz, fundamental for tone modes; ignored for noise
    onset_density: float  # target hits per second
    amplitude_jitter: float  # relative std of per-hit amplitude
    partial_ratios: tuple[float, ...] = (1.0, 2.0, 3.0)
    attack_ms: float = 2.0

    def __post_init__(self):
        if not self.name or not all(c.isalnum() or c == "_" for c in self.name):
            raise ConfigError(f"instrument name must be alphanumeric/underscore: {self.name!r}")
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}, expected one of {ROLES}")
        if self.spectral_mode not in SPECTRAL_MODES:
            raise ConfigError(f"unknown spectral mode {self.spectral_mode!r}")
        lo, hi = self.decay_span
        if not (50.0 <= lo <= hi <= 450.0):
            raise ConfigError(f"decay span must satisfy 50 <= lo <= hi <= 450 ms, got {self.decay_span}")
        if self.onset_density < 0:
            raise ConfigError("onset density must be >= 0")
        if self.amplitude_jitter < 0:
            raise ConfigError("amplitude jitter must be >= 0")
        if self.attack_ms <= 0:
            raise ConfigError("attack must be > 0 ms")
        if self.spectral_mode != "noise-burst" and self.center_freq <= 0:
            raise ConfigError("tone modes need a positive center frequency")


@dataclass(frozen=True)
class CorpusSpec:
    """Recipe for a full corpus: instrument roster plus file layout."""

    instruments: tuple[InstrumentProfile, ...]
    files_per_instrument: int = 10
    file_duration: float = 30.0
    tempo: float = 180.0
    seed: int = 0

    def __post_init__(self):
        if not self.instruments:
            raise ConfigError("corpus needs at least one instrument")
        names = [p.name for p in self.instruments]
        if len(set(names)) != len(names):
            raise ConfigError("instrument names must be unique")
        if self.files_per_instrument < 2:
            raise ConfigError("need >= 2 files per instrument (snippet source + eval)")
        if self.file_duration < 5.0:
            raise ConfigError("file duration must be >= 5 s")
        if not (165.0 <= self.tempo <= 180.0):
            raise ConfigError(f"tempo must lie in [165, 180] bpm, got {self.tempo}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")


def default_instruments() -> tuple[InstrumentProfile, ...]:
    """Standard five-piece roster: two time-keepers and three voicing parts.

    ring_bell is the deliberate outlier: a long inharmonic ring with a slow
    30 ms attack, unlike anything else in the roster.  Hold it out of
    pretraining to probe adaptation to out-of-distribution material.
    """
    return (
        InstrumentProfile("drone_tone", "time-keeping", (380.0, 420.0), "damped-tone",
                          660.0, TIME_KEEPING_DENSITY, 0.08),
        InstrumentProfile("ring_bell", "time-keeping", (390.0, 430.0), "damped-tone",
                          520.0, TIME_KEEPING_DENSITY, 0.08,
                          partial_ratios=(1.0, 2.76, 5.40, 8.93), attack_ms=30.0),
        InstrumentProfile("snap_noise", "voicing", (77.0, 107.0), "noise-burst",
                          0.0, VOICING_DENSITY, 0.12),
        InstrumentProfile("clack_mix", "voicing", (90.0, 180.0), "mixed",
                          1800.0, VOICING_DENSITY, 0.12),
        InstrumentProfile("thud_tone", "voicing", (120.0, 230.0), "damped-tone",
                          140.0, VOICING_DENSITY, 0.12),
    )


def default_corpus_spec(seed: int = 0, files_per_instrument: int = 10,
                        file_duration: float = 30.0, tempo: float = 180.0) -> CorpusSpec:
    return CorpusSpec(default_instruments(), files_per_instrument, file_duration, tempo, seed)


def make_profile(name: str, role: str, seed: int) -> InstrumentProfile:
    """Draw a deterministic role-typical profile from (name, role, seed)."""
    if role not in ROLES:
        raise ConfigError(f"unknown role {role!r}, expected one of {ROLES}")
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode()), zlib.crc32(role.encode())])
    rng = np.random.default_rng(ss)
    if role == "time-keeping":
        density = TIME_KEEPING_DENSITY * (1.0 + rng.uniform(-0.1, 0.1))
        lo = rng.uniform(370.0, 400.0)
        hi = min(450.0, lo + rng.uniform(15.0, 30.0))
        mode = "damped-tone"
        freq = rng.uniform(300.0, 900.0)
        jitter = rng.uniform(0.05, 0.12)
    else:
        density = VOICING_DENSITY * (1.0 + rng.uniform(-0.1, 0.1))
        lo = rng.uniform(70.0, 160.0)
        hi = lo + rng.uniform(20.0, 70.0)
        mode = SPECTRAL_MODES[rng.integers(len(SPECTRAL_MODES))]
        freq = rng.uniform(120.0, 2000.0) if mode != "noise-burst" else 0.0
        jitter = rng.uniform(0.08, 0.16)
    return InstrumentProfile(name, role, (lo, hi), mode, freq, density, jitter)


def _beat_times(duration: float, tempo: float, density: float, rng) -> np.ndarray:
    """Beat-grid hit times: seeded phase, then a Bernoulli keep per beat."""
    beat = 60.0 / tempo
    phase = rng.uniform(0.2, 0.8) * beat
    grid = np.arange(phase, duration - _END_MARGIN, beat)
    keep = rng.random(grid.size) < min(1.0, density * beat)
    return grid[keep]


def _pattern_times(duration: float, tempo: float, density: float, rng) -> np.ndarray:
    """16th-grid hit times: one seeded bar pattern repeated, jitter <= 5 ms."""
    step = 60.0 / tempo / 4.0
    n_slots = 16
    phase = rng.uniform(0.02, 0.06)
    n_keep = int(round(n_slots * min(1.0, density * step)))
    if n_keep == 0:
        return np.zeros(0)
    slots = np.sort(rng.choice(n_slots, size=n_keep, replace=False))
    bar = n_slots * step
    chunks = []
    start = phase
    while start < duration - _END_MARGIN:
        chunks.append(start + slots * step + rng.uniform(-0.005, 0.005, n_keep))
        start += bar
    t = np.concatenate(chunks)
    return np.sort(t[(t >= 0.0) & (t <= duration - _END_MARGIN)])


def _tone(freq: float, ratios: tuple[float, ...], t: np.ndarray, rng) -> np.ndarray:
    nyq_guard = 0.45 * TARGET_RATE
    out = np.zeros(t.size)
    norm = 0.0
    for k, r in enumerate(ratios):
        f = freq * r
        if f >= nyq_guard:
            continue
        a = 1.0 / (1.0 + k)
        out += a * np.sin(2.0 * np.pi * f * t + rng.uniform(0.0, 2.0 * np.pi))
        norm += a
    return out / norm if norm > 0 else out


def _carrier(profile: InstrumentProfile, n: int, rng) -> np.ndarray:
    t = np.arange(n) / TARGET_RATE
    if profile.spectral_mode == "noise-burst":
        return 0.5 * rng.standard_normal(n)
    if profile.spectral_mode == "damped-tone":
        return _tone(profile.center_freq, profile.partial_ratios, t, rng)
    tone = _tone(profile.center_freq, profile.partial_ratios, t, rng)
    return 0.65 * tone + 0.35 * 0.5 * rng.standard_normal(n)


def _synthesize(profile: InstrumentProfile, times: np.ndarray, n_samples: int,
                rng) -> tuple[AudioClip, OnsetAnnotations]:
    times = np.asarray(times, dtype=np.float64)
    x = np.zeros(n_samples)
    n_hits = times.size
    spans_ms = rng.uniform(profile.decay_span[0], profile.decay_span[1], n_hits)
    amps = np.exp(rng.normal(0.0, profile.amplitude_jitter, n_hits))
    n_attack = max(1, int(round(profile.attack_ms * TARGET_RATE / 1000.0)))
    exact = []
    for i in range(n_hits):
        s0 = int(round(times[i] * TARGET_RATE))
        if not (0 <= s0 < n_samples):
            raise ConfigError(f"hit at {times[i]:.4f} s falls outside the clip")
        n_env = int(round(spans_ms[i] / 1000.0 * TARGET_RATE))
        m = min(n_env, n_samples - s0)
        if m <= 0:
            continue
        tau = spans_ms[i] / 1000.0 / _DECAY_TAU_DIV
        tt = np.arange(m) / TARGET_RATE
        env = np.exp(-tt / tau) * np.minimum(1.0, np.arange(1, m + 1) / n_attack)
        x[s0:s0 + m] += amps[i] * env * _carrier(profile, m, rng)
        exact.append(s0 / TARGET_RATE)
    peak = np.max(np.abs(x)) if n_samples else 0.0
    if peak > 0:
        x *= 0.9 / peak
    return AudioClip(x, TARGET_RATE), OnsetAnnotations(np.asarray(exact))


def render_hits(profile: InstrumentProfile, times, duration: float,
                seed) -> tuple[AudioClip, OnsetAnnotations]:
    """Render explicit hit times; annotations are the sample-aligned times."""
    if duration <= 0:
        raise ConfigError("duration must be > 0")
    rng = np.random.default_rng(seed)
    return _synthesize(profile, np.asarray(times, dtype=np.float64),
                       int(round(duration * TARGET_RATE)), rng)


def render_file(profile: InstrumentProfile, duration: float, tempo: float,
                seed) -> tuple[AudioClip, OnsetAnnotations]:
    """Render one file of role-appropriate hits with exact annotations."""
    if duration < 5.0:
        raise ConfigError("file duration must be >= 5 s")
    if tempo <= 0:
        raise ConfigError("tempo must be > 0")
    rng = np.random.default_rng(seed)
    if profile.role == "time-keeping":
        times = _beat_times(duration, tempo, profile.onset_density, rng)
    else:
        times = _pattern_times(duration, tempo, profile.onset_density, rng)
    return _synthesize(profile, times, int(round(duration * TARGET_RATE)), rng)


@dataclass(frozen=True)
class ManifestEntry:
    stem: str
    instrument: str
    index: int
    seed_tag: str

    def wav_path(self, root) -> Path:
        return Path(root) / f"{self.stem}.wav"

    def onsets_path(self, root) -> Path:
        return Path(root) / f"{self.stem}.onsets"


def file_seed(corpus_seed: int, instrument: str, index: int) -> np.random.SeedSequence:
    """Per-file rng stream; render order can never change the output."""
    return np.random.SeedSequence([corpus_seed, zlib.crc32(instrument.encode()), index])


def _seed_tag(corpus_seed: int, instrument: str, index: int) -> str:
    return f"{corpus_seed}-{zlib.crc32(instrument.encode())}-{index}"


def generate_corpus(spec: CorpusSpec, out_dir, force: bool = False, threads: int = 1) -> Path:
    """Write WAV + .onsets pairs plus a manifest; returns the manifest path.

    Refuses to overwrite existing corpus files unless force is set.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(p, i) for p in spec.instruments for i in range(1, spec.files_per_instrument + 1)]
    stems = [f"{p.name}_{i:02d}" for p, i in jobs]
    targets = [out / MANIFEST_NAME]
    for stem in stems:
        targets += [out / f"{stem}.wav", out / f"{stem}.onsets"]
    if not force:
        for path in targets:
            if path.exists():
                raise FileExistsError(f"{path} exists; pass force to overwrite")

    def render_one(job):
        profile, idx = job
        stem = f"{profile.name}_{idx:02d}"
        clip, ann = render_file(profile, spec.file_duration, spec.tempo,
                                file_seed(spec.seed, profile.name, idx))
        save_wav(clip, out / f"{stem}.wav")
        save_annotations(ann, out / f"{stem}.onsets")
        return ManifestEntry(stem, profile.name, idx, _seed_tag(spec.seed, profile.name, idx))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(render_one, jobs))
    else:
        entries = [render_one(job) for job in jobs]

    lines = [
        f"{MANIFEST_MAGIC} {MANIFEST_VERSION}",
        f"seed {spec.seed}",
        f"tempo {spec.tempo!r}",
        f"file_duration {spec.file_duration!r}",
        f"files_per_instrument {spec.files_per_instrument}",
        "instruments " + ",".join(p.name for p in spec.instruments),
    ]
    lines += [f"file {e.stem} {e.instrument} {e.index} {e.seed_tag}" for e in entries]
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_manifest(path) -> tuple[dict, list[ManifestEntry]]:
    """Parse a corpus manifest into (metadata dict, file entries)."""
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    lines = [ln.strip() for ln in raw.splitlines() if ln.strip()]
    if not lines or lines[0] != f"{MANIFEST_MAGIC} {MANIFEST_VERSION}":
        raise DataError(f"{path}: not a corpus manifest")
    meta: dict = {}
    entries: list[ManifestEntry] = []
    casts = {"seed": int, "tempo": float, "file_duration": float,
             "files_per_instrument": int}
    for ln_no, ln in enumerate(lines[1:], start=2):
        key, _, rest = ln.partition(" ")
        if key == "file":
            parts = rest.split()
            if len(parts) != 4:
                raise DataError(f"{path}:{ln_no}: malformed file entry")
            try:
                entries.append(ManifestEntry(parts[0], parts[1], int(parts[2]), parts[3]))
            except ValueError as e:
                raise DataError(f"{path}:{ln_no}: {e}") from e
        elif key == "instruments":
            meta["instruments"] = tuple(rest.split(","))
        elif key in casts:
            try:
                meta[key] = casts[key](rest)
            except ValueError as e:
                raise DataError(f"{path}:{ln_no}: {e}") from e
        else:
            raise DataError(f"{path}:{ln_no}: unknown manifest key {key!r}")
    missing = {"seed", "tempo", "file_duration", "files_per_instrument", "instruments"} - set(meta)
    if missing:
        raise DataError(f"{path}: manifest missing keys {sorted(missing)}")
    return meta, entries
