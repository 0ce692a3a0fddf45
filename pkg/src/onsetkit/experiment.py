"""Experimental protocol: snippet holdout, fine-tuning cycles, grids, reports.

A cycle adapts a pretrained base model to one instrument with one freeze
configuration, always fine-tuning on a single 5 s snippet cut from the
instrument's first file, and always excluding that file from evaluation.
A grid runs every (model, instrument, freeze) combination, journals rows
as they finish, and writes a fixed-column CSV plus a Markdown summary of
the best configuration per (model, instrument).

Datasets come either from a synthetic corpus directory (manifest.txt) or
from a real recording layout <root>/<Instrument>/<Instrument>_<nn>.wav with
matching .onsets files, where file index 34 is skipped when present (one
known-corrupt recording in the layout this mirrors).
"""

from __future__ import annotations

import csv
import io
import json
import time
import zlib
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioClip, OnsetAnnotations, load_annotations, load_audio
from .errors import ConfigError, DataError, OnsetKitError, SnippetError
from .evaluate import EvalResult, PeakPickParams, aggregate, delta_pp, match_onsets, peak_pick
from .features import extract_features
from .models import (
    VARIANTS,
    FreezeConfig,
    Model,
    build_model,
    canonical_freeze_ids,
    load_model,
)
from .synth import MANIFEST_NAME, CorpusSpec, InstrumentProfile, generate_corpus, load_manifest, make_profile
from .training import FinetuneConfig, finetune, make_targets, train

RESULTS_FORMAT = 1
CSV_COLUMNS = ("model", "instrument", "freeze_id", "mean_f1", "baseline_f1",
               "delta_pp", "n_files", "seed", "wall_s", "per_file_f1")
EXCLUDED_REAL_INDEX = 34
SNIPPET_OFFSET_GRID = 0.1  # s, scan step for the default snippet offset


@dataclass(frozen=True)
class FilePair:
    """One audio file with its annotation file."""

    instrument: str
    index: int
    wav: Path
    onsets: Path


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a grid run needs; mirrors the JSON config file 1:1."""

    corpus: str | Path | CorpusSpec
    base_models: dict = field(default_factory=dict)  # variant -> model path
    models: tuple = tuple(VARIANTS)
    instruments: tuple | None = None  # None = every instrument in the corpus
    freeze_configs: tuple = tuple(canonical_freeze_ids())
    snippet_offset: float | None = None  # None = earliest annotated window
    snippet_duration: float = 5.0
    epochs: int = 50
    lr_scale: float = 0.25
    base_lr: float = 1e-3
    dropout_active: bool = True
    peak_pick: PeakPickParams = PeakPickParams()
    tolerance: float = 0.025
    seed: int = 0
    out_dir: str | Path = "results"

    def __post_init__(self):
        for m in self.models:
            if m not in VARIANTS:
                raise ConfigError(f"unknown model variant {m!r}")
        if not self.models:
            raise ConfigError("need at least one model variant")
        for fid in self.freeze_configs:
            FreezeConfig.from_id(fid)
        if self.snippet_duration <= 0:
            raise ConfigError("snippet duration must be > 0")
        if self.snippet_offset is not None and self.snippet_offset < 0:
            raise ConfigError("snippet offset must be >= 0")
        if self.tolerance <= 0:
            raise ConfigError("tolerance must be > 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")


@dataclass(frozen=True)
class ResultRow:
    """One fine-tuning cycle: adapted scores against the unadapted baseline."""

    model: str
    instrument: str
    freeze_id: str
    mean_f1: float
    baseline_f1: float
    delta_pp: float
    n_files: int
    seed: int
    wall_s: float
    per_file_f1: tuple

    def __post_init__(self):
        if not 0.0 <= self.mean_f1 <= 1.0:
            raise ConfigError(f"mean F1 out of range: {self.mean_f1}")
        if abs(self.delta_pp - (self.mean_f1 - self.baseline_f1) * 100.0) > 1e-9:
            raise ConfigError("delta_pp does not match mean - baseline")
        if self.n_files != len(self.per_file_f1):
            raise ConfigError("n_files does not match per-file list")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in CSV_COLUMNS}
        d["per_file_f1"] = list(self.per_file_f1)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRow":
        kw = {k: d[k] for k in CSV_COLUMNS}
        kw["per_file_f1"] = tuple(float(v) for v in d["per_file_f1"])
        return cls(**kw)


def load_dataset(root) -> dict:
    """Map instrument -> file pairs, sorted by index.

    A directory containing manifest.txt is read as a synthetic corpus;
    otherwise each subdirectory is an instrument holding
    <name>_<nn>.wav + <name>_<nn>.onsets pairs (index 34 skipped).
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    out: dict = {}
    manifest = root / MANIFEST_NAME
    if manifest.exists():
        meta, entries = load_manifest(manifest)
        out = {name: [] for name in meta["instruments"]}
        for e in entries:
            out[e.instrument].append(
                FilePair(e.instrument, e.index, e.wav_path(root), e.onsets_path(root)))
    else:
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            pairs = []
            for wav in sorted(sub.glob(f"{sub.name}_*.wav")):
                tail = wav.stem[len(sub.name) + 1:]
                if not tail.isdigit():
                    continue
                index = int(tail)
                if index == EXCLUDED_REAL_INDEX:
                    continue
                onsets = wav.with_suffix(".onsets")
                if not onsets.exists():
                    raise DataError(f"missing annotations for {wav}")
                pairs.append(FilePair(sub.name, index, wav, onsets))
            if pairs:
                out[sub.name] = pairs
        if not out:
            raise DataError(f"no instruments found under {root}")
    for name in out:
        out[name] = sorted(out[name], key=lambda p: p.index)
    return out


def extract_snippet(pairs, offset: float | None = None, duration: float = 5.0):
    """Cut the fine-tuning snippet from the instrument's first file.

    Returns (features, targets, held_out_index); the held-out index is the
    snippet source file, to be excluded from every evaluation list. With
    offset=None the earliest 0.1 s-grid offset whose window contains an
    annotation is used.
    """
    if not pairs:
        raise ConfigError("no files for snippet extraction")
    first = min(pairs, key=lambda p: p.index)
    clip = load_audio(first.wav)
    ann = load_annotations(first.onsets)
    total = len(clip.samples) / clip.sample_rate
    if total + 1e-9 < duration:
        raise ConfigError(f"{first.wav.name} is {total:.2f} s, shorter than the {duration} s snippet")

    def window(o):
        return ann.times[(ann.times >= o) & (ann.times < o + duration)]

    if offset is None:
        k = 0
        offset = 0.0
        while offset + duration <= total + 1e-9:
            if window(offset).size:
                break
            k += 1
            offset = k * SNIPPET_OFFSET_GRID
        else:
            raise SnippetError(f"no {duration} s window of {first.wav.name} contains an annotation")
    elif offset + duration > total + 1e-9:
        raise ConfigError(f"snippet [{offset}, {offset + duration}) s overruns the {total:.2f} s file")

    sel = window(offset)
    if not sel.size:
        raise SnippetError(
            f"no annotations in [{offset:.2f}, {offset + duration:.2f}) s of {first.wav.name}; "
            "pick a different offset")
    s0 = int(round(offset * clip.sample_rate))
    s1 = s0 + int(round(duration * clip.sample_rate))
    feats = extract_features(AudioClip(clip.samples[s0:s1], clip.sample_rate))
    targets = make_targets(OnsetAnnotations(sel - offset), feats.n_frames)
    return feats, targets, first.index


def _load_eval_file(pair: FilePair, cache: dict | None):
    key = str(pair.wav)
    if cache is not None and key in cache:
        return cache[key]
    feats = extract_features(load_audio(pair.wav))
    ann = load_annotations(pair.onsets)
    if cache is not None:
        cache[key] = (feats, ann)
    return feats, ann


def evaluate_model(model: Model, pairs, exclude_index: int | None,
                   params: PeakPickParams | None = None, tolerance: float = 0.025,
                   cache: dict | None = None) -> EvalResult:
    """Run the model over every file except the held-out one and score it."""
    counts, ids = [], []
    for pair in sorted(pairs, key=lambda p: p.index):
        if pair.index == exclude_index:
            continue
        feats, ref = _load_eval_file(pair, cache)
        est = peak_pick(model.forward(feats), params)
        counts.append(match_onsets(est, ref, tolerance))
        ids.append(pair.index)
    if not counts:
        raise ConfigError("no evaluation files left after holdout")
    return aggregate(counts, ids)


def row_seed(global_seed: int, model: str, instrument: str, freeze_id: str) -> int:
    """Per-cycle seed from the row identity; independent of execution order."""
    ss = np.random.SeedSequence([global_seed, zlib.crc32(model.encode()),
                                 zlib.crc32(instrument.encode()), zlib.crc32(freeze_id.encode())])
    return int(ss.generate_state(1, np.uint32)[0])


def run_cycle(model_path, instrument: str, freeze_id: str, config: ExperimentConfig,
              dataset: dict | None = None, cache: dict | None = None,
              baseline: EvalResult | None = None) -> ResultRow:
    """Load base model, freeze, fine-tune on the snippet, evaluate held-in files.

    Verifies that every frozen tensor survives fine-tuning bitwise unchanged.
    """
    t0 = time.perf_counter()
    try:
        base = load_model(model_path)
        if dataset is None:
            dataset = load_dataset(_corpus_path(config))
        if instrument not in dataset:
            raise ConfigError(f"instrument {instrument!r} not in dataset")
        pairs = dataset[instrument]
        feats, targets, held = extract_snippet(pairs, config.snippet_offset, config.snippet_duration)
        freeze = FreezeConfig.from_id(freeze_id)
        seed = row_seed(config.seed, base.variant, instrument, freeze_id)
        ft = FinetuneConfig(freeze=freeze, seed=seed, epochs=config.epochs,
                            lr_scale=config.lr_scale, base_lr=config.base_lr,
                            dropout_active=config.dropout_active)
        adapted = finetune(base, (feats, targets), ft)
        _check_frozen_unchanged(base, adapted, freeze)
        result = evaluate_model(adapted, pairs, held, config.peak_pick, config.tolerance, cache)
        if baseline is None:
            baseline = evaluate_model(base, pairs, held, config.peak_pick, config.tolerance, cache)
        per_file = tuple(result.per_file[i][3] for i in sorted(result.per_file))
        return ResultRow(
            model=base.variant, instrument=instrument, freeze_id=freeze_id,
            mean_f1=result.mean_f1, baseline_f1=baseline.mean_f1,
            delta_pp=delta_pp(result, baseline), n_files=len(per_file),
            seed=seed, wall_s=time.perf_counter() - t0, per_file_f1=per_file,
        )
    except Exception as e:
        e.args = (f"[{instrument}/{freeze_id}] {e}",)
        raise


def _check_frozen_unchanged(base: Model, adapted: Model, freeze: FreezeConfig) -> None:
    before, after = base.param_dict(), adapted.param_dict()
    for layer in freeze.frozen:
        for key in before:
            if key.startswith(layer + "."):
                if before[key].tobytes() != after[key].tobytes():
                    raise OnsetKitError(f"frozen tensor {key} changed during fine-tuning")


def _corpus_path(config: ExperimentConfig):
    if isinstance(config.corpus, CorpusSpec):
        raise ConfigError("corpus is an inline spec; run the grid (or generate it) first")
    return Path(config.corpus)


def resolve_corpus(config: ExperimentConfig, threads: int = 1) -> Path:
    """Materialize an inline corpus spec under out_dir; pass paths through."""
    if isinstance(config.corpus, CorpusSpec):
        corpus_dir = Path(config.out_dir) / "corpus"
        generate_corpus(config.corpus, corpus_dir, force=True, threads=threads)
        return corpus_dir
    return Path(config.corpus)


def run_grid(config: ExperimentConfig, threads: int = 1) -> list:
    """Every (model, instrument, freeze) cycle; returns rows in grid order.

    Rows are journaled to <out_dir>/journal.jsonl as they complete; a
    failed cycle is recorded there and the grid continues without it.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus_dir = resolve_corpus(config, threads)
    dataset = load_dataset(corpus_dir)
    instruments = config.instruments or tuple(dataset)
    for name in instruments:
        if name not in dataset:
            raise ConfigError(f"instrument {name!r} not in corpus {corpus_dir}")
    for variant in config.models:
        if variant not in config.base_models:
            raise ConfigError(f"no base model configured for {variant}; pretrain first")

    cache: dict = {}
    baselines = {}
    for variant in config.models:
        base = load_model(config.base_models[variant])
        if base.variant != variant:
            raise ConfigError(f"{config.base_models[variant]} holds {base.variant}, expected {variant}")
        for name in instruments:
            try:
                _, _, held = extract_snippet(dataset[name], config.snippet_offset,
                                             config.snippet_duration)
                baselines[variant, name] = evaluate_model(
                    base, dataset[name], held, config.peak_pick, config.tolerance, cache)
            except Exception as e:  # recorded on every row of this pair, grid continues
                baselines[variant, name] = e

    jobs = [(variant, name, fid)
            for variant in config.models
            for name in instruments
            for fid in config.freeze_configs]
    rows: dict = {}
    journal = out / "journal.jsonl"

    def one(job):
        variant, name, fid = job
        baseline = baselines[variant, name]
        if isinstance(baseline, Exception):
            raise baseline
        return run_cycle(config.base_models[variant], name, fid, config,
                         dataset=dataset, cache=cache, baseline=baseline)

    with open(journal, "w") as log:
        def record(job, row=None, error=None):
            if error is None:
                entry = {"status": "ok", **row.to_dict()}
            else:
                entry = {"status": "error", "model": job[0], "instrument": job[1],
                         "freeze_id": job[2], "error": f"{type(error).__name__}: {error}"}
            log.write(json.dumps(entry) + "\n")
            log.flush()

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = {pool.submit(one, job): job for job in jobs}
                for fut in as_completed(futures):
                    job = futures[fut]
                    try:
                        rows[job] = fut.result()
                        record(job, row=rows[job])
                    except Exception as e:
                        record(job, error=e)
        else:
            for job in jobs:
                try:
                    rows[job] = one(job)
                    record(job, row=rows[job])
                except Exception as e:
                    record(job, error=e)
    return [rows[job] for job in jobs if job in rows]


def write_report(rows, out_dir) -> tuple:
    """Write results.csv (fixed column order) and summary.md (best per pair)."""
    if not rows:
        raise ConfigError("no rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# results-format: {RESULTS_FORMAT}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.model, r.instrument, r.freeze_id, repr(r.mean_f1),
                        repr(r.baseline_f1), repr(r.delta_pp), r.n_files, r.seed,
                        repr(r.wall_s), json.dumps(list(r.per_file_f1))])

    groups: dict = {}
    for r in rows:
        groups.setdefault((r.model, r.instrument), []).append(r)
    lines = [
        "# Fine-tuning summary",
        "",
        "Best freeze configuration per (model, instrument); ties share the cell.",
        "",
        "| model | instrument | best config | mean F1 | baseline F1 | delta (p.p.) |",
        "|---|---|---|---|---|---|",
    ]
    for (model, instrument), group in groups.items():
        best = max(r.mean_f1 for r in group)
        winners = [r for r in group if r.mean_f1 == best]
        ids = "/".join(r.freeze_id for r in winners)
        lines.append(f"| {model} | {instrument} | {ids} | {best:.3f} "
                     f"| {winners[0].baseline_f1:.3f} | {winners[0].delta_pp:+.1f} |")
    md_path = out / "summary.md"
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path


def read_results(path) -> list:
    """Parse a results.csv back into rows (inverse of write_report)."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read results {path}: {e}") from e
    lines = text.splitlines()
    if not lines or lines[0] != f"# results-format: {RESULTS_FORMAT}":
        raise DataError(f"{path}: not a results file")
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if tuple(header or ()) != CSV_COLUMNS:
        raise DataError(f"{path}: unexpected columns {header}")
    rows = []
    for rec in reader:
        if len(rec) != len(CSV_COLUMNS):
            raise DataError(f"{path}: row with {len(rec)} cells")
        d = dict(zip(CSV_COLUMNS, rec))
        try:
            rows.append(ResultRow(
                model=d["model"], instrument=d["instrument"], freeze_id=d["freeze_id"],
                mean_f1=float(d["mean_f1"]), baseline_f1=float(d["baseline_f1"]),
                delta_pp=float(d["delta_pp"]), n_files=int(d["n_files"]),
                seed=int(d["seed"]), wall_s=float(d["wall_s"]),
                per_file_f1=tuple(float(v) for v in json.loads(d["per_file_f1"])),
            ))
        except (ValueError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: {e}") from e
    return rows


def strip_wall_column(csv_text: str) -> str:
    """Results CSV minus the wall-time column, for determinism comparisons."""
    lines = csv_text.splitlines()
    if not lines or not lines[0].startswith("# results-format:"):
        raise DataError("not a results file")
    drop = CSV_COLUMNS.index("wall_s")
    buf = io.StringIO()
    buf.write(lines[0] + "\n")
    w = csv.writer(buf, lineterminator="\n")
    for rec in csv.reader(lines[1:]):
        w.writerow(rec[:drop] + rec[drop + 1:])
    return buf.getvalue()


def pretrain_model(corpus_dir, instruments, variant: str, epochs: int,
                   seed: int = 0, base_lr: float = 1e-3,
                   dropout_rate: float = 0.1) -> tuple:
    """Train a fresh base model on whole files of the given instruments.

    Targets come from each file's own annotations, so supervising on
    time-keeping instruments alone trains a beat-style detector.
    """
    dataset = load_dataset(corpus_dir)
    items = []
    for name in instruments:
        if name not in dataset:
            raise ConfigError(f"instrument {name!r} not in corpus {corpus_dir}")
        for pair in dataset[name]:
            feats = extract_features(load_audio(pair.wav))
            targets = make_targets(load_annotations(pair.onsets), feats.n_frames)
            items.append((feats, targets))
    model = build_model(variant, seed=seed, dropout_rate=dropout_rate)
    return train(model, items, epochs=epochs, lr=base_lr, seed=seed)


def _profile_from_json(obj: dict) -> InstrumentProfile:
    if set(obj) == {"name", "role", "profile_seed"}:
        return make_profile(obj["name"], obj["role"], int(obj["profile_seed"]))
    kw = dict(obj)
    try:
        kw["decay_span"] = tuple(kw["decay_span"])
        if "partial_ratios" in kw:
            kw["partial_ratios"] = tuple(kw["partial_ratios"])
        return InstrumentProfile(**kw)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"bad instrument profile {obj}: {e}") from e


def _profile_to_json(p: InstrumentProfile) -> dict:
    return {"name": p.name, "role": p.role, "decay_span": list(p.decay_span),
            "spectral_mode": p.spectral_mode, "center_freq": p.center_freq,
            "onset_density": p.onset_density, "amplitude_jitter": p.amplitude_jitter,
            "partial_ratios": list(p.partial_ratios), "attack_ms": p.attack_ms}


def _corpus_spec_from_json(obj: dict) -> CorpusSpec:
    known = {"instruments", "files_per_instrument", "file_duration", "tempo", "seed"}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown corpus keys {sorted(unknown)}")
    if "instruments" not in obj:
        raise ConfigError("corpus spec needs an instruments list")
    profiles = tuple(_profile_from_json(it) for it in obj["instruments"])
    kw = {k: obj[k] for k in known - {"instruments"} if k in obj}
    return CorpusSpec(profiles, **kw)


def _corpus_spec_to_json(spec: CorpusSpec) -> dict:
    return {"instruments": [_profile_to_json(p) for p in spec.instruments],
            "files_per_instrument": spec.files_per_instrument,
            "file_duration": spec.file_duration, "tempo": spec.tempo, "seed": spec.seed}


_CONFIG_KEYS = ("corpus", "base_models", "models", "instruments", "freeze_configs",
                "snippet_offset", "snippet_duration", "epochs", "lr_scale", "base_lr",
                "dropout_active", "peak_pick", "tolerance", "seed", "out_dir")


def config_from_json(obj: dict, base_dir=None) -> ExperimentConfig:
    """Build a config from parsed JSON; relative paths resolve against base_dir."""
    unknown = set(obj) - set(_CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if "corpus" not in obj:
        raise ConfigError("config needs a corpus (path or inline spec)")
    base = Path(base_dir) if base_dir is not None else None

    def respath(p):
        p = Path(p)
        return str(base / p) if base is not None and not p.is_absolute() else str(p)

    kw: dict = {}
    corpus = obj["corpus"]
    kw["corpus"] = _corpus_spec_from_json(corpus) if isinstance(corpus, dict) else respath(corpus)
    if "base_models" in obj:
        kw["base_models"] = {k: respath(v) for k, v in obj["base_models"].items()}
    for key in ("models", "freeze_configs"):
        if key in obj:
            kw[key] = tuple(obj[key])
    if obj.get("instruments") is not None:
        kw["instruments"] = tuple(obj["instruments"])
    if "peak_pick" in obj:
        kw["peak_pick"] = PeakPickParams(**obj["peak_pick"])
    for key in ("snippet_offset", "snippet_duration", "epochs", "lr_scale", "base_lr",
                "dropout_active", "tolerance", "seed"):
        if key in obj:
            kw[key] = obj[key]
    if "out_dir" in obj:
        kw["out_dir"] = respath(obj["out_dir"])
    try:
        return ExperimentConfig(**kw)
    except TypeError as e:
        raise ConfigError(f"bad config: {e}") from e


def config_to_json(config: ExperimentConfig) -> dict:
    corpus = config.corpus
    obj = {
        "corpus": _corpus_spec_to_json(corpus) if isinstance(corpus, CorpusSpec) else str(corpus),
        "base_models": {k: str(v) for k, v in config.base_models.items()},
        "models": list(config.models),
        "instruments": None if config.instruments is None else list(config.instruments),
        "freeze_configs": list(config.freeze_configs),
        "snippet_offset": config.snippet_offset,
        "snippet_duration": config.snippet_duration,
        "epochs": config.epochs,
        "lr_scale": config.lr_scale,
        "base_lr": config.base_lr,
        "dropout_active": config.dropout_active,
        "peak_pick": {k: getattr(config.peak_pick, k)
                      for k in ("threshold", "w_max", "w_avg", "delta", "min_gap")},
        "tolerance": config.tolerance,
        "seed": config.seed,
        "out_dir": str(config.out_dir),
    }
    return obj


def load_config(path) -> ExperimentConfig:
    """Read an experiment config JSON file."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return config_from_json(obj, base_dir=path.parent)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_json(config), indent=2, sort_keys=True) + "\n")
