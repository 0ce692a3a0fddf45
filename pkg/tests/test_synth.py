import numpy as np
import pytest

from onsetkit.audio import TARGET_RATE, load_annotations, load_audio
from onsetkit.errors import ConfigError, DataError
from onsetkit.features import extract_features
from onsetkit.synth import (
    CorpusSpec,
    InstrumentProfile,
    default_instruments,
    file_seed,
    generate_corpus,
    load_manifest,
    make_profile,
    render_file,
    render_hits,
)
from onsetkit.training import make_targets


def tone_profile(**kw):
    base = dict(name="t", role="voicing", decay_span=(100.0, 100.0),
                spectral_mode="damped-tone", center_freq=440.0,
                onset_density=8.9, amplitude_jitter=0.0)
    base.update(kw)
    return InstrumentProfile(**base)


def test_profile_validation():
    with pytest.raises(ConfigError):
        tone_profile(role="lead")
    with pytest.raises(ConfigError):
        tone_profile(spectral_mode="fm")
    with pytest.raises(ConfigError):
        tone_profile(decay_span=(30.0, 100.0))
    with pytest.raises(ConfigError):
        tone_profile(decay_span=(100.0, 500.0))
    with pytest.raises(ConfigError):
        tone_profile(center_freq=0.0)
    with pytest.raises(ConfigError):
        tone_profile(name="bad name")
    with pytest.raises(ConfigError):
        CorpusSpec((tone_profile(),), files_per_instrument=1)
    with pytest.raises(ConfigError):
        CorpusSpec((tone_profile(),), tempo=120.0)
    with pytest.raises(ConfigError):
        CorpusSpec((tone_profile(), tone_profile()))  # duplicate names


def test_make_profile_deterministic():
    a = make_profile("foo", "voicing", 7)
    b = make_profile("foo", "voicing", 7)
    assert a == b
    c = make_profile("foo", "voicing", 8)
    assert a != c
    with pytest.raises(ConfigError):
        make_profile("foo", "melody", 7)


def test_make_profile_role_statistics():
    for seed in range(6):
        tk = make_profile("a", "time-keeping", seed)
        vo = make_profile("b", "voicing", seed)
        assert abs(tk.onset_density - 2.5) <= 0.5
        assert abs(vo.onset_density - 8.9) <= 1.78
        for p in (tk, vo):
            lo, hi = p.decay_span
            assert 50.0 <= lo <= hi <= 450.0
        assert tk.role == "time-keeping" and vo.role == "voicing"


def test_time_keeping_hits_on_beat_grid():
    prof = make_profile("keeper", "time-keeping", 3)
    _, ann = render_file(prof, 30.0, 165.0, 11)
    times = ann.times
    assert len(times) >= 40
    beat = 60.0 / 165.0
    iois = np.diff(times)
    # median inter-onset interval sits on one beat
    assert abs(np.median(iois) - beat) <= 0.005
    # every interval is a whole number of beats (sample rounding aside)
    assert np.all(np.abs(iois / beat - np.round(iois / beat)) < 0.005)
    density = len(times) / 30.0
    assert abs(density - 2.5) <= 0.5 + 0.35  # +-20% target, finite-file slack


def test_voicing_hits_fill_16th_grid():
    prof = make_profile("filler", "voicing", 4)
    _, ann = render_file(prof, 30.0, 180.0, 12)
    times = ann.times
    # expected roughly 267 hits, +-20% plus finite-file slack
    assert 190 <= len(times) <= 330
    step = 60.0 / 180.0 / 4.0
    iois = np.diff(times)
    assert np.min(iois) >= step - 0.011  # jitter can shrink a slot by <= 2x5ms
    # intervals cluster on multiples of the 16th grid up to jitter
    frac = np.abs(iois / step - np.round(iois / step)) * step
    assert np.max(frac) <= 0.0105


def test_render_zero_density_is_silent():
    prof = tone_profile(onset_density=0.0)
    clip, ann = render_file(prof, 5.0, 180.0, 0)
    assert len(ann) == 0
    assert np.all(clip.samples == 0.0)


def test_render_single_hit_position():
    prof = tone_profile(decay_span=(380.0, 380.0))
    clip, ann = render_hits(prof, [1.0], 5.0, 2)
    assert list(ann.times) == [int(round(1.0 * TARGET_RATE)) / TARGET_RATE]
    nz = np.where(np.abs(clip.samples) > 1e-4)[0]
    assert 0.998 * TARGET_RATE <= nz[0] <= 1.002 * TARGET_RATE
    # envelope decays: early window carries more energy than a later one
    s = clip.samples
    early = np.sqrt(np.mean(s[int(1.00 * TARGET_RATE):int(1.10 * TARGET_RATE)] ** 2))
    late = np.sqrt(np.mean(s[int(1.25 * TARGET_RATE):int(1.35 * TARGET_RATE)] ** 2))
    assert early > 2.0 * late
    assert np.max(np.abs(s)) <= 1.0


def test_rendered_hits_make_one_target_frame_each():
    prof = make_profile("filler", "voicing", 9)
    clip, ann = render_file(prof, 6.0, 180.0, 21)
    feats = extract_features(clip)
    targets = make_targets(ann, feats.n_frames)
    assert int(np.sum(targets == 1.0)) == len(ann)


def test_corpus_layout_and_manifest(tmp_path):
    spec = CorpusSpec((make_profile("alpha", "time-keeping", 0),
                       make_profile("beta", "voicing", 0)),
                      files_per_instrument=2, file_duration=5.0, tempo=180.0, seed=5)
    manifest = generate_corpus(spec, tmp_path / "c")
    wavs = sorted(p.name for p in (tmp_path / "c").glob("*.wav"))
    assert wavs == ["alpha_01.wav", "alpha_02.wav", "beta_01.wav", "beta_02.wav"]
    assert len(list((tmp_path / "c").glob("*.onsets"))) == 4
    meta, entries = load_manifest(manifest)
    assert meta["seed"] == 5 and meta["instruments"] == ("alpha", "beta")
    assert len(entries) == 4
    for e in entries:
        assert e.wav_path(tmp_path / "c").exists()
        assert e.onsets_path(tmp_path / "c").exists()
    # overwrite refused without force, allowed with it
    with pytest.raises(FileExistsError):
        generate_corpus(spec, tmp_path / "c")
    generate_corpus(spec, tmp_path / "c", force=True)


def test_corpus_bitwise_determinism(tmp_path):
    spec = CorpusSpec((make_profile("alpha", "time-keeping", 0),
                       make_profile("beta", "voicing", 0)),
                      files_per_instrument=2, file_duration=5.0, seed=9)
    m1 = generate_corpus(spec, tmp_path / "one", threads=1)
    m2 = generate_corpus(spec, tmp_path / "two", threads=3)
    assert m1.read_bytes() == m2.read_bytes()
    for p1 in sorted((tmp_path / "one").iterdir()):
        p2 = tmp_path / "two" / p1.name
        assert p1.read_bytes() == p2.read_bytes(), p1.name


def test_corpus_round_trip_matches_render(tmp_path):
    spec = CorpusSpec((make_profile("gamma", "voicing", 1),),
                      files_per_instrument=2, file_duration=5.0, tempo=165.0, seed=3)
    generate_corpus(spec, tmp_path)
    clip, ann = render_file(spec.instruments[0], 5.0, 165.0, file_seed(3, "gamma", 1))
    stored = load_audio(tmp_path / "gamma_01.wav")
    # wav is 16-bit, so compare within one quantization step
    assert np.max(np.abs(stored.samples - clip.samples)) <= 1.0 / 32768.0
    stored_ann = load_annotations(tmp_path / "gamma_01.onsets")
    assert len(stored_ann) == len(ann)
    assert np.max(np.abs(stored_ann.times - ann.times)) <= 1e-4


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("not a manifest\n")
    with pytest.raises(DataError):
        load_manifest(p)
    p.write_text("onsetkit-corpus 1\nseed 1\nbogus x\n")
    with pytest.raises(DataError):
        load_manifest(p)
    p.write_text("onsetkit-corpus 1\nseed 1\n")
    with pytest.raises(DataError):
        load_manifest(p)  # missing keys
    with pytest.raises(DataError):
        load_manifest(tmp_path / "absent.txt")


def test_default_roster_shape():
    roster = default_instruments()
    assert len(roster) == 5
    roles = [p.role for p in roster]
    assert roles.count("time-keeping") == 2 and roles.count("voicing") == 3
    names = {p.name for p in roster}
    assert len(names) == 5
    # the held-out outlier rings long with a slow attack
    bell = next(p for p in roster if p.name == "ring_bell")
    assert bell.attack_ms >= 20.0 and bell.decay_span[0] >= 350.0
    assert any(abs(r - round(r)) > 0.1 for r in bell.partial_ratios)
