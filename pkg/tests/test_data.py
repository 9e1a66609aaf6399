import numpy as np
import pytest

from cgmm_enhance.config import Config
from cgmm_enhance.data import (
    F0_RANGE,
    HARMONIC_RANGE,
    PAUSE_RANGE_S,
    SPEECH_PEAK,
    Manifest,
    MixSpec,
    active_speech_mask,
    build_corpus,
    load_split,
    measured_snr,
    mix_at_snr,
    plan_speech,
    synth_noise,
    synth_speech,
)
from cgmm_enhance.dsp import Waveform, read_wav
from cgmm_enhance.exceptions import DataError

RATE = 16000


def _small_config(tmp_path, seed=1):
    config = Config()
    for key, value in (("seed", seed), ("n_train", 2), ("n_val", 1), ("n_test", 3), ("duration_s", 1.0),
                       ("test_snrs", "0, 5"), ("data_dir", str(tmp_path / "corpus"))):
        config.set(key, value)
    config.validate()
    return config


def test_speech_is_deterministic_and_peak_normalized():
    a = synth_speech(7, 2.0, RATE)
    b = synth_speech(7, 2.0, RATE)
    c = synth_speech(8, 2.0, RATE)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert len(a) == 2 * RATE
    assert np.max(np.abs(a.samples)) == pytest.approx(SPEECH_PEAK)


@pytest.mark.parametrize("kind", ["white", "pink", "modulated"])
def test_noise_rms_and_determinism(kind):
    a = synth_noise(kind, 11, 1.5, RATE)
    b = synth_noise(kind, 11, 1.5, RATE)
    assert np.array_equal(a.samples, b.samples)
    assert len(a) == int(1.5 * RATE)
    assert np.sqrt(np.mean(a.samples ** 2)) == pytest.approx(1.0, rel=1e-12)


def _octave_band_db(samples, low=125.0, high=8000.0):
    spectrum = np.abs(np.fft.rfft(samples)) ** 2
    freqs = np.fft.rfftfreq(samples.shape[0], 1.0 / RATE)
    edges = []
    while low < high:
        edges.append((low, 2.0 * low))
        low *= 2.0
    return np.array([10.0 * np.log10(spectrum[(freqs >= a) & (freqs < b)].mean()) for a, b in edges])


@pytest.mark.parametrize("seed", range(5))
def test_speech_has_silent_frames(seed):
    w = synth_speech(seed, 2.0, RATE)
    frames = w.samples[: len(w) // 256 * 256].reshape(-1, 256)
    energies = np.sum(frames ** 2, axis=1)
    quiet = energies < energies.max() * 10.0 ** (-40.0 / 10.0)
    assert np.mean(quiet) >= 0.10
    # 开头至少有一段最短停顿
    lead = int(PAUSE_RANGE_S[0] * RATE)
    assert np.all(w.samples[:lead] == 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_speech_has_harmonic_peaks(seed):
    plan = plan_speech(seed, 2.0, RATE)
    w = synth_speech(seed, 2.0, RATE)
    start, stop, f0 = plan.syllables[0]
    segment = w.samples[start:stop] * np.hanning(stop - start)
    spectrum = np.abs(np.fft.rfft(segment, 1 << 17))
    freqs = np.fft.rfftfreq(1 << 17, 1.0 / RATE)

    def peak_near(freq):
        return spectrum[np.abs(freqs - freq) <= 8.0].max()

    for k in range(1, plan.n_harmonics + 1):
        if (k + 1) * f0 >= RATE / 2:
            break
        assert peak_near(k * f0) > 10.0 * peak_near((k + 0.5) * f0)


@pytest.mark.parametrize("seed", range(3))
def test_pink_noise_falls_three_db_per_octave(seed):
    bands = _octave_band_db(synth_noise("pink", seed, 2.0, RATE).samples)
    slope = np.polyfit(np.arange(bands.shape[0]), bands, 1)[0]
    assert slope == pytest.approx(-3.0, abs=0.5)


@pytest.mark.parametrize("seed", range(3))
def test_white_noise_is_flat_per_octave(seed):
    bands = _octave_band_db(synth_noise("white", seed, 2.0, RATE).samples)
    assert np.all(np.abs(bands - bands.mean()) <= 1.5)


def test_unknown_noise_kind():
    with pytest.raises(DataError):
        synth_noise("babble", 0, 1.0, RATE)


@pytest.mark.parametrize("snr_db", [-10.0, 0.0, 7.5, 20.0])
def test_mix_at_snr_hits_target(snr_db):
    clean = synth_speech(1, 1.0, RATE)
    noise = synth_noise("pink", 2, 1.0, RATE)
    mixture, scaled = mix_at_snr(clean, noise, snr_db)
    assert measured_snr(clean, scaled) == pytest.approx(snr_db, abs=1e-9)
    assert np.max(np.abs(mixture.samples - scaled.samples - clean.samples)) <= 1e-12


def test_mix_loops_short_noise():
    clean = synth_speech(1, 1.0, RATE)
    noise = Waveform(synth_noise("white", 3, 1.0, RATE).samples[:4000], RATE)
    mixture, scaled = mix_at_snr(clean, noise, 5.0)
    assert len(mixture) == len(clean)
    assert np.allclose(scaled.samples[4000:8000], scaled.samples[:4000])


def test_mix_rejects_bad_input():
    clean = synth_speech(1, 1.0, RATE)
    noise = synth_noise("white", 3, 1.0, RATE)
    with pytest.raises(DataError):
        mix_at_snr(clean, noise, float("inf"))
    with pytest.raises(DataError):
        mix_at_snr(Waveform(np.zeros(RATE), RATE), noise, 0.0)
    with pytest.raises(DataError):
        mix_at_snr(clean, Waveform(noise.samples, 8000), 0.0)


def test_mix_spec_validation():
    with pytest.raises(DataError):
        MixSpec(snr_db=float("nan"), speech_seed=0, noise_seed=1, duration_s=2.0, noise_kind="white")
    with pytest.raises(DataError):
        MixSpec(snr_db=0.0, speech_seed=0, noise_seed=1, duration_s=0.5, noise_kind="white")
    with pytest.raises(DataError):
        MixSpec(snr_db=0.0, speech_seed=0, noise_seed=1, duration_s=2.0, noise_kind="brown")


def test_build_corpus_layout(tmp_path):
    config = _small_config(tmp_path)
    manifest = build_corpus(config)
    assert len(manifest) == 6
    assert [len(manifest.split(s)) for s in ("train", "val", "test")] == [2, 1, 3]
    assert [row.snr_db for row in manifest.split("test")] == [0.0, 5.0, 0.0]
    for row in manifest:
        for rel in (row.clean, row.noise, row.mixture):
            assert (manifest.root / rel).is_file()
        assert row.achieved_snr_db == pytest.approx(row.snr_db, abs=1e-5)
        assert -5.0 <= row.snr_db <= 20.0 or row.split == "test"

    seeds = [row.speech_seed for row in manifest] + [row.noise_seed for row in manifest]
    assert len(set(seeds)) == len(seeds)


def test_corpus_files_are_additive(tmp_path):
    manifest = build_corpus(_small_config(tmp_path))
    row = manifest.split("train")[0]
    clean = read_wav(manifest.root / row.clean).samples
    noise = read_wav(manifest.root / row.noise).samples
    mixture = read_wav(manifest.root / row.mixture).samples
    # WAV 为 float32
    assert np.max(np.abs(mixture - noise - clean)) <= 1e-6


def test_corpus_is_reproducible(tmp_path):
    a = build_corpus(_small_config(tmp_path / "a"))
    b = build_corpus(_small_config(tmp_path / "b"))
    assert a.render() == b.render()
    assert a.digest() == b.digest()
    for row_a, row_b in zip(a, b):
        assert (a.root / row_a.mixture).read_bytes() == (b.root / row_b.mixture).read_bytes()

    other = build_corpus(_small_config(tmp_path / "c", seed=2))
    assert other.digest() != a.digest()


def test_manifest_load_and_split(tmp_path):
    built = build_corpus(_small_config(tmp_path))
    loaded = Manifest.load(built.root)
    assert loaded.rows == built.rows
    assert Manifest.load(built.root / "manifest.jsonl").root == built.root

    utts = load_split(loaded, "test")
    assert [u.uid for u in utts] == [row.uid for row in loaded.split("test")]
    utt = utts[0]
    assert utt.noisy.coefficients.shape == utt.clean.coefficients.shape == utt.noise.coefficients.shape
    assert utt.noisy.n_freq == 257
    assert len(utt.noisy_wave) == RATE


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        Manifest.load(tmp_path / "nowhere")
    bad = tmp_path / "manifest.jsonl"
    bad.write_text('{"uid": "x"}\n', encoding="utf-8")
    with pytest.raises(DataError):
        Manifest.load(bad)

    built = build_corpus(_small_config(tmp_path / "ok"))
    with pytest.raises(DataError):
        load_split(built, "holdout")
    (built.root / built.split("val")[0].clean).unlink()
    with pytest.raises(DataError):
        load_split(built, "val")


def test_speech_plan_layout():
    plan = plan_speech(4, 2.0, RATE)
    assert plan == plan_speech(4, 2.0, RATE)
    assert HARMONIC_RANGE[0] <= plan.n_harmonics <= HARMONIC_RANGE[1]
    assert plan.syllables
    min_gap = int(PAUSE_RANGE_S[0] * RATE) - 1
    previous_end = 0
    for start, stop, f0 in plan.syllables:
        assert start - previous_end >= min_gap
        assert start < stop <= plan.num_samples
        assert F0_RANGE[0] <= f0 <= F0_RANGE[1]
        previous_end = stop


def test_active_speech_mask():
    w = Waveform(np.array([1.0, 0.005, -0.02, 0.0]), RATE)
    assert active_speech_mask(w).tolist() == [True, False, True, False]
    assert not active_speech_mask(Waveform(np.zeros(4), RATE)).any()
