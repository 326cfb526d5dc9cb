import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from soilecho.errors import ConfigError, NoSyncError
from soilecho.fmcw import (
    ChirpConfig,
    TemplateProfile,
    Waveform,
    cancel_direct_path,
    capture_template,
    dechirp,
    detect_chirp_boundaries,
    generate_chirp,
    generate_tx_stream,
    range_profile,
    range_spectrum,
    short_time_energy,
)
from soilecho.simulate import delayed_chirps


def test_default_sample_counts(cfg):
    assert (cfg.chirp_samples, cfg.gap_samples, cfg.cycle_samples) == (480, 240, 720)


def test_resolution_figures(cfg):
    # 25 Hz per bin over a 1.5 MHz/s sweep, round trip at 343 m/s
    assert cfg.bin_distance == pytest.approx(343 * 25 / (2 * 1.5e6), rel=1e-12)
    assert cfg.bin_distance == pytest.approx(2.8583e-3, abs=1e-7)
    assert cfg.range_resolution == pytest.approx(343 / 30000, rel=1e-12)
    assert cfg.center_wavelength == pytest.approx(343 / 14500)


@pytest.mark.parametrize("kw", [
    dict(f0=22000, f1=7000),
    dict(f1=30000),
    dict(chirp_duration=0.01001),
    dict(dft_size=256),
    dict(amplitude=0.0),
    dict(sync_ratio=1.0),
])
def test_bad_config_rejected(kw):
    with pytest.raises(ConfigError):
        ChirpConfig(**kw)


def test_config_round_trip(cfg):
    assert ChirpConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ChirpConfig.from_dict({"bogus": 1})


def test_chirp_matches_scipy_linear_chirp(cfg):
    w = generate_chirp(cfg)
    t = np.arange(cfg.chirp_samples) / cfg.sample_rate
    ref = cfg.amplitude * signal.chirp(t, f0=cfg.f0, t1=cfg.chirp_duration, f1=cfg.f1, method="linear")
    np.testing.assert_allclose(w.samples, ref, atol=1e-9)


def test_tx_stream_has_silent_gaps(cfg):
    x = generate_tx_stream(cfg, 3).samples
    assert x.size == 3 * 720
    assert np.all(x[480:720] == 0) and np.all(x[720 + 480:1440] == 0)
    np.testing.assert_array_equal(x[:480], x[720:1200])


def test_short_time_energy_against_loop(rng):
    x = rng.standard_normal(200)
    e = short_time_energy(x, 20)
    naive = np.array([np.sum(x[max(0, n - 19):n + 1] ** 2) for n in range(x.size)])
    np.testing.assert_allclose(e, naive, rtol=1e-12)


def test_short_time_energy_exact_zero_on_silence():
    x = np.concatenate([np.ones(50), np.zeros(100)])
    e = short_time_energy(x, 20)
    assert np.all(e[69:] == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=80), st.integers(1, 10))
def test_short_time_energy_properties(values, window):
    x = np.array(values)
    if window > x.size:
        window = x.size
    e = short_time_energy(x, window)
    assert e.shape == x.shape
    assert np.all(e >= 0)
    assert e[-1] == pytest.approx(np.sum(x[-window:] ** 2), rel=1e-9, abs=1e-9)


def _reflector(cfg, d, amp=1.0):
    tau = 2 * d / cfg.speed_of_sound
    return delayed_chirps(np.array([tau]), np.array([amp]), np.zeros(1), cfg, cfg.chirp_samples)


def test_dechirp_beat_frequency(cfg):
    d = 0.10
    beat = dechirp(_reflector(cfg, d), cfg)
    # fine-grained spectrum of the conjugated beat over the overlap region
    start = int(np.ceil(2 * d / cfg.speed_of_sound * cfg.sample_rate))
    seg = np.conj(beat[start:])
    spec = np.abs(np.fft.fft(seg, 1 << 18))
    freqs = np.fft.fftfreq(1 << 18, 1 / cfg.sample_rate)
    expected = cfg.slope * 2 * d / cfg.speed_of_sound
    assert freqs[np.argmax(spec)] == pytest.approx(expected, abs=2.0)


def test_range_spectrum_matches_independent_fft(cfg, rng):
    beat = rng.standard_normal(480) + 1j * rng.standard_normal(480)
    ref = np.abs(np.fft.fft(np.conj(beat) * signal.windows.blackman(480, sym=True), 1920))[:960]
    np.testing.assert_allclose(range_spectrum(beat, cfg), ref, rtol=1e-10)


def test_range_spectrum_batches(cfg, rng):
    beats = rng.standard_normal((3, 480))
    batch = range_spectrum(beats, cfg)
    for i in range(3):
        np.testing.assert_allclose(batch[i], range_spectrum(beats[i], cfg))


@pytest.mark.parametrize("d", [0.05, 0.10, 0.15])
def test_reflector_peak_bin(cfg, d):
    p = range_profile(dechirp(_reflector(cfg, d), cfg), cfg)
    assert abs(np.argmax(p.magnitudes) * p.bin_distance - d) <= cfg.bin_distance
    assert p.n_bins == 960
    assert p.distances[1] == pytest.approx(cfg.bin_distance)


def test_dechirp_shape_check(cfg):
    with pytest.raises(ValueError):
        dechirp(np.zeros(100), cfg)


def _stream(cfg, offset, n_chirps, rng, snr_db=20.0):
    tx = generate_tx_stream(cfg, n_chirps).samples
    x = np.concatenate([np.zeros(offset), tx, np.zeros(cfg.cycle_samples)])
    p_sig = np.mean(generate_chirp(cfg).samples ** 2)
    x = x + rng.normal(0, np.sqrt(p_sig / 10 ** (snr_db / 10)), x.size)
    return x


@pytest.mark.parametrize("offset", [0, 1, 239, 240, 500, 719, 1000])
def test_sync_recovers_offsets(cfg, rng, offset):
    sync = detect_chirp_boundaries(_stream(cfg, offset, 8, rng), cfg)
    assert sync.locked
    np.testing.assert_array_equal(sync.chirp_starts[:8], offset + 720 * np.arange(8))


def test_sync_silence_raises(cfg):
    with pytest.raises(NoSyncError):
        detect_chirp_boundaries(np.zeros(10 * 720), cfg)


def test_sync_white_noise_raises(cfg, rng):
    with pytest.raises(NoSyncError):
        detect_chirp_boundaries(rng.standard_normal(10 * 720), cfg)


def test_sync_too_short_raises(cfg):
    with pytest.raises(NoSyncError):
        detect_chirp_boundaries(generate_tx_stream(cfg, 2).samples, cfg)


def test_sync_needs_consistent_cycles(cfg):
    # two chirps only: one cycle confirmed, never three
    x = np.concatenate([np.zeros(300), generate_tx_stream(cfg, 2).samples, np.zeros(3000)])
    with pytest.raises(NoSyncError):
        detect_chirp_boundaries(x, cfg)


def test_template_cancellation(cfg, rng):
    profiles = np.abs(rng.standard_normal((10, 960)))
    t = capture_template(profiles)
    assert t.n_averaged == 10
    np.testing.assert_allclose(t.magnitudes, profiles.mean(axis=0))
    out = cancel_direct_path(profiles, t)
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
    with pytest.raises(ValueError):
        cancel_direct_path(np.zeros(10), t)


def test_template_rejects_bad_input():
    with pytest.raises(ValueError):
        capture_template([])
    with pytest.raises(ValueError):
        capture_template([np.zeros(4), np.zeros(5)])
    with pytest.raises(ValueError):
        TemplateProfile(np.zeros(4), n_averaged=0)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), 48000)
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 2)), 48000)


def test_blackman_sidelobes_below_50_db(cfg):
    t = np.arange(cfg.chirp_samples) / cfg.sample_rate
    tone = np.exp(-2j * np.pi * 2000.0 * t)
    spec = range_spectrum(tone, cfg)
    k = int(np.argmax(spec))
    # walk down the main lobe to its first nulls
    lo = k
    while lo > 0 and spec[lo - 1] < spec[lo]:
        lo -= 1
    hi = k
    while hi < spec.size - 1 and spec[hi + 1] < spec[hi]:
        hi += 1
    side = np.concatenate([spec[:lo], spec[hi + 1:]]).max()
    assert 20 * np.log10(side / spec[k]) < -50


def test_two_reflectors_both_resolved(cfg):
    d1, d2 = 0.05, 0.14
    rx = _reflector(cfg, d1) + _reflector(cfg, d2, 0.7)
    mags = range_profile(dechirp(rx, cfg), cfg).magnitudes
    for d in (d1, d2):
        alone = int(np.argmax(range_profile(dechirp(_reflector(cfg, d), cfg), cfg).magnitudes))
        window = mags[alone - 8: alone + 9]
        assert abs(int(np.argmax(window)) - 8) <= 1


def test_noiseless_onsets_exact(cfg):
    from soilecho.fmcw import sync_ratio_trace
    x = np.concatenate([np.zeros(333), generate_tx_stream(cfg, 6).samples])
    ratio, _ = sync_ratio_trace(x, cfg)
    sync = detect_chirp_boundaries(x, cfg)
    np.testing.assert_array_equal(sync.chirp_starts, 333 + 720 * np.arange(6))
    assert np.all(ratio[333 + 720 * np.arange(1, 6)] > cfg.sync_ratio)
