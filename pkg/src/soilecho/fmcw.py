"""FMCW chirp generation, chirp synchronization and range-profile extraction.

The transmit stream is a train of linear up-chirps separated by silent gaps.
On the receive side the gaps are used to find chirp onsets by an energy
ratio test, each received chirp is mixed down against the analytic transmit
chirp and the resulting beat tone is turned into a range profile.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NoSyncError


def _as_count(value: float, what: str) -> int:
    n = int(round(value))
    if abs(value - n) > 1e-6 or n <= 0:
        raise ConfigError(f"{what} must be a positive integer sample count, got {value!r}")
    return n


@dataclass(frozen=True)
class ChirpConfig:
    """FMCW waveform parameters.

    Defaults give 10 ms chirps sweeping 7 to 22 kHz at 48 kHz with a 5 ms
    gap, so one cycle is 720 samples, and a 1920-point DFT (4x zero padding).
    """

    f0: float = 7000.0
    f1: float = 22000.0
    chirp_duration: float = 0.010
    gap_duration: float = 0.005
    sample_rate: float = 48000.0
    amplitude: float = 0.8
    dft_size: int = 1920
    speed_of_sound: float = 343.0
    energy_window: int = 20
    sync_ratio: float = 8.0

    def __post_init__(self):
        if not (self.f1 > self.f0 > 0):
            raise ConfigError(f"need f1 > f0 > 0, got f0={self.f0}, f1={self.f1}")
        if self.sample_rate <= 0 or self.speed_of_sound <= 0:
            raise ConfigError("sample_rate and speed_of_sound must be positive")
        if self.f1 > self.sample_rate / 2:
            raise ConfigError("f1 exceeds the Nyquist frequency")
        if not np.isfinite(self.amplitude) or self.amplitude <= 0:
            raise ConfigError("amplitude must be positive and finite")
        # these raise on non-integer counts
        n_chirp = _as_count(self.chirp_duration * self.sample_rate, "chirp_duration*sample_rate")
        _as_count(self.gap_duration * self.sample_rate, "gap_duration*sample_rate")
        if self.dft_size < n_chirp:
            raise ConfigError(f"dft_size {self.dft_size} shorter than chirp ({n_chirp} samples)")
        if self.energy_window < 1:
            raise ConfigError("energy_window must be >= 1")
        if self.sync_ratio <= 1:
            raise ConfigError("sync_ratio must exceed 1")

    @property
    def bandwidth(self) -> float:
        return self.f1 - self.f0

    @property
    def slope(self) -> float:
        """Sweep rate B/T in Hz per second."""
        return self.bandwidth / self.chirp_duration

    @property
    def chirp_samples(self) -> int:
        return int(round(self.chirp_duration * self.sample_rate))

    @property
    def gap_samples(self) -> int:
        return int(round(self.gap_duration * self.sample_rate))

    @property
    def cycle_samples(self) -> int:
        return self.chirp_samples + self.gap_samples

    @property
    def cycle_duration(self) -> float:
        return self.cycle_samples / self.sample_rate

    @property
    def bin_spacing_hz(self) -> float:
        return self.sample_rate / self.dft_size

    @property
    def bin_distance(self) -> float:
        """Distance covered by one DFT bin, c*df/(2B/T)."""
        return self.speed_of_sound * self.bin_spacing_hz / (2.0 * self.slope)

    @property
    def range_resolution(self) -> float:
        """Bandwidth-limited resolution v/(2B)."""
        return self.speed_of_sound / (2.0 * self.bandwidth)

    @property
    def center_wavelength(self) -> float:
        return self.speed_of_sound / (0.5 * (self.f0 + self.f1))

    def to_dict(self) -> dict:
        return {
            "f0": self.f0,
            "f1": self.f1,
            "chirp_duration": self.chirp_duration,
            "gap_duration": self.gap_duration,
            "sample_rate": self.sample_rate,
            "amplitude": self.amplitude,
            "dft_size": self.dft_size,
            "speed_of_sound": self.speed_of_sound,
            "energy_window": self.energy_window,
            "sync_ratio": self.sync_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "ChirpConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown chirp config keys: {sorted(unknown)}")
        if "dft_size" in d:
            d["dft_size"] = int(d["dft_size"])
        if "energy_window" in d:
            d["energy_window"] = int(d["energy_window"])
        return cls(**d)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class SyncResult:
    chirp_starts: np.ndarray
    locked: bool
    cycles_confirmed: int


@dataclass
class RangeProfile:
    """One range profile: a magnitude per distance bin.

    After direct-path cancellation the magnitudes may be negative.
    """

    magnitudes: np.ndarray
    bin_distance: float
    range_resolution: float = float("nan")

    @property
    def n_bins(self) -> int:
        return int(self.magnitudes.shape[-1])

    @property
    def distances(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.bin_distance


@dataclass
class TemplateProfile:
    magnitudes: np.ndarray
    n_averaged: int = field(default=1)

    def __post_init__(self):
        if self.n_averaged < 1:
            raise ValueError("n_averaged must be >= 1")


def chirp_phase(t: np.ndarray, cfg: ChirpConfig) -> np.ndarray:
    """Instantaneous phase 2*pi*(f0*t + B*t^2/(2T)) in radians."""
    return 2.0 * np.pi * (cfg.f0 * t + 0.5 * cfg.slope * t * t)


def generate_chirp(cfg: ChirpConfig) -> Waveform:
    t = np.arange(cfg.chirp_samples) / cfg.sample_rate
    return Waveform(cfg.amplitude * np.cos(chirp_phase(t, cfg)), cfg.sample_rate)


def generate_tx_stream(cfg: ChirpConfig, n_chirps: int) -> Waveform:
    """Concatenate ``n_chirps`` cycles of (chirp, silent gap)."""
    if n_chirps < 1:
        raise ValueError("n_chirps must be >= 1")
    cycle = np.zeros(cfg.cycle_samples)
    cycle[: cfg.chirp_samples] = generate_chirp(cfg).samples
    return Waveform(np.tile(cycle, n_chirps), cfg.sample_rate)


def short_time_energy(w: Waveform | np.ndarray, window: int) -> np.ndarray:
    """Sliding energy ``E[n] = sum_{k<W} x[n-k]^2`` over the trailing window.

    The first ``window - 1`` outputs sum over the available prefix only.
    Summation is direct (no running cumulative sum) so silent stretches give
    exactly zero energy.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty waveform")
    if window < 1 or window > x.size:
        raise ValueError(f"window must be in [1, {x.size}], got {window}")
    return np.convolve(x * x, np.ones(window))[: x.size]


def sync_ratio_trace(w: Waveform | np.ndarray, cfg: ChirpConfig):
    """Chirp-prefix over preceding-gap energy ratio at every sample.

    Both regions are ``gap_samples`` long and are assembled from blocks of the
    short-time energy, so the region length must be a multiple of
    ``energy_window``. Near the start of the recording the gap region is
    extrapolated from the blocks that lie inside it; with less than one
    block available the ratio is reported as 0.

    Returns
    -------
    ratio, prefix_energy : ndarray
        Arrays aligned with the input samples.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    L, W = cfg.gap_samples, cfg.energy_window
    if L % W:
        raise ConfigError(f"gap length {L} is not a multiple of energy_window {W}")
    n = x.size
    xp = np.concatenate([np.zeros(L), x, np.zeros(L)])
    e = short_time_energy(xp, W)
    gap = np.zeros(n)
    pre = np.zeros(n)
    for m in range(L // W):
        gap += e[L - 1 - m * W: L - 1 - m * W + n]
        pre += e[2 * L - 1 - m * W: 2 * L - 1 - m * W + n]
    inside = np.minimum(np.arange(n), L)
    valid = inside >= W
    gap = np.where(valid, gap * L / np.maximum(inside, 1), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(gap > 0, pre / np.where(gap > 0, gap, 1.0), np.where(pre > 0, np.inf, 0.0))
    ratio[~valid] = 0.0
    return ratio, pre


def _onset_peaks(ratio: np.ndarray, prefix: np.ndarray, threshold: float, merge: int) -> np.ndarray:
    idx = np.flatnonzero(ratio > threshold)
    if idx.size == 0:
        return idx
    splits = np.flatnonzero(np.diff(idx) > merge) + 1
    peaks = []
    for run in np.split(idx, splits):
        # highest ratio wins; equal ratios (e.g. several inf) go to the largest prefix energy
        order = np.lexsort((-prefix[run], -ratio[run]))
        peaks.append(run[order[0]])
    return np.asarray(peaks, dtype=np.int64)


def _wrap(d: np.ndarray, cyc: int) -> np.ndarray:
    return (d + cyc // 2) % cyc - cyc // 2


def detect_chirp_boundaries(w: Waveform | np.ndarray, cfg: ChirpConfig, n_confirm: int = 3,
                            tolerance: int = 1) -> SyncResult:
    """Locate chirp onsets from the silent-gap energy pattern.

    Candidate onsets are local maxima of the prefix/gap energy ratio where
    it exceeds ``cfg.sync_ratio``. Lock is declared on the first candidate
    followed by ``n_confirm - 1`` further candidates at cycle spacing
    (within ``tolerance`` samples). The grid phase is then taken as the
    majority over all on-grid candidates, and chirp starts are laid out on
    that grid from the earliest slot that carries chirp energy.

    Raises
    ------
    NoSyncError
        If no run of ``n_confirm`` consistent cycles exists.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    cyc = cfg.cycle_samples
    if x.size <= n_confirm * cyc:
        raise NoSyncError(f"recording of {x.size} samples is shorter than {n_confirm} cycles")
    ratio, prefix = sync_ratio_trace(x, cfg)
    peaks = _onset_peaks(ratio, prefix, cfg.sync_ratio, merge=cfg.gap_samples // 2)
    if peaks.size < n_confirm:
        raise NoSyncError("too few energy onsets above the sync ratio")

    lock = None
    for p in peaks:
        if all(np.any(np.abs(peaks - (p + k * cyc)) <= tolerance) for k in range(1, n_confirm)):
            lock = int(p)
            break
    if lock is None:
        raise NoSyncError(f"no {n_confirm} consecutive cycles at {cyc}-sample spacing")

    # the first onset of a stream has no chirp tail in front of it and can
    # be off by a sample under noise, so the phase is a vote over all onsets
    offset = _wrap(peaks - lock, cyc)
    on_grid = (np.abs(offset) <= tolerance) & (peaks >= lock)
    vals, counts = np.unique(offset[on_grid], return_counts=True)
    phase = (lock + int(vals[np.argmax(counts)])) % cyc

    grid = phase + cyc * np.arange((x.size - cfg.chirp_samples - phase) // cyc + 1, dtype=np.int64)
    level = np.median(prefix[peaks[on_grid]])
    active = np.flatnonzero(prefix[grid] >= 0.25 * level)
    starts = grid[active[0]:] if active.size else grid[grid >= lock]
    return SyncResult(chirp_starts=starts, locked=True, cycles_confirmed=int(on_grid.sum()))


def reference_chirp(cfg: ChirpConfig) -> np.ndarray:
    """Analytic (complex exponential) transmit chirp, unit amplitude."""
    t = np.arange(cfg.chirp_samples) / cfg.sample_rate
    return np.exp(1j * chirp_phase(t, cfg))


def dechirp(rx_chirp: Waveform | np.ndarray, cfg: ChirpConfig) -> np.ndarray:
    """Mix received chirp(s) with the conjugate analytic transmit chirp.

    Accepts a single chirp or a stack of chirps along the last axis. An echo
    delayed by ``tau`` mixes down to a tone of magnitude ``slope * tau``.
    """
    x = rx_chirp.samples if isinstance(rx_chirp, Waveform) else np.asarray(rx_chirp)
    if x.shape[-1] != cfg.chirp_samples:
        raise ValueError(f"expected {cfg.chirp_samples} samples per chirp, got {x.shape[-1]}")
    return x * np.conj(reference_chirp(cfg))


def range_spectrum(beat: np.ndarray, cfg: ChirpConfig) -> np.ndarray:
    """Magnitudes of the windowed, zero-padded DFT for one or many beats.

    Delay lags the reference, so beat tones sit at negative frequency; the
    spectrum of the conjugate puts them on bins ``0 .. dft_size/2 - 1`` in
    increasing range.
    """
    beat = np.asarray(beat)
    n = beat.shape[-1]
    if n > cfg.dft_size:
        raise ValueError(f"beat of {n} samples exceeds dft_size {cfg.dft_size}")
    spec = np.fft.fft(np.conj(beat) * np.blackman(n), n=cfg.dft_size, axis=-1)
    return np.abs(spec[..., : cfg.dft_size // 2])


def range_profile(beat: np.ndarray, cfg: ChirpConfig) -> RangeProfile:
    return RangeProfile(range_spectrum(beat, cfg), cfg.bin_distance, cfg.range_resolution)


def capture_template(profiles) -> TemplateProfile:
    """Average range profiles recorded away from any reflector."""
    mats = [p.magnitudes if isinstance(p, RangeProfile) else np.asarray(p, dtype=np.float64)
            for p in profiles]
    if not mats:
        raise ValueError("need at least one profile")
    widths = {m.shape for m in mats}
    if len(widths) != 1:
        raise ValueError(f"profiles differ in shape: {sorted(widths)}")
    stack = np.stack(mats)
    return TemplateProfile(stack.mean(axis=0), n_averaged=stack.shape[0])


def cancel_direct_path(p: RangeProfile | np.ndarray, t: TemplateProfile):
    """Subtract the template; negative residuals are kept as-is."""
    mags = p.magnitudes if isinstance(p, RangeProfile) else np.asarray(p)
    if mags.shape[-1] != t.magnitudes.shape[-1]:
        raise ValueError(f"profile width {mags.shape[-1]} != template width {t.magnitudes.shape[-1]}")
    out = mags - t.magnitudes
    if isinstance(p, RangeProfile):
        return RangeProfile(out, p.bin_distance, p.range_resolution)
    return out
