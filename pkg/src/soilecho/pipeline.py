"""From a synchronized vertical-scan recording to a 64x64 height-range image."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ScanQualityError
from .fmcw import (
    ChirpConfig,
    RangeProfile,
    TemplateProfile,
    Waveform,
    cancel_direct_path,
    dechirp,
    detect_chirp_boundaries,
    range_spectrum,
)

IMAGE_SIZE = 64
MODE_BINS = 256

MIN_VELOCITY = 0.01
MAX_VELOCITY = 0.05
MAX_VELOCITY_STD = 0.02
MIN_SCAN_HEIGHT = 0.15


@dataclass
class HeightTrack:
    """Device height (m) against time (s), as sampled by the pose tracker."""

    times: np.ndarray
    heights: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.heights = np.asarray(self.heights, dtype=np.float64)
        if self.times.shape != self.heights.shape or self.times.ndim != 1:
            raise ValueError("times and heights must be 1-D arrays of equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("track timestamps must be strictly increasing")
        if np.any(self.heights < 0):
            raise ValueError("track heights must be non-negative")

    def __len__(self):
        return self.times.size

    @classmethod
    def from_entries(cls, entries) -> "HeightTrack":
        entries = list(entries)
        return cls([e[0] for e in entries], [e[1] for e in entries])

    @classmethod
    def from_json(cls, doc: dict) -> "HeightTrack":
        rows = doc["track"]
        return cls([r["t"] for r in rows], [r["h"] for r in rows])

    def to_json(self) -> dict:
        return {"track": [{"t": float(t), "h": float(h)} for t, h in zip(self.times, self.heights)]}

    def height_at(self, t) -> np.ndarray:
        return np.interp(t, self.times, self.heights)


class Verdict(str, enum.Enum):
    OK = "Ok"
    TOO_SLOW = "TooSlow"
    TOO_FAST = "TooFast"
    UNSTABLE = "Unstable"
    SHORT = "Short"

    def __str__(self):
        return self.value


@dataclass
class ScanQuality:
    mean_velocity: float
    velocity_std: float
    max_height: float
    verdict: Verdict

    @property
    def ok(self) -> bool:
        return self.verdict is Verdict.OK

    def to_json(self) -> dict:
        return {
            "mean_velocity": self.mean_velocity,
            "velocity_std": self.velocity_std,
            "max_height": self.max_height,
            "verdict": self.verdict.value,
        }


def validate_scan(track: HeightTrack) -> ScanQuality:
    """Apply the motion-quality gates to a height track.

    Speed is judged first (1-5 cm/s), then its spread (std at most 2 cm/s),
    then whether the device got to 15 cm.
    """
    if len(track) < 2:
        raise ValueError("need at least two track entries")
    v = np.diff(track.heights) / np.diff(track.times)
    mean, std = float(v.mean()), float(v.std())
    top = float(track.heights.max())
    eps = 1e-9
    if mean < MIN_VELOCITY - eps:
        verdict = Verdict.TOO_SLOW
    elif mean > MAX_VELOCITY + eps:
        verdict = Verdict.TOO_FAST
    elif std > MAX_VELOCITY_STD + eps:
        verdict = Verdict.UNSTABLE
    elif top < MIN_SCAN_HEIGHT - eps:
        verdict = Verdict.SHORT
    else:
        verdict = Verdict.OK
    return ScanQuality(mean, std, top, verdict)


def assemble_matrix(profiles) -> np.ndarray:
    rows = [p.magnitudes if isinstance(p, RangeProfile) else np.asarray(p, dtype=np.float64)
            for p in profiles]
    if not rows:
        raise ValueError("need at least one profile")
    widths = {r.shape for r in rows}
    if len(widths) != 1:
        raise ValueError(f"profiles differ in width: {sorted(widths)}")
    return np.stack(rows)


def resample_indices(n_rows: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Row indices round(i*(N-1)/(size-1)), rounding halves up."""
    return np.floor(np.arange(size) * (n_rows - 1) / (size - 1) + 0.5).astype(np.int64)


def resample_to_image(matrix: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < size or m.shape[1] < size:
        raise InsufficientDataError(f"need at least {size}x{size}, got {m.shape}")
    return m[resample_indices(m.shape[0], size), :size]


def column_mode(col: np.ndarray, n_bins: int = MODE_BINS) -> float:
    """Mode of real values from a histogram over the column's range.

    The most populated of ``n_bins`` equal bins wins, the lower bin on ties.
    The returned value is the median of the samples in that bin, which equals
    the repeated value exactly when the floor is a constant.
    """
    lo, hi = col.min(), col.max()
    if hi == lo:
        return float(lo)
    idx = np.minimum(((col - lo) / (hi - lo) * n_bins).astype(np.int64), n_bins - 1)
    best = np.argmax(np.bincount(idx, minlength=n_bins))
    return float(np.median(col[idx == best]))


def mode_removal(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    modes = np.array([column_mode(m[:, j]) for j in range(m.shape[1])])
    return m - modes


@dataclass
class ScanImage:
    values: np.ndarray
    mean_used: float
    std_used: float


def standardize(matrix: np.ndarray) -> ScanImage:
    m = np.asarray(matrix, dtype=np.float64)
    mean = float(m.mean())
    std = float(m.std())
    if not std > 1e-12 * max(1.0, abs(mean)):
        raise ValueError("cannot standardize an image with zero variance")
    return ScanImage((m - mean) / std, mean, std)


def build_image(profiles: np.ndarray, heights: np.ndarray) -> ScanImage:
    """Sort profiles by height, resample, strip column modes and standardize.

    Ties in height keep acquisition order.
    """
    profiles = np.asarray(profiles, dtype=np.float64)
    heights = np.asarray(heights, dtype=np.float64)
    if profiles.shape[0] != heights.size:
        raise ValueError("one height per profile required")
    if profiles.shape[0] < IMAGE_SIZE:
        raise InsufficientDataError(f"only {profiles.shape[0]} chirps retained, need {IMAGE_SIZE}")
    order = np.argsort(heights, kind="stable")
    image = resample_to_image(assemble_matrix(profiles[order]))
    return standardize(mode_removal(image))


def scan_profiles(recording: Waveform | np.ndarray, cfg: ChirpConfig,
                  template: TemplateProfile | None = None):
    """Synchronize, dechirp and range-transform every complete chirp.

    Returns
    -------
    starts : ndarray of int
        Chirp start sample indices.
    profiles : ndarray, shape (n_chirps, dft_size // 2)
        Range profiles, template-cancelled when a template is given.
    """
    x = recording.samples if isinstance(recording, Waveform) else np.asarray(recording, dtype=np.float64)
    sync = detect_chirp_boundaries(x, cfg)
    starts = sync.chirp_starts
    frames = x[starts[:, None] + np.arange(cfg.chirp_samples)]
    profiles = range_spectrum(dechirp(frames, cfg), cfg)
    if template is not None:
        profiles = cancel_direct_path(profiles, template)
    return starts, profiles


def preprocess_scan(recording: Waveform | np.ndarray, track: HeightTrack, cfg: ChirpConfig,
                    template: TemplateProfile | None, check_quality: bool = True) -> ScanImage:
    """Full chain from recording and height track to the standardized image.

    Raises
    ------
    ScanQualityError
        If the track fails the motion gates (when ``check_quality``).
    NoSyncError
        If chirp boundaries cannot be found.
    InsufficientDataError
        If fewer than 64 chirps are available.
    """
    if check_quality:
        quality = validate_scan(track)
        if not quality.ok:
            raise ScanQualityError(quality)
    starts, profiles = scan_profiles(recording, cfg, template)
    heights = track.height_at(starts / cfg.sample_rate)
    return build_image(profiles, heights)
