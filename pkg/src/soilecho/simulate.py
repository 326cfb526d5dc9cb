"""Time-domain synthesis of vertical-scan recordings over soil of known moisture.

Each transmitted chirp is received as the sum of a static speaker-to-mic
leakage copy, a specular echo from directly below, diffuse echoes from the
oblique ground paths, and white noise. Echo powers come from
:func:`soilecho.physics.reflection_components` at the device height when the
chirp was sent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .fmcw import ChirpConfig, Waveform, chirp_phase
from .physics import SensorGeometry, SoilParams, reflection_components
from .pipeline import HeightTrack

TRACK_RATE = 30.0


@dataclass(frozen=True)
class ScanPlan:
    """One vertical scan.

    The device starts at ``start_height`` above the soil and rises at
    ``velocity`` until it is ``end_height`` above where it started. An
    optional sinusoidal tremor perturbs the height.
    """

    start_height: float = 0.01
    end_height: float = 0.15
    velocity: float = 0.03
    chirp_cfg: ChirpConfig = field(default_factory=ChirpConfig)
    noise_std: float = 0.002
    seed: int = 0
    leakage_gain: float = 10.0
    leakage_delay: float = 0.0
    tremor_amplitude: float = 0.0
    tremor_frequency: float = 2.0

    def __post_init__(self):
        if not (self.end_height > self.start_height > 0):
            raise ConfigError("need end_height > start_height > 0")
        if self.velocity <= 0:
            raise ConfigError("velocity must be positive")
        if self.noise_std < 0 or self.leakage_gain < 0 or self.leakage_delay < 0:
            raise ConfigError("noise_std, leakage_gain and leakage_delay must be non-negative")
        if self.tremor_amplitude < 0:
            raise ConfigError("tremor_amplitude must be non-negative")

    @property
    def duration(self) -> float:
        return self.end_height / self.velocity

    @property
    def n_chirps(self) -> int:
        return int(np.floor(self.duration / self.chirp_cfg.cycle_duration + 1e-9))

    def to_dict(self) -> dict:
        return {
            "start_height": self.start_height,
            "end_height": self.end_height,
            "velocity": self.velocity,
            "noise_std": self.noise_std,
            "seed": self.seed,
            "leakage_gain": self.leakage_gain,
            "leakage_delay": self.leakage_delay,
            "tremor_amplitude": self.tremor_amplitude,
            "tremor_frequency": self.tremor_frequency,
        }

    @classmethod
    def from_dict(cls, d: dict, chirp_cfg: ChirpConfig | None = None) -> "ScanPlan":
        d = dict(d)
        d.pop("chirp_cfg", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scan plan keys: {sorted(unknown)}")
        return cls(chirp_cfg=chirp_cfg or ChirpConfig(), **d)

    def with_seed(self, seed: int) -> "ScanPlan":
        return replace(self, seed=seed)


def delayed_chirps(delays: np.ndarray, amplitudes: np.ndarray, phases: np.ndarray,
                   cfg: ChirpConfig, length: int) -> np.ndarray:
    """Sum of chirp copies, each delayed (fractional seconds), scaled and phase-shifted.

    Copies are cut to ``length`` samples measured from the transmit onset.
    """
    n = np.arange(length) / cfg.sample_rate
    t = n[None, :] - np.asarray(delays)[:, None]
    live = (t >= 0) & (t < cfg.chirp_duration)
    waves = np.cos(chirp_phase(t, cfg) + np.asarray(phases)[:, None])
    return (np.asarray(amplitudes)[:, None] * np.where(live, waves, 0.0)).sum(axis=0)


def _leakage(cfg: ChirpConfig, geom: SensorGeometry, gain: float, delay: float, length: int):
    amp = cfg.amplitude * gain * np.sqrt(geom.incident_power)
    return delayed_chirps(np.array([delay]), np.array([amp]), np.zeros(1), cfg, length)


def _segment_length(cfg: ChirpConfig, max_delay: float) -> int:
    seg = cfg.chirp_samples + int(np.ceil(max_delay * cfg.sample_rate)) + 1
    if seg > cfg.cycle_samples:
        raise ConfigError("echo delays spill into the next chirp")
    return seg


def synthesize_recording(plan: ScanPlan, theta_v: float, s: SoilParams,
                         geom: SensorGeometry | None = None):
    """Received audio and height track for one vertical scan.

    Returns
    -------
    recording : Waveform
    track : HeightTrack
        Heights above the soil sampled at 30 Hz from t = 0.
    """
    geom = geom or SensorGeometry()
    cfg = plan.chirp_cfg
    c = cfg.speed_of_sound
    rng = np.random.default_rng(plan.seed)
    tremor_phase = rng.uniform(0, 2 * np.pi)

    def height(t):
        h = plan.start_height + plan.velocity * t
        return h + plan.tremor_amplitude * np.sin(2 * np.pi * plan.tremor_frequency * t + tremor_phase)

    n_chirps = plan.n_chirps
    if n_chirps < 1:
        raise ConfigError("scan too short for a single chirp")
    cyc = cfg.cycle_samples
    seg = _segment_length(cfg, max(2 * geom.max_scatter_range / c, plan.leakage_delay))
    out = np.zeros(n_chirps * cyc + seg)

    leak = _leakage(cfg, geom, plan.leakage_gain, plan.leakage_delay, seg)
    for k in range(n_chirps):
        t0 = k * cyc / cfg.sample_rate
        h = float(height(t0))
        comp = reflection_components(h, theta_v, s, geom, cfg)
        delays = np.concatenate([[2 * h / c], 2 * comp.diffuse_ranges / c])
        amps = cfg.amplitude * np.sqrt(np.concatenate([[comp.specular], comp.diffuse_powers]))
        phases = np.concatenate([[0.0], rng.uniform(0, 2 * np.pi, comp.diffuse_ranges.size)])
        out[k * cyc: k * cyc + seg] += leak + delayed_chirps(delays, amps, phases, cfg, seg)

    out = out[: n_chirps * cyc]
    if plan.noise_std > 0:
        out += rng.normal(0.0, plan.noise_std, out.size)

    n_track = int(np.floor(plan.duration * TRACK_RATE + 1e-9))
    times = np.arange(n_track) / TRACK_RATE
    track = HeightTrack(times, height(times))
    return Waveform(out, cfg.sample_rate), track


def synthesize_template_recording(cfg: ChirpConfig, n_chirps: int = 60, noise_std: float = 0.002,
                                  seed: int = 0, geom: SensorGeometry | None = None,
                                  leakage_gain: float = 10.0, leakage_delay: float = 0.0) -> Waveform:
    """Leakage-only recording, as captured with no reflector in range."""
    geom = geom or SensorGeometry()
    cyc = cfg.cycle_samples
    seg = _segment_length(cfg, leakage_delay)
    leak = _leakage(cfg, geom, leakage_gain, leakage_delay, seg)
    out = np.zeros(n_chirps * cyc + seg)
    for k in range(n_chirps):
        out[k * cyc: k * cyc + seg] += leak
    out = out[: n_chirps * cyc]
    rng = np.random.default_rng(seed)
    if noise_std > 0:
        out += rng.normal(0.0, noise_std, out.size)
    return Waveform(out, cfg.sample_rate)
