"""Deterministic physics-inspired trace generator.

A handful of point leak sources sit at fixed die coordinates. Each emits, at
its configured sample indices, a value proportional to the Hamming weight of
a true AES intermediate (or the true last-round Hamming distance), attenuated
by the inverse square of the probe-to-source distance. On top of that sit a
deterministic clock-harmonic background sinusoid, Gaussian noise, and an
optional uniform ADC quantizer.

Reproducibility contract: every trace draws from its own Philox counter-based
substream keyed by (seed, position, split, trace_index), so generation order
and parallelism cannot change the output. Draw order within a trace is fixed:
plaintext bytes, then key bytes (only when keys are random), then one jitter
offset (only when jitter_max > 0), then m noise values (only when
noise_sigma > 0).
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .aes import encrypt_blocks, expand_keys, expand_keys_batch
from .errors import ConfigError
from .grid import GridGeometry
from .leakage import (
    FIRST_ROUND_SBOX_INPUT,
    FIRST_ROUND_SBOX_OUTPUT,
    HW_TABLE,
    true_first_round_values,
    true_last_round_hds,
)
from .traceset import (
    SPLIT_CODES,
    SPLIT_HOLDOUT,
    SPLIT_TEST,
    SPLIT_TRAIN,
    DatasetHeader,
    TraceRecord,
    write_dataset,
)

LAST_ROUND_HD_TRUE = "LastRoundHDTrue"
SOURCE_TARGETS = (FIRST_ROUND_SBOX_INPUT, FIRST_ROUND_SBOX_OUTPUT, LAST_ROUND_HD_TRUE)

D_MIN_MM = 0.05   # distance floor: probes never touch the die
_CHUNK = 4096     # traces synthesized per batch while streaming to disk


@dataclass(frozen=True)
class LeakSource:
    position_mm: tuple
    sample_indices: tuple
    target: str
    byte_index: int
    amplitude: float

    def __post_init__(self):
        if self.target not in SOURCE_TARGETS:
            raise ConfigError(f"unknown leak source target {self.target!r}")
        if not 0 <= self.byte_index < 16:
            raise ConfigError("byte_index must be in 0..15")
        if self.amplitude <= 0:
            raise ConfigError("amplitude must be > 0")
        if len(self.position_mm) != 3:
            raise ConfigError("source position must be an (x, y, z) triple")
        if len(self.sample_indices) == 0:
            raise ConfigError("source needs at least one sample index")
        if any(i < 0 for i in self.sample_indices):
            raise ConfigError("sample indices must be non-negative")


@dataclass(frozen=True)
class DeviceProfile:
    gain: float = 1.0
    offset: float = 0.0
    noise_sigma: float = 0.0
    jitter_max: int = 0
    adc_bits: int = 0            # 0 = no quantization, else 8 or 12
    axis_flip_y: bool = False    # probe y axis counts top to bottom
    full_scale: tuple = (-4.0, 4.0)

    def __post_init__(self):
        if self.gain <= 0:
            raise ConfigError("gain must be > 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.jitter_max < 0:
            raise ConfigError("jitter_max must be >= 0")
        if self.adc_bits not in (0, 8, 12):
            raise ConfigError("adc_bits must be 0, 8, or 12")
        if not self.full_scale[0] < self.full_scale[1]:
            raise ConfigError("full_scale must be an increasing (lo, hi) pair")


@dataclass(frozen=True)
class Background:
    """Deterministic clock-harmonic carrier: amplitude * sin(2*pi*t/period).

    The default period is the sampling-to-clock ratio 625 MHz / 10 MHz = 62.5
    samples per clock cycle.
    """

    amplitude: float = 0.0
    period_samples: float = 62.5
    phase: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ConfigError("background amplitude must be >= 0")
        if self.period_samples <= 0:
            raise ConfigError("background period must be > 0")

    def waveform(self, m: int) -> np.ndarray:
        t = np.arange(m, dtype=np.float64)
        return self.amplitude * np.sin(2 * np.pi * t / self.period_samples + self.phase)


@dataclass(frozen=True)
class SimConfig:
    geometry: GridGeometry
    m: int
    sources: tuple
    device: DeviceProfile = DeviceProfile()
    background: Background = Background()
    seed: int = 0
    fixed_key: bytes = None
    traces_per_position: dict = field(default_factory=dict)
    description: str = ""

    def __post_init__(self):
        if self.m <= 0:
            raise ConfigError("m must be > 0")
        for src in self.sources:
            if max(src.sample_indices) >= self.m:
                raise ConfigError(
                    f"source sample index {max(src.sample_indices)} >= m {self.m}")
        if self.fixed_key is not None and len(self.fixed_key) != 16:
            raise ConfigError("fixed_key must be 16 bytes")
        for split, count in self.traces_per_position.items():
            if split not in SPLIT_CODES or count < 0:
                raise ConfigError(f"bad traces_per_position entry {split!r}: {count}")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("seed must fit in 64 bits")

    @property
    def total_traces(self) -> int:
        per_pos = sum(self.traces_per_position.values())
        return per_pos * self.geometry.position_count


def coupling_weight(source_mm, probe_mm) -> float:
    """Inverse-square coupling with a d_min floor against the singularity."""
    d = math.dist(source_mm, probe_mm)
    return 1.0 / max(d, D_MIN_MM) ** 2


def _trace_rng(seed: int, position: int, split: int, trace_index: int):
    if not 0 <= trace_index < 1 << 40:
        raise ConfigError("trace index exceeds the substream space")
    sub = (position << 48) | (split << 40) | trace_index
    bg = np.random.Philox(key=np.array([seed, sub], dtype=np.uint64))
    return np.random.Generator(bg)


def _quantize(x: np.ndarray, bits: int, full_scale) -> np.ndarray:
    lo, hi = full_scale
    levels = (1 << bits) - 1
    q = np.rint((np.clip(x, lo, hi) - lo) / (hi - lo) * levels)
    return lo + q * ((hi - lo) / levels)


def _source_true_values(src: LeakSource, pts, cts, s9, key_bytes) -> np.ndarray:
    """Per-trace emitted value: HW of the true intermediate, or the true HD."""
    if src.target == LAST_ROUND_HD_TRUE:
        return true_last_round_hds(cts, s9)[:, src.byte_index].astype(np.float64)
    vals = true_first_round_values(src.target, pts, key_bytes, src.byte_index)
    return HW_TABLE[vals].astype(np.float64)


def _synthesize_chunk(config: SimConfig, position: int, split: int,
                      start: int, count: int):
    """Generate `count` consecutive records for one (position, split)."""
    dev = config.device
    m = config.m
    pts = np.empty((count, 16), dtype=np.uint8)
    keys = np.empty((count, 16), dtype=np.uint8)
    jitters = np.zeros(count, dtype=np.int64)
    noise = None
    if dev.noise_sigma > 0:
        noise = np.empty((count, m), dtype=np.float64)
    random_keys = config.fixed_key is None
    if not random_keys:
        keys[:] = np.frombuffer(config.fixed_key, dtype=np.uint8)
    for i in range(count):
        rng = _trace_rng(config.seed, position, split, start + i)
        pts[i] = rng.integers(0, 256, 16, dtype=np.uint8)
        if random_keys:
            keys[i] = rng.integers(0, 256, 16, dtype=np.uint8)
        if dev.jitter_max > 0:
            jitters[i] = rng.integers(-dev.jitter_max, dev.jitter_max + 1)
        if noise is not None:
            noise[i] = rng.normal(0.0, dev.noise_sigma, m)

    need_s9 = any(s.target == LAST_ROUND_HD_TRUE for s in config.sources)
    rks = expand_keys_batch(keys) if random_keys else expand_keys(config.fixed_key)
    out = encrypt_blocks(pts, rks, return_round9_state=need_s9)
    cts, s9 = out if need_s9 else (out, None)

    probe = config.geometry.position_mm(position, flip_y=dev.axis_flip_y)
    samples = np.tile(config.background.waveform(m), (count, 1))
    for src in config.sources:
        w = coupling_weight(src.position_mm, probe)
        vals = _source_true_values(src, pts, cts, s9, keys if random_keys
                                   else config.fixed_key)
        idx = np.asarray(src.sample_indices, dtype=np.int64)
        if dev.jitter_max == 0:
            samples[:, idx] += (w * src.amplitude) * vals[:, None]
        else:
            cols = idx[None, :] + jitters[:, None]
            ok = (cols >= 0) & (cols < m)
            rows = np.broadcast_to(np.arange(count)[:, None], cols.shape)
            np.add.at(samples, (rows[ok], cols[ok]),
                      (w * src.amplitude) * np.broadcast_to(vals[:, None], cols.shape)[ok])
    samples = dev.offset + dev.gain * samples
    if noise is not None:
        samples += noise
    if dev.adc_bits:
        samples = _quantize(samples, dev.adc_bits, dev.full_scale)
    samples = samples.astype(np.float32)

    for i in range(count):
        yield TraceRecord(position, split, keys[i].tobytes(), pts[i].tobytes(),
                          cts[i].tobytes(), samples[i])


def simulate_trace(config: SimConfig, position_index: int, plaintext: bytes,
                   key: bytes, rng) -> TraceRecord:
    """Single-trace reference path; rng supplies jitter and noise draws in
    the documented order. Used for spot checks; the dataset generator is the
    batched equivalent."""
    dev = config.device
    m = config.m
    if not 0 <= position_index < config.geometry.position_count:
        raise ConfigError("position index outside geometry")
    jitter = 0
    if dev.jitter_max > 0:
        jitter = int(rng.integers(-dev.jitter_max, dev.jitter_max + 1))
    noise = rng.normal(0.0, dev.noise_sigma, m) if dev.noise_sigma > 0 else 0.0

    pt = np.frombuffer(bytes(plaintext), dtype=np.uint8).reshape(1, 16)
    rks = expand_keys(key)
    need_s9 = any(s.target == LAST_ROUND_HD_TRUE for s in config.sources)
    out = encrypt_blocks(pt, rks, return_round9_state=need_s9)
    ct, s9 = out if need_s9 else (out, None)

    probe = config.geometry.position_mm(position_index, flip_y=dev.axis_flip_y)
    samples = config.background.waveform(m)
    for src in config.sources:
        w = coupling_weight(src.position_mm, probe)
        val = float(_source_true_values(src, pt, ct, s9, key)[0])
        for t in src.sample_indices:
            tj = t + jitter
            if 0 <= tj < m:
                samples[tj] += w * src.amplitude * val
    samples = dev.offset + dev.gain * samples + noise
    if dev.adc_bits:
        samples = _quantize(samples, dev.adc_bits, dev.full_scale)
    return TraceRecord(position_index, SPLIT_TRAIN, bytes(key), bytes(plaintext),
                       ct[0].tobytes(), samples.astype(np.float32))


def _all_records(config: SimConfig, progress=None):
    emitted = 0
    for position in range(config.geometry.position_count):
        for split in (SPLIT_TRAIN, SPLIT_TEST, SPLIT_HOLDOUT):
            count = _split_count(config, split)
            for start in range(0, count, _CHUNK):
                chunk = min(_CHUNK, count - start)
                yield from _synthesize_chunk(config, position, split, start, chunk)
                emitted += chunk
                if progress is not None:
                    progress(emitted, config.total_traces)


def _split_count(config: SimConfig, split: int) -> int:
    for name, code in SPLIT_CODES.items():
        if code == split:
            return int(config.traces_per_position.get(name, 0))
    return 0


def simulate_grid_dataset(config: SimConfig, path, progress=None) -> DatasetHeader:
    """Generate the full dataset to `path`, streaming (no full materialization).

    Record order is position-major, then train/test/holdout, then trace
    index; the per-trace substreams make any other generation schedule
    produce byte-identical files.
    """
    header = DatasetHeader(
        geometry=config.geometry,
        m=config.m,
        trace_count=config.total_traces,
        description=config.description,
        adc_bits=config.device.adc_bits,
    )
    write_dataset(header, _all_records(config, progress), path)
    return header


def derive_device_b(config: SimConfig, probe_origin_shift_mm=(0.0, 0.0, 0.0),
                    gain_factor: float = 1.0, extra_noise: float = 0.0,
                    jitter_delta: int = 0) -> SimConfig:
    """Second-rig variant: same die (sources unchanged), new seed, probe grid
    shifted by-eye, altered gain/noise/jitter."""
    if len(probe_origin_shift_mm) != 3:
        raise ConfigError("probe_origin_shift_mm must be an (x, y, z) triple")
    new_seed = (config.seed * 6364136223846793005 + 1442695040888963407) % (1 << 64)
    ox, oy, oz = config.geometry.origin_mm
    dx, dy, dz = probe_origin_shift_mm
    geometry = replace(config.geometry, origin_mm=(ox + dx, oy + dy, oz + dz))
    new_jitter = config.device.jitter_max + jitter_delta
    if new_jitter < 0:
        raise ConfigError("jitter_delta drives jitter_max below zero")
    device = replace(config.device,
                     gain=config.device.gain * gain_factor,
                     noise_sigma=config.device.noise_sigma * (1.0 + extra_noise),
                     jitter_max=new_jitter)
    return replace(config, geometry=geometry, device=device, seed=new_seed)


# ------------------------------------------------------------ config I/O

def sim_config_to_dict(config: SimConfig) -> dict:
    d = {
        "geometry": config.geometry.to_json_dict(),
        "m": config.m,
        "seed": config.seed,
        "description": config.description,
        "traces_per_position": dict(config.traces_per_position),
        "background": {
            "amplitude": config.background.amplitude,
            "period_samples": config.background.period_samples,
            "phase": config.background.phase,
        },
        "device": {
            "gain": config.device.gain,
            "offset": config.device.offset,
            "noise_sigma": config.device.noise_sigma,
            "jitter_max": config.device.jitter_max,
            "adc_bits": config.device.adc_bits,
            "axis_flip_y": config.device.axis_flip_y,
            "full_scale": list(config.device.full_scale),
        },
        "sources": [
            {
                "position_mm": list(s.position_mm),
                "sample_indices": list(s.sample_indices),
                "target": s.target,
                "byte_index": s.byte_index,
                "amplitude": s.amplitude,
            }
            for s in config.sources
        ],
    }
    if config.fixed_key is not None:
        d["fixed_key"] = config.fixed_key.hex()
    return d


def sim_config_from_dict(d: dict) -> SimConfig:
    try:
        dev = d.get("device", {})
        bg = d.get("background", {})
        config = SimConfig(
            geometry=GridGeometry.from_json_dict(d["geometry"]),
            m=int(d["m"]),
            sources=tuple(
                LeakSource(
                    position_mm=tuple(float(v) for v in s["position_mm"]),
                    sample_indices=tuple(int(v) for v in s["sample_indices"]),
                    target=str(s["target"]),
                    byte_index=int(s["byte_index"]),
                    amplitude=float(s["amplitude"]),
                )
                for s in d.get("sources", [])
            ),
            device=DeviceProfile(
                gain=float(dev.get("gain", 1.0)),
                offset=float(dev.get("offset", 0.0)),
                noise_sigma=float(dev.get("noise_sigma", 0.0)),
                jitter_max=int(dev.get("jitter_max", 0)),
                adc_bits=int(dev.get("adc_bits", 0)),
                axis_flip_y=bool(dev.get("axis_flip_y", False)),
                full_scale=tuple(dev.get("full_scale", (-4.0, 4.0))),
            ),
            background=Background(
                amplitude=float(bg.get("amplitude", 0.0)),
                period_samples=float(bg.get("period_samples", 62.5)),
                phase=float(bg.get("phase", 0.0)),
            ),
            seed=int(d.get("seed", 0)),
            fixed_key=bytes.fromhex(d["fixed_key"]) if "fixed_key" in d else None,
            traces_per_position={k: int(v) for k, v in
                                 d.get("traces_per_position", {}).items()},
            description=str(d.get("description", "")),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad simulation config: {e}") from e
    if "perturbation" in d:
        p = d["perturbation"]
        config = derive_device_b(
            config,
            probe_origin_shift_mm=tuple(float(v) for v in
                                        p.get("probe_origin_shift_mm", (0, 0, 0))),
            gain_factor=float(p.get("gain_factor", 1.0)),
            extra_noise=float(p.get("extra_noise", 0.0)),
            jitter_delta=int(p.get("jitter_delta", 0)),
        )
    return config


def load_sim_config(path) -> SimConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    return sim_config_from_dict(d)
