"""World state for one optimization-and-transmission block (OTB).

A :class:`Scenario` bundles the configuration, eRRH/UE geometry, MIMO
channels, cache contents and file requests.  Everything is a pure function
of ``(ScenarioConfig, seed)``.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "Topology",
    "ChannelSet",
    "CacheState",
    "Scenario",
    "load_config",
    "config_from_mapping",
    "build_topology",
    "path_loss_db",
    "noise_power_w",
    "dbm_to_w",
    "draw_channels",
    "draw_cache_and_requests",
    "make_scenario",
    "TABLE2_CACHE",
]

MIN_DISTANCE_KM = 1e-3

# Example cache state from the reference experiments: one row per eRRH,
# columns (f1,1),(f1,2),(f2,1),(f2,2),(f3,1),(f3,2).
TABLE2_CACHE = (
    (1, 1, 1, 1, 1, 1),
    (0, 0, 0, 1, 0, 0),
    (0, 1, 0, 0, 1, 0),
    (0, 0, 1, 0, 0, 0),
    (1, 0, 0, 0, 1, 0),
    (0, 1, 0, 1, 1, 0),
    (0, 0, 0, 1, 0, 1),
)


class ConfigError(ValueError):
    """Raised for unknown keys, wrong types or violated invariants."""


def dbm_to_w(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0


# Keys that may be given per eRRH (list of length num_errh) or as one scalar.
PER_ERRH_KEYS = (
    "fronthaul_capacity",
    "tx_power_budget",
    "active_power",
    "sleep_power",
    "amplifier_slope",
    "fronthaul_slope",
)


@dataclass(frozen=True)
class ScenarioConfig:
    # network size
    num_errh: int = 7
    num_ue: int = 3
    antennas_errh: int = 5
    antennas_ue: int = 2
    streams: int = 2
    # content
    library_size: int = 6
    subfiles_per_file: int = 2
    file_size: float = 80.0  # Mbit
    qos_rate: float = 0.1  # Mb/s
    subfile_rate_cap: float = 40.0  # Mb/s
    cache_fraction: float = 0.5
    # per-eRRH constants (scalar or one value per eRRH)
    fronthaul_capacity: float | tuple[float, ...] = 50.0  # Mb/s
    tx_power_budget: float | tuple[float, ...] = dbm_to_w(24.0)  # W
    active_power: float | tuple[float, ...] = 84.0  # W
    sleep_power: float | tuple[float, ...] = 56.0  # W
    amplifier_slope: float | tuple[float, ...] = 2.8
    fronthaul_slope: float | tuple[float, ...] = 5.0  # W per Mb/s
    # radio
    bandwidth: float = 10.0  # MHz
    noise_psd: float = -174.0  # dBm/Hz
    shadowing_std: float = 10.0  # dB
    inter_errh_distance: float = 0.3  # km
    ue_radius: float = 0.05  # km, UE disk around eRRH 1
    # algorithm
    eta: float = 1e-3
    eps1: float = 1e-3
    eps2: float = 1e-2
    eps3: float = 1e-2
    eps4: float = 1e-2
    tau1: float = 1e-5
    tau2: float = 1e-3
    c2_rule: str = "symmetric"  # or "literal"
    association_threshold: float = 1e-6  # W of block energy
    max_outer: int = 30
    max_middle: int = 30
    max_inner: int = 30
    rate_expansion: bool = True
    rng_seed: int = 0
    # explicit overrides
    errh_positions: tuple[tuple[float, float], ...] | None = None
    ue_positions: tuple[tuple[float, float], ...] | None = None
    requests: tuple[int, ...] | None = None  # 1-based file index per UE
    cache_override: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        _validate(self)

    @property
    def num_tx_antennas(self) -> int:
        """N_R = K_R * N_r."""
        return self.num_errh * self.antennas_errh

    @property
    def cache_slots(self) -> int:
        """Number of subfiles each eRRH stores."""
        return math.floor(self.cache_fraction * self.library_size * self.subfiles_per_file + 1e-9)

    @property
    def c1(self) -> float:
        return 1.0 / math.log1p(1.0 / self.tau1)

    @property
    def c2(self) -> float:
        if self.c2_rule == "literal":
            return 1.0 / math.log1p(self.tau1 ** -2)
        return 1.0 / math.log1p(1.0 / self.tau2)

    def per_errh(self, key: str) -> np.ndarray:
        value = getattr(self, key)
        if isinstance(value, tuple):
            return np.asarray(value, dtype=float)
        return np.full(self.num_errh, float(value))

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


_INT_KEYS = {
    "num_errh", "num_ue", "antennas_errh", "antennas_ue", "streams", "library_size",
    "subfiles_per_file", "rng_seed", "max_outer", "max_middle", "max_inner",
}
_FLOAT_KEYS = {
    "file_size", "qos_rate", "subfile_rate_cap", "cache_fraction", "bandwidth", "noise_psd",
    "shadowing_std", "inter_errh_distance", "ue_radius", "eta", "eps1", "eps2", "eps3",
    "eps4", "tau1", "tau2", "association_threshold",
}


def _validate(cfg: ScenarioConfig) -> None:
    for key in ("num_errh", "num_ue", "antennas_errh", "antennas_ue", "streams",
                "library_size", "subfiles_per_file", "max_outer", "max_middle", "max_inner"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if not 0.0 <= cfg.cache_fraction <= 1.0:
        raise ConfigError("cache_fraction must lie in [0, 1]")
    if cfg.qos_rate < 0:
        raise ConfigError("qos_rate must be >= 0")
    if cfg.qos_rate > cfg.subfile_rate_cap:
        raise ConfigError("qos_rate must not exceed subfile_rate_cap")
    if cfg.streams > min(cfg.antennas_ue, cfg.antennas_errh):
        raise ConfigError("streams must be <= min(antennas_ue, antennas_errh)")
    for key in ("bandwidth", "file_size", "tau1", "tau2"):
        if getattr(cfg, key) <= 0:
            raise ConfigError(f"{key} must be > 0")
    for key in ("eta", "eps1", "eps2", "eps3", "eps4", "association_threshold",
                "shadowing_std", "inter_errh_distance", "ue_radius"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key} must be >= 0")
    if cfg.c2_rule not in ("symmetric", "literal"):
        raise ConfigError("c2_rule must be 'symmetric' or 'literal'")
    for key in PER_ERRH_KEYS:
        value = getattr(cfg, key)
        if isinstance(value, tuple) and len(value) != cfg.num_errh:
            raise ConfigError(f"{key} needs {cfg.num_errh} entries, got {len(value)}")
        if np.any(cfg.per_errh(key) < 0):
            raise ConfigError(f"{key} must be >= 0")
    if np.any(cfg.per_errh("sleep_power") >= cfg.per_errh("active_power")):
        raise ConfigError("sleep_power must be < active_power")
    if cfg.errh_positions is not None and len(cfg.errh_positions) != cfg.num_errh:
        raise ConfigError("errh_positions needs one (x, y) pair per eRRH")
    if cfg.ue_positions is not None and len(cfg.ue_positions) != cfg.num_ue:
        raise ConfigError("ue_positions needs one (x, y) pair per UE")
    if cfg.requests is not None:
        if len(cfg.requests) != cfg.num_ue:
            raise ConfigError("requests needs one file index per UE")
        if len(set(cfg.requests)) != len(cfg.requests):
            raise ConfigError("requests must name distinct files")
        if any(not 1 <= f <= cfg.library_size for f in cfg.requests):
            raise ConfigError("requests must lie in 1..library_size")
    elif cfg.num_ue > cfg.library_size:
        raise ConfigError("num_ue must be <= library_size for distinct requests")
    if cfg.cache_override is not None:
        rows = cfg.cache_override
        width = cfg.num_ue * cfg.subfiles_per_file
        if len(rows) != cfg.num_errh or any(len(r) != width for r in rows):
            raise ConfigError(
                f"cache_override must be {cfg.num_errh} rows of {width} zeros/ones")
        if any(v not in (0, 1) for r in rows for v in r):
            raise ConfigError("cache_override entries must be 0 or 1")


def _coerce(key: str, value: Any) -> Any:
    def bad(expected: str) -> ConfigError:
        return ConfigError(f"{key}: expected {expected}, got {value!r}")

    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if key in PER_ERRH_KEYS:
        if isinstance(value, (list, tuple)):
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise bad("a number or list of numbers")
            return tuple(float(v) for v in value)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number or list of numbers")
        return float(value)
    if key == "c2_rule":
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if key == "rate_expansion":
        if not isinstance(value, bool):
            raise bad("true/false")
        return value
    if key in ("errh_positions", "ue_positions"):
        try:
            pts = tuple((float(p[0]), float(p[1])) for p in value)
        except (TypeError, ValueError, IndexError, KeyError):
            raise bad("a list of [x, y] pairs") from None
        if any(len(p) != 2 for p in value):
            raise bad("a list of [x, y] pairs")
        return pts
    if key == "requests":
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise bad("a list of integers")
        return tuple(value)
    if key == "cache_override":
        if not isinstance(value, (list, tuple)) or not all(isinstance(r, (list, tuple)) for r in value):
            raise bad("a matrix of 0/1 rows")
        if not all(isinstance(v, int) and not isinstance(v, bool) for r in value for v in r):
            raise bad("a matrix of 0/1 rows")
        return tuple(tuple(r) for r in value)
    raise ConfigError(f"unknown key: {key}")


CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(ScenarioConfig))


def config_from_mapping(data: dict | None, base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Build a config from a flat key/value mapping; absent keys keep defaults."""
    data = dict(data or {})
    unknown = sorted(set(data) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown key: {unknown[0]}")
    values = {k: _coerce(k, v) for k, v in data.items()}
    base = base or ScenarioConfig()
    try:
        return dataclasses.replace(base, **values)
    except ConfigError as exc:
        # name offending keys from the invariant message
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ScenarioConfig:
    """Read a YAML file with a flat key/value layout (see README)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with path.open() as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of key: value pairs")
    return config_from_mapping(data)


# ----------------------------------------------------------------------------
# Topology
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Topology:
    errh_positions: np.ndarray  # (K_R, 2) km
    ue_positions: np.ndarray  # (K_U, 2) km

    def distances(self) -> np.ndarray:
        """UE-to-eRRH distances in km, shape (K_U, K_R)."""
        diff = self.ue_positions[:, None, :] - self.errh_positions[None, :, :]
        return np.linalg.norm(diff, axis=-1)


def _hex_layout(spacing: float) -> np.ndarray:
    angles = np.deg2rad(np.arange(6) * 60.0)
    ring = spacing * np.column_stack([np.cos(angles), np.sin(angles)])
    return np.vstack([[0.0, 0.0], ring])


def build_topology(cfg: ScenarioConfig, seed: int | None = None) -> Topology:
    """One central eRRH plus a six-eRRH ring; UEs uniform in a disk around eRRH 1."""
    seed = cfg.rng_seed if seed is None else seed
    if cfg.errh_positions is not None:
        errh = np.asarray(cfg.errh_positions, dtype=float)
    elif cfg.num_errh == 7:
        errh = _hex_layout(cfg.inter_errh_distance)
    else:
        raise ConfigError("the default layout needs num_errh = 7; supply errh_positions")
    if cfg.ue_positions is not None:
        ue = np.asarray(cfg.ue_positions, dtype=float)
    else:
        rng = np.random.default_rng([seed, 1])
        radius = cfg.ue_radius * np.sqrt(rng.random(cfg.num_ue))
        angle = 2.0 * np.pi * rng.random(cfg.num_ue)
        ue = errh[0] + np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
    if not (np.all(np.isfinite(errh)) and np.all(np.isfinite(ue))):
        raise ConfigError("positions must be finite")
    return Topology(errh_positions=errh, ue_positions=ue)


# ----------------------------------------------------------------------------
# Channels
# ----------------------------------------------------------------------------

def path_loss_db(distance_km) -> np.ndarray:
    return 140.7 + 36.7 * np.log10(distance_km)


def noise_power_w(noise_psd_dbm_hz: float, bandwidth_mhz: float) -> float:
    dbm = noise_psd_dbm_hz + 10.0 * math.log10(bandwidth_mhz * 1e6)
    return dbm_to_w(dbm)


@dataclass(frozen=True)
class ChannelSet:
    H: np.ndarray  # (K_U, N_u, N_R) complex, eRRH blocks side by side
    noise_cov: np.ndarray  # (K_U, N_u, N_u)
    gains: np.ndarray  # (K_U, K_R) linear large-scale gain

    @property
    def noise_var(self) -> float:
        return float(np.real(self.noise_cov[0, 0, 0]))

    def block(self, k: int, i: int, n_r: int) -> np.ndarray:
        return self.H[k][:, i * n_r:(i + 1) * n_r]


def draw_channels(cfg: ScenarioConfig, topo: Topology, seed: int | None = None,
                  small_scale: np.ndarray | None = None) -> ChannelSet:
    """Path loss + log-normal shadowing on top of i.i.d. Rayleigh fading.

    ``small_scale`` replaces the Rayleigh draw (shape ``(K_U, N_u, N_R)``).
    """
    seed = cfg.rng_seed if seed is None else seed
    rng = np.random.default_rng([seed, 2])
    dist = topo.distances()
    if np.any(dist < MIN_DISTANCE_KM):
        warnings.warn("UE closer than 1 m to an eRRH; distance clamped to 1 m", stacklevel=2)
        dist = np.maximum(dist, MIN_DISTANCE_KM)
    shadow = cfg.shadowing_std * rng.standard_normal(dist.shape)
    gains = 10.0 ** (-(path_loss_db(dist) + shadow) / 10.0)
    K_U, N_u, N_r, K_R = cfg.num_ue, cfg.antennas_ue, cfg.antennas_errh, cfg.num_errh
    if small_scale is None:
        small_scale = (rng.standard_normal((K_U, N_u, K_R * N_r))
                       + 1j * rng.standard_normal((K_U, N_u, K_R * N_r))) / np.sqrt(2.0)
    amp = np.repeat(np.sqrt(gains), N_r, axis=1)  # (K_U, N_R)
    H = small_scale * amp[:, None, :]
    sigma2 = noise_power_w(cfg.noise_psd, cfg.bandwidth)
    noise_cov = np.broadcast_to(sigma2 * np.eye(N_u), (K_U, N_u, N_u)).copy()
    if not np.all(np.isfinite(H)):
        raise ValueError("non-finite channel entries")
    return ChannelSet(H=H, noise_cov=noise_cov, gains=gains)


# ----------------------------------------------------------------------------
# Cache and requests
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class CacheState:
    """Cache contents against the requested files.

    ``c[i, s, m]`` is 1 when eRRH ``i`` holds subfile ``m`` of the file in
    request slot ``s``; slot ``s`` is the file requested by UE ``s``.
    """
    c: np.ndarray  # (K_R, K_U, M) int
    requests: np.ndarray  # (K_U,) 0-based file index
    stored: np.ndarray  # (K_R, F, M) bool, full library view

    @property
    def requested_files(self) -> tuple[int, ...]:
        return tuple(int(f) for f in self.requests)

    def without_cache(self) -> "CacheState":
        return CacheState(c=np.zeros_like(self.c), requests=self.requests,
                          stored=np.zeros_like(self.stored))


def draw_cache_and_requests(cfg: ScenarioConfig, seed: int | None = None) -> CacheState:
    seed = cfg.rng_seed if seed is None else seed
    rng = np.random.default_rng([seed, 3])
    F, M, K_R = cfg.library_size, cfg.subfiles_per_file, cfg.num_errh
    stored = np.zeros((K_R, F, M), dtype=bool)
    slots = cfg.cache_slots
    for i in range(K_R):
        picks = rng.choice(F * M, size=slots, replace=False) if slots else []
        stored[i].flat[picks] = True
    if cfg.requests is not None:
        requests = np.asarray(cfg.requests, dtype=int) - 1
    else:
        # uniform over distinct request tuples, same law as redrawing duplicates
        requests = rng.choice(F, size=cfg.num_ue, replace=False)
    if cfg.cache_override is not None:
        c = np.asarray(cfg.cache_override, dtype=int).reshape(K_R, cfg.num_ue, M)
        stored = np.zeros((K_R, F, M), dtype=bool)
        stored[:, requests, :] = c.astype(bool)
    else:
        c = stored[:, requests, :].astype(int)
    return CacheState(c=c, requests=requests, stored=stored)


# ----------------------------------------------------------------------------
# Scenario bundle
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    cfg: ScenarioConfig
    topology: Topology
    channels: ChannelSet
    cache: CacheState
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    # shorthand used throughout the numerical code
    @property
    def n_slots(self) -> int:
        return self.cfg.num_ue

    @property
    def M(self) -> int:
        return self.cfg.subfiles_per_file

    @property
    def K_R(self) -> int:
        return self.cfg.num_errh

    @property
    def n_r(self) -> int:
        return self.cfg.antennas_errh

    @property
    def stack_shape(self) -> tuple[int, int, int, int]:
        return (self.cfg.num_ue, self.M, self.cfg.num_tx_antennas, self.cfg.streams)

    def ue_of_slot(self, s: int) -> int:
        return s

    def with_config(self, **changes) -> "Scenario":
        """Same draws, different constants (channels and caches unchanged)."""
        return dataclasses.replace(self, cfg=self.cfg.replace(**changes))

    def without_cache(self) -> "Scenario":
        return dataclasses.replace(self, cache=self.cache.without_cache())


def make_scenario(cfg: ScenarioConfig, seed: int | None = None) -> Scenario:
    seed = cfg.rng_seed if seed is None else int(seed)
    topo = build_topology(cfg, seed)
    channels = draw_channels(cfg, topo, seed)
    cache = draw_cache_and_requests(cfg, seed)
    return Scenario(cfg=cfg, topology=topo, channels=channels, cache=cache, seed=seed)


def table2_overrides() -> dict:
    """Config overrides reproducing the example cache table (files 1-3 requested)."""
    return {"requests": (1, 2, 3), "cache_override": TABLE2_CACHE}


def as_tuple_matrix(rows: Sequence[Sequence[int]]) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(int(v) for v in r) for r in rows)
