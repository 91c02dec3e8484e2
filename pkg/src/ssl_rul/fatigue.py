"""Synthetic run-to-failure strain data from Paris-Erdogan crack growth.

A through crack lies on ``y = 0`` and grows in ``+x`` from the plate edge.
Every ``delta_k`` cycles the crack-tip stress field is evaluated at a set of
virtual strain gauges, giving one row of the measurement matrix.

Units are SI throughout except inside the Paris law, where the stress
intensity range is expressed in MPa*sqrt(m) to match the tabulated ``C``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numba
import numpy as np

CONFIG_VERSION = 1

# SeedSequence spawn-key codes, one per dataset role. Keeping them distinct
# guarantees test structures never coincide with training structures.
STREAM_CODES = {"unlabelled": 1, "labelled": 2, "test": 3}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GaugeSpec:
    x: float
    y: float
    angle: float  # degrees

    def __post_init__(self):
        if not 0.0 <= self.angle < 360.0:
            raise ConfigError(f"gauge angle must lie in [0, 360), got {self.angle}")


@dataclass(frozen=True)
class MaterialConfig:
    """Generation parameters. Defaults reproduce the 7075-T6 plate study."""

    youngs_modulus: float = 71.7e9
    poisson_ratio: float = 0.33
    fracture_toughness: float = 19.7e6
    sigma_max_range: tuple[float, float] = (75e6, 85e6)
    a0_mean: float = 5e-4
    a0_std: float = 2.5e-4
    m_mean: float = 3.4
    m_std: float = 0.25
    C_mean: float = 1e-10
    C_std: float = 5e-11
    rho_m_logC: float = -0.996
    gauges: tuple[GaugeSpec, ...] = (
        GaugeSpec(3e-3, 14e-3, 45.0),
        GaugeSpec(14e-3, 14e-3, 45.0),
        GaugeSpec(25e-3, 14e-3, 45.0),
    )
    delta_k: int = 500
    rng_seed: int = 0
    noise_std: float = 0.0
    r_min: float = 1e-4

    def __post_init__(self):
        lo, hi = self.sigma_max_range
        if self.a0_std < 0:
            raise ConfigError("a0_std must be >= 0")
        if not lo < hi:
            raise ConfigError("sigma_max_range must satisfy lo < hi")
        if abs(self.rho_m_logC) > 1:
            raise ConfigError("|rho_m_logC| must be <= 1")
        if self.delta_k < 1:
            raise ConfigError("delta_k must be >= 1")
        if not 0.0 < self.poisson_ratio < 0.5:
            raise ConfigError("poisson_ratio must lie in (0, 0.5)")
        if self.C_mean <= 0 or self.C_std < 0:
            raise ConfigError("C_mean must be > 0 and C_std >= 0")
        if self.noise_std < 0 or self.r_min <= 0:
            raise ConfigError("noise_std must be >= 0 and r_min > 0")

    @property
    def n_gauges(self) -> int:
        return len(self.gauges)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_max_range"] = list(self.sigma_max_range)
        d["gauges"] = [asdict(g) for g in self.gauges]
        return {"version": CONFIG_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "sigma_max_range" in d:
            d["sigma_max_range"] = tuple(float(v) for v in d["sigma_max_range"])
        if "gauges" in d:
            d["gauges"] = tuple(GaugeSpec(**g) for g in d["gauges"])
        return cls(**d)


@dataclass(frozen=True)
class CrackParams:
    a0: float
    m: float
    C: float
    sigma_max: float

    def __post_init__(self):
        if self.a0 <= 0 or self.C <= 0 or self.sigma_max <= 0:
            raise ValueError(f"invalid crack parameters {self}")


@dataclass
class StrainSequence:
    """One structure's strain history.

    Row ``k`` of ``measurements`` (0-based) is taken at cycle ``(k+1)*delta_k``.
    ``failure_cycles`` is None for truncated (unlabelled) sequences.
    """

    id: str
    params: CrackParams
    measurements: np.ndarray
    failure_cycles: int | None = None
    resamples: int = 0

    @property
    def length(self) -> int:
        return self.measurements.shape[0]


def lognormal_log_params(mean: float, std: float) -> tuple[float, float]:
    """Return (mu, sigma) of ln X for a lognormal X with the given mean/std."""
    var_ln = math.log1p((std / mean) ** 2)
    if std > 0 and var_ln <= 0:
        raise ConfigError("derived sigma of ln C is not positive")
    return math.log(mean) - 0.5 * var_ln, math.sqrt(var_ln)


def sample_crack_params(rng: np.random.Generator, config: MaterialConfig) -> CrackParams:
    a0 = rng.normal(config.a0_mean, config.a0_std)
    while a0 <= 0:
        a0 = rng.normal(config.a0_mean, config.a0_std)
    sigma_max = rng.uniform(*config.sigma_max_range)
    mu_ln, sd_ln = lognormal_log_params(config.C_mean, config.C_std)
    rho = config.rho_m_logC
    z1, z2 = rng.standard_normal(2)
    m = config.m_mean + config.m_std * z1
    ln_c = mu_ln + sd_ln * (rho * z1 + math.sqrt(1.0 - rho * rho) * z2)
    return CrackParams(a0=float(a0), m=float(m), C=math.exp(ln_c), sigma_max=float(sigma_max))


def critical_crack_size(params: CrackParams, K_Ic: float) -> float:
    """Crack length at which K = sigma*sqrt(pi*a) reaches the toughness."""
    return (K_Ic / params.sigma_max) ** 2 / math.pi


@numba.njit(cache=True)
def _euler_paris(a0, C, m, dk_mpa_coef, a_crit, delta_k):
    # dk_mpa_coef = sigma_max[MPa] * sqrt(pi); Delta K = coef * sqrt(a)
    a = a0
    n = 0
    recorded = []
    while a < a_crit:
        a += C * (dk_mpa_coef * math.sqrt(a)) ** m
        n += 1
        if n % delta_k == 0:
            recorded.append(a)
    out = np.empty(len(recorded))
    for i in range(len(recorded)):
        out[i] = recorded[i]
    return n, out


def integrate_paris(params: CrackParams, K_Ic: float, delta_k: int) -> tuple[int, np.ndarray]:
    """Per-cycle explicit Euler integration of da/dN = C (Delta K)^m.

    Returns the failure cycle (first N with a >= a_crit) and the crack size
    after every ``delta_k`` cycles up to and including failure.
    """
    a_crit = critical_crack_size(params, K_Ic)
    if params.a0 >= a_crit:
        return 0, np.empty(0)
    coef = params.sigma_max / 1e6 * math.sqrt(math.pi)
    n, sizes = _euler_paris(params.a0, params.C, params.m, coef, a_crit, int(delta_k))
    return int(n), sizes


def closed_form_lifetime(params: CrackParams, K_Ic: float) -> float:
    """Exact Paris integral from a0 to a_crit (m != 2), in cycles."""
    a_crit = critical_crack_size(params, K_Ic)
    m = params.m
    s = params.sigma_max / 1e6
    e = 1.0 - m / 2.0
    return (params.a0**e - a_crit**e) / (params.C * s**m * math.pi ** (m / 2) * (m / 2 - 1))


def _tip_stresses(a, gauge_x, gauge_y, sigma_max, r_min):
    """Westergaard mode-I near-tip field plus remote stress on sigma_yy."""
    a = np.asarray(a, dtype=float)
    dx = gauge_x - a
    dy = gauge_y
    r = np.maximum(np.hypot(dx, dy), r_min)
    phi = np.arctan2(dy, dx)
    K = sigma_max * np.sqrt(np.pi * a)
    amp = K / np.sqrt(2.0 * np.pi * r)
    c, s = np.cos(phi / 2), np.sin(phi / 2)
    s3, c3 = np.sin(1.5 * phi), np.cos(1.5 * phi)
    sxx = amp * c * (1.0 - s * s3)
    syy = amp * c * (1.0 + s * s3) + sigma_max
    txy = amp * c * s * c3
    return sxx, syy, txy


def strain_at_gauge(a, gauge: GaugeSpec, params: CrackParams, elastic: tuple[float, float],
                    r_min: float = 1e-4):
    """Normal strain read by ``gauge`` for crack length(s) ``a`` (plane stress)."""
    E, nu = elastic
    sxx, syy, txy = _tip_stresses(a, gauge.x, gauge.y, params.sigma_max, r_min)
    exx = (sxx - nu * syy) / E
    eyy = (syy - nu * sxx) / E
    gxy = 2.0 * (1.0 + nu) * txy / E
    th = math.radians(gauge.angle)
    ct, st = math.cos(th), math.sin(th)
    return exx * ct * ct + eyy * st * st + gxy * st * ct


def structure_rng(seed: int, stream: str, index: int) -> np.random.Generator:
    """Independent generator for one structure, keyed by (seed, role, index)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAM_CODES[stream], int(index)))
    return np.random.default_rng(ss)


def generate_structure(rng: np.random.Generator, config: MaterialConfig, *, min_length: int = 31,
                       id: str = "S-0", max_resamples: int = 10_000) -> StrainSequence:
    """Sample a structure and simulate it to failure.

    Structures with fewer than ``min_length`` measurements (usually h + 1) are
    rejected and redrawn from the same generator; the number of redraws is
    stored on the result.
    """
    elastic = (config.youngs_modulus, config.poisson_ratio)
    for resamples in range(max_resamples + 1):
        params = sample_crack_params(rng, config)
        t_f, sizes = integrate_paris(params, config.fracture_toughness, config.delta_k)
        if sizes.shape[0] < min_length:
            continue
        cols = [strain_at_gauge(sizes, g, params, elastic, config.r_min) for g in config.gauges]
        meas = np.stack(cols, axis=1)
        if config.noise_std > 0:
            meas = meas + rng.normal(0.0, config.noise_std, size=meas.shape)
        return StrainSequence(id=id, params=params, measurements=meas, failure_cycles=t_f,
                              resamples=resamples)
    raise RuntimeError(f"no structure with >= {min_length} measurements after {max_resamples} redraws")


def generate_population(config: MaterialConfig, n: int, *, stream: str = "labelled", seed: int | None = None,
                        min_length: int = 31, start: int = 0) -> list[StrainSequence]:
    seed = config.rng_seed if seed is None else seed
    prefix = {"unlabelled": "U", "labelled": "L", "test": "T"}[stream]
    out = []
    for i in range(start, start + n):
        rng = structure_rng(seed, stream, i)
        out.append(generate_structure(rng, config, min_length=min_length, id=f"{prefix}-{i:05d}"))
    return out


def _floor_ratio(d: float, n: int) -> int:
    # guards against 0.7 * 10 -> 6.999...
    return int(math.floor(d * n + 1e-9))


def truncate(seq: StrainSequence, d: float) -> StrainSequence:
    """Keep the first floor(d * L) measurements and drop the failure time."""
    if not 0.0 < d <= 1.0:
        raise ValueError(f"d must lie in (0, 1], got {d}")
    keep = _floor_ratio(d, seq.length)
    return replace(seq, measurements=seq.measurements[:keep].copy(), failure_cycles=None)


@dataclass
class WindowedSample:
    """An (input window, target) pair.

    ``t_index`` is the 1-based number of the last measurement in the window,
    so the input is rows ``t_index - h .. t_index - 1`` (0-based).
    """

    input: np.ndarray
    target: np.ndarray | float
    source_id: str
    t_index: int


TASKS = ("AE", "AR", "MSPA", "RUL")


def window_count(L: int, h: int, task: str, q: int = 1) -> int:
    if task in ("AE", "RUL"):
        n = L - h + 1
    elif task == "AR":
        n = L - h
    elif task == "MSPA":
        n = L - h - q + 1
    else:
        raise ValueError(f"unknown task {task!r}")
    return max(n, 0)


def make_windows(seq: StrainSequence, h: int, task: str, q: int = 1) -> list[WindowedSample]:
    if h < 1 or q < 1:
        raise ValueError("h and q must be >= 1")
    if task == "RUL" and seq.failure_cycles is None:
        raise ValueError(f"{seq.id} carries no failure time; RUL windows need labelled data")
    X = seq.measurements
    L = X.shape[0]
    out = []
    for k in range(window_count(L, h, task, q)):
        t = h + k
        inp = X[t - h:t]
        if task == "AE":
            tgt = inp
        elif task == "AR":
            tgt = X[t]
        elif task == "MSPA":
            tgt = X[t:t + q]
        else:
            tgt = float(L - t)
        out.append(WindowedSample(inp, tgt, seq.id, t))
    return out


def window_arrays(seqs, h: int, task: str, q: int = 1, stride: int = 1):
    """Stack windows of many sequences into arrays (vectorised make_windows).

    Returns (X, Y, t_index, source_index) with X of shape (n, h, n_g).
    """
    xs, ys, ts, src = [], [], [], []
    for j, seq in enumerate(seqs):
        X = seq.measurements
        L = X.shape[0]
        n = window_count(L, h, task, q)
        if n == 0:
            continue
        t = np.arange(h, h + n)[::stride]
        idx = t[:, None] - h + np.arange(h)[None, :]
        xs.append(X[idx])
        if task == "AE":
            ys.append(X[idx])
        elif task == "AR":
            ys.append(X[t])
        elif task == "MSPA":
            ys.append(X[t[:, None] + np.arange(q)[None, :]])
        elif task == "RUL":
            if seq.failure_cycles is None:
                raise ValueError(f"{seq.id} carries no failure time")
            ys.append((L - t).astype(float))
        else:
            raise ValueError(f"unknown task {task!r}")
        ts.append(t)
        src.append(np.full(t.shape[0], j))
    if not xs:
        n_g = seqs[0].measurements.shape[1] if seqs else 0
        shape_y = {"AE": (0, h, n_g), "AR": (0, n_g), "MSPA": (0, q, n_g), "RUL": (0,)}[task]
        return np.empty((0, h, n_g)), np.empty(shape_y), np.empty(0, int), np.empty(0, int)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ts), np.concatenate(src)
