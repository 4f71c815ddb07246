"""Data handling, synthetic benchmark, training with early stopping and evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

from . import autodiff as ad
from .distributions import (
    EPSILON_MM,
    VariantTag,
    censor_point,
    mixture_cdf_array,
    mixture_quantile_array,
    norm_ppf,
)
from .errors import (
    DegenerateThresholdError,
    MissingDataError,
    NumericError,
    ValidationError,
)
from .graph import Station, StationGraph, geodesic_distance
from .model import (
    Checkpoint,
    ModelConfig,
    NetworkParameters,
    ThresholdMode,
    XiMode,
    forward_params,
    mean_crps_loss,
)
from .scoring import crps_ensemble_array, crps_mixture_array, crps_normal, quantile_score

log = logging.getLogger(__name__)

NO_RAIN_MM = 0.01
QS_ALPHA = 0.99
PERCENTILE_CONVENTION = "linear interpolation between order statistics (type 7)"
SCORE_SPACE = "log-transformed"
ENS = "ENS"

# model variant name -> (distribution family, threshold mode)
MODEL_VARIANTS: dict[str, tuple[VariantTag, ThresholdMode]] = {
    "PlainNormal": (VariantTag.PLAIN_NORMAL, ThresholdMode.GLOBAL_FIXED),
    "NormalPointMass": (VariantTag.NORMAL_POINT_MASS, ThresholdMode.GLOBAL_FIXED),
    "NormalPointMassGPD": (VariantTag.NORMAL_POINT_MASS_GPD, ThresholdMode.GLOBAL_FIXED),
    "NormalPointMassGPDLearnedU": (VariantTag.NORMAL_POINT_MASS_GPD, ThresholdMode.LEARNED),
}
ALL_VARIANTS = (ENS, *MODEL_VARIANTS)


# ---------------------------------------------------------------- records and cubes

@dataclass(frozen=True)
class ForecastRecord:
    """One CSV row: a single ensemble member at one station, init time and lead."""

    station_id: str
    init_time: str
    lead_hours: int
    member: int
    features: tuple[float, ...]
    obs_precip_mm: float


@dataclass
class ForecastCube:
    """Dense forecasts for one lead time.

    ``features`` has shape (T, N, M, F) and ``obs_mm`` shape (T, N), with
    stations in ``station_ids`` order and init times sorted.
    """

    lead_hours: int
    init_times: list[str]
    station_ids: list[str]
    feature_names: list[str]
    features: np.ndarray
    obs_mm: np.ndarray

    def __post_init__(self):
        t, n = len(self.init_times), len(self.station_ids)
        if self.features.ndim != 4 or self.features.shape[:2] != (t, n):
            raise ValidationError(f"feature cube shape {self.features.shape} does not match "
                                  f"{t} init times x {n} stations")
        if self.features.shape[3] != len(self.feature_names):
            raise ValidationError("feature names do not match the feature axis")
        if self.obs_mm.shape != (t, n):
            raise ValidationError(f"observation shape {self.obs_mm.shape} != {(t, n)}")
        if not np.all(np.isfinite(self.obs_mm)) or np.any(self.obs_mm < 0):
            raise ValidationError("observations must be finite and non-negative")
        if self.lead_hours <= 0:
            raise ValidationError(f"lead_hours must be positive, got {self.lead_hours}")

    @property
    def n_members(self) -> int:
        return self.features.shape[2]

    def subset(self, index: Sequence[int]) -> "ForecastCube":
        index = np.asarray(index, dtype=np.intp)
        return ForecastCube(self.lead_hours, [self.init_times[i] for i in index],
                            list(self.station_ids), list(self.feature_names),
                            self.features[index], self.obs_mm[index])

    def feature(self, name: str) -> np.ndarray:
        try:
            return self.features[..., self.feature_names.index(name)]
        except ValueError:
            raise ValidationError(f"feature {name!r} not present; have {self.feature_names}") from None

    def records(self) -> Iterator[ForecastRecord]:
        for t, init in enumerate(self.init_times):
            for s, sid in enumerate(self.station_ids):
                for m in range(self.n_members):
                    yield ForecastRecord(sid, init, self.lead_hours, m,
                                         tuple(float(v) for v in self.features[t, s, m]),
                                         float(self.obs_mm[t, s]))


@dataclass
class EnsembleBatch:
    """Standardised member features (N, M, F) and transformed observations (N,)."""

    station_ids: list[str]
    features: np.ndarray
    y: np.ndarray


def transform_obs(raw_mm, epsilon: float = EPSILON_MM):
    """``log(raw + epsilon)``; equals the censor point for dry observations."""
    raw = np.asarray(raw_mm, dtype=np.float64)
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    if np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise ValidationError("precipitation must be finite and non-negative")
    out = np.log(raw + epsilon)
    return float(out) if out.ndim == 0 else out


def inverse_transform_obs(y, epsilon: float = EPSILON_MM):
    out = np.exp(np.asarray(y, dtype=np.float64)) - epsilon
    return float(out) if out.ndim == 0 else out


def fit_global_threshold(train_obs_transformed, epsilon: float = EPSILON_MM) -> float:
    """90th percentile (type-7 linear interpolation) of transformed training observations."""
    y = np.asarray(train_obs_transformed, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValidationError("cannot fit a threshold on an empty training set")
    u = float(np.quantile(y, 0.9, method="linear"))
    if u <= censor_point(epsilon):
        raise DegenerateThresholdError(
            f"90th percentile {u} sits on the censor point; fewer than 10% wet observations")
    return u


# ---------------------------------------------------------------- CSV I/O

def _parse_time(s: str) -> datetime:
    return datetime.fromisoformat(s.replace("Z", "+00:00"))


def write_forecast_csv(path: str | Path, cubes: Iterable[ForecastCube]) -> int:
    """Write cubes in the long one-row-per-member schema; returns the row count."""
    cubes = list(cubes)
    if not cubes:
        raise ValidationError("nothing to write")
    names = cubes[0].feature_names
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["station_id", "init_time", "lead_hours", "member", *names, "obs_precip_mm"])
        for cube in cubes:
            if cube.feature_names != names:
                raise ValidationError("all lead times must share the feature list")
            feats = np.char.mod("%.5f", cube.features)
            obs = np.char.mod("%.4f", cube.obs_mm)
            for t, init in enumerate(cube.init_times):
                for s, sid in enumerate(cube.station_ids):
                    for m in range(cube.n_members):
                        writer.writerow([sid, init, cube.lead_hours, m, *feats[t, s, m], obs[t, s]])
                        rows += 1
    return rows


def read_forecast_csv(path: str | Path, station_ids: Sequence[str] | None = None
                      ) -> dict[int, ForecastCube]:
    """Read the long CSV into one dense cube per lead time.

    Stations follow ``station_ids`` when given (normally the graph order).
    """
    try:
        df = pd.read_csv(path, dtype={"station_id": str, "init_time": str},
                         float_precision="round_trip")
    except FileNotFoundError:
        raise
    except Exception as exc:  # pandas raises several parser error types
        raise ValidationError(f"{path}: unreadable forecast CSV ({exc})") from exc
    cols = list(df.columns)
    for required in ("station_id", "init_time", "lead_hours", "member"):
        if required not in cols:
            raise ValidationError(f"{path}: missing column {required!r}")
    if cols[-1] != "obs_precip_mm":
        raise ValidationError(f"{path}: last column must be 'obs_precip_mm', found {cols[-1]!r}")
    feature_names = cols[4:-1]
    if not feature_names:
        raise ValidationError(f"{path}: no feature columns between 'member' and 'obs_precip_mm'")
    if station_ids is None:
        station_ids = sorted(df["station_id"].unique())
    missing = sorted(set(df["station_id"]) - set(station_ids))
    if missing:
        raise ValidationError(f"{path}: stations {missing[:5]} are not in the station list")

    cubes = {}
    for lead, grp in df.groupby("lead_hours", sort=True):
        init_times = sorted(grp["init_time"].unique(), key=_parse_time)
        members = sorted(grp["member"].unique())
        if members != list(range(len(members))):
            raise ValidationError(f"lead {lead}: member indices are not dense from 0")
        t_idx = pd.Index(init_times).get_indexer(grp["init_time"])
        s_idx = pd.Index(list(station_ids)).get_indexer(grp["station_id"])
        m_idx = grp["member"].to_numpy()
        shape = (len(init_times), len(station_ids), len(members))
        count = np.zeros(shape, dtype=np.int64)
        np.add.at(count, (t_idx, s_idx, m_idx), 1)
        if np.any(count > 1):
            raise ValidationError(f"lead {lead}: duplicated (init_time, station, member) rows")
        if np.any(count == 0):
            raise MissingDataError(f"lead {lead}: {int((count == 0).sum())} "
                                   "(init_time, station, member) rows are missing")
        feats = np.empty(shape + (len(feature_names),))
        feats[t_idx, s_idx, m_idx] = grp[feature_names].to_numpy(dtype=np.float64)
        obs = np.empty(shape)
        obs[t_idx, s_idx, m_idx] = grp["obs_precip_mm"].to_numpy(dtype=np.float64)
        if np.any(obs != obs[:, :, :1]):
            raise ValidationError(f"lead {lead}: observation differs between members")
        cubes[int(lead)] = ForecastCube(int(lead), list(init_times), list(station_ids),
                                        list(feature_names), feats, obs[:, :, 0].copy())
    return cubes


# ---------------------------------------------------------------- synthetic benchmark

@dataclass
class SyntheticConfig:
    n_stations: int = 50
    n_days: int = 300
    n_members: int = 11
    n_features: int = 10
    lead_hours: tuple[int, ...] = (24,)
    dry_fraction: float = 0.5
    start_date: str = "2000-01-01"
    lat_range: tuple[float, float] = (44.0, 54.0)
    lon_range: tuple[float, float] = (0.0, 16.0)
    length_scale_km: float = 250.0
    temporal_corr: float = 0.5
    wet_loading: float = 0.8       # how strongly the latent field drives wet/dry
    tail_scale: float = 0.35       # GPD excess of wet log-intensities
    tail_shape: float = 0.35
    ens_wet_bias: float = 0.4      # raw ensemble rains too often ...
    ens_tail_damping: float = 0.3  # ... and misses the heavy tail

    def __post_init__(self):
        self.lead_hours = tuple(int(x) for x in self.lead_hours)
        self.lat_range = tuple(self.lat_range)
        self.lon_range = tuple(self.lon_range)
        for name in ("n_stations", "n_days", "n_members", "n_features"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lead_hours or min(self.lead_hours) <= 0:
            raise ValidationError("lead_hours must be a non-empty list of positive hours")
        if not 0.0 <= self.dry_fraction <= 1.0:
            raise ValidationError(f"dry_fraction must lie in [0, 1], got {self.dry_fraction}")
        if not 0.0 <= self.tail_shape < 1.0:
            raise ValidationError("tail_shape must lie in [0, 1)")


@dataclass
class SyntheticData:
    stations: list[Station]
    cubes: dict[int, ForecastCube]

    def records(self) -> Iterator[ForecastRecord]:
        for lead in sorted(self.cubes):
            yield from self.cubes[lead].records()


def _gpd_draw(rng: np.random.Generator, scale: float, shape: float, size) -> np.ndarray:
    v = rng.random(size)
    if shape == 0:
        return -scale * np.log1p(-v)
    return scale / shape * ((1.0 - v) ** (-shape) - 1.0)


def _quantize(x: np.ndarray, fmt: str) -> np.ndarray:
    # values survive a CSV round trip unchanged
    return np.char.mod(fmt, x).astype(np.float64)


def generate_synthetic(config: SyntheticConfig, seed: int) -> SyntheticData:
    """Zero-inflated, spatially correlated precipitation with an NWP-like ensemble.

    A latent Gaussian field (exponential spatial covariance, AR(1) in time)
    drives both the observation and the ensemble.  An observation is dry
    when ``a Z + sqrt(1-a^2) eta`` falls below the ``dry_fraction`` normal
    quantile, so dryness becomes less likely as the latent intensity grows and
    the marginal dry probability equals ``dry_fraction``.  Wet log-intensities
    carry a GPD excess.  Members see a lead-dependent noisy copy of the field,
    rain too often and under-represent the tail.
    """
    cfg = config
    rng = np.random.default_rng(seed)
    n, days, m_ens, n_feat = cfg.n_stations, cfg.n_days, cfg.n_members, cfg.n_features

    lat = rng.uniform(*cfg.lat_range, size=n)
    lon = rng.uniform(*cfg.lon_range, size=n)
    alt = rng.uniform(0.0, 1500.0, size=n)
    stations = [Station(f"S{i:03d}", float(f"{lat[i]:.5f}"), float(f"{lon[i]:.5f}"),
                        float(f"{alt[i]:.1f}")) for i in range(n)]
    dist = np.array([[geodesic_distance(a, b) for b in stations] for a in stations])
    cov = np.exp(-dist / max(cfg.length_scale_km, 1e-9)) + 1e-8 * np.eye(n)
    chol = np.linalg.cholesky(cov)

    rho = cfg.temporal_corr
    z = np.empty((days, n))
    z[0] = chol @ rng.standard_normal(n)
    for t in range(1, days):
        z[t] = rho * z[t - 1] + math.sqrt(1.0 - rho ** 2) * (chol @ rng.standard_normal(n))

    a = cfg.wet_loading
    with np.errstate(divide="ignore"):
        dry_cut = float(norm_ppf(cfg.dry_fraction))
    wet_score = a * z + math.sqrt(1.0 - a * a) * rng.standard_normal((days, n))
    wet = wet_score >= dry_cut
    log_int = (0.0 + 0.8 * z + 0.5 * rng.standard_normal((days, n))
               + _gpd_draw(rng, cfg.tail_scale, cfg.tail_shape, (days, n)))
    obs = np.where(wet, np.maximum(np.exp(log_int), 0.02), 0.0)
    obs = _quantize(obs, "%.4f")

    start = datetime.fromisoformat(cfg.start_date)
    init_times = [(start + timedelta(days=d)).strftime("%Y-%m-%dT%H:%M:%SZ") for d in range(days)]
    feature_names = ["tp6"] + [f"x{k:02d}" for k in range(1, n_feat)]
    mix = rng.normal(size=n_feat)  # per-feature sensitivity to the latent field
    alt_std = (alt - alt.mean()) / (alt.std() + 1e-12)

    cubes = {}
    for lead in cfg.lead_hours:
        skill = max(0.3, 0.95 - 0.002 * lead)
        z_fc = skill * z + math.sqrt(1.0 - skill ** 2) * rng.standard_normal((days, n))
        z_mem = z_fc[:, :, None] + 0.35 * rng.standard_normal((days, n, m_ens))
        mem_wet = (a * z_mem + math.sqrt(1.0 - a * a) * rng.standard_normal((days, n, m_ens))
                   >= dry_cut - cfg.ens_wet_bias)
        mem_int = (0.2 + 0.8 * z_mem + 0.4 * rng.standard_normal((days, n, m_ens))
                   + cfg.ens_tail_damping * _gpd_draw(rng, cfg.tail_scale, cfg.tail_shape,
                                                       (days, n, m_ens)))
        feats = np.empty((days, n, m_ens, n_feat))
        feats[..., 0] = np.where(mem_wet, np.exp(mem_int), 0.0)
        for k in range(1, n_feat):
            if k % 3 == 0:
                base = 0.3 * alt_std[None, :, None]  # static-ish geography feature
            else:
                base = mix[k] * z_mem + 0.5 * np.sin(k * z_mem)
            feats[..., k] = base + 0.5 * rng.standard_normal((days, n, m_ens))
        cubes[lead] = ForecastCube(lead, init_times, [s.id for s in stations], feature_names,
                                   _quantize(feats, "%.5f"), obs.copy())
    return SyntheticData(stations, cubes)


# ---------------------------------------------------------------- splits

@dataclass
class SplitSpec:
    """Inclusive ISO date ranges.  ``validation=None`` takes the last 15% of training."""

    train: tuple[str, str]
    test: tuple[str, str]
    validation: tuple[str, str] | None = None
    val_fraction: float = 0.15

    @classmethod
    def by_fraction(cls, init_times: Sequence[str], test_fraction: float = 0.25,
                    val_fraction: float = 0.15) -> "SplitSpec":
        times = sorted(init_times, key=_parse_time)
        if len(times) < 3:
            raise ValidationError("need at least three init times to split")
        n_test = min(len(times) - 2, max(1, int(round(test_fraction * len(times)))))
        train, test = times[:-n_test], times[-n_test:]
        return cls((train[0], train[-1]), (test[0], test[-1]), None, val_fraction)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolve(self, init_times: Sequence[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Indices (fit, validation, test) into ``init_times``."""
        stamps = [_parse_time(t) for t in init_times]

        def within(rng):
            lo, hi = _parse_time(rng[0]), _parse_time(rng[1])
            return [i for i, s in enumerate(stamps) if lo <= s <= hi]

        def order(idx):
            return sorted(idx, key=lambda i: stamps[i])

        train, test = order(within(self.train)), order(within(self.test))
        if self.validation is None:
            n_val = max(1, int(round(self.val_fraction * len(train))))
            if len(train) <= n_val:
                raise ValidationError("training range too short to carve out a validation split")
            fit, val = train[:-n_val], train[-n_val:]
        else:
            val = order(within(self.validation))
            fit = [i for i in train if i not in set(val)]
        if set(fit) & set(test) or set(val) & set(test):
            raise ValidationError("train/validation/test ranges overlap")
        if not fit or not val or not test:
            raise ValidationError(f"empty split: fit={len(fit)} val={len(val)} test={len(test)}")
        return (np.asarray(fit, dtype=np.intp), np.asarray(val, dtype=np.intp),
                np.asarray(test, dtype=np.intp))


# ---------------------------------------------------------------- features

@dataclass
class FeatureScaler:
    feature_names: list[str]
    log_features: list[str]
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = EPSILON_MM

    @classmethod
    def fit(cls, cube: ForecastCube, log_features: Sequence[str] = ("tp6",),
            epsilon: float = EPSILON_MM) -> "FeatureScaler":
        log_features = [f for f in log_features if f in cube.feature_names]
        x = _log_columns(cube.features, cube.feature_names, log_features, epsilon)
        flat = x.reshape(-1, x.shape[-1])
        std = flat.std(axis=0)
        return cls(list(cube.feature_names), log_features, flat.mean(axis=0),
                   np.where(std > 0, std, 1.0), epsilon)

    def apply(self, cube: ForecastCube) -> np.ndarray:
        if cube.feature_names != self.feature_names:
            raise ValidationError(f"feature names {cube.feature_names} do not match the "
                                  f"checkpoint's {self.feature_names}")
        x = _log_columns(cube.features, cube.feature_names, self.log_features, self.epsilon)
        return (x - self.mean) / self.std


def _log_columns(x, names, log_features, epsilon):
    x = np.array(x, dtype=np.float64)
    for name in log_features:
        k = names.index(name)
        x[..., k] = np.log(np.maximum(x[..., k], 0.0) + epsilon)
    return x


def batches(cube: ForecastCube, scaler: FeatureScaler) -> Iterator[EnsembleBatch]:
    """One :class:`EnsembleBatch` per init time."""
    x = scaler.apply(cube)
    y = transform_obs(cube.obs_mm, scaler.epsilon)
    for t in range(len(cube.init_times)):
        yield EnsembleBatch(list(cube.station_ids), x[t], y[t])


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 25
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    batch_days: int = 1
    log_features: tuple[str, ...] = ("tp6",)

    def __post_init__(self):
        self.log_features = tuple(self.log_features)
        if self.epochs < 0 or self.batch_days < 1 or self.lr <= 0:
            raise ValidationError("epochs >= 0, batch_days >= 1 and lr > 0 are required")


@dataclass
class EpochRecord:
    epoch: int
    train_crps: float
    val_crps: float


@dataclass
class TrainingLog:
    initial_train_crps: float
    initial_val_crps: float
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def final_train_crps(self) -> float:
        return self.epochs[-1].train_crps if self.epochs else self.initial_train_crps

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_crps", "val_crps"])
            for r in self.epochs:
                writer.writerow([r.epoch, repr(r.train_crps), repr(r.val_crps)])


def _inv_softplus(x: float) -> float:
    return float(x + math.log(-math.expm1(-x)))


def climatology_bias(y: np.ndarray, cfg: ModelConfig) -> dict[str, float]:
    """Head biases that make an untrained network predict the training climatology."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    c = cfg.c
    floor = cfg.sigma_floor

    def sigma_bias(s):
        return _inv_softplus(max(s - floor, 1e-3))

    if cfg.variant is VariantTag.PLAIN_NORMAL:
        return {"mu": float(y.mean()), "sigma": sigma_bias(float(y.std()))}
    wet = y[y > c]
    dry_frac = float(np.mean(y <= c))
    p = min(max(dry_frac, 1e-3), 1.0 - 1e-3)
    bias = {"p": math.log(p / (1.0 - p)),
            "mu": float(wet.mean()) if wet.size else c,
            "sigma": sigma_bias(float(wet.std()) if wet.size > 1 else 1.0)}
    if cfg.has_tail:
        u = cfg.u_global if cfg.u_global is not None else fit_global_threshold(y, cfg.epsilon)
        excess = y[y > u] - u
        xi = cfg.xi_fixed
        scale = float(excess.mean()) * (1.0 - xi) if excess.size else 0.5
        bias["sigma_u"] = sigma_bias(max(scale, 0.05))
        if cfg.threshold_mode is ThresholdMode.LEARNED:
            bias["u"] = u
        if cfg.xi_mode is XiMode.LEARNED:
            bias["xi"] = math.log(xi / (cfg.xi_max - xi))
    return bias


def _mean_crps(net, cfg, x, y, graph, chunk: int = 64) -> float:
    total = 0.0
    with ad.no_grad():
        for start in range(0, x.shape[0], chunk):
            loss = mean_crps_loss(net, cfg, x[start:start + chunk], y[start:start + chunk], graph)
            total += loss.item() * y[start:start + chunk].size
    return total / y.size


def build_model_config(variant: str, n_features: int, y_fit: np.ndarray,
                       epsilon: float = EPSILON_MM, **overrides) -> ModelConfig:
    """ModelConfig for a named variant; the global threshold is fitted on ``y_fit``."""
    if variant not in MODEL_VARIANTS:
        raise ValidationError(f"unknown model variant {variant!r}; choose from {list(MODEL_VARIANTS)}")
    tag, mode = MODEL_VARIANTS[variant]
    u_global = None
    if tag is VariantTag.NORMAL_POINT_MASS_GPD:
        u_global = fit_global_threshold(y_fit, epsilon)
    return ModelConfig(n_features=n_features, variant=tag, threshold_mode=mode,
                       u_global=u_global, epsilon=epsilon, **overrides)


def train(model_cfg: ModelConfig, split: SplitSpec, graph: StationGraph, cube: ForecastCube,
          seed: int, train_cfg: TrainConfig | None = None,
          metadata: dict | None = None) -> tuple[Checkpoint, TrainingLog]:
    """Minimise mean CRPS with Adam; keep the epoch with the lowest validation CRPS."""
    tc = train_cfg or TrainConfig()
    if cube.station_ids != graph.station_ids:
        raise ValidationError("forecast stations are not aligned with the graph")
    fit_idx, val_idx, _ = split.resolve(cube.init_times)
    fit_cube = cube.subset(fit_idx)
    scaler = FeatureScaler.fit(fit_cube, tc.log_features, model_cfg.epsilon)
    x_all = scaler.apply(cube)
    y_all = transform_obs(cube.obs_mm, model_cfg.epsilon)
    x_fit, y_fit = x_all[fit_idx], y_all[fit_idx]
    x_val, y_val = x_all[val_idx], y_all[val_idx]
    if model_cfg.has_tail and not np.any(y_fit > (model_cfg.u_global or np.inf)):
        log.warning("no training observation exceeds the GPD threshold; tail branch inactive")

    rng = np.random.default_rng(seed)
    net = NetworkParameters.init(model_cfg, rng, climatology_bias(y_fit, model_cfg))
    params = net.trainable()
    state = ad.AdamState.zeros_like([p.value for p in params])
    shuffle_rng = np.random.default_rng([seed, 1])

    history = TrainingLog(_mean_crps(net, model_cfg, x_fit, y_fit, graph),
                          _mean_crps(net, model_cfg, x_val, y_val, graph))
    best_val, best = math.inf, net.snapshot()
    for epoch in range(1, tc.epochs + 1):
        order = shuffle_rng.permutation(len(fit_idx))
        for b, start in enumerate(range(0, len(order), tc.batch_days)):
            sel = order[start:start + tc.batch_days]
            loss = mean_crps_loss(net, model_cfg, x_fit[sel], y_fit[sel], graph)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss in epoch {epoch}, batch {b}")
            for p in params:
                p.zero_grad()
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
            new_values, state = ad.adam_step([p.value for p in params], grads, state,
                                             tc.lr, tc.beta1, tc.beta2, tc.eps_opt)
            for p, v in zip(params, new_values):
                p.value = v
        rec = EpochRecord(epoch, _mean_crps(net, model_cfg, x_fit, y_fit, graph),
                          _mean_crps(net, model_cfg, x_val, y_val, graph))
        history.epochs.append(rec)
        log.info("epoch %d train_crps=%.5f val_crps=%.5f", epoch, rec.train_crps, rec.val_crps)
        if rec.val_crps < best_val:
            best_val, best, history.best_epoch = rec.val_crps, net.snapshot(), epoch
    net.load_snapshot(best)

    meta = {"lead_hours": cube.lead_hours, "best_epoch": history.best_epoch, "seed": seed,
            "split": split.to_dict(), "train": asdict(tc)}
    meta["train"]["log_features"] = list(tc.log_features)
    meta.update(metadata or {})
    ckpt = Checkpoint(model_cfg, net, list(cube.feature_names), scaler.mean, scaler.std,
                      list(scaler.log_features), meta)
    return ckpt, history


# ---------------------------------------------------------------- evaluation

@dataclass
class ScoreReport:
    variant: str
    lead_hours: int
    crps: float
    brier: float
    qs99: float
    n_records: int
    space: str = SCORE_SPACE
    conventions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        return cls(**d)


@dataclass
class StationScore:
    variant: str
    lead_hours: int
    station_id: str
    n_records: int
    crps: float
    brier: float
    qs99: float


@dataclass
class Evaluation:
    report: ScoreReport
    stations: list[StationScore]


def conventions(epsilon: float = EPSILON_MM) -> dict:
    return {
        "percentile": PERCENTILE_CONVENTION,
        "brier_threshold": (f"no rain = obs < {NO_RAIN_MM} mm; forecast probability = "
                            f"F(log({NO_RAIN_MM} + {epsilon}))"),
        "quantile_score": f"pinball loss at alpha={QS_ALPHA}, no factor 2",
        "ensemble_crps": "standard estimator on log-transformed members",
    }


def predict_arrays(ckpt: Checkpoint, cube: ForecastCube, graph: StationGraph) -> dict[str, np.ndarray]:
    """Distribution parameters of shape (T, N) for every init time in ``cube``."""
    if cube.station_ids != graph.station_ids:
        raise ValidationError("forecast stations are not aligned with the graph")
    cfg = ckpt.config
    scaler = FeatureScaler(ckpt.feature_names, ckpt.log_features, ckpt.feature_mean,
                           ckpt.feature_std, cfg.epsilon)
    x = scaler.apply(cube)
    t, n = x.shape[:2]
    with ad.no_grad():
        out = forward_params(ckpt.network, cfg, x, graph)
    arrays = {k: v.value.reshape(t, n) for k, v in out.items()}
    if cfg.variant is VariantTag.PLAIN_NORMAL:
        arrays.update(p=np.zeros((t, n)), c=np.full((t, n), -np.inf))
    else:
        arrays["c"] = np.full((t, n), cfg.c)
    if not cfg.has_tail:
        arrays.update(u=np.full((t, n), np.inf), sigma_u=np.ones((t, n)), xi=np.full((t, n), 0.5))
    return arrays


def _finish(variant, lead, crps, brier, qs, station_ids, epsilon) -> Evaluation:
    report = ScoreReport(variant, int(lead), float(crps.mean()), float(brier.mean()),
                         float(qs.mean()), int(crps.size), SCORE_SPACE, conventions(epsilon))
    n_days = crps.shape[0]
    stations = [StationScore(variant, int(lead), sid, n_days, float(crps[:, s].mean()),
                             float(brier[:, s].mean()), float(qs[:, s].mean()))
                for s, sid in enumerate(station_ids)]
    return Evaluation(report, stations)


def evaluate(ckpt: Checkpoint, cube: ForecastCube, graph: StationGraph,
             variant: str | None = None) -> Evaluation:
    """CRPS, no-rain Brier score and QS_0.99 of a trained model on ``cube``."""
    cfg = ckpt.config
    eps = cfg.epsilon
    prm = predict_arrays(ckpt, cube, graph)
    y = transform_obs(cube.obs_mm, eps)
    if cfg.variant is VariantTag.PLAIN_NORMAL:
        crps = crps_normal(prm["mu"], prm["sigma"], y)
    else:
        crps = crps_mixture_array(prm["p"], prm["mu"], prm["sigma"], prm["u"], prm["sigma_u"],
                                  prm["xi"], prm["c"], y)
    args = (prm["p"], prm["mu"], prm["sigma"], prm["u"], prm["sigma_u"], prm["xi"], prm["c"])
    prob_dry = mixture_cdf_array(*args, math.log(NO_RAIN_MM + eps))
    observed_dry = cube.obs_mm < NO_RAIN_MM
    brier = (prob_dry - observed_dry) ** 2
    q99 = mixture_quantile_array(*args, QS_ALPHA)
    qs = quantile_score(q99, y, QS_ALPHA)
    name = variant or ckpt.metadata.get("variant", cfg.variant.value)
    return _finish(name, cube.lead_hours, np.asarray(crps), brier, np.asarray(qs),
                   cube.station_ids, eps)


def evaluate_ensemble(cube: ForecastCube, ens_feature: str = "tp6",
                      epsilon: float = EPSILON_MM) -> Evaluation:
    """Raw-ensemble baseline: members of ``ens_feature`` (mm) scored in transformed space."""
    members_mm = cube.feature(ens_feature)
    members = transform_obs(np.maximum(members_mm, 0.0), epsilon)
    y = transform_obs(cube.obs_mm, epsilon)
    t, n, m = members.shape
    crps = crps_ensemble_array(members.reshape(t * n, m), y.reshape(-1)).reshape(t, n)
    prob_dry = (members_mm < NO_RAIN_MM).mean(axis=-1)
    brier = (prob_dry - (cube.obs_mm < NO_RAIN_MM)) ** 2
    q99 = np.quantile(members, QS_ALPHA, axis=-1, method="linear")
    qs = quantile_score(q99, y, QS_ALPHA)
    return _finish(ENS, cube.lead_hours, crps, brier, np.asarray(qs), cube.station_ids, epsilon)


def train_variant(variant: str, cube: ForecastCube, graph: StationGraph, split: SplitSpec,
                  seed: int, train_cfg: TrainConfig | None = None,
                  epsilon: float = EPSILON_MM, **model_overrides) -> tuple[Checkpoint, TrainingLog]:
    """Fit the global threshold on the fitting period, then :func:`train`."""
    tc = train_cfg or TrainConfig()
    fit_idx, _, _ = split.resolve(cube.init_times)
    y_fit = transform_obs(cube.obs_mm[fit_idx], epsilon)
    cfg = build_model_config(variant, len(cube.feature_names), y_fit, epsilon, **model_overrides)
    return train(cfg, split, graph, cube, seed, tc, {"variant": variant})

