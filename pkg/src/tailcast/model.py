"""Forecast network: DeepSet over ensemble members, GINE layers over stations,
and one affine head per distribution parameter.

Shapes used throughout: ``B`` forecast days, ``N`` stations, ``M`` members,
``F`` features.  Days are stacked into one block-diagonal graph of ``B * N``
nodes so a whole minibatch shares a single tape.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AffineLayer, Tensor
from .distributions import (
    THRESHOLD_GAP,
    DistributionVariant,
    TailedMixtureParams,
    VariantTag,
    censor_point,
)
from .errors import NumericError, ShapeError, ValidationError
from .graph import StationGraph

CHECKPOINT_FORMAT = "tailcast-checkpoint/1"
INV_SQRT2 = 1.0 / math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


class ThresholdMode(str, enum.Enum):
    GLOBAL_FIXED = "global"
    LEARNED = "learned"


class XiMode(str, enum.Enum):
    FIXED = "fixed"
    LEARNED = "learned"


@dataclass
class ModelConfig:
    n_features: int
    variant: VariantTag = VariantTag.NORMAL_POINT_MASS_GPD
    embed_dim: int = 32
    hidden_dim: int = 64
    gnn_layers: int = 2
    learn_gine_epsilon: bool = True
    threshold_mode: ThresholdMode = ThresholdMode.GLOBAL_FIXED
    u_global: float | None = None
    xi_mode: XiMode = XiMode.FIXED
    xi_fixed: float = 0.5
    xi_max: float = 0.99
    sigma_floor: float = 1e-3
    aggregation: str = "sum"
    epsilon: float = 0.01

    def __post_init__(self):
        self.variant = VariantTag(self.variant)
        self.threshold_mode = ThresholdMode(self.threshold_mode)
        self.xi_mode = XiMode(self.xi_mode)
        for name in ("n_features", "embed_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.gnn_layers < 0:
            raise ValidationError("gnn_layers must be >= 0")
        if not 0.0 < self.xi_fixed < 1.0:
            raise ValidationError(f"fixed xi must lie in (0, 1), got {self.xi_fixed}")
        if not 0.0 < self.xi_max < 1.0:
            raise ValidationError(f"xi_max must lie in (0, 1), got {self.xi_max}")
        if self.sigma_floor <= 0:
            raise ValidationError("sigma_floor must be positive")
        if self.aggregation not in ("sum", "mean"):
            raise ValidationError(f"unknown DeepSet aggregation {self.aggregation!r}")
        if (self.has_tail and self.threshold_mode is ThresholdMode.GLOBAL_FIXED
                and self.u_global is not None and not self.u_global >= self.c + THRESHOLD_GAP):
            raise ValidationError(f"global threshold {self.u_global} does not exceed c={self.c}")

    @property
    def c(self) -> float:
        return censor_point(self.epsilon)

    @property
    def has_tail(self) -> bool:
        return self.variant is VariantTag.NORMAL_POINT_MASS_GPD

    @property
    def head_names(self) -> list[str]:
        if self.variant is VariantTag.PLAIN_NORMAL:
            return ["mu", "sigma"]
        names = ["p", "mu", "sigma"]
        if self.has_tail:
            names.append("sigma_u")
            if self.xi_mode is XiMode.LEARNED:
                names.append("xi")
            if self.threshold_mode is ThresholdMode.LEARNED:
                names.append("u")
        return names

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["threshold_mode"] = self.threshold_mode.value
        d["xi_mode"] = self.xi_mode.value
        return d


@dataclass
class NetworkParameters:
    rho: list[AffineLayer]
    psi: list[AffineLayer]
    gine_mlps: list[list[AffineLayer]]
    gine_eps: list[Tensor]
    heads: dict[str, AffineLayer] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator,
             head_bias: dict[str, float] | None = None) -> "NetworkParameters":
        """Random weights; head biases optionally preset (e.g. climatology)."""
        e, h = cfg.embed_dim, cfg.hidden_dim
        rho = [AffineLayer.init(rng, cfg.n_features, h, "relu"), AffineLayer.init(rng, h, e)]
        psi = [AffineLayer.init(rng, e, h, "relu"), AffineLayer.init(rng, h, e)]
        mlps = [[AffineLayer.init(rng, e, h, "relu"), AffineLayer.init(rng, h, e)]
                for _ in range(cfg.gnn_layers)]
        eps = [Tensor(np.zeros(()), cfg.learn_gine_epsilon) for _ in range(cfg.gnn_layers)]
        heads = {}
        for name in cfg.head_names:
            layer = AffineLayer.init(rng, e, 1)
            # zero output weights: the untrained network predicts the bias
            layer.weights.value[:] = 0.0
            if head_bias and name in head_bias:
                layer.bias.value[:] = head_bias[name]
            heads[name] = layer
        return cls(rho, psi, mlps, eps, heads)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for prefix, layers in (("rho", self.rho), ("psi", self.psi)):
            for k, layer in enumerate(layers):
                out += [(f"{prefix}.{k}.weights", layer.weights), (f"{prefix}.{k}.bias", layer.bias)]
        for t, mlp in enumerate(self.gine_mlps):
            for k, layer in enumerate(mlp):
                out += [(f"gine.{t}.{k}.weights", layer.weights), (f"gine.{t}.{k}.bias", layer.bias)]
            out.append((f"gine.{t}.epsilon", self.gine_eps[t]))
        for name in sorted(self.heads):
            out += [(f"head.{name}.weights", self.heads[name].weights),
                    (f"head.{name}.bias", self.heads[name].bias)]
        return out

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters() if t.requires_grad]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.named_parameters()}

    def load_snapshot(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in values:
                raise ValidationError(f"checkpoint lacks weight array {name!r}")
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: expected shape {t.shape}, got {arr.shape}")
            t.value = arr.copy()


# ---------------------------------------------------------------- layers

def deepset_embed(features, net: NetworkParameters, aggregation: str = "sum") -> Tensor:
    """``psi(sum_n rho(x_n))`` for member features of shape (M, F) or (nodes, M, F)."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"expected (nodes, members, features), got {x.shape}")
    n_nodes, n_ens, n_feat = x.shape
    if n_ens < 1:
        raise ShapeError("need at least one ensemble member")
    if n_feat != net.rho[0].n_in:
        raise ShapeError(f"features have {n_feat} columns, network expects {net.rho[0].n_in}")
    r = ad.mlp_forward(net.rho, Tensor(x.reshape(n_nodes * n_ens, n_feat)))
    r = ad.reshape(r, (n_nodes, n_ens, r.shape[1]))
    pooled = ad.sum(r, axis=1) if aggregation == "sum" else ad.mean(r, axis=1)
    h = ad.mlp_forward(net.psi, pooled)
    return ad.reshape(h, (h.shape[1],)) if single else h


def message_arrays(graph: StationGraph, n_copies: int = 1):
    """Edge arrays (with self-loops) for ``n_copies`` disjoint copies of the graph."""
    n, src, dst, w = graph.n_nodes, graph.message_src, graph.message_dst, graph.message_weight
    if n_copies == 1:
        return src, dst, w
    offsets = (np.arange(n_copies) * n)[:, None]
    return ((src[None] + offsets).ravel(), (dst[None] + offsets).ravel(),
            np.tile(w, n_copies))


def gine_layer(node_states: Tensor, graph: StationGraph, mlp: Sequence[AffineLayer],
               epsilon=0.0, n_copies: int = 1) -> Tensor:
    """``h + MLP((1 + eps) h_v + sum_{u in N(v)} ReLU(h_u + w_uv))``.

    The neighbourhood includes the self-loop (weight 1).
    """
    h = ad.as_tensor(node_states)
    n_total = graph.n_nodes * n_copies
    if h.ndim != 2 or h.shape[0] != n_total:
        raise ShapeError(f"node states {h.shape} do not match {n_total} graph nodes")
    src, dst, w = message_arrays(graph, n_copies)
    messages = ad.relu(ad.take_rows(h, src) + w[:, None])
    aggregated = ad.segment_sum(messages, dst, n_total)
    update = ad.mlp_forward(mlp, (1.0 + ad.as_tensor(epsilon)) * h + aggregated)
    if update.shape != h.shape:
        raise ShapeError(f"GINE MLP maps {h.shape} to {update.shape}")
    return h + update


def forward_params(net: NetworkParameters, cfg: ModelConfig, features: np.ndarray,
                   graph: StationGraph) -> dict[str, Tensor]:
    """Constrained distribution parameters, each of shape (B * N,).

    ``features`` has shape (B, N, M, F) or (N, M, F).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected (days, stations, members, features), got {x.shape}")
    n_days, n_stations, n_ens, n_feat = x.shape
    if n_stations != graph.n_nodes:
        raise ShapeError(f"batch has {n_stations} stations, graph has {graph.n_nodes}")
    h = deepset_embed(x.reshape(n_days * n_stations, n_ens, n_feat), net, cfg.aggregation)
    for mlp, eps in zip(net.gine_mlps, net.gine_eps):
        h = gine_layer(h, graph, mlp, eps, n_days)

    raw = {name: ad.reshape(head(h), (h.shape[0],)) for name, head in net.heads.items()}
    for name, t in raw.items():
        if not np.all(np.isfinite(t.value)):
            raise NumericError(f"non-finite output from head {name!r}")
    out = {"mu": raw["mu"], "sigma": ad.softplus(raw["sigma"]) + cfg.sigma_floor}
    if cfg.variant is VariantTag.PLAIN_NORMAL:
        return out
    out["p"] = ad.sigmoid(raw["p"])
    if cfg.has_tail:
        out["sigma_u"] = ad.softplus(raw["sigma_u"]) + cfg.sigma_floor
        if cfg.xi_mode is XiMode.LEARNED:
            out["xi"] = cfg.xi_max * ad.sigmoid(raw["xi"])
        else:
            out["xi"] = Tensor(np.full(h.shape[0], cfg.xi_fixed))
        if cfg.threshold_mode is ThresholdMode.LEARNED:
            out["u"] = ad.clamp_min(raw["u"], cfg.c + THRESHOLD_GAP)
        else:
            if cfg.u_global is None:
                raise ValidationError("global threshold mode needs u_global")
            out["u"] = Tensor(np.full(h.shape[0], float(cfg.u_global)))
    return out


def params_to_variants(out: dict[str, Tensor], cfg: ModelConfig) -> list[DistributionVariant]:
    values = {k: v.value for k, v in out.items()}
    n = values["mu"].shape[0]
    result = []
    for i in range(n):
        if cfg.variant is VariantTag.PLAIN_NORMAL:
            prm = TailedMixtureParams(0.0, values["mu"][i], values["sigma"][i], c=cfg.c)
        elif cfg.has_tail:
            prm = TailedMixtureParams(values["p"][i], values["mu"][i], values["sigma"][i],
                                      values["u"][i], values["sigma_u"][i], values["xi"][i], cfg.c)
        else:
            prm = TailedMixtureParams(values["p"][i], values["mu"][i], values["sigma"][i], c=cfg.c)
        result.append(DistributionVariant(cfg.variant, prm))
    return result


def predict_params(batch, graph: StationGraph, net: NetworkParameters,
                   cfg: ModelConfig) -> list[DistributionVariant]:
    """Per-station predictive distributions for one ensemble batch (N, M, F)."""
    features = getattr(batch, "features", batch)
    with ad.no_grad():
        out = forward_params(net, cfg, np.asarray(features), graph)
    return params_to_variants(out, cfg)


# ---------------------------------------------------------------- differentiable CRPS

def _phi_cdf(z):
    return 0.5 * (1.0 + ad.erf(z * INV_SQRT2))


def _phi_pdf(z):
    return ad.exp(z * z * -0.5) * INV_SQRT_2PI


def crps_normal_tensor(mu: Tensor, sigma: Tensor, y) -> Tensor:
    z = (ad.as_tensor(y) - mu) / sigma
    return sigma * (z * (2.0 * _phi_cdf(z) - 1.0) + 2.0 * _phi_pdf(z) - INV_SQRT_PI)


def crps_mixture_tensor(p: Tensor, mu: Tensor, sigma: Tensor, y, c: float,
                        u: Tensor | None = None, sigma_u: Tensor | None = None,
                        xi=None) -> Tensor:
    """Elementwise mixture CRPS composed from autodiff primitives.

    ``u=None`` drops the GPD tail (point-mass normal).  For ``y >= u`` the
    ``F1`` part is evaluated at ``u``; the GPD excess is clamped at zero so
    ``y < u`` yields ``CRPS(F2, u)``.  Requires ``y >= c``, which holds for
    every transformed observation.
    """
    y = np.asarray(y, dtype=np.float64)
    q = 1.0 - p
    zc = (c - mu) / sigma
    zy = (y - mu) / sigma
    mass_c = p + q * _phi_cdf(zc)
    if u is None:
        cdf_y = p + q * _phi_cdf(zy)
        f1 = (zy * (2.0 * cdf_y - 1.0) - zc * mass_c * mass_c
              - 2.0 * q * _phi_pdf(zc) * mass_c + 2.0 * q * _phi_pdf(zy)
              - q * q * INV_SQRT_PI * (1.0 - _phi_cdf(zc * math.sqrt(2.0))))
        return sigma * f1

    u = ad.as_tensor(u)
    zu = (u - mu) / sigma
    zm = ad.where(y < u.value, zy, zu)
    cdf_m = p + q * _phi_cdf(zm)
    mass_u = q * (1.0 - _phi_cdf(zu))
    f1 = (zm * (2.0 * cdf_m - 1.0) - zc * mass_c * mass_c + zu * mass_u * mass_u
          - 2.0 * q * _phi_pdf(zc) * mass_c - 2.0 * q * _phi_pdf(zu) * mass_u
          + 2.0 * q * _phi_pdf(zm)
          - q * q * INV_SQRT_PI * (_phi_cdf(zu * math.sqrt(2.0)) - _phi_cdf(zc * math.sqrt(2.0))))

    rest = 1.0 - (p + q * _phi_cdf(zu))
    z = ad.clamp_min((y - u) / sigma_u, 0.0)
    xi = ad.as_tensor(xi)
    sf_pow = ad.exp(ad.log(1.0 + xi * z) * ((xi - 1.0) / xi))
    f2 = sigma_u * (z - 2.0 * rest / (1.0 - xi) * (1.0 - sf_pow) + rest * rest / (2.0 - xi))
    return sigma * f1 + f2


def crps_of_outputs(out: dict[str, Tensor], y, cfg: ModelConfig) -> Tensor:
    """Per-node CRPS for the variant described by ``cfg``."""
    if cfg.variant is VariantTag.PLAIN_NORMAL:
        return crps_normal_tensor(out["mu"], out["sigma"], y)
    if cfg.has_tail:
        return crps_mixture_tensor(out["p"], out["mu"], out["sigma"], y, cfg.c,
                                   out["u"], out["sigma_u"], out["xi"])
    return crps_mixture_tensor(out["p"], out["mu"], out["sigma"], y, cfg.c)


def mean_crps_loss(net: NetworkParameters, cfg: ModelConfig, features: np.ndarray,
                   y: np.ndarray, graph: StationGraph) -> Tensor:
    out = forward_params(net, cfg, features, graph)
    return ad.mean(crps_of_outputs(out, np.asarray(y, dtype=np.float64).reshape(-1), cfg))


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: ModelConfig
    network: NetworkParameters
    feature_names: list[str]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    log_features: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        weights = {name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                   for name, arr in self.network.snapshot().items()}
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "feature_names": list(self.feature_names),
            "log_features": list(self.log_features),
            "normalization": {"mean": np.asarray(self.feature_mean).tolist(),
                              "std": np.asarray(self.feature_std).tolist()},
            "weights": weights,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"unsupported checkpoint format {d.get('format')!r}")
        cfg = ModelConfig(**d["config"])
        net = NetworkParameters.init(cfg, np.random.default_rng(0))
        net.load_snapshot({k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                           for k, v in d["weights"].items()})
        return cls(cfg, net, list(d["feature_names"]),
                   np.asarray(d["normalization"]["mean"], dtype=np.float64),
                   np.asarray(d["normalization"]["std"], dtype=np.float64),
                   list(d.get("log_features", [])), dict(d.get("metadata", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
