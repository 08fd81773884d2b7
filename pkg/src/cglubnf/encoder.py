"""Multilevel spatio-temporal feature encoding.

Fixed blocks (trend/coords/covariates, interactions, temporal harmonics,
dyadic spatial Fourier terms) are plain numpy and computed once per sample.
The graph-attention site embedding, per-channel log-scales and the channel
gate carry parameters and run on the autodiff tape.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor

logger = logging.getLogger(__name__)

BLOCK_ORDER = ("prepro", "ts", "ss", "seasonality", "spatial", "gat")
ANNUAL_PERIOD = 8760


@dataclass(frozen=True)
class PeriodConfig:
    periods: Tuple[int, ...] = (24, 168)
    harmonics: Tuple[int, ...] = (4, 3)

    def __post_init__(self):
        if len(self.periods) != len(self.harmonics):
            raise ValueError("periods and harmonics must have equal length")
        for p, h in zip(self.periods, self.harmonics):
            if p < 2:
                raise ValueError(f"period {p} < 2")
            if not 1 <= h <= p // 2:
                raise ValueError(f"harmonic order {h} outside [1, {p // 2}] for period {p}")

    @property
    def width(self) -> int:
        return 2 * sum(self.harmonics)


@dataclass(frozen=True)
class FourierConfig:
    k: int = 6
    lower: Tuple[float, float] = (0.0, 0.0)
    upper: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("fourier k must be >= 1")

    @classmethod
    def from_coords(cls, coords, k: int = 6) -> "FourierConfig":
        c = np.asarray(coords, dtype=float)
        return cls(k, tuple(c.min(axis=0).tolist()), tuple(c.max(axis=0).tolist()))

    def normalize(self, coords) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        return (np.asarray(coords, dtype=float) - lo) / span

    @property
    def width(self) -> int:
        return 2 * 2 * self.k


@dataclass(frozen=True)
class EncoderConfig:
    periods: Tuple[int, ...] = (24, 168)
    harmonics: Tuple[int, ...] = (4, 3)
    fourier_k: int = 6
    gat_heads: int = 4
    gat_dim: int = 8
    ca_reduction: int = 8
    pooling: str = "batch"  # or "train": freeze gate pooling to training statistics

    def __post_init__(self):
        if self.pooling not in ("batch", "train"):
            raise ValueError("pooling must be 'batch' or 'train'")
        if self.gat_heads < 1 or self.gat_dim < 1:
            raise ValueError("gat_heads and gat_dim must be positive")

    def period_config(self, span_steps: Optional[int] = None) -> PeriodConfig:
        periods, harmonics = list(self.periods), list(self.harmonics)
        if span_steps is not None and span_steps >= ANNUAL_PERIOD and ANNUAL_PERIOD not in periods:
            periods.append(ANNUAL_PERIOD)
            harmonics.append(2)
        return PeriodConfig(tuple(periods), tuple(harmonics))


@dataclass(frozen=True)
class FeatureBlocks:
    """Channel ranges of the concatenated feature matrix, in block order."""

    widths: Tuple[Tuple[str, int], ...]

    @property
    def ranges(self) -> Dict[str, Tuple[int, int]]:
        out, pos = {}, 0
        for name, w in self.widths:
            out[name] = (pos, pos + w)
            pos += w
        return out

    @property
    def channels(self) -> int:
        return sum(w for _, w in self.widths)


# ------------------------------------------------------------- fixed blocks

def interactions_ts(t_norm, s) -> np.ndarray:
    """Time-coordinate products ``(t*lat, t*lon)``."""
    t = np.asarray(t_norm, dtype=float).reshape(-1, 1)
    s = np.asarray(s, dtype=float).reshape(-1, 2)
    return t * s


def interactions_ss(s) -> np.ndarray:
    s = np.asarray(s, dtype=float).reshape(-1, 2)
    return s[:, :1] * s[:, 1:2]


def seasonal_features(t_index, cfg: PeriodConfig) -> np.ndarray:
    """``[cos(2*pi*h*t/p), sin(2*pi*h*t/p)]`` for every period and order."""
    t = np.asarray(t_index, dtype=float).reshape(-1, 1)
    cols = []
    for p, hmax in zip(cfg.periods, cfg.harmonics):
        for h in range(1, hmax + 1):
            # Reduce t mod p first so large indices keep full precision.
            ang = 2.0 * np.pi * h * np.mod(t, p) / p
            cols += [np.cos(ang), np.sin(ang)]
    return np.hstack(cols)


def spatial_fourier(s_c, k: int) -> np.ndarray:
    """Dyadic Fourier ladder of one normalized coordinate axis."""
    s = np.asarray(s_c, dtype=float).reshape(-1, 1)
    if np.any(s < -1e-9) or np.any(s > 1 + 1e-9):
        raise ValueError("spatial_fourier expects coordinates normalized to [0, 1]")
    cols = []
    for j in range(k):
        ang = 2.0 * np.pi * (2.0 ** j) * s
        cols += [np.cos(ang), np.sin(ang)]
    return np.hstack(cols)


def spatial_embedding(s01, k: int) -> np.ndarray:
    s01 = np.asarray(s01, dtype=float).reshape(-1, 2)
    return np.hstack([spatial_fourier(s01[:, 0], k), spatial_fourier(s01[:, 1], k)])


# ------------------------------------------------------------- descriptors

def node_descriptor(values) -> np.ndarray:
    """(mean, q25, q75) of observed values with linear-interpolation quantiles."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise ValueError("no observed values")
    return np.array([v.mean(), np.quantile(v, 0.25), np.quantile(v, 0.75)])


def node_descriptors(labels, station, n_stations: int):
    """Per-station descriptors; stations without data fall back to global stats.

    Returns ``(descriptors (N, 3), fallback_flags (N,))``.
    """
    labels = np.asarray(labels, dtype=float)
    station = np.asarray(station)
    glob = node_descriptor(labels)
    out = np.tile(glob, (n_stations, 1))
    flags = np.ones(n_stations, dtype=bool)
    for i in range(n_stations):
        vals = labels[station == i]
        vals = vals[np.isfinite(vals)]
        if vals.size:
            out[i] = node_descriptor(vals)
            flags[i] = False
    if flags.any():
        logger.info("%d station(s) without training data use global descriptors", int(flags.sum()))
    return out, flags


# --------------------------------------------------------------------- init

def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_gate(rng, channels: int, reduction: int, prefix: str) -> Dict[str, np.ndarray]:
    hidden = max(channels // reduction, 4)
    return {
        f"{prefix}.W1": uniform_init(rng, channels, (channels, hidden)),
        f"{prefix}.b1": uniform_init(rng, channels, (1, hidden)),
        f"{prefix}.W2": uniform_init(rng, hidden, (hidden, channels)),
        f"{prefix}.b2": uniform_init(rng, hidden, (1, channels)),
    }


def init_gat(rng, in_dim: int, heads: int, dim: int, prefix: str = "gat") -> Dict[str, np.ndarray]:
    p = {}
    for o in range(heads):
        p[f"{prefix}.W{o}"] = uniform_init(rng, in_dim, (in_dim, dim))
        p[f"{prefix}.ai{o}"] = uniform_init(rng, 2 * dim, (dim, 1))
        p[f"{prefix}.aj{o}"] = uniform_init(rng, 2 * dim, (dim, 1))
    p[f"{prefix}.Wout"] = uniform_init(rng, heads * dim, (heads * dim, dim))
    return p


# ---------------------------------------------------------------------- GAT

@dataclass
class GatOutput:
    embedding: Tensor
    attention: List[np.ndarray] = field(default_factory=list)
    isolated: np.ndarray = None


def neighbour_mask(A) -> Tuple[np.ndarray, np.ndarray]:
    """Support ``A_ij > 0``; isolated nodes attend to themselves only."""
    A = np.asarray(A, dtype=float)
    mask = A > 0
    isolated = ~mask.any(axis=1)
    mask[isolated, isolated] = True
    return mask, isolated


def gat_forward(descriptors, A, params: Dict[str, Tensor], heads: int, prefix: str = "gat") -> GatOutput:
    """Single-layer multi-head attention with the kernel prior scaling the scores."""
    H0 = dc.constant(descriptors)
    A = np.asarray(A, dtype=float)
    if A.shape != (H0.shape[0], H0.shape[0]):
        raise DimensionError(f"adjacency {A.shape} does not match {H0.shape[0]} nodes")
    mask, isolated = neighbour_mask(A)
    if isolated.any():
        logger.debug("GAT self-fallback for %d isolated node(s)", int(isolated.sum()))
    prior = dc.constant(A)
    outs, attn = [], []
    for o in range(heads):
        Wh = dc.matmul(H0, params[f"{prefix}.W{o}"])
        si = dc.matmul(Wh, params[f"{prefix}.ai{o}"])
        sj = dc.transpose(dc.matmul(Wh, params[f"{prefix}.aj{o}"]))
        e = dc.leaky_relu(dc.add(si, sj))
        alpha = dc.masked_softmax(dc.mul(prior, e), mask)
        attn.append(alpha.data)
        outs.append(dc.elu(dc.matmul(alpha, Wh)))
    g = dc.matmul(dc.concat(outs, axis=1), params[f"{prefix}.Wout"])
    return GatOutput(g, attn, isolated)


# ----------------------------------------------------------- channel gating

def channel_gate(x: Tensor, params: Dict[str, Tensor], prefix: str, fixed_z: Optional[np.ndarray] = None):
    """Pool over the batch, squeeze-excite, reweight channels.

    Returns ``(x * w, w, z)`` where ``z`` is the pooled channel vector.
    """
    z = dc.mean(x, axis=0) if fixed_z is None else dc.constant(np.asarray(fixed_z).reshape(1, -1))
    hidden = dc.relu(dc.affine(z, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    w = dc.sigmoid(dc.affine(hidden, params[f"{prefix}.W2"], params[f"{prefix}.b2"]))
    return dc.mul(x, w), w, z.data.copy()


def scale_and_attend(F_prime, zeta, params: Dict[str, Tensor], prefix: str = "ca", fixed_z=None):
    """``F_scale = exp(zeta) * F'`` followed by the channel gate."""
    F_prime = dc.constant(F_prime)
    if zeta.shape != (1, F_prime.shape[1]):
        raise DimensionError(f"zeta shape {zeta.shape} vs {F_prime.shape[1]} channels")
    F_scale = dc.mul(F_prime, dc.exp(zeta))
    return channel_gate(F_scale, params, prefix, fixed_z)


# ------------------------------------------------------------------ encoder

class Encoder:
    """Turns sample rows into the gated feature matrix ``F_ca``."""

    def __init__(self, cfg: EncoderConfig, periods: PeriodConfig, fourier: FourierConfig,
                 station_coords, adjacency, descriptors, d_prepro: int):
        self.cfg = cfg
        self.periods = periods
        self.fourier = fourier
        self.station_coords = np.asarray(station_coords, dtype=float)
        self.adjacency = np.asarray(adjacency, dtype=float)
        self.descriptors = np.asarray(descriptors, dtype=float)
        self.d_prepro = int(d_prepro)
        self.blocks = FeatureBlocks((
            ("prepro", self.d_prepro),
            ("ts", 2),
            ("ss", 1),
            ("seasonality", periods.width),
            ("spatial", fourier.width),
            ("gat", cfg.gat_dim),
        ))

    @property
    def channels(self) -> int:
        return self.blocks.channels

    def static_features(self, t_index, station, prepro) -> np.ndarray:
        """Parameter-free blocks ``prepro | ts | ss | seasonality | spatial``."""
        prepro = np.asarray(prepro, dtype=float)
        if prepro.shape[1] != self.d_prepro:
            raise DimensionError(f"prepro width {prepro.shape[1]} != {self.d_prepro}")
        t_norm = prepro[:, 0]
        s_z = prepro[:, 1:3]
        s01 = self.fourier.normalize(self.station_coords[np.asarray(station)])
        return np.hstack([
            prepro,
            interactions_ts(t_norm, s_z),
            interactions_ss(s_z),
            seasonal_features(t_index, self.periods),
            spatial_embedding(s01, self.fourier.k),
        ])

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        p = init_gat(rng, self.descriptors.shape[1], self.cfg.gat_heads, self.cfg.gat_dim)
        p["zeta"] = np.zeros((1, self.channels))
        p.update(init_gate(rng, self.channels, self.cfg.ca_reduction, "ca"))
        return p

    def site_embeddings(self, params: Dict[str, Tensor]) -> GatOutput:
        return gat_forward(self.descriptors, self.adjacency, params, self.cfg.gat_heads)

    def forward(self, params: Dict[str, Tensor], static: np.ndarray, station, fixed_z=None):
        """Returns ``(F_ca, pooled_z)``."""
        g = self.site_embeddings(params).embedding
        F_prime = dc.concat([dc.constant(static), dc.gather_rows(g, station)], axis=1)
        F_ca, _, z = scale_and_attend(F_prime, params["zeta"], params, "ca", fixed_z)
        return F_ca, z

    def with_extra_stations(self, coords, descriptor, sigma_d: float) -> "Encoder":
        """Copy that can embed unseen stations.

        New nodes receive messages from the trained network but never send
        them, so existing embeddings are unchanged.
        """
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        all_coords = np.vstack([self.station_coords, coords])
        n_old, n = len(self.station_coords), len(all_coords)
        d = np.sqrt(((all_coords[:, None, :] - all_coords[None, :, :]) ** 2).sum(-1))
        A = np.zeros((n, n))
        A[:n_old, :n_old] = self.adjacency
        A[n_old:, :n_old] = np.exp(-(d[n_old:, :n_old] ** 2) / sigma_d ** 2)
        desc = np.vstack([self.descriptors, np.tile(descriptor, (n - n_old, 1))])
        out = Encoder(self.cfg, self.periods, self.fourier, all_coords, A, desc, self.d_prepro)
        return out


def block_slices(blocks: FeatureBlocks) -> Dict[str, slice]:
    return {k: slice(a, b) for k, (a, b) in blocks.ranges.items()}


def check_blocks(blocks: FeatureBlocks, names: Sequence[str] = BLOCK_ORDER) -> None:
    if tuple(n for n, _ in blocks.widths) != tuple(names):
        raise DimensionError(f"blocks {blocks.widths} out of order")
