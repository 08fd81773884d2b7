"""Network assembly: preprocessing, encoder and CGLU stack behind one object."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cglu import forward_mean, init_stack
from .config import RunConfig
from .dataio import (
    ObservationTable,
    PreprocessStats,
    SampleMatrix,
    assemble_samples,
    build_adjacency,
    build_features,
    discretize_time,
)
from .diffcore import ParamSet, Tensor
from .encoder import Encoder, EncoderConfig, FourierConfig, PeriodConfig, node_descriptor, node_descriptors


@dataclass
class Batch:
    """Encoded rows ready for the tape: fixed feature blocks plus station ids."""

    static: np.ndarray
    station: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.station)

    def take(self, idx) -> "Batch":
        return Batch(self.static[idx], self.station[idx], None if self.labels is None else self.labels[idx])


class Network:
    """Mean function ``mu_theta(t, s, z)`` and its parameter layout."""

    def __init__(self, encoder: Encoder, n_layers: int, width: int, reduction: int = 8):
        self.encoder = encoder
        self.n_layers = int(n_layers)
        self.width = int(width)
        self.reduction = int(reduction)

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng(seed)
        p = self.encoder.init_params(rng)
        p.update(init_stack(rng, self.encoder.channels, self.width, self.n_layers, self.reduction))
        p["log_sigma"] = np.zeros((1, 1))
        return ParamSet(p)

    def forward(self, params: Dict[str, Tensor], batch: Batch, fixed_z: Optional[Sequence[np.ndarray]] = None):
        """Returns ``(mu (B, 1), pooled vectors [encoder, layer0, ...])``."""
        enc_z = None if fixed_z is None else fixed_z[0]
        layer_z = None if fixed_z is None else fixed_z[1:]
        F_ca, z = self.encoder.forward(params, batch.static, batch.station, enc_z)
        mu, zs = forward_mean(F_ca, params, self.n_layers, layer_z)
        return mu, [z] + zs

    def encode(self, samples: SampleMatrix) -> Batch:
        static = self.encoder.static_features(samples.t_index, samples.station, samples.features)
        return Batch(static, samples.station.copy(), samples.labels.copy())

    def to_dict(self) -> dict:
        enc = self.encoder
        return {
            "encoder": {
                "periods": list(enc.cfg.periods),
                "harmonics": list(enc.cfg.harmonics),
                "fourier_k": enc.cfg.fourier_k,
                "gat_heads": enc.cfg.gat_heads,
                "gat_dim": enc.cfg.gat_dim,
                "ca_reduction": enc.cfg.ca_reduction,
                "pooling": enc.cfg.pooling,
            },
            "resolved_periods": list(enc.periods.periods),
            "resolved_harmonics": list(enc.periods.harmonics),
            "fourier_lower": list(enc.fourier.lower),
            "fourier_upper": list(enc.fourier.upper),
            "station_coords": enc.station_coords.tolist(),
            "adjacency": enc.adjacency.tolist(),
            "descriptors": enc.descriptors.tolist(),
            "d_prepro": enc.d_prepro,
            "n_layers": self.n_layers,
            "width": self.width,
            "reduction": self.reduction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        e = d["encoder"]
        cfg = EncoderConfig(tuple(e["periods"]), tuple(e["harmonics"]), e["fourier_k"], e["gat_heads"],
                            e["gat_dim"], e["ca_reduction"], e["pooling"])
        enc = Encoder(
            cfg,
            PeriodConfig(tuple(d["resolved_periods"]), tuple(d["resolved_harmonics"])),
            FourierConfig(cfg.fourier_k, tuple(d["fourier_lower"]), tuple(d["fourier_upper"])),
            np.asarray(d["station_coords"]),
            np.asarray(d["adjacency"]),
            np.asarray(d["descriptors"]),
            d["d_prepro"],
        )
        return cls(enc, d["n_layers"], d["width"], d["reduction"])


@dataclass
class Prepared:
    network: Network
    stats: PreprocessStats
    samples: SampleMatrix
    batch: Batch
    sigma_d: float
    global_descriptor: np.ndarray


def prepare(train: ObservationTable, config: RunConfig) -> Prepared:
    """Fit preprocessing on ``train``'s observed cells and build the network."""
    stats = PreprocessStats.fit(train)
    samples = assemble_samples(train, stats)
    stations = train.stations
    graph = build_adjacency(stations, config.data.sigma_d, config.data.haversine)
    desc, _ = node_descriptors(samples.labels, samples.station, len(stations))
    span = int(samples.t_index.max()) + 1
    periods = config.encoder.period_config(span)
    fourier = FourierConfig.from_coords(stations.coords, config.encoder.fourier_k)
    enc = Encoder(config.encoder, periods, fourier, stations.coords, graph.adjacency, desc, samples.d_prepro)
    net = Network(enc, config.model.cglu_layers, config.model.hidden_dim, config.encoder.ca_reduction)
    return Prepared(net, stats, samples, net.encode(samples), graph.sigma_d, node_descriptor(samples.labels))


def query_batch(network: Network, stats: PreprocessStats, times, station, covariates) -> Batch:
    """Encode prediction queries at known stations (indices into the trained graph)."""
    t_index = discretize_time(times, stats.t0, stats.step_seconds)
    station = np.asarray(station, dtype=np.int64)
    coords = network.encoder.station_coords[station]
    feats = build_features(t_index, coords, covariates, stats)
    static = network.encoder.static_features(t_index, station, feats)
    return Batch(static, station)
