"""MAP particles, the equal-weight predictive mixture, and intervals.

Each particle maximizes Gaussian log-likelihood plus independent
Logistic(0, 1) log-priors on every scalar parameter (including
``log_sigma``).  Particles differ only in their seed and are trained
independently, so they may run in parallel without changing results.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import ndtr
from threadpoolctl import threadpool_limits

from . import diffcore as dc
from .config import OptimConfig, RunConfig
from .dataio import PreprocessStats
from .diffcore import OptimState, ParamSet, Tensor
from .model import Batch, Network

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DivergenceError(RuntimeError):
    """Training blew up; ``curves`` keeps whatever loss history was recorded, keyed by seed."""

    def __init__(self, message, epoch=None, seeds=(), curves=None):
        super().__init__(message)
        self.epoch = epoch
        self.seeds = tuple(seeds)
        self.curves = dict(curves or {})


# ----------------------------------------------------------------- densities

def nll(y, mu, sigma):
    """Per-observation Gaussian negative log-likelihood."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    r = np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)
    return r * r / (2.0 * sigma * sigma) + 0.5 * np.log(2.0 * np.pi * sigma * sigma)


def total_nll(y, mu, sigma, observed=None) -> float:
    """Sum of ``nll`` over observed cells; unobserved cells contribute nothing."""
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(y) if observed is None else np.asarray(observed, dtype=bool)
    return float(np.sum(nll(y[keep], np.broadcast_to(mu, y.shape)[keep], sigma)))


def logistic_logpdf(x) -> np.ndarray:
    """``log pdf`` of Logistic(0, 1): ``-x - 2 log(1 + e^-x)``, symmetric and overflow-free."""
    a = np.abs(np.asarray(x, dtype=float))
    return -a - 2.0 * np.log1p(np.exp(-a))


def log_prior_value(params: ParamSet) -> float:
    return float(sum(logistic_logpdf(v).sum() for v in params.params.values()))


def log_prior(leaves: Dict[str, Tensor]) -> Tensor:
    """Tape version of the summed logistic log-prior."""
    return dc.logistic_logpdf_sum(leaves.values())


def nll_tensor(labels, mu: Tensor, log_sigma: Tensor) -> Tensor:
    y = dc.constant(np.asarray(labels, dtype=float).reshape(-1, 1))
    resid2 = dc.square(dc.sub(y, mu))
    inv_var = dc.exp(dc.mul(-2.0, log_sigma))
    n = y.shape[0]
    return dc.add(dc.mul(0.5, dc.sum(dc.mul(resid2, inv_var))),
                  dc.mul(float(n), dc.add(log_sigma, HALF_LOG_2PI)))


def map_objective(network: Network, leaves: Dict[str, Tensor], batch: Batch, eta: int) -> Tensor:
    """Negative log-posterior with the mini-batch NLL rescaled to ``eta`` rows."""
    prior = log_prior(leaves)
    if len(batch) == 0:
        return dc.neg(prior)
    mu, _ = network.forward(leaves, batch)
    data = nll_tensor(batch.labels, mu, leaves["log_sigma"])
    return dc.sub(dc.mul(eta / len(batch), data), prior)


# ----------------------------------------------------------------- training

@dataclass
class Particle:
    params: ParamSet
    seed: int
    objective: float = float("nan")
    curve: List[tuple] = field(default_factory=list)  # (epoch, loss, lr)
    pooled: Optional[List[np.ndarray]] = None

    @property
    def log_sigma(self) -> float:
        return float(self.params["log_sigma"][0, 0])

    @property
    def sigma(self) -> float:
        return math.exp(self.log_sigma)


def full_objective(network: Network, params: ParamSet, batch: Batch) -> float:
    leaves = {k: Tensor(v) for k, v in params.params.items()}
    return map_objective(network, leaves, batch, len(batch)).item()


def training_pooled(network: Network, params: ParamSet, batch: Batch) -> List[np.ndarray]:
    leaves = {k: Tensor(v) for k, v in params.params.items()}
    _, zs = network.forward(leaves, batch)
    return zs


def train_particle(network: Network, batch: Batch, optim: OptimConfig, seed: int,
                   pooling: str = "batch") -> Particle:
    """Run AdamW with a cosine schedule and global-norm clipping from ``seed``."""
    if len(batch) == 0:
        raise ValueError("empty training set")
    params = network.init_params(seed)
    particle = Particle(params, int(seed))
    n = len(batch)
    bs = min(optim.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = optim.epochs * per_epoch
    state = OptimState(
        lr0=optim.lr, beta1=optim.beta1, beta2=optim.beta2, eps=optim.eps,
        weight_decay=optim.weight_decay, max_grad_norm=optim.max_grad_norm,
        total_steps=total, lr_min=optim.min_lr,
    ).init(params)
    rng = np.random.default_rng([int(seed), 1])
    step, wild = 0, 0
    # Overflow shows up as a non-finite loss or norm and is reported as divergence.
    with threadpool_limits(limits=1), np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(optim.epochs):
            order = rng.permutation(n) if bs < n else np.arange(n)
            losses, lr = [], optim.lr
            for start in range(0, n, bs):
                sub = batch.take(order[start:start + bs])
                lr = dc.cosine_lr(step, total, optim.lr, optim.min_lr)
                leaves = params.leaves()
                loss = map_objective(network, leaves, sub, n)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch} (seed {seed})", epoch, [seed],
                                          {seed: particle.curve})
                dc.backward(loss)
                params.collect(leaves)
                norm = dc.global_norm(params.grads)
                wild = wild + 1 if norm > optim.divergence_grad_norm else 0
                if wild >= optim.divergence_patience or not math.isfinite(norm):
                    raise DivergenceError(f"gradient norm blew up at epoch {epoch} (seed {seed})", epoch, [seed],
                                          {seed: particle.curve})
                grads = dc.clip_global_norm(params.grads, optim.max_grad_norm)
                dc.adamw_step(params, grads, state, lr)
                losses.append(value)
                step += 1
            particle.curve.append((epoch, float(np.mean(losses)), lr))
        particle.objective = full_objective(network, params, batch)
        if pooling == "train":
            particle.pooled = training_pooled(network, params, batch)
    return particle


def _train_job(args):
    network, batch, optim, seed, pooling = args
    try:
        return train_particle(network, batch, optim, seed, pooling)
    except DivergenceError as exc:
        return exc


@dataclass
class Ensemble:
    network: Network
    stats: PreprocessStats
    particles: List[Particle]
    config: RunConfig
    station_ids: tuple = ()
    sigma_d: float = 1.0
    global_descriptor: np.ndarray = None

    @property
    def size(self) -> int:
        return len(self.particles)


def train_ensemble(network: Network, batch: Batch, config: RunConfig, master_seed: Optional[int] = None,
                   jobs: int = 1, particles: Optional[int] = None) -> List[Particle]:
    """Train ``M`` particles with seeds ``master_seed + m``; order is by ``m``."""
    m_count = config.particles if particles is None else particles
    if m_count < 1:
        raise ValueError("need at least one particle")
    master = config.seed if master_seed is None else master_seed
    args = [(network, batch, config.optim, master + m, config.encoder.pooling) for m in range(m_count)]
    if jobs > 1 and m_count > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, m_count)) as pool:
            results = list(pool.map(_train_job, args))
    else:
        results = [_train_job(a) for a in args]
    failed = [r for r in results if isinstance(r, DivergenceError)]
    if failed:
        seeds = [s for r in failed for s in r.seeds]
        curves = {}
        for r in results:
            curves.update(r.curves if isinstance(r, DivergenceError) else {r.seed: r.curve})
        raise DivergenceError(f"{len(failed)} particle(s) diverged; seeds {seeds}",
                              min(r.epoch for r in failed), seeds, curves)
    return results


# --------------------------------------------------------------- prediction

@dataclass
class PredictiveMixture:
    """Equal-weight Gaussian mixture per query; arrays are (queries, M)."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.stds = np.atleast_2d(np.asarray(self.stds, dtype=float))
        if self.means.shape != self.stds.shape:
            raise ValueError("means and stds must align")
        if np.any(self.stds <= 0):
            raise ValueError("component std must be positive")

    @property
    def components(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.means.mean(axis=1)

    def variance(self) -> np.ndarray:
        return predictive_variance(self)

    def cdf(self, x) -> np.ndarray:
        return mixture_cdf(self.means, self.stds, x)

    def quantile(self, q: float, tol: float = 1e-10) -> np.ndarray:
        return mixture_quantile(self, q, tol)

    def interval(self, level: float = 0.95):
        if not 0 < level < 1:
            raise ValueError("level must lie in (0, 1)")
        lo = (1.0 - level) / 2.0
        return self.quantile(lo), self.quantile(1.0 - lo)


def predictive_variance(mixture: PredictiveMixture) -> np.ndarray:
    """Mean component variance plus the population variance of component means."""
    return (mixture.stds ** 2).mean(axis=1) + mixture.means.var(axis=1)


def mixture_cdf(means, stds, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    return ndtr((x - means) / stds).mean(axis=1)


def mixture_quantile(mixture: PredictiveMixture, q: float, tol: float = 1e-10) -> np.ndarray:
    """Invert the mixture CDF by bisection on ``[min mu - 10 max sd, max mu + 10 max sd]``."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    mu, sd = mixture.means, mixture.stds
    lo = mu.min(axis=1) - 10.0 * sd.max(axis=1)
    hi = mu.max(axis=1) + 10.0 * sd.max(axis=1)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(mu, sd, mid) < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= tol):
            break
    return 0.5 * (lo + hi)


def particle_means(network: Network, particle: Particle, batch: Batch, pooling: str = "batch") -> np.ndarray:
    leaves = {k: Tensor(v) for k, v in particle.params.params.items()}
    fixed = particle.pooled if pooling == "train" and particle.pooled is not None else None
    with threadpool_limits(limits=1):
        mu, _ = network.forward(leaves, batch, fixed)
    return mu.data[:, 0]


def predict(ensemble: Ensemble, batch: Batch, network: Optional[Network] = None) -> PredictiveMixture:
    """Per-particle de-normalized means and noise scales for every query."""
    net = ensemble.network if network is None else network
    stats = ensemble.stats
    pooling = ensemble.config.encoder.pooling
    means, stds = [], []
    for p in ensemble.particles:
        means.append(stats.denormalize_target(particle_means(net, p, batch, pooling)))
        stds.append(np.full(len(batch), p.sigma * stats.target_std))
    return PredictiveMixture(np.column_stack(means), np.column_stack(stds))


# -------------------------------------------------------------- persistence

def ensemble_to_dict(ens: Ensemble) -> dict:
    return {
        "format": "cglubnf-ensemble",
        "version": BUNDLE_VERSION,
        "config": ens.config.to_dict(),
        "stats": ens.stats.to_dict(),
        "network": ens.network.to_dict(),
        "station_ids": list(ens.station_ids),
        "sigma_d": ens.sigma_d,
        "global_descriptor": None if ens.global_descriptor is None else list(map(float, ens.global_descriptor)),
        "particles": [
            {
                "seed": p.seed,
                "log_sigma": p.log_sigma,
                "objective": p.objective,
                "manifest": p.params.manifest(),
                "params": p.params.flat().tolist(),
                "pooled": None if p.pooled is None else [z.ravel().tolist() for z in p.pooled],
            }
            for p in ens.particles
        ],
    }


def ensemble_from_dict(d: dict) -> Ensemble:
    if d.get("format") != "cglubnf-ensemble":
        raise ValueError("not an ensemble bundle")
    if d.get("version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {d.get('version')}")
    particles = []
    for pd_ in d["particles"]:
        params = ParamSet.from_flat(pd_["params"], pd_["manifest"])
        pooled = None if pd_["pooled"] is None else [np.asarray(z).reshape(1, -1) for z in pd_["pooled"]]
        particles.append(Particle(params, int(pd_["seed"]), float(pd_["objective"]), [], pooled))
    gd = d.get("global_descriptor")
    return Ensemble(
        network=Network.from_dict(d["network"]),
        stats=PreprocessStats.from_dict(d["stats"]),
        particles=particles,
        config=RunConfig.from_dict(d["config"]),
        station_ids=tuple(d["station_ids"]),
        sigma_d=float(d["sigma_d"]),
        global_descriptor=None if gd is None else np.asarray(gd),
    )


def save_ensemble(ens: Ensemble, path) -> str:
    """Write the JSON bundle; returns its sha256 digest."""
    text = json.dumps(ensemble_to_dict(ens), sort_keys=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_ensemble(path) -> Ensemble:
    with open(path, encoding="utf-8") as fh:
        return ensemble_from_dict(json.load(fh))


def fit_ensemble(train, config: RunConfig, jobs: int = 1, master_seed: Optional[int] = None) -> Ensemble:
    """Preprocess ``train`` (an ObservationTable), build the network, train all particles."""
    from .model import prepare

    prep = prepare(train, config)
    particles = train_ensemble(prep.network, prep.batch, config, master_seed, jobs)
    return Ensemble(prep.network, prep.stats, particles, config, tuple(train.stations.ids),
                    prep.sigma_d, prep.global_descriptor)
