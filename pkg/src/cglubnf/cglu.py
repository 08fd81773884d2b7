"""Channel-gated learning units and the mean head."""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor
from .encoder import channel_gate, init_gate, uniform_init


def learnable_activation(u, alpha) -> Tensor:
    """Convex mix ``alpha * ELU(u) + (1 - alpha) * tanh(u)``."""
    alpha = dc.constant(alpha)
    return dc.add(dc.mul(alpha, dc.elu(u)), dc.mul(dc.sub(1.0, alpha), dc.tanh(u)))


def mixing_weight(params: Dict[str, Tensor], prefix: str) -> Tensor:
    return dc.sigmoid(params[f"{prefix}.a"])


def gated_residual(h, params: Dict[str, Tensor], prefix: str) -> Tensor:
    h = dc.constant(h)
    W1 = params[f"{prefix}.W1"]
    if h.shape[1] != W1.shape[0]:
        raise DimensionError(f"{prefix}: input width {h.shape[1]} != {W1.shape[0]}")
    f = dc.affine(dc.elu(dc.affine(h, W1, params[f"{prefix}.b1"])), params[f"{prefix}.W2"], params[f"{prefix}.b2"])
    gamma = dc.sigmoid(dc.affine(h, params[f"{prefix}.Wg"], params[f"{prefix}.bg"]))
    phi = learnable_activation(f, mixing_weight(params, prefix))
    return dc.add(dc.mul(dc.sub(1.0, gamma), h), dc.mul(gamma, phi))


def cglu_layer(h, params: Dict[str, Tensor], prefix: str, fixed_z: Optional[np.ndarray] = None):
    """Gated residual followed by channel reweighting; returns ``(h_hat, pooled_z)``."""
    r = gated_residual(h, params, prefix)
    out, _, z = channel_gate(r, params, f"{prefix}.ca", fixed_z)
    return out, z


def init_layer(rng, width: int, reduction: int, prefix: str) -> Dict[str, np.ndarray]:
    p = {
        f"{prefix}.W1": uniform_init(rng, width, (width, width)),
        f"{prefix}.b1": uniform_init(rng, width, (1, width)),
        f"{prefix}.W2": uniform_init(rng, width, (width, width)),
        f"{prefix}.b2": uniform_init(rng, width, (1, width)),
        f"{prefix}.Wg": uniform_init(rng, width, (width, width)),
        f"{prefix}.bg": uniform_init(rng, width, (1, width)),
        f"{prefix}.a": np.zeros((1, 1)),
    }
    p.update(init_gate(rng, width, reduction, f"{prefix}.ca"))
    return p


def init_stack(rng, in_dim: int, width: int, n_layers: int, reduction: int = 8) -> Dict[str, np.ndarray]:
    """Input projection (only when ``n_layers > 0``), the layers, and the head."""
    p: Dict[str, np.ndarray] = {}
    head_in = in_dim
    if n_layers > 0:
        p["proj.W"] = uniform_init(rng, in_dim, (in_dim, width))
        p["proj.b"] = uniform_init(rng, in_dim, (1, width))
        for layer in range(n_layers):
            p.update(init_layer(rng, width, reduction, f"cglu{layer}"))
        head_in = width
    p["head.W"] = uniform_init(rng, head_in, (head_in, 1))
    p["head.b"] = np.zeros((1, 1))
    return p


def forward_mean(F_ca, params: Dict[str, Tensor], n_layers: int,
                 fixed_z: Optional[Sequence[np.ndarray]] = None):
    """Project, run ``n_layers`` CGLUs, apply the linear head.

    Returns ``(mu (B, 1), pooled vectors per layer)``.
    """
    h = dc.constant(F_ca)
    zs: List[np.ndarray] = []
    if n_layers > 0:
        h = dc.affine(h, params["proj.W"], params["proj.b"])
        for layer in range(n_layers):
            fz = None if fixed_z is None else fixed_z[layer]
            h, z = cglu_layer(h, params, f"cglu{layer}", fz)
            zs.append(z)
    mu = dc.affine(h, params["head.W"], params["head.b"])
    return mu, zs
