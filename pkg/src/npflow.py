"""
NP-FKGC - Neural Process Encoder and Normalizing Flows
Context encoding, Gaussian base distribution, planar/radial/RealNVP flow chains,
transformed densities and latent-entropy estimates.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from src import diffcore as dc
from src.arpgnn import triple_representation
from src.diffcore import Tensor
from src.exceptions import DimensionError, InsufficientDataError, NumericError
from src.nn import MLP, Linear, Module, ModuleList

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
SIGMA_FLOOR = 0.1
SIGMA_SPAN = 0.9

# softplus(x + IDENTITY_SHIFT) == 1 at x == 0, so zero parameters give identity stages
IDENTITY_SHIFT = float(np.log(np.e - 1.0))


# =============================================================================
# NEURAL PROCESS ENCODER
# =============================================================================

def context_inputs(entity_reps: Tensor, heads: np.ndarray, tails: np.ndarray, labels: np.ndarray) -> Tensor:
    """Rows h' ‖ t' ‖ y for every context or target pair, shape (N, 2d+1)."""
    n = len(heads)
    if n == 0:
        raise InsufficientDataError("context set is empty")
    y = Tensor(np.asarray(labels, dtype=np.float64).reshape(n, 1))
    return dc.concat([triple_representation(entity_reps, heads, tails), y], axis=1)


class NpEncoder(Module):
    """
    Maps labelled pairs to a permutation-invariant summary and then to (μ, σ) of the base Gaussian.

    Args:
        d: Entity representation width
        d_z: Latent width (also the context encoding width)
        rng: Initialization stream
    """

    def __init__(self, d: int, d_z: int, rng: np.random.Generator):
        super().__init__()
        self.d = d
        self.d_z = d_z
        self.context_mlp = MLP([2 * d + 1, d_z, d_z], rng)
        self.trunk = Linear(d_z, d_z, rng)
        self.mu_head = Linear(d_z, d_z, rng)
        self.sigma_head = Linear(d_z, d_z, rng)
        self.invocations = 0

    def encode_rows(self, inputs: Tensor) -> Tensor:
        """Per-pair encodings c_i, shape (N, d_z)."""
        if inputs.ndim != 2 or inputs.shape[0] == 0:
            raise InsufficientDataError("context set is empty")
        if inputs.shape[1] != 2 * self.d + 1:
            raise DimensionError(f"context rows must have width {2 * self.d + 1}, got {inputs.shape[1]}")
        self.invocations += inputs.shape[0]
        return self.context_mlp(inputs)

    def encode_context(self, inputs: Tensor) -> Tensor:
        """Mean of the per-pair encodings."""
        return self.encode_rows(inputs).mean(axis=0)

    def base_distribution(self, r: Tensor) -> Tuple[Tensor, Tensor]:
        """μ unconstrained; σ = 0.1 + 0.9·sigmoid(pre-σ), so σ ∈ [0.1, 1)."""
        x = dc.relu(self.trunk(r))
        mu = self.mu_head(x)
        sigma = SIGMA_FLOOR + SIGMA_SPAN * dc.sigmoid(self.sigma_head(x))
        return mu, sigma

    def __call__(self, inputs: Tensor) -> Tuple[Tensor, Tensor]:
        return self.base_distribution(self.encode_context(inputs))


def gaussian_log_density(z: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Diagonal-Gaussian log density of each row of z (S, d_z); returns shape (S,)."""
    S, d = z.shape
    mu_b = dc.expand(dc.reshape(mu, (1, d)), (S, d))
    sigma_b = dc.expand(dc.reshape(sigma, (1, d)), (S, d))
    std = (z - mu_b) / sigma_b
    log_norm = dc.log(sigma).sum() + 0.5 * d * LOG_2PI
    return (-0.5) * dc.square(std).sum(axis=1) - log_norm


def sample_base(mu: Tensor, sigma: Tensor, rng: Optional[np.random.Generator] = None,
                n_samples: int = 1, eps: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
    """
    Reparameterized draw z0 = μ + σ ⊙ ε.

    Args:
        mu, sigma: Base parameters (d_z,)
        rng: Noise stream (unused when eps is given)
        n_samples: Number of rows to draw
        eps: Explicit noise (S, d_z); zeros give the mode

    Returns:
        (z0 of shape (S, d_z), the noise used)
    """
    d = mu.shape[0]
    if eps is None:
        if rng is None:
            raise ValueError("sample_base needs an rng stream or explicit eps")
        eps = rng.standard_normal((n_samples, d))
    eps = np.asarray(eps, dtype=np.float64).reshape(-1, d)
    S = eps.shape[0]
    z0 = dc.expand(dc.reshape(mu, (1, d)), (S, d)) + dc.expand(dc.reshape(sigma, (1, d)), (S, d)) * Tensor(eps)
    return z0, eps


def gaussian_kl(mu_q: np.ndarray, sigma_q: np.ndarray, mu_p: np.ndarray, sigma_p: np.ndarray) -> float:
    """Closed-form KL(N(μq, σq²) || N(μp, σp²)) for diagonal Gaussians."""
    mu_q, sigma_q, mu_p, sigma_p = (np.asarray(a, dtype=np.float64) for a in (mu_q, sigma_q, mu_p, sigma_p))
    ratio = (sigma_q / sigma_p) ** 2
    return float(0.5 * np.sum(ratio + ((mu_p - mu_q) / sigma_p) ** 2 - 1.0 - np.log(ratio)))


# =============================================================================
# FLOW STAGES
# =============================================================================

def _rows(v: Tensor, S: int) -> Tensor:
    d = v.shape[-1]
    return dc.expand(dc.reshape(v, (1, d)), (S, d))


def _column(v: Tensor, d: int) -> Tensor:
    S = v.shape[0]
    return dc.expand(dc.reshape(v, (S, 1)), (S, d))


class PlanarStage(Module):
    """g(z) = z + û·tanh(wᵀz + b), with û reparameterized so wᵀû > -1."""

    def __init__(self, d_z: int, rng: np.random.Generator):
        super().__init__()
        self.d_z = d_z
        self.u = Tensor(rng.normal(0.0, 0.1, size=d_z), requires_grad=True)
        self.w = Tensor(rng.normal(0.0, 0.1, size=d_z), requires_grad=True)
        self.b = Tensor(np.zeros(1), requires_grad=True)

    def effective_u(self) -> Tensor:
        wu = (self.w * self.u).sum()
        w_norm2 = dc.square(self.w).sum()
        if w_norm2.item() == 0.0:
            return self.u
        shift = dc.softplus(wu + IDENTITY_SHIFT) - 1.0 - wu
        return self.u + self.w * (shift / w_norm2)

    def invertibility_margin(self) -> float:
        """wᵀû; the stage is invertible while this stays >= -1."""
        with dc.no_grad():
            return float(np.dot(self.w.data, self.effective_u().data))

    def forward(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        S, d = z.shape
        u_hat = self.effective_u()
        act = dc.tanh(dc.reshape(dc.linear(z, dc.reshape(self.w, (1, d)), self.b), (S,)))
        y = z + _rows(u_hat, S) * _column(act, d)
        wu_hat = (self.w * u_hat).sum()
        log_det = dc.log(dc.absolute(1.0 + (1.0 - dc.square(act)) * wu_hat))
        return y, log_det

    def inverse(self, y: np.ndarray) -> np.ndarray:
        """Solve wᵀz from the monotone scalar equation, then undo the shift."""
        with dc.no_grad():
            u_hat = self.effective_u().data
        w, b = self.w.data, float(self.b.data[0])
        wu = float(np.dot(w, u_hat))
        y = np.atleast_2d(y)
        out = np.empty_like(y)
        for i, row in enumerate(y):
            target = float(np.dot(w, row))
            fn = lambda a: a + wu * np.tanh(a + b) - target
            span = abs(wu) + 1.0
            a = brentq(fn, target - span, target + span, xtol=1e-15, rtol=4 * np.finfo(float).eps)
            out[i] = row - u_hat * np.tanh(a + b)
        return out


class RadialStage(Module):
    """g(z) = z + β̂·(α + ‖z − z_ref‖)⁻¹·(z − z_ref), with α = exp(log_alpha) and β̂ ≥ −α."""

    def __init__(self, d_z: int, rng: np.random.Generator):
        super().__init__()
        self.d_z = d_z
        self.z_ref = Tensor(rng.normal(0.0, 1.0, size=d_z), requires_grad=True)
        self.log_alpha = Tensor(np.zeros(1), requires_grad=True)
        self.beta_raw = Tensor(rng.normal(0.0, 0.1, size=1), requires_grad=True)

    def coefficients(self) -> Tuple[Tensor, Tensor]:
        alpha = dc.exp(self.log_alpha)
        beta = dc.softplus(self.beta_raw + IDENTITY_SHIFT) - alpha
        return alpha, beta

    def forward(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        S, d = z.shape
        alpha, beta = self.coefficients()
        diff = z - _rows(self.z_ref, S)
        radius = dc.sqrt(dc.square(diff).sum(axis=1))
        h = 1.0 / (radius + alpha)
        bh = h * beta
        y = z + _column(bh, d) * diff
        log_det = (d - 1) * dc.log(1.0 + bh) + dc.log(1.0 + beta * alpha * dc.square(h))
        return y, log_det

    def inverse(self, y: np.ndarray) -> np.ndarray:
        """Closed form: the new radius solves a quadratic in the old one."""
        with dc.no_grad():
            alpha, beta = (float(t.data[0]) for t in self.coefficients())
        diff = np.atleast_2d(y) - self.z_ref.data
        r_y = np.linalg.norm(diff, axis=1)
        c = alpha + beta - r_y
        r = 0.5 * (-c + np.sqrt(c * c + 4.0 * alpha * r_y))
        scale = 1.0 + beta / (alpha + r)
        return self.z_ref.data + diff / scale[:, None]


class RealNvpStage(Module):
    """
    Affine coupling: coordinates with mask 1 pass through and condition the
    scale/shift applied to the others. Output layers start at zero.
    """

    def __init__(self, d_z: int, parity: int, rng: np.random.Generator, hidden: Optional[int] = None):
        super().__init__()
        self.d_z = d_z
        self.mask = ((np.arange(d_z) + parity) % 2 == 0).astype(np.float64)
        hidden = hidden or max(2 * d_z, 8)
        self.scale_net = MLP([d_z, hidden, d_z], rng, activation="tanh")
        self.shift_net = MLP([d_z, hidden, d_z], rng, activation="relu")
        self.scale_net.zero_output()
        self.shift_net.zero_output()

    def _conditioners(self, passed: Tensor) -> Tuple[Tensor, Tensor]:
        S, d = passed.shape
        free = Tensor(np.broadcast_to(1.0 - self.mask, (S, d)))
        return self.scale_net(passed) * free, self.shift_net(passed) * free

    def forward(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        S, d = z.shape
        keep = Tensor(np.broadcast_to(self.mask, (S, d)))
        passed = z * keep
        s, t = self._conditioners(passed)
        y = passed + (z - passed) * dc.exp(s) + t
        return y, s.sum(axis=1)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        with dc.no_grad():
            passed = Tensor(y * self.mask)
            s, t = self._conditioners(passed)
        free = 1.0 - self.mask
        return y * self.mask + free * (y - t.data) * np.exp(-s.data)


STAGES = {"planar": PlanarStage, "radial": RadialStage, "realnvp": RealNvpStage}


class FlowChain(Module):
    """
    T invertible stages of one kind applied in order.

    Args:
        kind: 'planar', 'radial' or 'realnvp'
        T: Number of stages (0 gives the identity)
        d_z: Latent width
        rng: Initialization stream
    """

    def __init__(self, kind: str, T: int, d_z: int, rng: np.random.Generator):
        super().__init__()
        if kind not in STAGES:
            raise ValueError(f"Unknown flow kind: {kind}")
        self.kind = kind
        self.T = T
        self.d_z = d_z
        if kind == "realnvp":
            stages = [RealNvpStage(d_z, j, rng) for j in range(T)]
        else:
            stages = [STAGES[kind](d_z, rng) for _ in range(T)]
        self.stages = ModuleList(stages)

    def forward(self, z0: Tensor) -> Tuple[Tensor, List[Tensor]]:
        """
        Returns:
            (z_T of shape (S, d_z), one (S,) log|det| tensor per stage)
        """
        if z0.ndim != 2 or z0.shape[1] != self.d_z:
            raise DimensionError(f"flow input must be (S, {self.d_z}), got {z0.shape}")
        z, log_dets = z0, []
        for i, stage in enumerate(self.stages):
            z, ld = stage.forward(z)
            if not (np.all(np.isfinite(z.data)) and np.all(np.isfinite(ld.data))):
                raise NumericError(f"flow stage {i} ({self.kind}) produced non-finite values")
            log_dets.append(ld)
        return z, log_dets

    __call__ = forward

    def inverse(self, z_T: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z_T, dtype=np.float64))
        for stage in reversed(list(self.stages)):
            z = stage.inverse(z)
        return z


def flow_inverse(chain: FlowChain, z_T: np.ndarray) -> np.ndarray:
    return chain.inverse(z_T)


def total_log_det(log_dets: List[Tensor], S: int) -> Tensor:
    if not log_dets:
        return Tensor(np.zeros(S))
    total = log_dets[0]
    for ld in log_dets[1:]:
        total = total + ld
    return total


@dataclass(eq=False)
class LatentState:
    mu: Tensor
    sigma: Tensor
    z0: Tensor
    z_T: Tensor
    log_dets: List[Tensor]
    base_log_density: Tensor

    @property
    def sum_log_det(self) -> Tensor:
        return total_log_det(self.log_dets, self.z0.shape[0])


def transform(chain: FlowChain, mu: Tensor, sigma: Tensor, rng: Optional[np.random.Generator] = None,
              n_samples: int = 1, eps: Optional[np.ndarray] = None) -> LatentState:
    """Sample z0 from the base, push it through the chain and keep every density term."""
    z0, _ = sample_base(mu, sigma, rng, n_samples, eps)
    z_T, log_dets = chain(z0)
    return LatentState(mu, sigma, z0, z_T, log_dets, gaussian_log_density(z0, mu, sigma))


def flow_log_density(chain: FlowChain, mu: Tensor, sigma: Tensor, z0: Tensor) -> Tensor:
    """log Q_T(z_T) = log Q_0(z0) − Σ log|det| at the pre-image z0, per row."""
    _, log_dets = chain(z0)
    return gaussian_log_density(z0, mu, sigma) - total_log_det(log_dets, z0.shape[0])


def latent_entropy(chain: FlowChain, mu: Tensor, sigma: Tensor, n_samples: int = 256,
                   rng: Optional[np.random.Generator] = None) -> float:
    """Monte-Carlo estimate of the entropy of z_T."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    with dc.no_grad():
        z0, _ = sample_base(mu, sigma, rng, n_samples)
        log_q = flow_log_density(chain, mu, sigma, z0)
    return float(-log_q.data.mean())
