"""Gaussian-binary RBM with learned diagonal precision.

Visible units are real-valued with a diagonal precision matrix whose
entries are learned in log space (lam_i = exp(z_i), so positivity is
structural). Hidden units are binary. The visible-hidden coupling uses
the square root of the precision, which is the parameterization under
which the two conditionals

    p(h_j = 1 | v) = sigmoid((sqrt(lam) * v) @ W + b)_j
    p(v | h)       = Normal(W h / sqrt(lam) + a, 1 / lam)

are mutually consistent. Training is CD-1 with rmsprop ascent and an
optional lifetime-sparsity penalty pushing each unit's mean activation
toward a target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as sigmoid
from scipy.special import logsumexp

from patchrbm.dataset import PatchSet, resample_batch
from patchrbm.preprocess import normalize_batch

MODEL_PATCH_SIDE = 16
RMSPROP_EPS = 1e-8
EPS_Q = 1e-6


class TrainingDiverged(RuntimeError):
    """Non-finite parameters encountered during training."""


@dataclass
class GrbmParams:
    """Weights, biases and log-precision of a Gaussian-binary RBM."""

    W: np.ndarray  # (n_vis, n_hid)
    a: np.ndarray  # (n_vis,) visible bias
    b: np.ndarray  # (n_hid,) hidden bias
    z: np.ndarray  # (n_vis,) log precision

    @property
    def n_vis(self) -> int:
        return self.W.shape[0]

    @property
    def n_hid(self) -> int:
        return self.W.shape[1]

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.z)

    @property
    def sqrt_lam(self) -> np.ndarray:
        return np.exp(0.5 * self.z)

    def copy(self) -> "GrbmParams":
        return GrbmParams(self.W.copy(), self.a.copy(), self.b.copy(), self.z.copy())

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "a": self.a, "b": self.b, "z": self.z}


@dataclass
class GrbmGradients:
    """Per-parameter ascent directions, same shapes as GrbmParams."""

    W: np.ndarray
    a: np.ndarray
    b: np.ndarray
    z: np.ndarray

    def __iadd__(self, other: "GrbmGradients") -> "GrbmGradients":
        self.W += other.W
        self.a += other.a
        self.b += other.b
        self.z += other.z
        return self


@dataclass
class GrbmTrainConfig:
    n_hidden: int = 512
    lr: float = 0.001
    rmsprop_decay: float = 0.9
    batch_size: int = 128
    epochs: int = 10
    sparsity_target: float = 0.05
    sparsity_penalty: float = 0.0
    init_std: float = 0.1
    rng_seed: int = 0
    sparsity_bias_only: bool = False


@dataclass
class RmspropState:
    """Running mean-square gradient accumulators, one per parameter array."""

    acc: dict[str, np.ndarray]
    epsilon: float = RMSPROP_EPS

    @classmethod
    def zeros_like(cls, p: GrbmParams) -> "RmspropState":
        return cls(acc={k: np.zeros_like(v) for k, v in p.arrays().items()})


@dataclass
class GrbmDiagnostics:
    """Per-epoch training telemetry."""

    reconstruction_error: list[float] = field(default_factory=list)
    mean_hidden_activation: list[float] = field(default_factory=list)
    dead_fraction: list[float] = field(default_factory=list)


def init_params(n_vis: int, n_hid: int, init_std: float,
                rng: np.random.Generator) -> GrbmParams:
    """Weights from N(0, init_std), biases and log-precision zero."""
    return GrbmParams(
        W=rng.normal(0.0, init_std, size=(n_vis, n_hid)),
        a=np.zeros(n_vis),
        b=np.zeros(n_hid),
        z=np.zeros(n_vis),
    )


def energy(v: np.ndarray, h: np.ndarray, p: GrbmParams) -> float:
    """Joint energy of a visible/hidden configuration."""
    v = np.asarray(v, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if v.shape != (p.n_vis,) or h.shape != (p.n_hid,):
        raise ValueError(f"shape mismatch: v {v.shape}, h {h.shape} vs "
                         f"({p.n_vis},), ({p.n_hid},)")
    lam = p.lam
    sv = p.sqrt_lam * v
    return float(0.5 * v @ (lam * v) - v @ (lam * p.a) - h @ p.b - sv @ p.W @ h)


def hidden_given_visible(v: np.ndarray, p: GrbmParams) -> np.ndarray:
    """Bernoulli means of the hidden units given a visible vector (or rows)."""
    v = np.asarray(v, dtype=np.float64)
    return sigmoid((v * p.sqrt_lam) @ p.W + p.b)


def visible_given_hidden(h: np.ndarray, p: GrbmParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (diagonal) variance of the visible units given hidden states."""
    h = np.asarray(h, dtype=np.float64)
    mean = (h @ p.W.T) / p.sqrt_lam + p.a
    var = np.exp(-p.z)
    return mean, var


def free_energy(v: np.ndarray, p: GrbmParams) -> float:
    """Negative log unnormalized marginal of v (hidden units summed out)."""
    v = np.asarray(v, dtype=np.float64)
    lam = p.lam
    pre = (v * p.sqrt_lam) @ p.W + p.b
    return float(0.5 * v @ (lam * v) - v @ (lam * p.a) - np.logaddexp(0.0, pre).sum())


def free_energy_batch(V: np.ndarray, p: GrbmParams) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    lam = p.lam
    pre = (V * p.sqrt_lam) @ p.W + p.b
    return (0.5 * (V * V) @ lam - V @ (lam * p.a)
            - np.logaddexp(0.0, pre).sum(axis=1))


def _phase_stats(V: np.ndarray, H: np.ndarray, p: GrbmParams) -> GrbmGradients:
    """Batch-averaged -dE/dtheta with hidden states replaced by means H."""
    n = V.shape[0]
    lam = p.lam
    s = p.sqrt_lam
    sv = V * s
    gW = sv.T @ H / n
    ga = (V * lam).mean(axis=0)
    gb = H.mean(axis=0)
    wh = H @ p.W.T  # (n, n_vis)
    gz = (-(lam * (0.5 * V * V - V * p.a)) + 0.5 * sv * wh).mean(axis=0)
    return GrbmGradients(W=gW, a=ga, b=gb, z=gz)


def energy_param_grads(v: np.ndarray, h: np.ndarray, p: GrbmParams) -> GrbmGradients:
    """-dE/dtheta at a fixed (v, h) configuration."""
    return _phase_stats(np.asarray(v, float)[None, :], np.asarray(h, float)[None, :], p)


def cd1_gradient(batch: np.ndarray, p: GrbmParams, rng: np.random.Generator
                 ) -> tuple[GrbmGradients, float]:
    """One CD-1 estimate of the log-likelihood gradient over a minibatch.

    Positive statistics use hidden means at the data; the negative phase
    samples h, samples a stochastic reconstruction v', and uses hidden
    means at v'. Also returns the mean squared reconstruction error.
    """
    V = np.asarray(batch, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] == 0:
        raise ValueError("batch must be a non-empty matrix")
    H0 = hidden_given_visible(V, p)
    Hs = (rng.random(H0.shape) < H0).astype(np.float64)
    mean, var = visible_given_hidden(Hs, p)
    Vrec = mean + rng.standard_normal(mean.shape) * np.sqrt(var)
    H1 = hidden_given_visible(Vrec, p)

    pos = _phase_stats(V, H0, p)
    neg = _phase_stats(Vrec, H1, p)
    grad = GrbmGradients(W=pos.W - neg.W, a=pos.a - neg.a,
                         b=pos.b - neg.b, z=pos.z - neg.z)
    recon = float(np.mean((V - Vrec) ** 2))
    return grad, recon


def sparsity_gradient(batch: np.ndarray, p: GrbmParams, rho: float,
                      lam_sp: float) -> GrbmGradients:
    """Ascent direction of the lifetime-sparsity penalty.

    The penalty lam_sp * sum_j [rho log q_j + (1-rho) log(1-q_j)], with
    q_j the minibatch-mean activation of unit j, is backpropagated through
    the hidden sigmoid into b and W (and only those).
    """
    if lam_sp < 0:
        raise ValueError("sparsity penalty must be >= 0")
    if not 0.0 < rho < 1.0:
        raise ValueError("sparsity target must be in (0, 1)")
    V = np.asarray(batch, dtype=np.float64)
    zeros = GrbmGradients(W=np.zeros_like(p.W), a=np.zeros_like(p.a),
                          b=np.zeros_like(p.b), z=np.zeros_like(p.z))
    if lam_sp == 0.0:
        return zeros
    n = V.shape[0]
    sv = V * p.sqrt_lam
    H = sigmoid(sv @ p.W + p.b)
    q = np.clip(H.mean(axis=0), EPS_Q, 1.0 - EPS_Q)
    dq = lam_sp * (rho / q - (1.0 - rho) / (1.0 - q))  # dPenalty/dq_j
    dpre = H * (1.0 - H) * dq / n                      # (n, n_hid)
    zeros.b = dpre.sum(axis=0)
    if p.W.size:
        zeros.W = sv.T @ dpre
    return zeros


def sparsity_penalty_value(batch: np.ndarray, p: GrbmParams, rho: float,
                           lam_sp: float) -> float:
    """Value of the lifetime-sparsity penalty (for finite-difference checks)."""
    H = hidden_given_visible(np.asarray(batch, float), p)
    q = np.clip(H.mean(axis=0), EPS_Q, 1.0 - EPS_Q)
    return float(lam_sp * np.sum(rho * np.log(q) + (1.0 - rho) * np.log(1.0 - q)))


def rmsprop_step(p: GrbmParams, g: GrbmGradients, s: RmspropState,
                 lr: float, decay: float) -> None:
    """In-place rmsprop ascent step: acc <- decay*acc + (1-decay)*g^2."""
    params = p.arrays()
    grads = {"W": g.W, "a": g.a, "b": g.b, "z": g.z}
    for name, theta in params.items():
        acc = s.acc[name]
        acc *= decay
        acc += (1.0 - decay) * grads[name] ** 2
        theta += lr * grads[name] / np.sqrt(acc + s.epsilon)


def fit(X: np.ndarray, cfg: GrbmTrainConfig) -> tuple[GrbmParams, GrbmDiagnostics]:
    """CD-1 / rmsprop training on preprocessed rows of X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(cfg.rng_seed)
    p = init_params(X.shape[1], cfg.n_hidden, cfg.init_std, rng)
    state = RmspropState.zeros_like(p)
    diag = GrbmDiagnostics()

    for epoch in range(cfg.epochs):
        order = rng.permutation(X.shape[0])
        recon_sum = 0.0
        n_batches = 0
        for start in range(0, X.shape[0], cfg.batch_size):
            batch = X[order[start:start + cfg.batch_size]]
            grad, recon = cd1_gradient(batch, p, rng)
            if cfg.sparsity_penalty > 0.0:
                sp = sparsity_gradient(batch, p, cfg.sparsity_target,
                                       cfg.sparsity_penalty)
                if cfg.sparsity_bias_only:
                    sp.W[:] = 0.0
                grad += sp
            rmsprop_step(p, grad, state, cfg.lr, cfg.rmsprop_decay)
            recon_sum += recon
            n_batches += 1
            if not all(np.all(np.isfinite(arr)) for arr in p.arrays().values()):
                raise TrainingDiverged(
                    f"non-finite parameters at epoch {epoch}, batch {n_batches - 1}")
        H = hidden_given_visible(X, p)
        diag.reconstruction_error.append(recon_sum / n_batches)
        diag.mean_hidden_activation.append(float(H.mean()))
        diag.dead_fraction.append(float(np.mean(H.max(axis=1) <= 0.5)))
    return p, diag


def train_grbm(patches: PatchSet, cfg: GrbmTrainConfig
               ) -> tuple[GrbmParams, GrbmDiagnostics]:
    """Full pipeline: resample to 16x16, normalize per patch, fit."""
    X = normalize_batch(resample_batch(patches, MODEL_PATCH_SIDE))
    return fit(X, cfg)


def exact_log_partition(p: GrbmParams) -> float:
    """log Z by enumerating hidden states and integrating v analytically.

    Each hidden configuration contributes a Gaussian integral over v:
    log-contribution = b.h + 0.5 * m' Lam^-1 m with m = Lam a + sqrt(Lam) W h,
    plus the shared constant (n_vis/2) log 2pi - 0.5 sum z. Refuses more
    than 20 hidden units.
    """
    if p.n_hid > 20:
        raise ValueError(f"enumeration over {p.n_hid} hidden units refused (max 20)")
    n_h = p.n_hid
    H = ((np.arange(2 ** n_h)[:, None] >> np.arange(n_h)) & 1).astype(np.float64)
    lam = p.lam
    M = lam * p.a + (H @ p.W.T) * p.sqrt_lam  # (2^n_h, n_vis)
    exponents = H @ p.b + 0.5 * (M * M) @ (1.0 / lam)
    const = 0.5 * p.n_vis * np.log(2.0 * np.pi) - 0.5 * p.z.sum()
    return float(logsumexp(exponents) + const)
