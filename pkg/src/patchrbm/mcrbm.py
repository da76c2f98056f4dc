"""Mean-covariance RBM: factored third-order energy trained with HMC.

The covariance side squares filter responses f = C'v and pools them with
a non-positive matrix P into binary covariance units; the mean side is a
Gaussian-binary RBM with unit precision. The two energies add, so the
free energy over v is

    F(v) = 0.5 v'v - a'v - sum_j softplus(b_j + (W'v)_j)
                        - sum_k softplus(c_k + (P'(C'v)^2)_k)

Negative-phase samples for CD-style training are drawn with Hamiltonian
Monte Carlo on F, with chains initialized at the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit as sigmoid

from patchrbm.dataset import PatchSet, resample_batch
from patchrbm.grbm import MODEL_PATCH_SIDE, TrainingDiverged
from patchrbm.preprocess import Whitener, apply_whitener_batch, fit_whitener


@dataclass
class McrbmParams:
    """Covariance-side (C, P, c) and mean-side (W, a, b) parameters."""

    C: np.ndarray  # (n_vis, n_factors)
    P: np.ndarray  # (n_factors, n_cov), elementwise <= 0
    c: np.ndarray  # (n_cov,)
    W: np.ndarray  # (n_vis, n_mean)
    a: np.ndarray  # (n_vis,)
    b: np.ndarray  # (n_mean,)

    @property
    def n_vis(self) -> int:
        return self.C.shape[0]

    @property
    def n_factors(self) -> int:
        return self.C.shape[1]

    @property
    def n_cov(self) -> int:
        return self.P.shape[1]

    @property
    def n_mean(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "McrbmParams":
        return McrbmParams(self.C.copy(), self.P.copy(), self.c.copy(),
                           self.W.copy(), self.a.copy(), self.b.copy())

    def arrays(self) -> dict[str, np.ndarray]:
        return {"C": self.C, "P": self.P, "c": self.c,
                "W": self.W, "a": self.a, "b": self.b}


@dataclass(frozen=True)
class McrbmArch:
    """Architecture preset for the mean-covariance model."""

    n_mean: int
    n_factors: int
    n_cov: int
    topographic: bool = False
    neighborhood: int = 5
    stride: int = 3

    @classmethod
    def large(cls) -> "McrbmArch":
        return cls(n_mean=256, n_factors=512, n_cov=512, topographic=False)

    @classmethod
    def compact(cls) -> "McrbmArch":
        return cls(n_mean=64, n_factors=576, n_cov=64, topographic=True,
                   neighborhood=5, stride=3)


@dataclass
class HmcConfig:
    n_leapfrog: int = 20
    step_size: float = 0.05
    target_acceptance: float = 0.9
    adapt_up: float = 1.02
    adapt_down: float = 0.98


@dataclass
class McrbmTrainConfig:
    lr: float = 0.01
    batch_size: int = 128
    epochs: int = 100
    rng_seed: int = 0
    hmc: HmcConfig = field(default_factory=HmcConfig)
    # epoch at which P starts updating; None = epochs // 2
    p_start_epoch: int | None = None
    # keep P fixed at its (topographic) initialization for the whole run
    freeze_p: bool = False
    pca_retain: float = 0.99


@dataclass
class McrbmDiagnostics:
    data_free_energy: list[float] = field(default_factory=list)
    acceptance_rate: list[float] = field(default_factory=list)
    step_size: list[float] = field(default_factory=list)


def crbm_energy(v: np.ndarray, hc: np.ndarray, p: McrbmParams) -> float:
    """Covariance-side energy: -(v'C)^2 P hc - c'hc."""
    v = np.asarray(v, dtype=np.float64)
    hc = np.asarray(hc, dtype=np.float64)
    if v.shape != (p.n_vis,) or hc.shape != (p.n_cov,):
        raise ValueError(f"shape mismatch: v {v.shape}, hc {hc.shape}")
    f2 = (p.C.T @ v) ** 2
    return float(-(f2 @ p.P @ hc) - p.c @ hc)


def mean_energy(v: np.ndarray, hm: np.ndarray, p: McrbmParams) -> float:
    """Mean-side (unit-precision Gaussian RBM) energy."""
    v = np.asarray(v, dtype=np.float64)
    hm = np.asarray(hm, dtype=np.float64)
    return float(0.5 * v @ v - v @ p.a - hm @ p.b - v @ p.W @ hm)


def mcrbm_energy(v: np.ndarray, hm: np.ndarray, hc: np.ndarray,
                 p: McrbmParams) -> float:
    """Joint energy: sum of the mean-side and covariance-side terms."""
    return mean_energy(v, hm, p) + crbm_energy(v, hc, p)


def cov_hidden_given_visible(v: np.ndarray, p: McrbmParams) -> np.ndarray:
    """Bernoulli means of the covariance units (vector or rows of v)."""
    v = np.asarray(v, dtype=np.float64)
    f2 = (v @ p.C) ** 2
    return sigmoid(f2 @ p.P + p.c)


def mean_hidden_given_visible(v: np.ndarray, p: McrbmParams) -> np.ndarray:
    """Bernoulli means of the mean units."""
    v = np.asarray(v, dtype=np.float64)
    return sigmoid(v @ p.W + p.b)


def visible_precision(hc: np.ndarray, p: McrbmParams) -> tuple[np.ndarray, bool]:
    """Conditional precision C diag(-P hc) C' and a degeneracy flag.

    Analysis helper only; never inverted during training. Returns
    (matrix, degenerate) where degenerate means the precision is the
    zero matrix (hc activates nothing).
    """
    hc = np.asarray(hc, dtype=np.float64)
    d = -(p.P @ hc)
    prec = (p.C * d) @ p.C.T
    prec = 0.5 * (prec + prec.T)
    return prec, bool(np.all(d == 0.0))


def conditional_visible_mean(hm: np.ndarray, hc: np.ndarray,
                             p: McrbmParams) -> np.ndarray:
    """Mean of p(v | hm, hc) = Sigma W hm; tiny instances only."""
    prec, degenerate = visible_precision(hc, p)
    if degenerate:
        raise ValueError("degenerate precision: hc activates no covariance unit")
    return np.linalg.solve(prec, p.W @ np.asarray(hm, dtype=np.float64))


def mcrbm_free_energy(v: np.ndarray, p: McrbmParams) -> float:
    """Free energy of v with both hidden sets summed out."""
    v = np.asarray(v, dtype=np.float64)
    pre_m = v @ p.W + p.b
    pre_c = ((v @ p.C) ** 2) @ p.P + p.c
    return float(0.5 * v @ v - p.a @ v
                 - np.logaddexp(0.0, pre_m).sum()
                 - np.logaddexp(0.0, pre_c).sum())


def free_energy_rows(V: np.ndarray, p: McrbmParams) -> np.ndarray:
    """mcrbm_free_energy for each row of V."""
    V = np.asarray(V, dtype=np.float64)
    pre_m = V @ p.W + p.b
    pre_c = ((V @ p.C) ** 2) @ p.P + p.c
    return (0.5 * (V * V).sum(axis=1) - V @ p.a
            - np.logaddexp(0.0, pre_m).sum(axis=1)
            - np.logaddexp(0.0, pre_c).sum(axis=1))


def free_energy_grad_v(v: np.ndarray, p: McrbmParams) -> np.ndarray:
    """Exact gradient of the free energy with respect to v."""
    v = np.asarray(v, dtype=np.float64)
    hm = sigmoid(v @ p.W + p.b)
    f = v @ p.C
    hc = sigmoid((f * f) @ p.P + p.c)
    return v - p.a - p.W @ hm - 2.0 * p.C @ (f * (p.P @ hc))


def _free_energy_grad_rows(V: np.ndarray, p: McrbmParams) -> np.ndarray:
    hm = sigmoid(V @ p.W + p.b)
    F = V @ p.C
    hc = sigmoid((F * F) @ p.P + p.c)
    return V - p.a - hm @ p.W.T - 2.0 * (F * (hc @ p.P.T)) @ p.C.T


def free_energy_param_grads(v: np.ndarray, p: McrbmParams) -> McrbmParams:
    """-dF/dtheta at one visible vector, packed in a McrbmParams shell."""
    stats = _phase_stats(np.asarray(v, dtype=np.float64)[None, :], p)
    return stats


def _phase_stats(V: np.ndarray, p: McrbmParams) -> McrbmParams:
    """Batch-averaged -dF/dtheta, packed as a McrbmParams of gradients."""
    n = V.shape[0]
    hm = sigmoid(V @ p.W + p.b)
    F = V @ p.C
    hc = sigmoid((F * F) @ p.P + p.c)
    gC = 2.0 * V.T @ (F * (hc @ p.P.T)) / n
    gP = (F * F).T @ hc / n
    gc = hc.mean(axis=0)
    gW = V.T @ hm / n
    ga = V.mean(axis=0)
    gb = hm.mean(axis=0)
    return McrbmParams(C=gC, P=gP, c=gc, W=gW, a=ga, b=gb)


def _leapfrog(V: np.ndarray, M: np.ndarray, p: McrbmParams, step: float,
              n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Leapfrog integration of rows (positions V, momenta M)."""
    V = V.copy()
    M = M - 0.5 * step * _free_energy_grad_rows(V, p)
    for i in range(n_steps):
        V += step * M
        g = _free_energy_grad_rows(V, p)
        # full momentum step between position steps, half step at the end
        M -= (step if i < n_steps - 1 else 0.5 * step) * g
    return V, M


def hmc_sample(v0: np.ndarray, p: McrbmParams, cfg: HmcConfig,
               rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """One HMC transition from v0; returns (new state, accepted)."""
    V1, acc = hmc_sample_rows(np.asarray(v0, dtype=np.float64)[None, :], p, cfg, rng)
    return V1[0], bool(acc[0])


def hmc_sample_rows(V0: np.ndarray, p: McrbmParams, cfg: HmcConfig,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Independent HMC transitions for each row of V0.

    Momenta are standard normal; proposals integrate n_leapfrog steps of
    H(v, m) = F(v) + 0.5 |m|^2 and are Metropolis-accepted per row.
    Non-finite proposals auto-reject and halve cfg.step_size.
    """
    V0 = np.asarray(V0, dtype=np.float64)
    M0 = rng.standard_normal(V0.shape)
    if cfg.n_leapfrog == 0:
        return V0.copy(), np.ones(V0.shape[0], dtype=bool)
    h0 = free_energy_rows(V0, p) + 0.5 * (M0 * M0).sum(axis=1)
    V1, M1 = _leapfrog(V0, M0, p, cfg.step_size, cfg.n_leapfrog)
    h1 = free_energy_rows(V1, p) + 0.5 * (M1 * M1).sum(axis=1)
    bad = ~np.isfinite(h1)
    if bad.any():
        cfg.step_size *= 0.5
    with np.errstate(over="ignore", invalid="ignore"):
        accept = rng.random(V0.shape[0]) < np.exp(np.minimum(0.0, h0 - h1))
    accept &= ~bad
    out = np.where(accept[:, None], V1, V0)
    return out, accept


def leapfrog_energy_error(v0: np.ndarray, m0: np.ndarray, p: McrbmParams,
                          step: float, n_steps: int) -> float:
    """|Delta H| of one leapfrog trajectory (integrator-order checks)."""
    v0 = np.asarray(v0, dtype=np.float64)[None, :]
    m0 = np.asarray(m0, dtype=np.float64)[None, :]
    h0 = free_energy_rows(v0, p)[0] + 0.5 * (m0 * m0).sum()
    v1, m1 = _leapfrog(v0, m0, p, step, n_steps)
    h1 = free_energy_rows(v1, p)[0] + 0.5 * (m1 * m1).sum()
    return abs(h1 - h0)


def init_topography(arch: McrbmArch) -> np.ndarray:
    """Block-structured pooling matrix on a toroidal factor grid.

    Factors live on a sqrt(F) x sqrt(F) torus; each covariance unit pools
    one neighborhood x neighborhood block, blocks placed every `stride`
    cells with wrap-around, pooled entries set to -1.
    """
    side = int(round(np.sqrt(arch.n_factors)))
    if side * side != arch.n_factors:
        raise ValueError(f"n_factors={arch.n_factors} is not a perfect square")
    if side % arch.stride != 0:
        raise ValueError(f"stride {arch.stride} does not divide grid side {side}")
    per_axis = side // arch.stride
    n_cov = per_axis * per_axis
    if arch.n_cov != n_cov:
        raise ValueError(f"topography yields {n_cov} pools, arch says {arch.n_cov}")
    P = np.zeros((arch.n_factors, n_cov))
    for br in range(per_axis):
        for bc in range(per_axis):
            k = br * per_axis + bc
            for dr in range(arch.neighborhood):
                for dc in range(arch.neighborhood):
                    r = (br * arch.stride + dr) % side
                    c = (bc * arch.stride + dc) % side
                    P[r * side + c, k] = -1.0
    return P


def project_constraints(p: McrbmParams, topographic: bool = False) -> McrbmParams:
    """Clamp P non-positive and equalize norms.

    C columns are rescaled to their mean norm; P columns are rescaled to
    unit L1 norm unless the pooling is topographic (then P is left at its
    clamped values).
    """
    out = p.copy()
    out.P = np.minimum(out.P, 0.0)
    norms = np.linalg.norm(out.C, axis=0)
    target = norms.mean()
    if target > 0:
        safe = np.where(norms > 1e-12, norms, 1.0)
        out.C = out.C * (target / safe)
    if not topographic:
        l1 = np.abs(out.P).sum(axis=0)
        out.P = out.P / np.where(l1 > 1e-12, l1, 1.0)
    return out


def init_mcrbm(n_vis: int, arch: McrbmArch, rng: np.random.Generator) -> McrbmParams:
    """C and W from N(0, 0.05); P topographic or -|N(0, 0.01)|; biases 0."""
    C = rng.normal(0.0, 0.05, size=(n_vis, arch.n_factors))
    if arch.topographic:
        P = init_topography(arch)
    else:
        P = -np.abs(rng.normal(0.0, 0.01, size=(arch.n_factors, arch.n_cov)))
    return McrbmParams(
        C=C, P=P, c=np.zeros(arch.n_cov),
        W=rng.normal(0.0, 0.05, size=(n_vis, arch.n_mean)),
        a=np.zeros(n_vis), b=np.zeros(arch.n_mean),
    )


def fit(X: np.ndarray, arch: McrbmArch, cfg: McrbmTrainConfig
        ) -> tuple[McrbmParams, McrbmDiagnostics]:
    """CD-style training on whitened rows of X with HMC negative phase."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(cfg.rng_seed)
    p = init_mcrbm(X.shape[1], arch, rng)
    hmc = replace(cfg.hmc)
    diag = McrbmDiagnostics()
    p_start = cfg.p_start_epoch if cfg.p_start_epoch is not None else cfg.epochs // 2

    for epoch in range(cfg.epochs):
        update_p = (not cfg.freeze_p) and epoch >= p_start
        order = rng.permutation(X.shape[0])
        acc_sum, n_batches = 0.0, 0
        for start in range(0, X.shape[0], cfg.batch_size):
            batch = X[order[start:start + cfg.batch_size]]
            Vneg, accepted = hmc_sample_rows(batch, p, hmc, rng)
            rate = float(accepted.mean())
            hmc.step_size *= (hmc.adapt_up if rate > hmc.target_acceptance
                              else hmc.adapt_down)
            pos = _phase_stats(batch, p)
            neg = _phase_stats(Vneg, p)
            p.C += cfg.lr * (pos.C - neg.C)
            p.c += cfg.lr * (pos.c - neg.c)
            p.W += cfg.lr * (pos.W - neg.W)
            p.a += cfg.lr * (pos.a - neg.a)
            p.b += cfg.lr * (pos.b - neg.b)
            if update_p:
                p.P += cfg.lr * (pos.P - neg.P)
            p = project_constraints(p, topographic=arch.topographic)
            if arch.topographic and cfg.freeze_p:
                p.P = init_topography(arch)  # literal freeze, no drift
            acc_sum += rate
            n_batches += 1
            if not all(np.all(np.isfinite(arr)) for arr in p.arrays().values()):
                raise TrainingDiverged(
                    f"non-finite parameters at epoch {epoch}, batch {n_batches - 1}")
        diag.data_free_energy.append(float(free_energy_rows(X, p).mean()))
        diag.acceptance_rate.append(acc_sum / max(n_batches, 1))
        diag.step_size.append(hmc.step_size)
    return p, diag


def train_mcrbm(patches: PatchSet, arch: McrbmArch, cfg: McrbmTrainConfig
                ) -> tuple[McrbmParams, Whitener, McrbmDiagnostics]:
    """Full pipeline: resample to 16x16, fit whitener, whiten, fit model."""
    X = resample_batch(patches, MODEL_PATCH_SIDE)
    whitener = fit_whitener(X, retain=cfg.pca_retain)
    Xw = apply_whitener_batch(whitener, X)
    params, diag = fit(Xw, arch, cfg)
    return params, whitener, diag
