"""Classical batch-correction baselines: ComBat, a simplified Harmony, and sphering."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- ComBat


@dataclass
class ComBatModel:
    """Fitted location/scale model.

    ``gamma_*`` and ``delta_*`` are in standardized units, one row per batch.
    """

    batches: np.ndarray
    stand_mean: np.ndarray
    var_pooled: np.ndarray
    beta_cov: np.ndarray | None
    gamma_hat: np.ndarray
    delta_hat: np.ndarray
    gamma_star: np.ndarray
    delta_star: np.ndarray
    gamma_bar: np.ndarray
    tau2: np.ndarray
    a_prior: np.ndarray
    b_prior: np.ndarray
    active: np.ndarray  # features with non-zero pooled variance

    def location_effects(self) -> np.ndarray:
        """Additive batch effects in the input units, ``(n_batches, n_features)``."""
        out = np.zeros_like(self.gamma_star)
        out[:, self.active] = self.gamma_star[:, self.active] * np.sqrt(self.var_pooled[self.active])
        return out

    def scale_effects(self) -> np.ndarray:
        return np.sqrt(self.delta_star)


def _batch_design(batch) -> tuple[np.ndarray, np.ndarray]:
    batches, inv = np.unique(np.asarray(batch), return_inverse=True)
    design = np.zeros((inv.size, batches.size))
    design[np.arange(inv.size), inv] = 1.0
    return batches, design


def _inverse_gamma_priors(delta_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = delta_hat.mean(axis=1)
    s2 = delta_hat.var(axis=1, ddof=1)
    return (2 * s2 + m ** 2) / s2, (m * s2 + m ** 3) / s2


def _solve_eb(s_data, design, gamma_hat, delta_hat, gamma_bar, tau2, a, b, tol=1e-4, max_iter=1000):
    """Iterate the conditional posterior means of gamma and delta to a fixed point."""
    gamma_star = np.empty_like(gamma_hat)
    delta_star = np.empty_like(delta_hat)
    for j in range(design.shape[1]):
        rows = design[:, j] == 1
        x = s_data[rows]
        n = rows.sum()
        g_old, d_old = gamma_hat[j].copy(), delta_hat[j].copy()
        for _ in range(max_iter):
            g_new = (n * tau2[j] * gamma_hat[j] + d_old * gamma_bar[j]) / (n * tau2[j] + d_old)
            ssq = ((x - g_new) ** 2).sum(axis=0)
            d_new = (0.5 * ssq + b[j]) / (n / 2.0 + a[j] - 1.0)
            change = max(np.max(np.abs(g_new - g_old) / np.maximum(np.abs(g_old), 1e-12)),
                         np.max(np.abs(d_new - d_old) / np.maximum(np.abs(d_old), 1e-12)))
            g_old, d_old = g_new, d_new
            if change < tol:
                break
        gamma_star[j], delta_star[j] = g_old, d_old
    return gamma_star, delta_star


def combat_fit(X, batch, covariates=None) -> ComBatModel:
    X = np.asarray(X, dtype=np.float64)
    batches, bdesign = _batch_design(batch)
    n, p = X.shape
    counts = bdesign.sum(axis=0)
    if (counts < 2).any():
        raise ConfigError(f"ComBat needs >= 2 samples per batch; batch {batches[counts < 2][0]!r} has fewer")
    cov = None if covariates is None else np.asarray(covariates, dtype=np.float64).reshape(n, -1)
    design = bdesign if cov is None else np.hstack([bdesign, cov])
    coef = np.linalg.lstsq(design, X, rcond=None)[0]
    grand_mean = (counts / n) @ coef[:batches.size]
    resid = X - design @ coef
    var_pooled = (resid ** 2).mean(axis=0)
    # relative threshold: a constant column leaves only lstsq round-off in the residual
    active = var_pooled > 1e-24 * np.maximum(1.0, grand_mean ** 2)
    if not active.all():
        warnings.warn(f"ComBat: {int((~active).sum())} zero-variance feature(s) passed through unchanged")
    beta_cov = None if cov is None else coef[batches.size:]
    stand_mean = np.broadcast_to(grand_mean, X.shape).copy()
    if cov is not None:
        stand_mean += cov @ beta_cov
    scale = np.sqrt(np.where(active, var_pooled, 1.0))
    s_data = (X - stand_mean) / scale

    gamma_hat = np.linalg.solve(bdesign.T @ bdesign, bdesign.T @ s_data)
    delta_hat = np.vstack([s_data[bdesign[:, j] == 1].var(axis=0, ddof=1) for j in range(batches.size)])
    delta_hat = np.where(active, delta_hat, 1.0)
    gamma_bar = gamma_hat[:, active].mean(axis=1)
    tau2 = gamma_hat[:, active].var(axis=1, ddof=1)
    a_prior, b_prior = _inverse_gamma_priors(delta_hat[:, active])
    if batches.size == 1:
        gamma_star, delta_star = np.zeros_like(gamma_hat), np.ones_like(delta_hat)
    else:
        gamma_star, delta_star = _solve_eb(s_data[:, active], bdesign, gamma_hat[:, active], delta_hat[:, active],
                                           gamma_bar, tau2, a_prior, b_prior)
        gamma_star_full = np.zeros_like(gamma_hat)
        delta_star_full = np.ones_like(delta_hat)
        gamma_star_full[:, active] = gamma_star
        delta_star_full[:, active] = delta_star
        gamma_star, delta_star = gamma_star_full, delta_star_full
    return ComBatModel(batches, grand_mean, var_pooled, beta_cov, gamma_hat, delta_hat, gamma_star, delta_star,
                       gamma_bar, tau2, a_prior, b_prior, active)


def combat_transform(model: ComBatModel, X, batch, covariates=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    batch = np.asarray(batch)
    lookup = {b: i for i, b in enumerate(model.batches)}
    try:
        idx = np.array([lookup[b] for b in batch])
    except KeyError as exc:
        raise ConfigError(f"batch {exc.args[0]!r} was not seen during fitting") from None
    stand_mean = np.broadcast_to(model.stand_mean, X.shape).copy()
    if model.beta_cov is not None:
        stand_mean += np.asarray(covariates, dtype=np.float64).reshape(len(X), -1) @ model.beta_cov
    a = model.active
    out = X.copy()
    scale = np.sqrt(model.var_pooled[a])
    s = (X[:, a] - stand_mean[:, a]) / scale
    s = (s - model.gamma_star[idx][:, a]) / np.sqrt(model.delta_star[idx][:, a])
    out[:, a] = s * scale + stand_mean[:, a]
    return out


def combat_fit_transform(X, batch, covariates=None) -> np.ndarray:
    """Remove additive and multiplicative batch effects with parametric empirical Bayes.

    A single batch has nothing to remove and is returned unchanged.
    """
    X = np.asarray(X, dtype=np.float64)
    if np.unique(np.asarray(batch)).size == 1:
        if len(X) < 2:
            raise ConfigError("ComBat needs >= 2 samples per batch")
        return X.copy()
    model = combat_fit(X, batch, covariates)
    return combat_transform(model, X, batch, covariates)


# --------------------------------------------------------------------------- Harmony


@dataclass
class HarmonyState:
    Z_pca: np.ndarray
    Z_corr: np.ndarray
    R: np.ndarray  # soft assignments, rows sum to 1
    centroids: np.ndarray
    W: np.ndarray  # per-cluster coefficients, (K, 1 + n_batches, n_components); row 0 is the intercept
    batches: np.ndarray
    n_iter: int = 0
    diversity: list = field(default_factory=list)
    converged: bool = False


def pca(X, n_components: int) -> np.ndarray:
    """Principal-component scores with a deterministic sign convention."""
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    if not 1 <= n_components <= min(n, p):
        raise ConfigError(f"n_components must lie in [1, {min(n, p)}]")
    Xc = X - X.mean(axis=0)
    U, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    U, S, Vt = U[:, :n_components], S[:n_components], Vt[:n_components]
    signs = np.sign(Vt[np.arange(n_components), np.abs(Vt).argmax(axis=1)])
    signs[signs == 0] = 1.0
    return U * S * signs


def _normalize_rows(Z):
    return Z / np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), 1e-12)


def _batch_entropy(R, Phi) -> float:
    """Cluster-size-weighted entropy of batch composition per cluster."""
    O = R.T @ Phi
    Nk = O.sum(axis=1)
    P = O / np.maximum(Nk[:, None], 1e-12)
    H = -(np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0)).sum(axis=1)
    return float((Nk / Nk.sum()) @ H)


def _reseed_empty(Y, Zc, R):
    mass = R.sum(axis=0)
    for k in np.flatnonzero(mass < 1e-8):
        others = np.delete(np.arange(len(Y)), k)
        sim = Zc @ Y[others].T
        far = np.argmin(sim.max(axis=1))
        Y[k] = Zc[far]
    return Y


def harmony_transform(X, batch, n_components: int = 20, n_clusters: int | None = None, max_iters: int = 10,
                      theta: float = 2.0, sigma: float = 0.1, ridge: float = 1.0, kmeans_iters: int = 20,
                      tol: float = 1e-4, block_frac: float = 0.05, seed: int = 0, return_state: bool = False):
    """PCA followed by alternating diversity-penalized soft clustering and per-cluster batch correction.

    The correction for sample ``i`` in batch ``b`` is ``sum_k R_ik * beta_kb``, where
    ``beta_kb`` is the ridge-regressed offset of batch ``b`` inside cluster ``k``.
    """
    batches, Phi = _batch_design(batch)
    Z_pca = pca(X, n_components)
    n = Z_pca.shape[0]
    K = n_clusters or int(max(2, min(100, n // 30)))
    K = min(K, n)
    state = HarmonyState(Z_pca, Z_pca.copy(), np.full((n, K), 1.0 / K), np.zeros((K, n_components)),
                         np.zeros((K, 1 + batches.size, n_components)), batches)
    if max_iters == 0:
        return (state.Z_corr, state) if return_state else state.Z_corr

    rng = np.random.default_rng(seed)
    pr_b = Phi.mean(axis=0)
    Phi1 = np.hstack([np.ones((n, 1)), Phi])
    penalty = np.diag(np.r_[0.0, np.full(batches.size, ridge)])
    Zc = _normalize_rows(state.Z_corr)
    Y = Zc[rng.choice(n, K, replace=False)].copy()
    R = state.R

    n_blocks = max(1, int(round(1.0 / block_frac)))

    def assign(Zc, Y, R):
        """Block-wise update: each block sees the composition of all other cells."""
        dist = 2.0 * (1.0 - Zc @ Y.T)
        R = R.copy()
        E = np.outer(R.sum(axis=0), pr_b)
        O = R.T @ Phi
        for block in np.array_split(rng.permutation(n), n_blocks):
            E -= np.outer(R[block].sum(axis=0), pr_b)
            O -= R[block].T @ Phi[block]
            logits = -dist[block] / sigma + theta * (Phi[block] @ np.log((E + 1.0) / (O + 1.0)).T)
            logits -= logits.max(axis=1, keepdims=True)
            Rb = np.exp(logits)
            R[block] = Rb / Rb.sum(axis=1, keepdims=True)
            E += np.outer(R[block].sum(axis=0), pr_b)
            O += R[block].T @ Phi[block]
        return R

    # initial assignments from distances only
    dist0 = 2.0 * (1.0 - Zc @ Y.T) / sigma
    R = np.exp(-(dist0 - dist0.min(axis=1, keepdims=True)))
    R /= R.sum(axis=1, keepdims=True)
    state.diversity.append(_batch_entropy(R, Phi))
    for it in range(max_iters):
        R_prev = R.copy()
        for _ in range(kmeans_iters):
            Y = _normalize_rows(R.T @ Zc)
            Y = _reseed_empty(Y, Zc, R)
            R_new = assign(Zc, Y, R)
            done = np.abs(R_new - R).mean() < tol
            R = R_new
            if done:
                break
        W = np.empty((K, 1 + batches.size, n_components))
        correction = np.zeros_like(Z_pca)
        for k in range(K):
            w = R[:, k]
            A = Phi1.T @ (Phi1 * w[:, None]) + penalty
            W[k] = np.linalg.solve(A, Phi1.T @ (Z_pca * w[:, None]))
            correction += w[:, None] * (Phi @ W[k, 1:])
        state.Z_corr = Z_pca - correction
        state.W = W
        Zc = _normalize_rows(state.Z_corr)
        state.n_iter = it + 1
        state.diversity.append(_batch_entropy(R, Phi))
        if np.abs(R - R_prev).mean() < tol:
            state.converged = True
            break
    state.R, state.centroids = R, Y
    return (state.Z_corr, state) if return_state else state.Z_corr


# --------------------------------------------------------------------------- sphering


def sphering_transform(X, control_mask, lam: float = 1e-3) -> np.ndarray:
    """ZCA whitening fit on control rows: ``(X - mu) (C + lam I)^{-1/2}``."""
    X = np.asarray(X, dtype=np.float64)
    ctrl = X[np.asarray(control_mask, dtype=bool)]
    if ctrl.shape[0] < 2:
        raise ConfigError("sphering needs at least 2 control samples")
    mu = ctrl.mean(axis=0)
    C = np.cov(ctrl, rowvar=False).reshape(X.shape[1], X.shape[1]) + lam * np.eye(X.shape[1])
    evals, evecs = np.linalg.eigh(C)
    W = (evecs / np.sqrt(evals)) @ evecs.T
    return (X - mu) @ W
