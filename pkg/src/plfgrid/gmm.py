"""Gaussian mixture machinery: EM fitting, affine maps, sum-conditioning.

The propagation pipeline leans on two closure properties: a mixture pushed
through an affine map stays a mixture, and a mixture conditioned on the value
of a linear functional of its argument stays a mixture with reweighted
components.  Conditional covariances do not depend on the conditioning value,
so mixtures built from many conditionals share covariance blocks; ``Gmm``
stores covariances deduplicated through ``cov_index`` (identity by default).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, ndtr

WEIGHT_TOL = 1e-9
PSD_CLIP = 1e-10
# Marginal standard deviations at or below this count as point masses.
SIGMA_FLOOR = 1e-12


@dataclass
class Gmm:
    """A Gaussian mixture over R^d.

    ``covariances`` has shape (U, d, d) with U <= n_components;
    ``cov_index[j]`` names component j's covariance block.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    cov_index: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float)
        if self.covariances.ndim == 2:
            self.covariances = self.covariances[None, :, :]
        if self.cov_index is None:
            self.cov_index = np.arange(self.n_components)
        else:
            self.cov_index = np.asarray(self.cov_index, dtype=int)

        K, d = self.means.shape
        if self.weights.shape != (K,):
            raise ValueError(f"weights shape {self.weights.shape} vs {K} components")
        if self.covariances.shape[1:] != (d, d):
            raise ValueError(
                f"covariance blocks {self.covariances.shape[1:]} vs dim {d}")
        if self.cov_index.shape != (K,) or self.cov_index.min(initial=0) < 0 \
                or (K and self.cov_index.max() >= self.covariances.shape[0]):
            raise ValueError("cov_index does not address the covariance blocks")
        if np.any(self.weights < -WEIGHT_TOL):
            raise ValueError("negative component weight")
        total = self.weights.sum()
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {total}, not 1")
        self.weights = np.clip(self.weights, 0.0, None) / total
        self.covariances = 0.5 * (self.covariances
                                  + np.swapaxes(self.covariances, 1, 2))

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def cov_of(self, j: int) -> np.ndarray:
        return self.covariances[self.cov_index[j]]


def ensure_psd(mat: np.ndarray, clip: float = PSD_CLIP) -> np.ndarray:
    """Symmetrize and clip tiny negative eigenvalues; error on real ones."""
    sym = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(sym)
    if w.min(initial=0.0) >= 0.0:
        return sym
    if w.min() < -clip:
        raise ValueError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.clip(w, 0.0, None)) @ v.T


def _log_gauss(data: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log density of N(mean, cov) at each row of data."""
    d = mean.size
    chol = np.linalg.cholesky(cov)
    z = solve_triangular(chol, (data - mean).T, lower=True)
    maha = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (maha + logdet + d * np.log(2.0 * np.pi))


def _kmeanspp(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError("degenerate data: all samples identical")
        centers[j] = data[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((data - centers[j]) ** 2, axis=1))
    return centers


def em_fit(data: np.ndarray, n_components: int, seed: int, *,
           max_iter: int = 500, tol: float = 1e-6,
           with_trace: bool = False):
    """Fit a full-covariance mixture by expectation maximization.

    Initialization is k-means++ (seeded) with hard assignments; each M-step
    adds 1e-8 * trace(S)/d to the covariance diagonals.  Stops when the total
    log likelihood changes by less than ``tol`` in relative terms, or after
    ``max_iter`` iterations.  With ``with_trace`` returns ``(gmm, ll_curve)``.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = data.shape
    if n < n_components * (d + 1):
        raise ValueError(
            f"{n} samples cannot support {n_components} components in "
            f"dimension {d} (need at least {n_components * (d + 1)})")
    if np.ptp(data, axis=0).max(initial=0.0) == 0.0:
        raise ValueError("degenerate data: all samples identical")

    rng = np.random.default_rng(seed)
    centers = _kmeanspp(data, n_components, rng)
    d2 = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((n, n_components))
    resp[np.arange(n), np.argmin(d2, axis=1)] = 1.0

    ll_curve = []
    ll_prev = -np.inf
    log_w = None
    for _ in range(max_iter):
        # M step
        nk = resp.sum(axis=0)
        for j in np.flatnonzero(nk < 1e-10):
            # A collapsed component restarts on a random sample.
            resp[:, j] = 0.0
            resp[rng.integers(n), j] = 1.0
            nk = resp.sum(axis=0)
        w = nk / n
        mu = (resp.T @ data) / nk[:, None]
        covs = np.empty((n_components, d, d))
        for j in range(n_components):
            dev = data - mu[j]
            S = (resp[:, j][:, None] * dev).T @ dev / nk[j]
            reg = 1e-8 * np.trace(S) / d
            covs[j] = S + reg * np.eye(d)

        # E step
        log_w = np.log(w)
        log_p = np.empty((n, n_components))
        for j in range(n_components):
            try:
                log_p[:, j] = _log_gauss(data, mu[j], covs[j])
            except np.linalg.LinAlgError:
                raise ValueError(
                    "degenerate component covariance (identical samples "
                    "within a component)") from None
        joint = log_p + log_w
        norm = logsumexp(joint, axis=1)
        resp = np.exp(joint - norm[:, None])
        ll = float(norm.sum())
        ll_curve.append(ll)
        if abs(ll - ll_prev) <= tol * abs(ll):
            break
        ll_prev = ll

    out = Gmm(weights=w, means=mu, covariances=covs)
    if with_trace:
        return out, np.asarray(ll_curve)
    return out


def _factor_psd(cov: np.ndarray) -> np.ndarray:
    """A matrix L with L L' = cov, tolerant of singular PSD input."""
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.min(initial=0.0) < -PSD_CLIP:
        raise ValueError(f"covariance not PSD (min eigenvalue {w.min():.3e})")
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample(g: Gmm, n: int, seed: int) -> np.ndarray:
    """Draw n rows; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, g.weights)
    factors = [_factor_psd(c) for c in g.covariances]
    parts = []
    for j, c in enumerate(counts):
        if c == 0:
            continue
        z = rng.standard_normal((c, g.dim))
        parts.append(g.means[j] + z @ factors[g.cov_index[j]].T)
    out = np.vstack(parts) if parts else np.zeros((0, g.dim))
    return out[rng.permutation(n)]


def affine_map(g: Gmm, A: np.ndarray, b: np.ndarray | float = 0.0) -> Gmm:
    """The mixture of A x + b when x follows g."""
    A = np.asarray(A, dtype=float)
    means = g.means @ A.T + b
    covs = np.einsum("ij,ujk,lk->uil", A, g.covariances, A)
    return Gmm(weights=g.weights.copy(), means=means, covariances=covs,
               cov_index=g.cov_index.copy())


def augment(g: Gmm, eps: np.ndarray) -> Gmm:
    """Append the linear functional eps' x as an extra (d+1)-th coordinate."""
    eps = np.asarray(eps, dtype=float)
    A = np.vstack([np.eye(g.dim), eps])
    return affine_map(g, A, 0.0)


def condition_on_sum(g: Gmm, eps: np.ndarray, z: float) -> Gmm:
    """The mixture of x given eps' x = z.

    Components carrying no variance along eps are dropped with weight
    renormalization; dropping all of them is an error.  Conditional
    covariances do not depend on z and stay deduplicated.
    """
    eps = np.asarray(eps, dtype=float)
    v = g.covariances @ eps                # (U, d)
    q = v @ eps                            # (U,)
    q_comp = q[g.cov_index]
    keep = np.flatnonzero(q_comp > 0.0)
    if keep.size == 0:
        raise ValueError("no component has variance along the conditioning axis")

    s = g.means[keep] @ eps
    qk = q_comp[keep]
    log_lam = np.log(g.weights[keep]) - 0.5 * (
        np.log(2.0 * np.pi * qk) + (z - s) ** 2 / qk)
    lam = np.exp(log_lam - logsumexp(log_lam))

    vk = v[g.cov_index[keep]]
    eta = g.means[keep] + vk * ((z - s) / qk)[:, None]

    kept_blocks, new_index = np.unique(g.cov_index[keep], return_inverse=True)
    thetas = np.empty((kept_blocks.size, g.dim, g.dim))
    for u, blk in enumerate(kept_blocks):
        thetas[u] = ensure_psd(
            g.covariances[blk] - np.outer(v[blk], v[blk]) / q[blk])
    return Gmm(weights=lam, means=eta, covariances=thetas, cov_index=new_index)


def moments(g: Gmm) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and full covariance of the mixture."""
    m = g.weights @ g.means
    block_w = np.bincount(g.cov_index, weights=g.weights,
                          minlength=g.covariances.shape[0])
    cov = np.einsum("u,uij->ij", block_w, g.covariances)
    dev = g.means - m
    cov = cov + (g.weights[:, None] * dev).T @ dev
    return m, 0.5 * (cov + cov.T)


def marginal_cdf(g: Gmm, k: int, t) -> np.ndarray | float:
    """CDF of coordinate k evaluated at t (scalar or array).

    Zero-variance components contribute step functions.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    mu = g.means[:, k]
    sig = np.sqrt(np.clip(g.covariances[g.cov_index, k, k], 0.0, None))
    out = np.zeros(t_arr.shape, dtype=float)
    chunk = 1024
    for j0 in range(0, g.n_components, chunk):
        j1 = min(j0 + chunk, g.n_components)
        m = mu[j0:j1][:, None]
        s = sig[j0:j1][:, None]
        w = g.weights[j0:j1][:, None]
        point = s[:, 0] <= SIGMA_FLOOR
        vals = np.empty((j1 - j0, t_arr.size))
        if np.any(~point):
            vals[~point] = ndtr((t_arr[None, :] - m[~point]) / s[~point])
        if np.any(point):
            vals[point] = (t_arr[None, :] >= m[point]).astype(float)
        out += (w * vals).sum(axis=0)
    if np.ndim(t) == 0:
        return float(out[0])
    return out


def merge(parts: list[tuple[Gmm, float]]) -> Gmm:
    """Combine sub-mixtures with outer weights (must sum to 1)."""
    outer = np.array([w for _, w in parts], dtype=float)
    if abs(outer.sum() - 1.0) > WEIGHT_TOL:
        raise ValueError(f"outer weights sum to {outer.sum()}, not 1")
    weights, means, covs, index = [], [], [], []
    offset = 0
    for g, w in parts:
        weights.append(w * g.weights)
        means.append(g.means)
        covs.append(g.covariances)
        index.append(g.cov_index + offset)
        offset += g.covariances.shape[0]
    return Gmm(weights=np.concatenate(weights), means=np.vstack(means),
               covariances=np.concatenate(covs, axis=0),
               cov_index=np.concatenate(index))


def to_dict(g: Gmm) -> dict:
    """JSON-ready form: {weights, means, covariances[, cov_index]}."""
    out = {
        "weights": g.weights.tolist(),
        "means": g.means.tolist(),
        "covariances": g.covariances.tolist(),
    }
    if not (g.covariances.shape[0] == g.n_components
            and np.array_equal(g.cov_index, np.arange(g.n_components))):
        out["cov_index"] = g.cov_index.tolist()
    return out


def from_dict(d: dict) -> Gmm:
    return Gmm(weights=np.asarray(d["weights"], dtype=float),
               means=np.asarray(d["means"], dtype=float),
               covariances=np.asarray(d["covariances"], dtype=float),
               cov_index=(np.asarray(d["cov_index"], dtype=int)
                          if "cov_index" in d else None))
