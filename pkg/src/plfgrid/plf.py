"""Propagation pipeline: model correction, the two mapping methods, the
Monte Carlo benchmark, and distribution metrics.

The random input lives in farm space: a mixture over the active outputs of
the wind farms.  ``embedding_matrix`` lifts farm outputs into the injection
vector X = [P_S; Q_L] (reactive power follows the power factor at PQ farm
buses), so every per-segment affine map composes with the embedding and the
whole propagation happens on farm-dimensional mixtures.
"""
from __future__ import annotations

import time
import warnings as _warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import control, gmm
from .acpf import AcPowerFlowError, branch_flows_ac, solve_ac
from .control import EXCEEDED, ControlParams, PiecewiseLinearModel
from .dlpf import branch_flow_matrix, build_dlpf
from .netcase import Admittance, NetworkCase, build_admittance

EMPTY_SEGMENT_MASS_WARN = 1e-3
EXCEEDED_MASS_LIMIT = 1e-4
VAR_FLOOR = 1e-8
CDF_LEVELS = 1000
MAX_RESAMPLE_FRACTION = 1e-3


def embedding_matrix(case: NetworkCase) -> np.ndarray:
    """T with X = T p: farm active power into its P row, reactive power by
    power factor into the bus's Q row when the bus is PQ.  Columns follow
    ``case.wind_col`` order; the all-ones functional on farm space equals
    epsilon' X by construction.
    """
    if case.wind_bus.size == 0:
        raise ValueError(f"case '{case.name}' has no wind farms configured")
    ny = case.n_s + case.n_l
    n_farms = int(case.wind_col.max()) + 1
    s_pos = {b: k for k, b in enumerate(case.s_buses)}
    l_pos = {b: k for k, b in enumerate(case.l_buses)}
    tan_phi = np.tan(np.arccos(case.wind_power_factor))
    T = np.zeros((ny, n_farms))
    for bus, col in zip(case.wind_bus, case.wind_col):
        T[s_pos[bus], col] += 1.0
        if bus in l_pos:
            T[case.n_s + l_pos[bus], col] += tan_phi
    return T


def wind_bus_injections(case: NetworkCase, p_farms: np.ndarray):
    """Full-bus (P, Q) wind injections for one farm-output row."""
    p_bus = np.zeros(case.n_bus)
    q_bus = np.zeros(case.n_bus)
    tan_phi = np.tan(np.arccos(case.wind_power_factor))
    is_pq = case.bus_type == 1
    for bus, col in zip(case.wind_bus, case.wind_col):
        p_bus[bus] += p_farms[col]
        if is_pq[bus]:
            q_bus[bus] += p_farms[col] * tan_phi
    return p_bus, q_bus


# ---------------------------------------------------------------------------
# segment statistics

@dataclass
class SegmentStats:
    """Sampled description of where the aggregate wind output lands."""

    samples: np.ndarray          # (L, farms)
    z: np.ndarray                # (L,) aggregate output
    labels: np.ndarray           # (L,) segment 1..3 after policy handling
    counts: np.ndarray           # (3,)
    probs: np.ndarray            # (3,) = counts / L
    analytic_mass: np.ndarray    # (3,) mixture mass of each z-slab
    exceeded_count: int
    exceeded_mass: float
    notes: list = field(default_factory=list)

    @property
    def L(self) -> int:
        return self.z.size


def _sum_cdf(x_gmm: gmm.Gmm, t: np.ndarray) -> np.ndarray:
    ones = np.ones(x_gmm.dim)
    sum_gmm = gmm.affine_map(x_gmm, ones[None, :], 0.0)
    return np.atleast_1d(gmm.marginal_cdf(sum_gmm, 0, t))


def segment_mass(x_gmm: gmm.Gmm, model: PiecewiseLinearModel):
    """Analytic mixture mass per z-slab, plus the out-of-range mass."""
    mass = np.zeros(3)
    for i in range(3):
        for lo, hi in model.omega[i]:
            c = _sum_cdf(x_gmm, np.array([lo, hi]))
            mass[i] += float(c[1] - c[0])
    d4 = model.thresholds[3]
    c = _sum_cdf(x_gmm, np.array([-d4 - model.c_offset, d4 - model.c_offset]))
    exceeded = float(1.0 - c[1] + c[0])
    return mass, exceeded


def segment_stats(x_gmm: gmm.Gmm, model: PiecewiseLinearModel, L: int,
                  seed: int) -> SegmentStats:
    """Draw L farm-output samples and classify their aggregate."""
    if L < 1:
        raise ValueError("L must be positive")
    samples = gmm.sample(x_gmm, L, seed)
    z = samples.sum(axis=1)
    labels = np.asarray(model.segment_of_z(z))

    mass, exceeded_mass = segment_mass(x_gmm, model)
    notes = []
    n_exc = int(np.sum(labels == EXCEEDED))
    if exceeded_mass > EXCEEDED_MASS_LIMIT and model.exceeded_policy == "error":
        raise ValueError(
            f"imbalance beyond the modeled range has probability "
            f"{exceeded_mass:.3e} (> {EXCEEDED_MASS_LIMIT:.0e}); raise "
            f"p_delta_max or switch the policy to 'clamp'")
    if n_exc:
        labels = np.where(labels == EXCEEDED, 3, labels)
        notes.append(f"{n_exc} samples beyond the modeled imbalance range "
                     f"were folded into segment 3")

    counts = np.bincount(labels, minlength=4)[1:4]
    probs = counts / L
    for i in range(3):
        if counts[i] == 0 and mass[i] > EMPTY_SEGMENT_MASS_WARN:
            msg = (f"segment {i + 1} received no samples although its "
                   f"analytic mass is {mass[i]:.3e}")
            notes.append(msg)
            _warnings.warn(msg, stacklevel=2)
    return SegmentStats(samples=samples, z=z, labels=labels, counts=counts,
                        probs=probs, analytic_mass=mass,
                        exceeded_count=n_exc, exceeded_mass=exceeded_mass,
                        notes=notes)


# ---------------------------------------------------------------------------
# correction

@dataclass
class CorrectionCoeffs:
    """Per-segment first-order output correction, states and flows."""

    mode: str                    # polynomial | constant | none
    rho: np.ndarray              # (3, ny)
    varsigma: np.ndarray         # (3, ny)
    flow_rho: np.ndarray         # (3, n_branch)
    flow_varsigma: np.ndarray    # (3, n_branch)
    h: int
    fitted: np.ndarray = None    # (3,) pairs actually used per segment

    def __post_init__(self):
        if self.mode not in ("polynomial", "constant", "none"):
            raise ValueError(f"unknown correction mode '{self.mode}'")
        if self.fitted is None:
            self.fitted = np.zeros(3, dtype=int)
        for name in ("rho", "varsigma", "flow_rho", "flow_varsigma"):
            arr = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, arr)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite correction coefficients ({name})")
        if self.mode in ("constant", "none"):
            if not (np.all(self.rho == 1.0) and np.all(self.flow_rho == 1.0)):
                raise ValueError(f"mode '{self.mode}' requires unit slopes")


def identity_correction(ny: int, n_branch: int, mode: str = "none",
                        h: int = 0) -> CorrectionCoeffs:
    return CorrectionCoeffs(mode=mode,
                            rho=np.ones((3, ny)),
                            varsigma=np.zeros((3, ny)),
                            flow_rho=np.ones((3, n_branch)),
                            flow_varsigma=np.zeros((3, n_branch)),
                            h=h)


def _segment_pool(x_gmm: gmm.Gmm, model: PiecewiseLinearModel, segment: int,
                  count: int, rng: np.random.Generator) -> np.ndarray:
    """Farm samples whose aggregate lands in one segment.

    Rejection from the mixture first; if the segment is too rare, fall back
    to conditioning the mixture on aggregate values spread across the
    segment's z-slabs.
    """
    got = []
    n_got = 0
    for _ in range(60):
        batch = gmm.sample(x_gmm, max(64, 4 * count),
                           int(rng.integers(2**63)))
        lab = np.asarray(model.segment_of_z(batch.sum(axis=1)))
        hit = batch[lab == segment]
        if hit.size:
            got.append(hit)
            n_got += hit.shape[0]
        if n_got >= count:
            return np.vstack(got)[:count]

    # Conditional fallback: pick aggregate values inside the slabs.
    ones = np.ones(x_gmm.dim)
    m, c = gmm.moments(gmm.affine_map(x_gmm, ones[None, :], 0.0))
    lo_cap, hi_cap = float(m[0] - 8 * np.sqrt(c[0, 0])), \
        float(m[0] + 8 * np.sqrt(c[0, 0]))
    zs = []
    for lo, hi in model.omega[segment - 1]:
        lo, hi = max(lo, lo_cap), min(hi, hi_cap)
        if hi > lo:
            pad = 1e-9 * (1.0 + abs(hi))
            zs.append(np.linspace(lo + pad, hi - pad, count))
    if not zs:
        raise ValueError(
            f"segment {segment} is unreachable for this wind distribution")
    zs = np.concatenate(zs)[:count]
    draws = []
    for z in zs:
        cond = gmm.condition_on_sum(x_gmm, ones, float(z))
        draws.append(gmm.sample(cond, 1, int(rng.integers(2**63)))[0])
    out = np.vstack([*got, np.vstack(draws)]) if got else np.vstack(draws)
    return out[:count]


def _ac_pair(case: NetworkCase, adm: Admittance, params: ControlParams,
             p_farms: np.ndarray, c_offset: float, warm):
    """AC state and from-end flows under regulated wind injections."""
    wind_p, wind_q = wind_bus_injections(case, p_farms)
    p_delta = float(wind_p.sum() + c_offset)
    seg = control.classify_segment(params, p_delta)
    if seg == EXCEEDED:
        seg = 3
    reg = params.alpha_column(seg) * p_delta
    p_inj = case.gen_p_bus() - case.Pd + wind_p
    p_inj[case.s_buses] += reg
    q_inj = case.gen_q_bus() - case.Qd + wind_q
    sol = solve_ac(case, adm, p_inj=p_inj, q_inj=q_inj, v0=warm)
    flows = branch_flows_ac(case, adm, sol.Vm, sol.Va)[0]
    return sol, flows


def _fit_line(x: np.ndarray, y: np.ndarray):
    """Per-column least squares y ~ rho x + varsigma with flat-x fallback."""
    n, m = x.shape
    xm = x.mean(axis=0)
    ym = y.mean(axis=0)
    xc = x - xm
    yc = y - ym
    sxx = np.sum(xc * xc, axis=0)
    flat = sxx <= 1e-18 * n
    rho = np.ones(m)
    np.divide(np.sum(xc * yc, axis=0), sxx, out=rho, where=~flat)
    rho[flat] = 1.0
    varsigma = ym - rho * xm
    return rho, varsigma


def fit_correction(case: NetworkCase, adm: Admittance,
                   model: PiecewiseLinearModel, x_gmm: gmm.Gmm,
                   T: np.ndarray, flow_map, H: int, mode: str,
                   seed: int) -> CorrectionCoeffs:
    """First-order fit of AC results against the piecewise-linear ones.

    Per segment, H wind draws landing in that segment give (linear, AC)
    pairs; states are fitted first, then flows against the flow map applied
    to the corrected states.  Segments the wind distribution cannot reach
    keep identity coefficients.
    """
    F, f0 = flow_map
    ny = model.n_y
    nbr = F.shape[0]
    if mode == "none":
        return identity_correction(ny, nbr, "none", 0)
    if mode == "polynomial" and H < 2:
        raise ValueError("polynomial correction needs H >= 2 per segment")
    if mode == "constant" and H < 1:
        raise ValueError("constant correction needs H >= 1 per segment")

    mass, _ = segment_mass(x_gmm, model)
    rng = np.random.default_rng(seed)
    coeffs = identity_correction(ny, nbr, mode, H)
    fitted = np.zeros(3, dtype=int)

    for i in range(3):
        if mass[i] <= 1e-12:
            continue
        pool = _segment_pool(x_gmm, model, i + 1, H + 3, rng)
        y_lin = pool @ (model.A[i] @ T).T + model.b[i]
        y_ac = np.empty((H, ny))
        fl_ac = np.empty((H, nbr))
        y_lin_used = np.empty((H, ny))
        warm = None
        k = 0
        used = 0
        for h in range(H):
            attempts = 0
            while True:
                if k >= pool.shape[0]:
                    pool = np.vstack(
                        [pool, _segment_pool(x_gmm, model, i + 1, H, rng)])
                    y_lin = np.vstack(
                        [y_lin,
                         pool[y_lin.shape[0]:] @ (model.A[i] @ T).T + model.b[i]])
                try:
                    sol, flows = _ac_pair(case, adm, model.params, pool[k],
                                          model.c_offset, warm)
                except AcPowerFlowError:
                    attempts += 1
                    k += 1
                    if attempts > 3:
                        raise
                    continue
                break
            warm = (sol.Vm, sol.Va)
            y_ac[used] = sol.state_vector(case)
            fl_ac[used] = flows
            y_lin_used[used] = y_lin[k]
            k += 1
            used += 1
        fitted[i] = used

        if mode == "polynomial":
            rho, varsigma = _fit_line(y_lin_used, y_ac)
        else:
            rho = np.ones(ny)
            varsigma = (y_ac - y_lin_used).mean(axis=0)
        coeffs.rho[i] = rho
        coeffs.varsigma[i] = varsigma

        y_corr = y_lin_used * rho + varsigma
        fl_lin = y_corr @ F.T + f0
        if mode == "polynomial":
            frho, fvar = _fit_line(fl_lin, fl_ac)
        else:
            frho = np.ones(nbr)
            fvar = (fl_ac - fl_lin).mean(axis=0)
        coeffs.flow_rho[i] = frho
        coeffs.flow_varsigma[i] = fvar

    coeffs.fitted = fitted
    return coeffs


def apply_correction(model: PiecewiseLinearModel,
                     coeffs: CorrectionCoeffs) -> PiecewiseLinearModel:
    """Fold per-state slopes and intercepts into the segment maps."""
    A = coeffs.rho[:, :, None] * model.A
    b = coeffs.rho * model.b + coeffs.varsigma
    return replace(model, A=A, b=b)


def flow_affine(coeffs: CorrectionCoeffs, F: np.ndarray, f0: np.ndarray):
    """Per-segment corrected flow maps (G_i, g_i) on top of corrected states."""
    G = coeffs.flow_rho[:, :, None] * F[None, :, :]
    g = coeffs.flow_rho * f0 + coeffs.flow_varsigma
    return G, g


# ---------------------------------------------------------------------------
# mapping methods

@dataclass
class PlfResult:
    """Analytical joint distribution of states and flows."""

    y_gmm: gmm.Gmm
    flow_gmm: gmm.Gmm
    segment_probs: np.ndarray
    method: str
    L: int
    J: int
    correction: CorrectionCoeffs
    state_mean: np.ndarray
    state_var: np.ndarray
    flow_mean: np.ndarray
    flow_var: np.ndarray
    provenance: dict = field(default_factory=dict)


def _result_moments(y_gmm, flow_gmm):
    sm, sc = gmm.moments(y_gmm)
    fm, fc = gmm.moments(flow_gmm)
    return sm, np.diag(sc).copy(), fm, np.diag(fc).copy()


def _conditional_pieces(x_gmm: gmm.Gmm):
    """Per-block and per-component quantities for conditioning on the sum."""
    ones = np.ones(x_gmm.dim)
    v = x_gmm.covariances @ ones            # (U, d)
    q = v @ ones                            # (U,)
    theta = np.empty_like(x_gmm.covariances)
    for u in range(q.size):
        if q[u] > 0:
            theta[u] = gmm.ensure_psd(
                x_gmm.covariances[u] - np.outer(v[u], v[u]) / q[u])
        else:
            theta[u] = x_gmm.covariances[u]
    s = x_gmm.means @ ones                  # (K,)
    return v, q, theta, s


def direct_method(x_gmm: gmm.Gmm, model: PiecewiseLinearModel, T: np.ndarray,
                  stats: SegmentStats, flow_maps) -> tuple[gmm.Gmm, gmm.Gmm]:
    """Condition the input mixture on each sampled aggregate value and push
    every conditional through its segment's affine map.

    The conditional covariances do not depend on the conditioning value, so
    the result has L*K components but only (segments x blocks) distinct
    covariance blocks.
    """
    G, g = flow_maps
    d = x_gmm.dim
    K = x_gmm.n_components
    U = x_gmm.covariances.shape[0]
    ny = model.n_y
    nbr = G.shape[1]
    v, q, theta, s = _conditional_pieces(x_gmm)
    q_comp = q[x_gmm.cov_index]
    v_comp = v[x_gmm.cov_index]
    ok = q_comp > 0
    if not np.any(ok):
        raise ValueError("input mixture has no variance along the aggregate")

    M = np.stack([model.A[i] @ T for i in range(3)])
    GM = np.stack([G[i] @ M[i] for i in range(3)])
    gb = np.stack([G[i] @ model.b[i] + g[i] for i in range(3)])

    cov_y = np.empty((3 * U, ny, ny))
    cov_f = np.empty((3 * U, nbr, nbr))
    for i in range(3):
        for u in range(U):
            cov_y[i * U + u] = M[i] @ theta[u] @ M[i].T
            cov_f[i * U + u] = GM[i] @ theta[u] @ GM[i].T

    L = stats.L
    w_parts, my_parts, mf_parts, idx_parts = [], [], [], []
    log_w = np.where(ok, np.log(np.where(ok, x_gmm.weights, 1.0)), -np.inf)
    for i in range(3):
        sel = stats.labels == i + 1
        n_i = int(np.sum(sel))
        if n_i == 0:
            continue
        zeta = stats.z[sel]                           # (n_i,)
        dz = zeta[:, None] - s[None, :]               # (n_i, K)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_lam = log_w[None, :] - 0.5 * (
                np.log(2.0 * np.pi * np.where(ok, q_comp, 1.0))[None, :]
                + dz**2 / np.where(ok, q_comp, 1.0)[None, :])
        log_lam[:, ~ok] = -np.inf
        log_norm = np.logaddexp.reduce(log_lam, axis=1)
        lam = np.exp(log_lam - log_norm[:, None])     # rows sum to 1

        ratio = np.where(ok, 1.0 / np.where(ok, q_comp, 1.0), 0.0)
        eta = (x_gmm.means[None, :, :]
               + (dz * ratio)[:, :, None] * v_comp[None, :, :])
        my = eta @ M[i].T + model.b[i]                # (n_i, K, ny)
        mf = eta @ GM[i].T + gb[i]                    # (n_i, K, nbr)

        w_parts.append((lam / L).reshape(-1))
        my_parts.append(my.reshape(-1, ny))
        mf_parts.append(mf.reshape(-1, nbr))
        idx_parts.append(np.tile(i * U + x_gmm.cov_index, n_i))

    weights = np.concatenate(w_parts)
    index = np.concatenate(idx_parts)
    y_gmm = gmm.Gmm(weights=weights, means=np.vstack(my_parts),
                    covariances=cov_y, cov_index=index)
    flow_gmm = gmm.Gmm(weights=weights.copy(), means=np.vstack(mf_parts),
                       covariances=cov_f, cov_index=index.copy())
    return y_gmm, flow_gmm


def indirect_method(model: PiecewiseLinearModel, T: np.ndarray,
                    stats: SegmentStats, J: int, seed: int,
                    flow_maps) -> tuple[gmm.Gmm, gmm.Gmm, list]:
    """Refit a mixture to each segment's samples, then map affinely.

    Segments with too few samples to support even one component are dropped
    with weight renormalization; reduced component counts are reported.
    """
    G, g = flow_maps
    d = stats.samples.shape[1]
    logs = []
    parts_y, parts_f, wts = [], [], []
    for i in range(3):
        sel = stats.labels == i + 1
        n_i = int(np.sum(sel))
        if n_i == 0:
            continue
        J_i = min(J, n_i // (d + 1))
        if J_i < 1:
            logs.append(f"segment {i + 1}: {n_i} samples cannot support a "
                        f"mixture fit; segment dropped")
            continue
        if J_i < J:
            logs.append(f"segment {i + 1}: component count reduced "
                        f"{J} -> {J_i} ({n_i} samples)")
        fit = gmm.em_fit(stats.samples[sel], J_i, seed + 7 * i)
        M_i = model.A[i] @ T
        parts_y.append(gmm.affine_map(fit, M_i, model.b[i]))
        parts_f.append(gmm.affine_map(fit, G[i] @ M_i,
                                      G[i] @ model.b[i] + g[i]))
        wts.append(n_i)
    if not parts_y:
        raise ValueError("no segment had enough samples for a mixture fit")
    wts = np.asarray(wts, dtype=float)
    wts = wts / wts.sum()
    y_gmm = gmm.merge(list(zip(parts_y, wts)))
    flow_gmm = gmm.merge(list(zip(parts_f, wts)))
    return y_gmm, flow_gmm, logs


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class BenchmarkResult:
    """Empirical reference distribution from repeated AC solves."""

    states: np.ndarray           # (n, ny)
    flows: np.ndarray            # (n, n_branch)
    n: int
    seed: int
    state_mean: np.ndarray
    state_var: np.ndarray
    flow_mean: np.ndarray
    flow_var: np.ndarray
    segment_counts: np.ndarray
    exceeded_count: int
    resampled: int
    wall_time: float


def acmc_benchmark(case: NetworkCase, params: ControlParams,
                   x_gmm: gmm.Gmm, n: int, seed: int,
                   adm: Admittance | None = None) -> BenchmarkResult:
    """Monte Carlo through the full AC model with regulation applied.

    Consecutive solves warm-start from the previous solution; the draw order
    is fixed by the seed, so results are reproducible.  Samples whose AC
    solve fails are replaced by fresh draws (counted; more than 0.1% aborts).
    """
    if n < 1000:
        raise ValueError("benchmark needs n >= 1000 for stable metrics")
    t0 = time.perf_counter()
    if adm is None:
        adm = build_admittance(case)
    c_offset = float((case.gen_p_bus() - case.Pd)[case.s_buses].sum())
    draws = gmm.sample(x_gmm, n, seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xACDC)))

    ny = case.n_s + case.n_l
    states = np.empty((n, ny))
    flows = np.empty((n, case.n_branch))
    seg_counts = np.zeros(3, dtype=int)
    exceeded = 0
    resampled = 0
    warm = None
    for k in range(n):
        row = draws[k]
        for attempt in range(4):
            wind_p, wind_q = wind_bus_injections(case, row)
            p_delta = float(wind_p.sum() + c_offset)
            seg = control.classify_segment(params, p_delta)
            if seg == EXCEEDED:
                if params.exceeded_policy == "error":
                    raise ValueError(
                        f"sample {k}: |P_delta| = {abs(p_delta):.4g} beyond "
                        f"the modeled range under policy 'error'")
                exceeded += 1
                seg = 3
            reg = params.alpha_column(seg) * p_delta
            p_inj = case.gen_p_bus() - case.Pd + wind_p
            p_inj[case.s_buses] += reg
            q_inj = case.gen_q_bus() - case.Qd + wind_q
            try:
                sol = solve_ac(case, adm, p_inj=p_inj, q_inj=q_inj, v0=warm)
            except AcPowerFlowError:
                if warm is not None:
                    try:
                        sol = solve_ac(case, adm, p_inj=p_inj, q_inj=q_inj)
                    except AcPowerFlowError:
                        sol = None
                else:
                    sol = None
            if sol is not None:
                break
            resampled += 1
            if resampled > MAX_RESAMPLE_FRACTION * n + 1:
                raise AcPowerFlowError(
                    f"AC benchmark: more than {resampled} non-converged "
                    f"samples at n={n}")
            row = gmm.sample(x_gmm, 1, int(rng.integers(2**63)))[0]
        else:
            raise AcPowerFlowError("AC benchmark: persistent non-convergence")
        warm = (sol.Vm, sol.Va)
        states[k] = sol.state_vector(case)
        flows[k] = branch_flows_ac(case, adm, sol.Vm, sol.Va)[0]
        seg_counts[seg - 1] += 1

    return BenchmarkResult(
        states=states, flows=flows, n=n, seed=seed,
        state_mean=states.mean(axis=0), state_var=states.var(axis=0),
        flow_mean=flows.mean(axis=0), flow_var=flows.var(axis=0),
        segment_counts=seg_counts, exceeded_count=exceeded,
        resampled=resampled, wall_time=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# metrics

def cdf_rmse(g: gmm.Gmm, samples: np.ndarray, levels: int = CDF_LEVELS,
             var_floor: float = VAR_FLOOR):
    """Per-column RMSE between the analytic CDF and the empirical one,
    evaluated on evenly spaced probability levels of the sample quantiles.
    Near-constant columns are excluded (NaN, mask False).
    """
    p = (np.arange(levels) + 0.5) / levels
    variance = samples.var(axis=0)
    included = variance >= var_floor
    out = np.full(samples.shape[1], np.nan)
    if np.any(included):
        quant = np.quantile(samples[:, included], p, axis=0)
        cols = np.flatnonzero(included)
        for j, k in enumerate(cols):
            cdf_vals = gmm.marginal_cdf(g, k, quant[:, j])
            out[k] = float(np.sqrt(np.mean((cdf_vals - p) ** 2)))
    return out, included


def metrics_cdf_rmse(result: PlfResult, bench: BenchmarkResult,
                     n_s: int) -> dict:
    """CDF agreement per state group: angles, voltages, flows."""
    state_rmse, state_inc = cdf_rmse(result.y_gmm, bench.states)
    flow_rmse, flow_inc = cdf_rmse(result.flow_gmm, bench.flows)

    def avg(vals, mask):
        return float(np.mean(vals[mask])) if np.any(mask) else float("nan")

    ang = np.zeros_like(state_inc)
    ang[:n_s] = True
    return {
        "angle_rmse_avg": avg(state_rmse, state_inc & ang),
        "voltage_rmse_avg": avg(state_rmse, state_inc & ~ang),
        "state_rmse_avg": avg(state_rmse, state_inc),
        "flow_rmse_avg": avg(flow_rmse, flow_inc),
        "state_rmse": state_rmse,
        "flow_rmse": flow_rmse,
        "state_included": state_inc,
        "flow_included": flow_inc,
    }


def _rel_err(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    if not np.any(mask):
        return float("nan")
    denom = np.maximum(np.abs(b[mask]), 1e-12)
    return float(np.mean(np.abs(a[mask] - b[mask]) / denom))


def metrics_moments(result: PlfResult, bench: BenchmarkResult,
                    n_s: int) -> dict:
    """Average relative errors of means and variances per state group."""
    inc_s = bench.state_var >= VAR_FLOOR
    inc_f = bench.flow_var >= VAR_FLOOR
    ang = np.zeros_like(inc_s)
    ang[:n_s] = True
    return {
        "angle_mean_rel": _rel_err(result.state_mean, bench.state_mean,
                                   inc_s & ang),
        "angle_var_rel": _rel_err(result.state_var, bench.state_var,
                                  inc_s & ang),
        "voltage_mean_rel": _rel_err(result.state_mean, bench.state_mean,
                                     inc_s & ~ang),
        "voltage_var_rel": _rel_err(result.state_var, bench.state_var,
                                    inc_s & ~ang),
        "flow_mean_rel": _rel_err(result.flow_mean, bench.flow_mean, inc_f),
        "flow_var_rel": _rel_err(result.flow_var, bench.flow_var, inc_f),
    }


# ---------------------------------------------------------------------------
# orchestration

@dataclass
class PipelineConfig:
    method: str = "indirect"
    L: int | None = None
    J: int = 5
    H: int = 12
    correction: str = "polynomial"
    seed_gmm: int = 1
    seed_sampling: int = 2
    seed_correction: int = 3

    def __post_init__(self):
        if self.method not in ("direct", "indirect"):
            raise ValueError(f"method must be direct or indirect, "
                             f"got '{self.method}'")
        if self.L is None:
            self.L = 2000 if self.method == "direct" else 10000
        if self.L < 1 or self.J < 1 or self.H < 0:
            raise ValueError("L and J must be positive, H nonnegative")
        if self.correction not in ("polynomial", "constant", "none"):
            raise ValueError(f"unknown correction '{self.correction}'")


def run_algorithm1(case: NetworkCase, params: ControlParams,
                   wind_history: np.ndarray,
                   config: PipelineConfig) -> PlfResult:
    """Full analytical pipeline from wind history to the joint distribution.

    Stages: linear model, piecewise assembly, input mixture fit, correction,
    aggregate sampling, then the configured mapping method.
    """
    timings = {}
    notes = []

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:
            raise type(exc)(f"[{name}] {exc}") from exc
        timings[name] = time.perf_counter() - t0
        return out

    t0 = time.perf_counter()
    adm = build_admittance(case)
    lin = build_dlpf(case, adm)
    F, f0 = branch_flow_matrix(case, adm, lin)
    timings["linear-model"] = time.perf_counter() - t0

    model0 = stage("piecewise-assembly",
                   lambda: control.assemble_piecewise(case, lin, params))
    hist = np.asarray(wind_history, dtype=float)
    point_mass = hist.size > 0 and bool(np.all(hist == hist[0]))
    if point_mass:
        # A constant history carries no uncertainty: EM has nothing to fit
        # and the whole result collapses to the corrected map of that point.
        x_gmm = gmm.Gmm(weights=np.ones(1), means=hist[:1].copy(),
                        covariances=np.zeros(
                            (1, hist.shape[1], hist.shape[1])))
        timings["input-fit"] = 0.0
    else:
        x_gmm = stage("input-fit",
                      lambda: gmm.em_fit(hist, config.J, config.seed_gmm))
    T = embedding_matrix(case)
    if wind_history.shape[1] != T.shape[1]:
        raise ValueError(
            f"wind history has {wind_history.shape[1]} columns but the case "
            f"references farm columns up to {T.shape[1] - 1}")

    coeffs = stage("correction-fit", lambda: fit_correction(
        case, adm, model0, x_gmm, T, (F, f0), config.H, config.correction,
        config.seed_correction))
    model = apply_correction(model0, coeffs)
    G, g = flow_affine(coeffs, F, f0)

    stats = stage("segment-sampling", lambda: segment_stats(
        x_gmm, model, config.L, config.seed_sampling))
    notes.extend(stats.notes)

    if point_mass:
        i = int(stats.labels[0]) - 1
        my = (model.A[i] @ T) @ x_gmm.means[0] + model.b[i]
        mf = G[i] @ my + g[i]
        y_gmm = gmm.Gmm(weights=np.ones(1), means=my[None, :],
                        covariances=np.zeros((1, my.size, my.size)))
        flow_gmm = gmm.Gmm(weights=np.ones(1), means=mf[None, :],
                           covariances=np.zeros((1, mf.size, mf.size)))
        timings["mapping"] = 0.0
        notes.append("constant wind history: result is a point mass")
    elif config.method == "direct":
        y_gmm, flow_gmm = stage("mapping", lambda: direct_method(
            x_gmm, model, T, stats, (G, g)))
    else:
        y_gmm, flow_gmm, logs = stage("mapping", lambda: indirect_method(
            model, T, stats, config.J, config.seed_gmm + 101, (G, g)))
        notes.extend(logs)

    sm, sv, fm, fv = stage("moments", lambda: _result_moments(y_gmm, flow_gmm))

    provenance = {
        "case": case.name,
        "n_bus": case.n_bus,
        "method": config.method,
        "L": config.L,
        "J": config.J,
        "H": config.H,
        "correction": config.correction,
        "seeds": {"gmm": config.seed_gmm, "sampling": config.seed_sampling,
                  "correction": config.seed_correction},
        "segment_probs": stats.probs.tolist(),
        "segment_analytic_mass": stats.analytic_mass.tolist(),
        "exceeded_count": stats.exceeded_count,
        "correction_fitted": coeffs.fitted.tolist(),
        "notes": list(notes),
        "timings": timings,
    }
    return PlfResult(
        y_gmm=y_gmm, flow_gmm=flow_gmm, segment_probs=stats.probs,
        method=config.method, L=config.L, J=config.J, correction=coeffs,
        state_mean=sm, state_var=sv, flow_mean=fm, flow_var=fv,
        provenance=provenance)


def result_to_dict(result: PlfResult) -> dict:
    """Deterministic JSON form; timing data stays in provenance reports."""
    return {
        "format": "plfgrid-result-1",
        "case": result.provenance.get("case", ""),
        "method": result.method,
        "L": int(result.L),
        "J": int(result.J),
        "segment_probs": result.segment_probs.tolist(),
        "y_gmm": gmm.to_dict(result.y_gmm),
        "flow_gmm": gmm.to_dict(result.flow_gmm),
        "correction": {
            "mode": result.correction.mode,
            "h": int(result.correction.h),
            "fitted": result.correction.fitted.tolist(),
            "rho": result.correction.rho.tolist(),
            "varsigma": result.correction.varsigma.tolist(),
            "flow_rho": result.correction.flow_rho.tolist(),
            "flow_varsigma": result.correction.flow_varsigma.tolist(),
        },
        "moments": {
            "state_mean": result.state_mean.tolist(),
            "state_var": result.state_var.tolist(),
            "flow_mean": result.flow_mean.tolist(),
            "flow_var": result.flow_var.tolist(),
        },
    }
