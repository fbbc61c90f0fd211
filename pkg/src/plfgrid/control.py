"""Frequency regulation and the piecewise-linear network response.

A system-wide active power imbalance P_delta moves through three regimes,
split by thresholds on |P_delta|:

1. dead band: only frequency-sensitive load responds (coefficients Kd),
2. primary control: governors join the load response (Kg + Kd),
3. secondary control: AGC units take over in ramp-rate shares (Hg).

Within regime i every non-slack bus n picks up alpha_{n,i} * P_delta, with
alpha columns summing to -1, so the imbalance is fully absorbed and the bus
injection vector becomes an affine function of the random injections.  Put
through the linearized network equations this yields one affine state map
per regime: Y = A_i X + b_i on the slab Omega_i of the aggregate axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netcase import NetworkCase, CaseError
from .dlpf import LinearPfModel

# classify_segment value for |P_delta| beyond the modeled range.
EXCEEDED = 0


@dataclass
class ControlParams:
    """Per-bus regulation coefficients over the non-slack buses (S order).

    ``Kd``/``Kg`` are load and governor frequency characteristics in p.u. per
    Hz on the system base; ``Hg`` the AGC ramp shares.  ``f_d`` and ``f_a``
    are the dead-band and governor-range frequency limits in Hz, ``f_n`` the
    nominal frequency, ``p_delta_max`` the largest modeled imbalance.
    """

    Kd: np.ndarray
    Kg: np.ndarray
    Hg: np.ndarray
    f_d: float
    f_a: float
    f_n: float
    p_delta_max: float | None = None
    exceeded_policy: str = "error"

    def __post_init__(self):
        for name in ("Kd", "Kg", "Hg"):
            arr = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, arr)
            if arr.ndim != 1 or arr.size != self.Kd.size:
                raise CaseError(f"{name} must be a length-N vector")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise CaseError(f"{name} entries must be finite and nonnegative")
        if self.K_D <= 0:
            raise CaseError("total load frequency characteristic K_D must be positive")
        if self.H_G <= 0:
            raise CaseError("at least one AGC unit with a positive ramp share is required")
        if not 0 < self.f_d < self.f_a:
            raise CaseError(f"need 0 < f_d < f_a, got f_d={self.f_d}, f_a={self.f_a}")
        if self.p_delta_max is None:
            self.p_delta_max = 2.0 * self.K_U * self.f_a
        d1, d2, d3, d4 = self.thresholds
        if not d1 < d2 < d3 < d4:
            raise CaseError(f"segment thresholds must increase strictly, got {self.thresholds}")
        if self.exceeded_policy not in ("error", "clamp"):
            raise CaseError(f"unknown exceeded_policy '{self.exceeded_policy}'")

    @property
    def K_D(self) -> float:
        return float(self.Kd.sum())

    @property
    def K_U(self) -> float:
        return float((self.Kg + self.Kd).sum())

    @property
    def H_G(self) -> float:
        return float(self.Hg.sum())

    @property
    def thresholds(self) -> tuple:
        """(0, K_D f_d, K_U f_a, p_delta_max) on the |P_delta| axis."""
        return (0.0, self.K_D * self.f_d, self.K_U * self.f_a,
                float(self.p_delta_max))

    def alpha_column(self, segment: int) -> np.ndarray:
        """Bus shares alpha_{n,i}; each column sums to -1."""
        if segment == 1:
            return -self.Kd / self.K_D
        if segment == 2:
            return -(self.Kg + self.Kd) / self.K_U
        if segment == 3:
            return -self.Hg / self.H_G
        raise ValueError(f"segment must be 1, 2 or 3, got {segment}")


def params_from_config(case: NetworkCase, cfg: dict) -> ControlParams:
    """Build :class:`ControlParams` from a sidecar ``control`` section.

    ``kd_pu`` is per unit on each bus's nominal load, ``kg_pu`` per unit on
    each generator's capacity; both convert to the system base here.  AGC
    ramp shares come from ``hg_by_bus`` (bus id keys, p.u. values) and default
    to the unit's capacity.
    """
    kd_pu = float(cfg.get("kd_pu", 2.6))
    kg_pu = float(cfg.get("kg_pu", 25.0))
    hg_by_bus = {int(k): float(v) for k, v in cfg.get("hg_by_bus", {}).items()}

    s = case.s_buses
    Kd = kd_pu * case.Pd[s]
    Kg = np.zeros(s.size)
    Hg = np.zeros(s.size)
    pos_of = {int(b): k for k, b in enumerate(s)}
    for g in range(case.n_gen):
        bus = int(case.gen_bus[g])
        if bus not in pos_of:
            continue  # slack units carry no share of the modeled response
        k = pos_of[bus]
        Kg[k] += kg_pu * case.gen_cap[g]
        if case.gen_is_agc[g]:
            Hg[k] += hg_by_bus.get(int(case.bus_id[bus]), case.gen_cap[g])

    pdm = cfg.get("p_delta_max")
    return ControlParams(
        Kd=Kd, Kg=Kg, Hg=Hg,
        f_d=float(cfg.get("f_d", 0.01)),
        f_a=float(cfg.get("f_a", 0.1)),
        f_n=float(cfg.get("f_n", 50.0)),
        p_delta_max=None if pdm is None else float(pdm),
        exceeded_policy=str(cfg.get("exceeded_policy", "error")),
    )


def classify_segment(params: ControlParams, p_delta) -> np.ndarray | int:
    """Segment index (1, 2 or 3) per imbalance value, ``EXCEEDED`` beyond.

    Boundaries belong to the lower segment; a balanced system (P_delta = 0)
    sits in segment 1, where its regulation is zero anyway.
    """
    edges = np.asarray(params.thresholds[1:])
    idx = np.searchsorted(edges, np.abs(p_delta), side="left")
    seg = np.where(idx >= 3, EXCEEDED, idx + 1)
    if np.ndim(p_delta) == 0:
        return int(seg)
    return seg


def frequency_deviation(params: ControlParams, p_delta: float) -> float:
    """Quasi-steady-state frequency offset in Hz for one imbalance value."""
    seg = classify_segment(params, p_delta)
    if seg == EXCEEDED:
        raise ValueError(
            f"|P_delta| = {abs(p_delta):.4g} exceeds the modeled range "
            f"{params.thresholds[3]:.4g}")
    if seg == 1:
        return float(p_delta / params.K_D)
    return float(p_delta / params.K_U)


def regulation_amounts(params: ControlParams, p_delta: float) -> np.ndarray:
    """Per-bus response over S; entries sum to -p_delta."""
    seg = classify_segment(params, p_delta)
    if seg == EXCEEDED:
        raise ValueError(
            f"|P_delta| = {abs(p_delta):.4g} exceeds the modeled range "
            f"{params.thresholds[3]:.4g}")
    return params.alpha_column(seg) * p_delta


@dataclass
class PiecewiseLinearModel:
    """Per-segment affine maps from injections X = [P_W; Q_W] to Y.

    ``A`` is (3, ny, ny), ``b`` (3, ny); segment i applies when the aggregate
    z = epsilon' X puts |z + c_offset| inside (thresholds[i-1], thresholds[i]].
    ``omega`` holds the matching z-axis slabs, one or two half-open intervals
    per segment.
    """

    A: np.ndarray
    b: np.ndarray
    thresholds: tuple
    omega: tuple
    epsilon: np.ndarray
    c_offset: float
    n_s: int
    n_l: int
    exceeded_policy: str = "error"
    params: ControlParams | None = field(default=None, repr=False)

    @property
    def n_y(self) -> int:
        return self.n_s + self.n_l

    def segment_of_z(self, z) -> np.ndarray | int:
        """Vectorized segment classification on the aggregate-injection axis."""
        edges = np.asarray(self.thresholds[1:])
        idx = np.searchsorted(edges, np.abs(np.asarray(z) + self.c_offset),
                              side="left")
        seg = np.where(idx >= 3, EXCEEDED, idx + 1)
        if np.ndim(z) == 0:
            return int(seg)
        return seg


def _omega_intervals(thresholds: tuple, c_offset: float) -> tuple:
    """z-axis slabs per segment: |z + c_offset| in (d_i, d_{i+1}]."""
    out = []
    for i in range(3):
        lo, hi = thresholds[i], thresholds[i + 1]
        if i == 0:
            out.append(((-hi - c_offset, hi - c_offset),))
        else:
            out.append(((-hi - c_offset, -lo - c_offset),
                        (lo - c_offset, hi - c_offset)))
    return tuple(out)


def assemble_piecewise(case: NetworkCase, lin: LinearPfModel,
                       params: ControlParams) -> PiecewiseLinearModel:
    """Compose regulation shares with the linear network model.

    Segment matrices solve Lambda A_i = E_i with E_i = blockdiag(I_N +
    alpha_i 1', I_M); the rank-one structure lets one base solve serve all
    three segments.
    """
    N, M = lin.n_s, lin.n_l
    ny = N + M
    s = lin.s_buses
    gen_p = case.gen_p_bus()

    base = gen_p[s] - case.Pd[s]
    c_offset = float(base.sum())
    gamma = (case.gen_q_bus() - case.Qd)[lin.l_buses]

    A_base = lin.solve(np.eye(ny))
    A = np.empty((3, ny, ny))
    b = np.empty((3, ny))
    for i in (1, 2, 3):
        col = params.alpha_column(i)
        u = A_base[:, :N] @ col
        A[i - 1] = A_base
        A[i - 1, :, :N] = A_base[:, :N] + u[:, None]
        beta = base + col * c_offset
        d = np.concatenate([beta, gamma])
        b[i - 1] = lin.solve(d + lin.c_bnd)

    eps = np.concatenate([np.ones(N), np.zeros(M)])
    return PiecewiseLinearModel(
        A=A, b=b, thresholds=params.thresholds,
        omega=_omega_intervals(params.thresholds, c_offset),
        epsilon=eps, c_offset=c_offset, n_s=N, n_l=M,
        exceeded_policy=params.exceeded_policy, params=params)
