"""Decoupled linearized power flow with voltage magnitudes.

The linear model couples active power to angles through the series-only
susceptance (line charging and bus shunts drop out of the angle equations)
and reactive power to magnitudes through the full susceptance:

    P = -B' theta + G V        Q = -G theta - B V

Partitioning buses into S (all non-slack, P equations), L (PQ, Q equations),
R (slack) and T (fixed-magnitude: PV + slack) gives a square system in the
unknown block Y = [theta_S; V_L]:

    Lambda Y = [P_S; Q_L] + C [theta_R; V_T]

with Lambda = [[-B'_SS, G_SL], [-G_LS, -B_LL]] and
C = [[B'_SR, -G_ST], [G_LR, B_LT]].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .netcase import NetworkCase, Admittance

# Lambda and the segment matrices stay dense up to this many buses.
DENSE_MODEL_BUS_LIMIT = 1500


@dataclass
class LinearPfModel:
    """Factorized linear model for one case.

    ``boundary`` holds the fixed values [theta_R; V_T]; ``c_bnd`` caches
    ``C @ boundary``, the constant the boundary contributes to every solve.
    """

    Lambda: object
    C: object
    boundary: np.ndarray
    c_bnd: np.ndarray
    s_buses: np.ndarray
    l_buses: np.ndarray
    t_buses: np.ndarray
    _solver: object

    @property
    def n_s(self) -> int:
        return self.s_buses.size

    @property
    def n_l(self) -> int:
        return self.l_buses.size

    @property
    def n_y(self) -> int:
        return self.n_s + self.n_l

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve Lambda y = rhs for one vector or a stack of columns."""
        return self._solver(rhs)


def _submat(M, rows, cols):
    if sp.issparse(M):
        return M.tocsr()[rows, :][:, cols]
    return M[np.ix_(rows, cols)]


def build_dlpf(case: NetworkCase, adm: Admittance) -> LinearPfModel:
    """Assemble and factorize the linear model for ``case``."""
    s = case.s_buses
    l = case.l_buses
    r = np.array([case.slack])
    t = case.t_buses
    G, B, Bp = adm.G, adm.B, adm.B_noshunt

    top = [-_submat(Bp, s, s), _submat(G, s, l)]
    bot = [-_submat(G, l, s), -_submat(B, l, l)]
    ctop = [_submat(Bp, s, r), -_submat(G, s, t)]
    cbot = [_submat(G, l, r), _submat(B, l, t)]

    dense = case.n_bus <= DENSE_MODEL_BUS_LIMIT
    if sp.issparse(G) and dense:
        top = [m.toarray() for m in top]
        bot = [m.toarray() for m in bot]
        ctop = [m.toarray() for m in ctop]
        cbot = [m.toarray() for m in cbot]

    if dense:
        Lambda = np.block([top, bot])
        C = np.block([ctop, cbot])
        lu = sla.lu_factor(Lambda)

        def solver(rhs: np.ndarray) -> np.ndarray:
            return sla.lu_solve(lu, rhs)
    else:
        Lambda = sp.bmat([top, bot], format="csc")
        C = sp.bmat([ctop, cbot], format="csr")
        lu = spla.splu(Lambda)

        def solver(rhs: np.ndarray) -> np.ndarray:
            return lu.solve(rhs)

    boundary = np.concatenate([[case.Va0[case.slack]],
                               case.vset_bus()[t]])
    c_bnd = np.asarray(C @ boundary).ravel()
    return LinearPfModel(Lambda=Lambda, C=C, boundary=boundary, c_bnd=c_bnd,
                         s_buses=s, l_buses=l, t_buses=t, _solver=solver)


def solve_dlpf(model: LinearPfModel, p_inj: np.ndarray,
               q_inj: np.ndarray) -> np.ndarray:
    """Linearized state [theta_S; V_L] for full-bus injection vectors (p.u.)."""
    rhs = np.concatenate([p_inj[model.s_buses], q_inj[model.l_buses]])
    return model.solve(rhs + model.c_bnd)


def branch_flow_matrix(case: NetworkCase, adm: Admittance,
                       model: LinearPfModel):
    """Affine from-end active flow map: P_branch ~= F Y + f0.

    First order around flat voltage, exact for lossless untapped lines in the
    angle variables.  Out-of-service branch rows are zero.
    """
    nb = case.n_branch
    ny = model.n_y
    rows = adm.br_rows
    f = case.br_f[rows]
    t = case.br_t[rows]
    ys = 1.0 / (case.br_r[rows] + 1j * case.br_x[rows])
    g, b = ys.real, ys.imag
    tau = case.br_tap[rows]
    phi = case.br_shift[rows]

    c_tf = -(g * np.sin(phi) + b * np.cos(phi)) / tau
    c_tt = -c_tf
    gc = (g * np.cos(phi) - b * np.sin(phi)) / tau
    c_vf = 2.0 * g / tau**2 - gc
    c_vt = -gc
    p0 = g / tau**2 - gc

    # Column position of each bus inside Y, or -1 when its angle/magnitude is
    # fixed (slack angle, T-bus magnitudes): those terms land in f0.
    ang_col = np.full(case.n_bus, -1)
    ang_col[model.s_buses] = np.arange(model.n_s)
    mag_col = np.full(case.n_bus, -1)
    mag_col[model.l_buses] = model.n_s + np.arange(model.n_l)

    vset = case.vset_bus()
    theta_fix = np.full(case.n_bus, case.Va0[case.slack])

    F = np.zeros((nb, ny))
    f0 = np.zeros(nb)
    f0[rows] = p0 - c_vf - c_vt
    for k, row in enumerate(rows):
        for bus, coef, col in ((f[k], c_tf[k], ang_col), (t[k], c_tt[k], ang_col)):
            if col[bus] >= 0:
                F[row, col[bus]] += coef
            else:
                f0[row] += coef * theta_fix[bus]
        for bus, coef in ((f[k], c_vf[k]), (t[k], c_vt[k])):
            if mag_col[bus] >= 0:
                F[row, mag_col[bus]] += coef
            else:
                f0[row] += coef * vset[bus]
    return F, f0
