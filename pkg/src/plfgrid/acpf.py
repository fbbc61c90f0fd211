"""Full AC power flow, Newton's method in polar form.

PV bus magnitudes stay at their setpoints (no reactive-limit switching),
the slack bus absorbs the active and reactive residual.  Dense linear
algebra up to ``netcase.DENSE_BUS_LIMIT`` buses, sparse LU above.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .netcase import NetworkCase, Admittance, build_admittance

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 30


class AcPowerFlowError(RuntimeError):
    """Raised when the Newton iteration fails to reach the tolerance."""

    def __init__(self, msg: str, mismatch: float = np.nan):
        super().__init__(msg)
        self.mismatch = mismatch


@dataclass
class AcSolution:
    """Solved operating point; ``Vm`` in p.u., ``Va`` in radians."""

    Vm: np.ndarray
    Va: np.ndarray
    iterations: int
    mismatch: float

    def state_vector(self, case: NetworkCase) -> np.ndarray:
        """The unknown block [angles at non-slack buses; magnitudes at PQ buses]."""
        return np.concatenate([self.Va[case.s_buses], self.Vm[case.l_buses]])


def _ybus(adm: Admittance):
    if adm.is_sparse:
        return (adm.G + 1j * adm.B).tocsr()
    return adm.G + 1j * adm.B


def solve_ac(case: NetworkCase, adm: Admittance | None = None, *,
             p_inj: np.ndarray | None = None,
             q_inj: np.ndarray | None = None,
             v0: tuple[np.ndarray, np.ndarray] | None = None,
             tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER) -> AcSolution:
    """Solve the AC power flow.

    Parameters
    ----------
    p_inj, q_inj
        Specified net injections per bus in p.u. (generation minus load plus
        any wind).  ``p_inj`` binds at every non-slack bus, ``q_inj`` at PQ
        buses.  Defaults come from the case's scheduled generation and load.
    v0
        Warm start ``(Vm, Va)``.  Default is a flat start: magnitudes at the
        setpoints, angles at the slack angle.

    Raises
    ------
    AcPowerFlowError
        If the mismatch infinity norm is still above ``tol`` after
        ``max_iter`` iterations, or the Jacobian becomes singular.
    """
    if adm is None:
        adm = build_admittance(case)
    Y = _ybus(adm)
    s = case.s_buses
    l = case.l_buses
    ns, nl = s.size, l.size

    if p_inj is None:
        p_inj = case.gen_p_bus() - case.Pd
    if q_inj is None:
        q_inj = case.gen_q_bus() - case.Qd

    if v0 is None:
        Vm = np.where(case.bus_type != 1, case.vset_bus(), 1.0).astype(float)
        Va = np.full(case.n_bus, case.Va0[case.slack])
    else:
        Vm = v0[0].copy()
        Va = v0[1].copy()
    # Fixed magnitudes are pinned regardless of the start point.
    Vm[case.t_buses] = case.vset_bus()[case.t_buses]
    Va[case.slack] = case.Va0[case.slack]

    sparse = adm.is_sparse
    mis_norm = np.inf
    for it in range(max_iter + 1):
        V = Vm * np.exp(1j * Va)
        Ibus = Y @ V
        S = V * np.conj(Ibus)
        fp = S.real[s] - p_inj[s]
        fq = S.imag[l] - q_inj[l]
        mis = np.concatenate([fp, fq])
        mis_norm = float(np.max(np.abs(mis))) if mis.size else 0.0
        if mis_norm <= tol:
            return AcSolution(Vm=Vm, Va=Va, iterations=it, mismatch=mis_norm)
        if it == max_iter:
            break

        if sparse:
            diagV = sp.diags(V)
            diagI = sp.diags(Ibus)
            diagVn = sp.diags(V / Vm)
            dS_dVa = 1j * diagV @ np.conj(diagI - Y @ diagV)
            dS_dVm = diagV @ np.conj(Y @ diagVn) + np.conj(diagI) @ diagVn
            J = sp.bmat([
                [dS_dVa.real[s, :][:, s], dS_dVm.real[s, :][:, l]],
                [dS_dVa.imag[l, :][:, s], dS_dVm.imag[l, :][:, l]],
            ], format="csc")
            try:
                dx = spla.splu(J).solve(mis)
            except RuntimeError as exc:
                raise AcPowerFlowError(
                    f"singular Jacobian at iteration {it}: {exc}", mis_norm)
        else:
            Vn = V / Vm
            YV = Y * V[None, :]
            dS_dVa = 1j * V[:, None] * np.conj(np.diag(Ibus) - YV)
            dS_dVm = V[:, None] * np.conj(Y * Vn[None, :])
            dS_dVm[np.diag_indices_from(dS_dVm)] += np.conj(Ibus) * Vn
            J = np.empty((ns + nl, ns + nl))
            J[:ns, :ns] = dS_dVa.real[np.ix_(s, s)]
            J[:ns, ns:] = dS_dVm.real[np.ix_(s, l)]
            J[ns:, :ns] = dS_dVa.imag[np.ix_(l, s)]
            J[ns:, ns:] = dS_dVm.imag[np.ix_(l, l)]
            try:
                dx = sla.solve(J, mis)
            except sla.LinAlgError as exc:
                raise AcPowerFlowError(
                    f"singular Jacobian at iteration {it}: {exc}", mis_norm)

        Va[s] -= dx[:ns]
        Vm[l] -= dx[ns:]

    raise AcPowerFlowError(
        f"no convergence after {max_iter} iterations "
        f"(mismatch {mis_norm:.3e} > {tol:.1e})", mis_norm)


def branch_flows_ac(case: NetworkCase, adm: Admittance,
                    Vm: np.ndarray, Va: np.ndarray):
    """Complex power entering each branch at both ends.

    Returns ``(Pf, Qf, Pt, Qt)`` over all branch-table rows; out-of-service
    rows carry zeros.
    """
    V = Vm * np.exp(1j * Va)
    rows = adm.br_rows
    Vf = V[case.br_f[rows]]
    Vt = V[case.br_t[rows]]
    Sf = Vf * np.conj(adm.yff * Vf + adm.yft * Vt)
    St = Vt * np.conj(adm.ytf * Vf + adm.ytt * Vt)

    nb = case.n_branch
    Pf = np.zeros(nb)
    Qf = np.zeros(nb)
    Pt = np.zeros(nb)
    Qt = np.zeros(nb)
    Pf[rows] = Sf.real
    Qf[rows] = Sf.imag
    Pt[rows] = St.real
    Qt[rows] = St.imag
    return Pf, Qf, Pt, Qt
