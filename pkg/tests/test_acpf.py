"""Newton-Raphson AC power flow against an independently computed reference.

The case14 reference below was produced by a separate solver (own Ybus
assembly plus scipy.optimize.fsolve on the polar mismatch equations,
xtol=1e-13, max residual 4.7e-15), not by the code under test.
"""
import numpy as np
import pytest

from plfgrid.acpf import AcPowerFlowError, branch_flows_ac, solve_ac
from plfgrid.netcase import build_admittance, parse_case

from conftest import TWO_BUS, experiment
from test_netcase import chain_case_text

CASE14_VM = np.array([
    1.06, 1.045, 1.01, 1.0176708537, 1.0195138598, 1.07, 1.0615195325,
    1.09, 1.0559317206, 1.050984625, 1.0569065185, 1.0551885632,
    1.0503817136, 1.0355299459])
CASE14_VA = np.array([
    0.0, -0.0869625858, -0.2220948916, -0.1799940795, -0.1531326386,
    -0.2482023385, -0.2331694844, -0.2331694844, -0.260726382,
    -0.2634973918, -0.2581450529, -0.2631185865, -0.2645269244,
    -0.2798398881])
# from-end flow on the first branch (buses 1-2), same reference solver
CASE14_PF0 = 1.5688289053224482
CASE14_PT0 = -1.525852901960426


def test_no_load_flat_fixed_point():
    text = TWO_BUS.replace("\t1\t50\t20\t", "\t1\t0\t0\t")
    case = parse_case(text)
    sol = solve_ac(case)
    assert np.allclose(sol.Vm, 1.0, atol=1e-12)
    assert np.allclose(sol.Va, 0.0, atol=1e-12)
    assert sol.mismatch <= 1e-10


def test_case14_matches_reference():
    case, _, _ = experiment("case14")
    sol = solve_ac(case)
    assert np.allclose(sol.Vm, CASE14_VM, atol=1e-8)
    assert np.allclose(sol.Va, CASE14_VA, atol=1e-8)


def test_case14_branch_flow_reference():
    case, _, _ = experiment("case14")
    adm = build_admittance(case)
    sol = solve_ac(case, adm)
    pf, qf, pt, qt = branch_flows_ac(case, adm, sol.Vm, sol.Va)
    assert pf[0] == pytest.approx(CASE14_PF0, abs=1e-8)
    assert pt[0] == pytest.approx(CASE14_PT0, abs=1e-8)


def test_power_balance_recheck():
    # recompute complex bus injections from the returned voltages and check
    # them against the scheduled values, independent of the solver internals
    case, _, _ = experiment("case14")
    adm = build_admittance(case)
    sol = solve_ac(case, adm, tol=1e-10)
    V = sol.Vm * np.exp(1j * sol.Va)
    Y = adm.G + 1j * adm.B
    S = V * np.conj(Y @ V)
    p_sched = case.gen_p_bus() - case.Pd
    q_sched = case.gen_q_bus() - case.Qd
    assert np.max(np.abs(S.real[case.s_buses] - p_sched[case.s_buses])) < 1e-8
    assert np.max(np.abs(S.imag[case.l_buses] - q_sched[case.l_buses])) < 1e-8


def test_fixed_quantities_pinned():
    case, _, _ = experiment("case14")
    sol = solve_ac(case)
    assert np.array_equal(sol.Vm[case.t_buses], case.vset_bus()[case.t_buses])
    assert sol.Va[case.slack] == case.Va0[case.slack]


def test_state_vector_layout():
    case, _, _ = experiment("case14")
    sol = solve_ac(case)
    y = sol.state_vector(case)
    assert y.shape == (case.n_s + case.n_l,)
    assert np.array_equal(y[:case.n_s], sol.Va[case.s_buses])
    assert np.array_equal(y[case.n_s:], sol.Vm[case.l_buses])


def test_injection_override():
    case, _, _ = experiment("case14")
    p = case.gen_p_bus() - case.Pd
    q = case.gen_q_bus() - case.Qd
    sol0 = solve_ac(case)
    sol1 = solve_ac(case, p_inj=p, q_inj=q)
    assert np.allclose(sol0.Vm, sol1.Vm, atol=1e-10)
    # perturbing the load moves the solution
    p2 = p.copy()
    p2[case.l_buses[0]] -= 0.1
    sol2 = solve_ac(case, p_inj=p2, q_inj=q)
    assert not np.allclose(sol0.Va, sol2.Va, atol=1e-6)


def test_warm_start_converges_fast():
    case, _, _ = experiment("case14")
    sol = solve_ac(case)
    again = solve_ac(case, v0=(sol.Vm, sol.Va))
    assert again.iterations <= 1
    assert np.allclose(again.Vm, sol.Vm, atol=1e-10)


def test_infeasible_raises_with_mismatch():
    text = TWO_BUS.replace("\t1\t50\t20\t", "\t1\t800\t20\t")
    case = parse_case(text)
    with pytest.raises(AcPowerFlowError) as err:
        solve_ac(case)
    assert err.value.mismatch > 0.0


def test_lossless_flows_antisymmetric(three_bus_pv):
    adm = build_admittance(three_bus_pv)
    sol = solve_ac(three_bus_pv, adm)
    pf, qf, pt, qt = branch_flows_ac(three_bus_pv, adm, sol.Vm, sol.Va)
    assert np.allclose(pf + pt, 0.0, atol=1e-10)


def test_out_of_service_branch_flow_is_zero():
    # switch one branch off and check its flow row comes back exactly zero
    from conftest import THREE_BUS_PQ
    off = THREE_BUS_PQ.replace(
        "\t1\t3\t0.02\t0.25\t0\t0\t0\t0\t0\t0\t1\t-360\t360",
        "\t1\t3\t0.02\t0.25\t0\t0\t0\t0\t0\t0\t0\t-360\t360")
    case = parse_case(off)
    adm = build_admittance(case)
    sol = solve_ac(case, adm)
    pf, qf, pt, qt = branch_flows_ac(case, adm, sol.Vm, sol.Va)
    assert pf[2] == 0.0 and qf[2] == 0.0 and pt[2] == 0.0 and qt[2] == 0.0


def test_sparse_network_solves():
    case = parse_case(chain_case_text(205))
    sol = solve_ac(case)
    assert sol.mismatch <= 1e-8
    # voltage sags monotonically along a uniformly loaded radial feeder
    assert np.all(np.diff(sol.Vm) < 0.0)
