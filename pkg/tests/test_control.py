"""Frequency regulation segments, participation shares, and the piecewise
affine network map they induce."""
import numpy as np
import pytest

from plfgrid.control import (EXCEEDED, ControlParams, assemble_piecewise,
                             classify_segment, frequency_deviation,
                             params_from_config, regulation_amounts)
from plfgrid.dlpf import build_dlpf, solve_dlpf
from plfgrid.netcase import CaseError, apply_sidecar, build_admittance

from conftest import experiment, linear_parts


def simple_params(**over):
    kw = dict(Kd=np.array([10.0]), Kg=np.array([90.0]), Hg=np.array([1.0]),
              f_d=0.01, f_a=0.1, f_n=50.0)
    kw.update(over)
    return ControlParams(**kw)


def test_derived_totals_and_thresholds():
    p = simple_params()
    assert p.K_D == 10.0
    assert p.K_U == 100.0
    assert p.H_G == 1.0
    # default modeled range: twice the governor-range edge
    assert p.thresholds == (0.0, 0.1, 10.0, 20.0)


def test_frequency_deviation_values():
    p = simple_params()
    assert frequency_deviation(p, 0.0) == 0.0
    # inside the dead band the load response sets the slope
    assert frequency_deviation(p, 0.05) == pytest.approx(0.005)
    # the boundary belongs to the dead band
    assert frequency_deviation(p, 0.1) == pytest.approx(p.f_d)
    # beyond it the governor total takes over: 0.5 / 100
    assert frequency_deviation(p, 0.5) == pytest.approx(0.005)
    assert frequency_deviation(p, -0.5) == pytest.approx(-0.005)
    with pytest.raises(ValueError, match="exceeds the modeled range"):
        frequency_deviation(p, 25.0)


def test_classify_segment_boundaries():
    p = simple_params()
    z = np.array([0.0, 0.1, 0.100001, 10.0, 10.1, 20.0, 20.5])
    assert list(classify_segment(p, z)) == [1, 1, 2, 2, 3, 3, EXCEEDED]
    assert list(classify_segment(p, -z)) == [1, 1, 2, 2, 3, 3, EXCEEDED]
    out = classify_segment(p, 0.05)
    assert isinstance(out, int) and out == 1


def test_alpha_columns_sum_to_minus_one():
    p = simple_params(Kd=np.array([1.0, 3.0]), Kg=np.array([5.0, 2.0]),
                      Hg=np.array([0.5, 1.5]))
    for seg in (1, 2, 3):
        col = p.alpha_column(seg)
        assert col.sum() == pytest.approx(-1.0, abs=1e-12)
        assert np.all(col <= 0)
    with pytest.raises(ValueError, match="segment must be"):
        p.alpha_column(4)


def test_regulation_amounts_hand_case():
    p = simple_params(Kd=np.array([1.0, 3.0]), Kg=np.array([0.0, 0.0]),
                      Hg=np.array([1.0, 0.0]))
    # dead band splits in proportion to Kd
    amounts = regulation_amounts(p, 0.04)
    assert np.allclose(amounts, [-0.01, -0.03], atol=1e-15)
    assert amounts.sum() == pytest.approx(-0.04, abs=1e-12)
    # single AGC unit takes the whole imbalance in segment 3
    d3 = p.thresholds[2]
    amounts3 = regulation_amounts(p, d3 + 0.1)
    assert np.allclose(amounts3, [-(d3 + 0.1), 0.0], atol=1e-12)
    with pytest.raises(ValueError, match="exceeds the modeled range"):
        regulation_amounts(p, 2 * p.p_delta_max)


def test_regulation_sums_cancel_imbalance():
    p = simple_params(Kd=np.array([1.0, 3.0, 2.0]),
                      Kg=np.array([5.0, 0.0, 7.0]),
                      Hg=np.array([0.0, 2.0, 1.0]))
    rng = np.random.default_rng(2)
    for pd in rng.uniform(-p.p_delta_max, p.p_delta_max, size=50):
        assert regulation_amounts(p, pd).sum() == pytest.approx(-pd, abs=1e-12)


@pytest.mark.parametrize("over, fragment", [
    ({"Kd": np.array([-1.0])}, "finite and nonnegative"),
    ({"Kd": np.array([0.0])}, "K_D must be positive"),
    ({"Hg": np.array([0.0])}, "AGC unit"),
    ({"Kg": np.array([1.0, 2.0])}, "length-N"),
    ({"f_d": 0.2}, "f_d < f_a"),
    ({"f_d": 0.0}, "f_d < f_a"),
    ({"p_delta_max": 5.0}, "increase strictly"),
    ({"exceeded_policy": "wat"}, "unknown exceeded_policy"),
])
def test_params_validation(over, fragment):
    with pytest.raises(CaseError, match=fragment):
        simple_params(**over)


def test_params_from_config_three_bus(three_bus_pq):
    apply_sidecar(three_bus_pq, {"agc_buses": [2]})
    p = params_from_config(three_bus_pq, {})
    # Kd: 2.6 per unit of nominal bus load, Kg: 25 per unit of capacity
    assert np.allclose(p.Kd, [2.6 * 0.5, 2.6 * 0.5])
    assert np.allclose(p.Kg, [25.0 * 1.5, 0.0])
    assert np.allclose(p.Hg, [1.5, 0.0])
    assert p.f_d == 0.01 and p.f_a == 0.1 and p.f_n == 50.0
    assert p.p_delta_max == pytest.approx(2.0 * p.K_U * 0.1)


def test_params_from_config_overrides(three_bus_pq):
    apply_sidecar(three_bus_pq, {"agc_buses": [2]})
    cfg = {"kd_pu": 1.0, "kg_pu": 10.0, "hg_by_bus": {"2": 0.9},
           "f_d": 0.02, "f_a": 0.3, "p_delta_max": 99.0,
           "exceeded_policy": "clamp"}
    p = params_from_config(three_bus_pq, cfg)
    assert np.allclose(p.Kd, [0.5, 0.5])
    assert np.allclose(p.Kg, [15.0, 0.0])
    assert np.allclose(p.Hg, [0.9, 0.0])
    assert p.p_delta_max == 99.0
    assert p.exceeded_policy == "clamp"


def piecewise_for(case):
    adm = build_admittance(case)
    lin = build_dlpf(case, adm)
    params = params_from_config(case, {})
    return lin, params, assemble_piecewise(case, lin, params)


def test_assembled_blocks_reconstruct(three_bus_pq):
    apply_sidecar(three_bus_pq, {"agc_buses": [2]})
    lin, params, model = piecewise_for(three_bus_pq)
    N, M = model.n_s, model.n_l
    assert np.array_equal(model.epsilon, [1.0, 1.0, 0.0])
    assert model.c_offset == pytest.approx(0.2)
    for i in range(3):
        E = lin.Lambda @ model.A[i]
        col = params.alpha_column(i + 1)
        # top-left block is I + alpha 1': every column adds the same share
        # vector, and therefore sums to zero
        assert np.allclose(E[:N, :N] - np.eye(N), np.tile(col[:, None], N),
                           atol=1e-11)
        assert np.allclose(E[:N, :N].sum(axis=0), 0.0, atol=1e-11)
        # magnitude block untouched, off-diagonal blocks empty
        assert np.allclose(E[N:, N:], np.eye(M), atol=1e-11)
        assert np.allclose(E[:N, N:], 0.0, atol=1e-11)
        assert np.allclose(E[N:, :N], 0.0, atol=1e-11)


def test_assembled_offsets_closed_form(three_bus_pq):
    apply_sidecar(three_bus_pq, {"agc_buses": [2]})
    lin, params, model = piecewise_for(three_bus_pq)
    base = np.array([0.7, -0.5])
    gamma = np.array([-0.1])
    for i in range(3):
        beta = base + params.alpha_column(i + 1) * model.c_offset
        rhs = lin.Lambda @ model.b[i] - lin.c_bnd
        assert np.allclose(rhs, np.concatenate([beta, gamma]), atol=1e-11)


def test_omega_slabs_match_classification():
    _, _, model, _ = linear_parts("case14")
    all_ivals = []
    for i, intervals in enumerate(model.omega):
        for lo, hi in intervals:
            assert lo < hi
            interior = np.linspace(lo + 1e-9, hi - 1e-9, 11)
            assert np.all(model.segment_of_z(interior) == i + 1)
            all_ivals.append((lo, hi))
    # the slabs tile the modeled z range without overlap or gaps
    all_ivals.sort()
    for (_, hi_a), (lo_b, _) in zip(all_ivals, all_ivals[1:]):
        assert hi_a == pytest.approx(lo_b, abs=1e-12)
    d4, c = model.thresholds[3], model.c_offset
    assert all_ivals[0][0] == pytest.approx(-d4 - c, abs=1e-12)
    assert all_ivals[-1][1] == pytest.approx(d4 - c, abs=1e-12)
    assert model.segment_of_z(d4 - c + 1.0) == EXCEEDED
    assert model.segment_of_z(-d4 - c - 1.0) == EXCEEDED


def test_segment_of_z_matches_params():
    case, params, _ = experiment("case14")
    _, _, model, _ = linear_parts("case14")
    rng = np.random.default_rng(4)
    z = rng.uniform(-1.5 * params.p_delta_max, 1.5 * params.p_delta_max, 500)
    assert np.array_equal(model.segment_of_z(z),
                          classify_segment(params, z + model.c_offset))


def test_piecewise_equals_regulated_dlpf():
    # the affine segment map must reproduce a plain linear solve whose
    # injections carry the segment's regulation explicitly
    case, params, hist = experiment("case14")
    _, lin, model, _ = linear_parts("case14")
    tanphi = np.tan(np.arccos(case.wind_power_factor))
    p0 = case.gen_p_bus() - case.Pd
    q0 = case.gen_q_bus() - case.Qd
    is_l = np.zeros(case.n_bus, dtype=bool)
    is_l[case.l_buses] = True
    pos_s = {int(b): k for k, b in enumerate(case.s_buses)}
    pos_l = {int(b): k for k, b in enumerate(case.l_buses)}

    rng = np.random.default_rng(8)
    rows = rng.choice(hist.shape[0], size=50, replace=False)
    for r in rows:
        w = hist[r]
        x = np.zeros(model.n_y)
        for k, bus in enumerate(case.wind_bus):
            x[pos_s[int(bus)]] += w[k]
            if is_l[bus]:
                x[model.n_s + pos_l[int(bus)]] += tanphi * w[k]
        z = float(model.epsilon @ x)
        seg = model.segment_of_z(z)
        assert seg in (1, 2, 3)
        y_map = model.A[seg - 1] @ x + model.b[seg - 1]

        p = p0.copy()
        q = q0.copy()
        p[case.wind_bus] += w
        q[case.wind_bus[is_l[case.wind_bus]]] += \
            tanphi * w[is_l[case.wind_bus]]
        p[case.s_buses] += regulation_amounts(params, z + model.c_offset)
        y_ref = solve_dlpf(lin, p, q)
        assert np.max(np.abs(y_map - y_ref)) < 1e-10
