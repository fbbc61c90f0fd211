"""Generate deterministic synthetic transmission cases.

Published 39/118/200-bus case files cannot be redistributed from this build
environment, so the test suite runs on synthetic stand-ins with the canonical
bus counts, produced here.  Networks are geographic: buses scattered in the
unit square, a minimum spanning tree for connectivity plus the shortest
non-tree edges to the target branch count, impedances proportional to length.
Every emitted case is validated: Newton power flow from a flat start must
converge quickly to a healthy voltage profile, and the linearized model must
track the AC solution closely enough for the corrections to matter rather
than rescue.

Run from the repository root:  python3 scripts/gen_cases.py
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from plfgrid import acpf, dlpf, netcase  # noqa: E402

OUT_DIR = Path(__file__).resolve().parents[1] / "data" / "cases"

# name: (n_bus, n_branch, n_gen, total_load_pu, mean_x, base_seed)
SIZES = {
    "case39s": (39, 46, 10, 3.0, 0.06, 390),
    "case118s": (118, 186, 20, 9.0, 0.06, 1180),
    "case200s": (200, 245, 30, 12.0, 0.035, 2000),
}


def topology(rng: np.random.Generator, n: int, n_branch: int):
    pts = rng.random((n, 2))
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    mst = sp.csgraph.minimum_spanning_tree(d).tocoo()
    edges = {(min(i, j), max(i, j)) for i, j in zip(mst.row, mst.col)}
    order = np.dstack(np.unravel_index(np.argsort(d, axis=None), d.shape))[0]
    deg = np.zeros(n, dtype=int)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    for i, j in order:
        if len(edges) >= n_branch:
            break
        i, j = int(i), int(j)
        if i >= j or (i, j) in edges:
            continue
        if deg[i] >= 6 or deg[j] >= 6:
            continue
        edges.add((i, j))
        deg[i] += 1
        deg[j] += 1
    lengths = {e: d[e] for e in edges}
    return sorted(edges), lengths


def make_case(name: str, n: int, n_branch: int, n_gen: int,
              total_load: float, mean_x: float, seed: int) -> netcase.NetworkCase:
    rng = np.random.default_rng(seed)
    edges, lengths = topology(rng, n, n_branch)
    nb = len(edges)

    lens = np.array([lengths[e] for e in edges])
    x = lens * (0.85 + 0.3 * rng.random(nb))
    x *= mean_x / np.mean(x)
    is_xfmr = np.zeros(nb, dtype=bool)
    is_xfmr[rng.choice(nb, size=max(2, nb // 12), replace=False)] = True
    r = np.where(is_xfmr, x * rng.uniform(0.02, 0.08, nb),
                 x * rng.uniform(0.15, 0.35, nb))
    b = np.where(is_xfmr, 0.0, x * rng.uniform(0.2, 1.2, nb))
    tap = np.where(is_xfmr, np.round(rng.uniform(0.97, 1.03, nb), 3), 1.0)
    shift = np.zeros(nb)
    shifted = rng.choice(np.flatnonzero(is_xfmr), size=min(2, is_xfmr.sum()),
                         replace=False)
    shift[shifted] = np.radians(rng.uniform(-2.0, 2.0, shifted.size))

    load_sites = rng.choice(n, size=int(0.62 * n), replace=False)
    Pd = np.zeros(n)
    Pd[load_sites] = rng.gamma(2.0, 1.0, load_sites.size)
    Pd *= total_load / Pd.sum()
    pf = rng.uniform(0.94, 0.99, n)
    Qd = Pd * np.tan(np.arccos(pf))

    Bs = np.zeros(n)
    heavy = np.argsort(Pd)[-max(2, n // 20):]
    Bs[heavy] = 0.4 * Qd[heavy]

    # Generation sited preferentially near load so radial spurs stay light.
    site_w = Pd + 0.3 * Pd.mean()
    gen_sites = rng.choice(n, size=n_gen, replace=False, p=site_w / site_w.sum())
    cap = 0.5 + rng.gamma(2.0, 1.0, n_gen)
    cap *= 2.0 * total_load / cap.sum()
    slack_site = int(gen_sites[np.argmax(cap)])
    Pg = 0.45 * cap
    nonslack = gen_sites != slack_site
    Pg[nonslack] *= 0.92 * total_load / Pg[nonslack].sum()
    Pg[~nonslack] = 0.0
    Vset = np.round(rng.uniform(1.01, 1.03, n_gen), 3)

    bus_type = np.full(n, netcase.PQ)
    bus_type[gen_sites] = netcase.PV
    bus_type[slack_site] = netcase.SLACK

    f = np.array([e[0] for e in edges])
    t = np.array([e[1] for e in edges])
    return netcase.NetworkCase(
        name=name, base_mva=100.0,
        bus_id=np.arange(1, n + 1), bus_type=bus_type,
        Pd=Pd, Qd=Qd, Gs=np.zeros(n), Bs=Bs,
        Vm0=np.ones(n), Va0=np.zeros(n), base_kv=np.full(n, 230.0),
        gen_bus=gen_sites, gen_Pg=Pg, gen_Qg=np.zeros(n_gen),
        gen_Vset=Vset, gen_cap=cap,
        gen_is_agc=np.zeros(n_gen, dtype=bool),
        br_f=f, br_t=t, br_r=r, br_x=x, br_b=b,
        br_tap=tap, br_shift=shift,
        br_status=np.ones(nb, dtype=int),
    )


def healthy(case: netcase.NetworkCase) -> tuple[bool, str]:
    adm = netcase.build_admittance(case)
    try:
        sol = acpf.solve_ac(case, adm)
    except acpf.AcPowerFlowError as exc:
        return False, f"no AC solution: {exc}"
    if sol.iterations > 10:
        return False, f"slow convergence ({sol.iterations} iters)"
    vm_pq = sol.Vm[case.l_buses]
    if vm_pq.min() < 0.95 or vm_pq.max() > 1.07:
        return False, f"voltage band [{vm_pq.min():.3f}, {vm_pq.max():.3f}]"
    spread = np.abs(sol.Va - sol.Va[case.slack]).max()
    if spread > 0.6:
        return False, f"angle spread {spread:.2f} rad"

    model = dlpf.build_dlpf(case, adm)
    rng = np.random.default_rng(1)
    p0 = case.gen_p_bus() - case.Pd
    q0 = case.gen_q_bus() - case.Qd
    for _ in range(3):
        scale = 1.0 + 0.2 * (2 * rng.random(case.n_bus) - 1)
        p, q = p0 * scale, q0 * scale
        y = dlpf.solve_dlpf(model, p, q)
        try:
            solp = acpf.solve_ac(case, adm, p_inj=p, q_inj=q,
                                 v0=(sol.Vm, sol.Va))
        except acpf.AcPowerFlowError as exc:
            return False, f"no AC solution at perturbed point: {exc}"
        verr = np.abs(y[case.n_s:] - solp.Vm[case.l_buses]).max()
        if verr > 8e-3:
            return False, f"linear model voltage error {verr:.4f}"
    return True, f"ok ({sol.iterations} iters, V [{vm_pq.min():.3f}, {vm_pq.max():.3f}])"


def main() -> None:
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    for name, (n, nb, ng, load, mean_x, base_seed) in SIZES.items():
        for attempt in range(60):
            case = make_case(name, n, nb, ng, load, mean_x, base_seed + attempt)
            ok, msg = healthy(case)
            if ok:
                # Canonicalize through a parse so the shipped file is the
                # exact source of truth for every later round trip.
                canonical = netcase.parse_case(netcase.serialize(case), name)
                path = OUT_DIR / f"{name}.m"
                path.write_text(netcase.serialize(canonical))
                again = netcase.parse_case(path.read_text(), name)
                assert again == canonical, "round trip failed"
                print(f"{name}: seed {base_seed + attempt}, {msg} -> {path}")
                break
            print(f"{name}: seed {base_seed + attempt} rejected: {msg}")
        else:
            raise SystemExit(f"no healthy network found for {name}")


if __name__ == "__main__":
    main()
