"""Network case handling: MATPOWER-style parsing, sidecar config, admittance matrices.

The parser reads the textual MATPOWER case format (version 2), restricted to the
sections this package uses: ``baseMVA``, ``bus``, ``gen`` and ``branch``.  Other
sections (``gencost``, ``bus_name``, ...) are ignored.  All powers are converted
to per unit on the system base at parse time, angles to radians.

A case alone does not say which units carry automatic generation control or
where wind farms connect.  That lives in a sidecar JSON file::

    {
      "agc_buses": [1, 2],
      "wind_farms": [{"bus": 9, "column": "farm_a"}],
      "wind_power_factor": 0.85,
      "control": {"f_d": 0.01, "f_a": 0.1, "f_n": 50.0,
                  "kg_pu": 25.0, "kd_pu": 2.6,
                  "hg_by_bus": {}, "p_delta_max": null,
                  "exceeded_policy": "error"}
    }

``wind_farms[*].column`` names (or zero-based indexes) a column of the wind
history CSV, whose header row carries the farm names.
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

PQ = 1
PV = 2
SLACK = 3

# Cases up to this many buses use dense admittance storage.
DENSE_BUS_LIMIT = 200


class CaseError(ValueError):
    """Raised for unusable case files or inconsistent case data."""


@dataclass(eq=False)
class NetworkCase:
    """A parsed transmission grid case, per unit on ``base_mva``.

    Bus-indexed arrays use internal indices 0..n-1 in bus-table order;
    ``bus_id`` maps back to the original numbering.  Generator and branch
    tables reference buses by internal index.
    """

    name: str
    base_mva: float
    bus_id: np.ndarray
    bus_type: np.ndarray
    Pd: np.ndarray
    Qd: np.ndarray
    Gs: np.ndarray
    Bs: np.ndarray
    Vm0: np.ndarray
    Va0: np.ndarray
    base_kv: np.ndarray
    gen_bus: np.ndarray
    gen_Pg: np.ndarray
    gen_Qg: np.ndarray
    gen_Vset: np.ndarray
    gen_cap: np.ndarray
    gen_is_agc: np.ndarray
    br_f: np.ndarray
    br_t: np.ndarray
    br_r: np.ndarray
    br_x: np.ndarray
    br_b: np.ndarray
    br_tap: np.ndarray
    br_shift: np.ndarray
    br_status: np.ndarray
    wind_bus: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    wind_col: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    wind_names: tuple = ()
    wind_power_factor: float = 0.85
    # Raw (bus, gen, branch) tables as parsed, so serialize can re-emit the
    # original numbers verbatim.  Not part of semantic equality.
    raw_tables: tuple | None = field(default=None, repr=False)

    @property
    def n_bus(self) -> int:
        return self.bus_id.size

    @property
    def n_gen(self) -> int:
        return self.gen_bus.size

    @property
    def n_branch(self) -> int:
        return self.br_f.size

    @property
    def slack(self) -> int:
        return int(np.flatnonzero(self.bus_type == SLACK)[0])

    @property
    def s_buses(self) -> np.ndarray:
        """All non-slack buses, ascending internal index (the P-equation set)."""
        return np.flatnonzero(self.bus_type != SLACK)

    @property
    def l_buses(self) -> np.ndarray:
        """PQ buses, ascending internal index (the Q-equation set)."""
        return np.flatnonzero(self.bus_type == PQ)

    @property
    def t_buses(self) -> np.ndarray:
        """Buses with fixed voltage magnitude: PV buses and the slack."""
        return np.flatnonzero(self.bus_type != PQ)

    @property
    def n_s(self) -> int:
        return int(np.sum(self.bus_type != SLACK))

    @property
    def n_l(self) -> int:
        return int(np.sum(self.bus_type == PQ))

    def bus_index(self, bus_id: int) -> int:
        """Internal index of an original bus id."""
        hits = np.flatnonzero(self.bus_id == bus_id)
        if hits.size != 1:
            raise CaseError(f"unknown bus id {bus_id} in case '{self.name}'")
        return int(hits[0])

    def gen_p_bus(self) -> np.ndarray:
        """Total scheduled generator active power per bus, p.u."""
        out = np.zeros(self.n_bus)
        np.add.at(out, self.gen_bus, self.gen_Pg)
        return out

    def gen_q_bus(self) -> np.ndarray:
        """Total scheduled generator reactive power per bus, p.u."""
        out = np.zeros(self.n_bus)
        np.add.at(out, self.gen_bus, self.gen_Qg)
        return out

    def vset_bus(self) -> np.ndarray:
        """Voltage setpoint per bus: generator Vset where present, else Vm0."""
        out = self.Vm0.copy()
        out[self.gen_bus] = self.gen_Vset
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, NetworkCase):
            return NotImplemented
        for f in ("name", "base_mva", "wind_power_factor", "wind_names"):
            if getattr(self, f) != getattr(other, f):
                return False
        for f in ("bus_id", "bus_type", "Pd", "Qd", "Gs", "Bs", "Vm0", "Va0",
                  "base_kv", "gen_bus", "gen_Pg", "gen_Qg", "gen_Vset",
                  "gen_cap", "gen_is_agc", "br_f", "br_t", "br_r", "br_x",
                  "br_b", "br_tap", "br_shift", "br_status",
                  "wind_bus", "wind_col"):
            if not np.array_equal(getattr(self, f), getattr(other, f)):
                return False
        return True


_BLOCK_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([0-9eE+.\-]+)\s*;")


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_block(name: str, body: str, start_line: int, min_cols: int) -> np.ndarray:
    rows = []
    ncols = None
    for k, raw in enumerate(re.split(r"[;\n]", body)):
        raw = raw.strip().rstrip(",")
        if not raw:
            continue
        toks = re.split(r"[,\s]+", raw)
        try:
            vals = [float(t) for t in toks]
        except ValueError as exc:
            line = start_line + body[: body.find(raw)].count("\n")
            raise CaseError(
                f"bad token in mpc.{name} near line {line}: {exc}") from None
        if ncols is None:
            ncols = len(vals)
        elif len(vals) != ncols:
            raise CaseError(
                f"ragged row in mpc.{name} (row {len(rows)}: "
                f"{len(vals)} columns, expected {ncols})")
        rows.append(vals)
    if not rows:
        raise CaseError(f"mpc.{name} is empty")
    arr = np.asarray(rows, dtype=float)
    if arr.shape[1] < min_cols:
        raise CaseError(
            f"mpc.{name} has {arr.shape[1]} columns, needs at least {min_cols}")
    if not np.all(np.isfinite(arr)):
        raise CaseError(f"non-finite value in mpc.{name}")
    return arr


def parse_case(text: str, name: str = "case") -> NetworkCase:
    """Parse MATPOWER case text into a :class:`NetworkCase`.

    Raises
    ------
    CaseError
        On missing sections, malformed numbers (with a line number), duplicate
        bus ids, a slack count other than one, dangling branch endpoints,
        zero-impedance in-service branches, PV buses without a generator, or a
        disconnected in-service graph.
    """
    clean = _strip_comments(text)
    m = _SCALAR_RE.search(clean)
    if m is None:
        raise CaseError("missing mpc.baseMVA")
    base_mva = float(m.group(1))
    if base_mva <= 0:
        raise CaseError(f"baseMVA must be positive, got {base_mva}")

    blocks = {}
    for bm in _BLOCK_RE.finditer(clean):
        blocks[bm.group(1)] = (bm.group(2), clean[: bm.start(2)].count("\n") + 1)
    for required in ("bus", "gen", "branch"):
        if required not in blocks:
            raise CaseError(f"missing section mpc.{required}")

    bus = _parse_block("bus", *blocks["bus"], min_cols=13)
    gen = _parse_block("gen", *blocks["gen"], min_cols=10)
    branch = _parse_block("branch", *blocks["branch"], min_cols=11)

    bus_id = bus[:, 0].astype(int)
    if np.unique(bus_id).size != bus_id.size:
        raise CaseError("duplicate bus ids")
    bus_type = bus[:, 1].astype(int)
    bad = ~np.isin(bus_type, (PQ, PV, SLACK))
    if np.any(bad):
        raise CaseError(
            f"unsupported bus type {bus_type[bad][0]} at bus {bus_id[bad][0]}")
    if np.sum(bus_type == SLACK) != 1:
        raise CaseError(
            f"expected exactly one slack bus, found {np.sum(bus_type == SLACK)}")
    id2int = {int(b): i for i, b in enumerate(bus_id)}

    def to_internal(col: np.ndarray, what: str) -> np.ndarray:
        out = np.empty(col.size, dtype=int)
        for i, b in enumerate(col.astype(int)):
            if b not in id2int:
                raise CaseError(f"{what} references unknown bus {b}")
            out[i] = id2int[b]
        return out

    on = gen[:, 7] > 0
    gen = gen[on]
    gen_bus = to_internal(gen[:, 0], "generator")

    br_status = branch[:, 10].astype(int)
    br_f = to_internal(branch[:, 0], "branch")
    br_t = to_internal(branch[:, 1], "branch")
    zero_z = (branch[:, 2] == 0) & (branch[:, 3] == 0) & (br_status == 1)
    if np.any(zero_z):
        k = int(np.flatnonzero(zero_z)[0])
        raise CaseError(
            f"zero-impedance in-service branch {bus_id[br_f[k]]}-{bus_id[br_t[k]]}")

    tap = branch[:, 8].copy()
    tap[tap == 0.0] = 1.0

    case = NetworkCase(
        name=name,
        base_mva=base_mva,
        bus_id=bus_id,
        bus_type=bus_type,
        Pd=bus[:, 2] / base_mva,
        Qd=bus[:, 3] / base_mva,
        Gs=bus[:, 4] / base_mva,
        Bs=bus[:, 5] / base_mva,
        Vm0=bus[:, 7].copy(),
        Va0=np.radians(bus[:, 8]),
        base_kv=bus[:, 9].copy(),
        gen_bus=gen_bus,
        gen_Pg=gen[:, 1] / base_mva,
        gen_Qg=gen[:, 2] / base_mva,
        gen_Vset=gen[:, 5].copy(),
        gen_cap=gen[:, 8] / base_mva,
        gen_is_agc=np.zeros(gen_bus.size, dtype=bool),
        br_f=br_f,
        br_t=br_t,
        br_r=branch[:, 2].copy(),
        br_x=branch[:, 3].copy(),
        br_b=branch[:, 4].copy(),
        br_tap=tap,
        br_shift=np.radians(branch[:, 9]),
        br_status=br_status,
        raw_tables=(base_mva, bus, gen, branch),
    )
    validate_case(case)
    return case


def validate_case(case: NetworkCase) -> None:
    """Consistency checks beyond raw parsing; raises :class:`CaseError`."""
    has_gen = np.zeros(case.n_bus, dtype=bool)
    has_gen[case.gen_bus] = True
    pv_nogen = (case.bus_type == PV) & ~has_gen
    if np.any(pv_nogen):
        raise CaseError(
            f"PV bus {case.bus_id[pv_nogen][0]} has no in-service generator")
    if not has_gen[case.slack]:
        raise CaseError("slack bus has no in-service generator")

    on = case.br_status == 1
    n = case.n_bus
    adj = sp.coo_matrix(
        (np.ones(int(on.sum())), (case.br_f[on], case.br_t[on])), shape=(n, n))
    ncomp = sp.csgraph.connected_components(adj, directed=False)[0]
    if ncomp != 1:
        raise CaseError(f"in-service network is disconnected ({ncomp} islands)")

    if case.wind_bus.size and np.any(case.wind_bus == case.slack):
        raise CaseError("wind farm mapped to the slack bus")


def load_case(path: str | Path, sidecar: str | Path | None = None,
              wind_names: tuple | None = None) -> NetworkCase:
    """Load a case file, optionally applying a sidecar config."""
    path = Path(path)
    case = parse_case(path.read_text(), name=path.stem)
    if sidecar is not None:
        cfg = load_sidecar(sidecar)
        apply_sidecar(case, cfg, wind_names=wind_names)
    return case


def load_sidecar(path: str | Path) -> dict:
    """Read a sidecar JSON config."""
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"sidecar {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CaseError(f"sidecar {path} must hold a JSON object")
    return cfg


def apply_sidecar(case: NetworkCase, cfg: dict,
                  wind_names: tuple | None = None) -> NetworkCase:
    """Mark AGC units and attach wind farms per the sidecar config.

    ``wind_names`` are the wind history column names, required when the
    sidecar addresses columns by name.  Mutates and returns ``case``.
    """
    agc = cfg.get("agc_buses", [])
    is_agc = np.zeros(case.n_gen, dtype=bool)
    for b in agc:
        idx = case.bus_index(int(b))
        hits = case.gen_bus == idx
        if not np.any(hits):
            raise CaseError(f"agc_buses: no generator at bus {b}")
        is_agc |= hits
    case.gen_is_agc = is_agc

    farms = cfg.get("wind_farms", [])
    wind_bus = np.zeros(len(farms), dtype=int)
    wind_col = np.zeros(len(farms), dtype=int)
    names = []
    for k, farm in enumerate(farms):
        wind_bus[k] = case.bus_index(int(farm["bus"]))
        col = farm["column"]
        if isinstance(col, str):
            if wind_names is None:
                raise CaseError(
                    f"wind farm column '{col}' is a name but no wind history "
                    "columns were provided")
            if col not in wind_names:
                raise CaseError(f"wind history has no column '{col}'")
            wind_col[k] = wind_names.index(col)
            names.append(col)
        else:
            wind_col[k] = int(col)
            names.append(wind_names[wind_col[k]] if wind_names else f"col{col}")
    case.wind_bus = wind_bus
    case.wind_col = wind_col
    case.wind_names = tuple(names)
    case.wind_power_factor = float(cfg.get("wind_power_factor", 0.85))
    if not 0.0 < case.wind_power_factor <= 1.0:
        raise CaseError(
            f"wind_power_factor must be in (0, 1], got {case.wind_power_factor}")
    validate_case(case)
    return case


def _exact_preimage(target: float, x0: float, forward) -> float:
    """A float near ``x0`` that ``forward`` maps exactly onto ``target``.

    Parsing divides by the base (or converts degrees to radians); emitting the
    naive product can land one ulp off, so nudge until the round trip is exact.
    """
    x = float(x0)
    if forward(x) == target:
        return x
    for _ in range(4):
        up = np.nextafter(x, np.inf)
        if forward(up) == target:
            return up
        down = np.nextafter(x, -np.inf)
        if forward(down) == target:
            return down
        x = up if abs(forward(up) - target) < abs(forward(down) - target) else down
    return x


def serialize(case: NetworkCase) -> str:
    """Emit MATPOWER case text that reparses to an equal :class:`NetworkCase`.

    Cases that came from a file re-emit their original table values verbatim,
    which makes the round trip exact.  Constructed cases emit converted
    values; conversion back is exact up to the representability of the
    original-unit floats (the generator script canonicalizes through a parse).
    """
    mva = case.base_mva

    def fmt(row) -> str:
        return "\t" + "\t".join(f"{v:.17g}" for v in row) + ";"

    header = [f"function mpc = {case.name}", "mpc.version = '2';", "",
              f"mpc.baseMVA = {mva:.17g};", ""]

    if case.raw_tables is not None:
        _, bus, gen, branch = case.raw_tables
        lines = list(header)
        for name, table in (("bus", bus), ("gen", gen), ("branch", branch)):
            lines.append(f"mpc.{name} = [")
            lines.extend(fmt(row) for row in table)
            lines += ["];", ""]
        return "\n".join(lines)

    def mw(v_pu: float) -> float:
        return _exact_preimage(v_pu, v_pu * mva, lambda x: x / mva)

    def deg(v_rad: float) -> float:
        return _exact_preimage(v_rad, float(np.degrees(v_rad)),
                               lambda x: float(np.radians(x)))

    lines = header + ["mpc.bus = ["]
    for i in range(case.n_bus):
        lines.append(fmt([case.bus_id[i], case.bus_type[i], mw(case.Pd[i]),
                          mw(case.Qd[i]), mw(case.Gs[i]), mw(case.Bs[i]),
                          1, case.Vm0[i], deg(case.Va0[i]),
                          case.base_kv[i], 1, 1.1, 0.9]))
    lines += ["];", "", "mpc.gen = ["]
    for g in range(case.n_gen):
        lines.append(fmt([case.bus_id[case.gen_bus[g]], mw(case.gen_Pg[g]),
                          mw(case.gen_Qg[g]), 9999, -9999, case.gen_Vset[g],
                          mva, 1, mw(case.gen_cap[g]), 0]))
    lines += ["];", "", "mpc.branch = ["]
    for k in range(case.n_branch):
        tap = case.br_tap[k]
        lines.append(fmt([case.bus_id[case.br_f[k]], case.bus_id[case.br_t[k]],
                          case.br_r[k], case.br_x[k], case.br_b[k], 0, 0, 0,
                          0.0 if tap == 1.0 else tap,
                          deg(case.br_shift[k]), case.br_status[k],
                          -360, 360]))
    lines += ["];", ""]
    return "\n".join(lines)


@dataclass
class Admittance:
    """Bus admittance matrices and branch primitives for in-service branches.

    ``G`` and ``B`` are the real and imaginary parts of the bus admittance
    matrix; ``B_noshunt`` omits line charging and bus shunt susceptance (the
    form the linearized angle equations need).  Dense ndarrays up to
    ``DENSE_BUS_LIMIT`` buses, CSR above.
    """

    G: object
    B: object
    B_noshunt: object
    br_rows: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.G)


def build_admittance(case: NetworkCase) -> Admittance:
    """Assemble the bus admittance matrix from in-service branches and shunts."""
    on = np.flatnonzero(case.br_status == 1)
    f = case.br_f[on]
    t = case.br_t[on]
    ys = 1.0 / (case.br_r[on] + 1j * case.br_x[on])
    bc = case.br_b[on] / 2.0
    tap = case.br_tap[on] * np.exp(1j * case.br_shift[on])

    ytt = ys + 1j * bc
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap

    n = case.n_bus
    diag_sh = case.Gs + 1j * case.Bs

    def assemble(y_ff, y_tt, extra_diag):
        rows = np.concatenate([f, f, t, t, np.arange(n)])
        cols = np.concatenate([f, t, f, t, np.arange(n)])
        vals = np.concatenate([y_ff, yft, ytf, y_tt, extra_diag])
        Y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        return Y

    Y = assemble(yff, ytt, diag_sh)
    yff_ns = ys / (tap * np.conj(tap))
    Yns = assemble(yff_ns, ys, np.zeros(n, dtype=complex))

    if n <= DENSE_BUS_LIMIT:
        Yd = Y.toarray()
        return Admittance(G=Yd.real, B=Yd.imag,
                          B_noshunt=Yns.toarray().imag,
                          br_rows=on, yff=yff, yft=yft, ytf=ytf, ytt=ytt)
    return Admittance(G=sp.csr_matrix(Y.real), B=sp.csr_matrix(Y.imag),
                      B_noshunt=sp.csr_matrix(Yns.imag),
                      br_rows=on, yff=yff, yft=yft, ytf=ytf, ytt=ytt)


def read_wind_csv(path: str | Path) -> tuple[tuple, np.ndarray]:
    """Read a wind history CSV: header of farm names, one row per sample.

    Returns ``(names, history)`` with ``history`` of shape (samples, farms),
    active power per farm in p.u. on the system base.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            names = tuple(s.strip() for s in next(reader))
        except StopIteration:
            raise CaseError(f"wind history {path} is empty") from None
        rows = []
        for k, row in enumerate(reader):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise CaseError(
                    f"wind history {path} row {k + 2}: {exc}") from None
    if not rows:
        raise CaseError(f"wind history {path} has no samples")
    if len({len(r) for r in rows}) != 1:
        raise CaseError(f"wind history {path} has ragged rows")
    hist = np.asarray(rows)
    if hist.shape[1] != len(names):
        raise CaseError(
            f"wind history {path}: {hist.shape[1]} columns vs "
            f"{len(names)} header names")
    if not np.all(np.isfinite(hist)):
        raise CaseError(f"wind history {path} contains non-finite values")
    return names, hist


def write_wind_csv(path: str | Path, names, history: np.ndarray) -> None:
    """Write a wind history CSV (inverse of :func:`read_wind_csv`)."""
    history = np.atleast_2d(np.asarray(history, dtype=float))
    if history.shape[1] != len(names):
        raise ValueError("history width does not match the number of names")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names))
        for row in history:
            writer.writerow([f"{v:.17g}" for v in row])
