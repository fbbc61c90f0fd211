"""Command-line front end: reproducible batch runs of the pipeline, the
Monte Carlo benchmark, and the wind-history generator.

Artifacts are plot-ready data files; every one declares the hash of the
configuration that produced it.  All randomness flows from the named seeds.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import control, gmm, netcase, plf, windgen
from .acpf import AcPowerFlowError
from .netcase import CaseError

CDF_GRID_POINTS = 121
CDF_GRID_SPAN = 4.5  # standard deviations each side


class UsageError(Exception):
    """Configuration problems: bad flags, missing files, invalid sidecars."""


@dataclass
class RunConfig:
    case_path: str
    sidecar_path: str | None
    wind_path: str
    method: str
    L: int | None
    J: int
    H: int
    correction: str
    seed_gmm: int
    seed_sampling: int
    seed_correction: int
    seed_benchmark: int
    out_dir: str
    threads: int | None
    benchmark_n: int


def config_hash(cfg: RunConfig) -> str:
    """Hash of the semantic configuration (where outputs go and how many
    threads compute them cannot change the numbers)."""
    payload = {k: v for k, v in asdict(cfg).items()
               if k not in ("out_dir", "threads")}
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, sort_keys=True) + "\n")


def _load_inputs(cfg: RunConfig):
    for p, what in ((cfg.case_path, "case file"),
                    (cfg.wind_path, "wind history")):
        if not Path(p).is_file():
            raise UsageError(f"{what} not found: {p}")
    if cfg.sidecar_path is not None and not Path(cfg.sidecar_path).is_file():
        raise UsageError(f"sidecar not found: {cfg.sidecar_path}")
    try:
        names, hist = netcase.read_wind_csv(cfg.wind_path)
        case = netcase.load_case(cfg.case_path, cfg.sidecar_path,
                                 wind_names=names)
        sidecar = (netcase.load_sidecar(cfg.sidecar_path)
                   if cfg.sidecar_path else {})
        params = control.params_from_config(case, sidecar.get("control", {}))
    except (CaseError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if case.wind_bus.size == 0:
        raise UsageError(
            "no wind farms configured; the sidecar must list wind_farms")
    return case, params, names, hist


def _state_keys(case: netcase.NetworkCase):
    ang = [("angle", f"bus{int(case.bus_id[b])}") for b in case.s_buses]
    mag = [("voltage", f"bus{int(case.bus_id[b])}") for b in case.l_buses]
    flw = [("flow", f"br{k + 1}:{int(case.bus_id[case.br_f[k]])}-"
           f"{int(case.bus_id[case.br_t[k]])}") for k in range(case.n_branch)]
    return ang + mag, flw


def _write_moments_csv(path: Path, chash: str, case, result: plf.PlfResult):
    states, flows = _state_keys(case)
    lines = [f"# config_hash={chash}", "kind,key,mean,variance"]
    for (kind, key), m, v in zip(states, result.state_mean, result.state_var):
        lines.append(f"{kind},{key},{float(m)!r},{float(v)!r}")
    for (kind, key), m, v in zip(flows, result.flow_mean, result.flow_var):
        lines.append(f"{kind},{key},{float(m)!r},{float(v)!r}")
    path.write_text("\n".join(lines) + "\n")


def _write_cdf_grid(path: Path, chash: str, case, result: plf.PlfResult):
    states, flows = _state_keys(case)
    lines = [f"# config_hash={chash}", "kind,key,value,cdf"]

    def emit(keys, g, means, variances):
        for k, (kind, key) in enumerate(keys):
            sd = float(np.sqrt(max(variances[k], 0.0)))
            if sd < 1e-9:
                continue
            t = np.linspace(means[k] - CDF_GRID_SPAN * sd,
                            means[k] + CDF_GRID_SPAN * sd, CDF_GRID_POINTS)
            c = gmm.marginal_cdf(g, k, t)
            for tv, cv in zip(t, c):
                lines.append(f"{kind},{key},{float(tv)!r},{float(cv)!r}")

    emit(states, result.y_gmm, result.state_mean, result.state_var)
    emit(flows, result.flow_gmm, result.flow_mean, result.flow_var)
    path.write_text("\n".join(lines) + "\n")


def cmd_run(cfg: RunConfig) -> int:
    case, params, names, hist = _load_inputs(cfg)
    try:
        pconf = plf.PipelineConfig(
            method=cfg.method, L=cfg.L, J=cfg.J, H=cfg.H,
            correction=cfg.correction, seed_gmm=cfg.seed_gmm,
            seed_sampling=cfg.seed_sampling,
            seed_correction=cfg.seed_correction)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    t0 = time.perf_counter()
    result = plf.run_algorithm1(case, params, hist, pconf)
    total = time.perf_counter() - t0

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)

    rd = plf.result_to_dict(result)
    rd["config_hash"] = chash
    _write_json(out / "result.json", rd)
    _write_moments_csv(out / "moments.csv", chash, case, result)
    _write_cdf_grid(out / "cdf_grid.csv", chash, case, result)

    prov = dict(result.provenance)
    prov["timings"]["total"] = total
    _write_json(out / "provenance.json", {
        "config": asdict(cfg),
        "config_hash": chash,
        "artifacts": ["result.json", "moments.csv", "cdf_grid.csv"],
        **prov,
    })
    print(f"run: {case.name} {cfg.method} L={pconf.L} J={pconf.J} "
          f"-> {out} ({total:.2f}s)")
    return 0


def cmd_benchmark(cfg: RunConfig, result_path: str | None,
                  write_samples: bool) -> int:
    case, params, names, hist = _load_inputs(cfg)
    if cfg.benchmark_n < 1000:
        raise UsageError(
            f"benchmark needs n >= 1000 for stable metrics, "
            f"got {cfg.benchmark_n}")
    prior = None
    if result_path is not None:
        if not Path(result_path).is_file():
            raise UsageError(f"prior result not found: {result_path}")
        prior = json.loads(Path(result_path).read_text())

    x_gmm = gmm.em_fit(hist, cfg.J, cfg.seed_gmm)
    bench = plf.acmc_benchmark(case, params, x_gmm, cfg.benchmark_n,
                               cfg.seed_benchmark)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    _write_json(out / "benchmark.json", {
        "config_hash": chash,
        "case": case.name,
        "n": bench.n,
        "seed_benchmark": cfg.seed_benchmark,
        "segment_counts": bench.segment_counts.tolist(),
        "exceeded_count": bench.exceeded_count,
        "resampled": bench.resampled,
        "wall_time": bench.wall_time,
        "moments": {
            "state_mean": bench.state_mean.tolist(),
            "state_var": bench.state_var.tolist(),
            "flow_mean": bench.flow_mean.tolist(),
            "flow_var": bench.flow_var.tolist(),
        },
    })
    if write_samples:
        states, flows = _state_keys(case)
        header = ",".join(key for _, key in states + flows)
        mat = np.hstack([bench.states, bench.flows])
        with (out / "samples.csv").open("w") as fh:
            fh.write(f"# config_hash={chash}\n{header}\n")
            np.savetxt(fh, mat, delimiter=",", fmt="%.10g")

    if prior is not None:
        result = _result_from_dict(prior)
        mc = plf.metrics_cdf_rmse(result, bench, case.n_s)
        mm = plf.metrics_moments(result, bench, case.n_s)
        runtimes = {"benchmark_wall": bench.wall_time}
        prov_path = Path(result_path).with_name("provenance.json")
        if prov_path.is_file():
            prov = json.loads(prov_path.read_text())
            total = prov.get("timings", {}).get("total")
            if total is not None:
                runtimes["pipeline_wall"] = total
        _write_json(out / "metrics.json", {
            "config_hash": chash,
            "case": case.name,
            "n": bench.n,
            "cdf_rmse": {
                "angle_avg": mc["angle_rmse_avg"],
                "voltage_avg": mc["voltage_rmse_avg"],
                "flow_avg": mc["flow_rmse_avg"],
                "state": [None if not np.isfinite(v) else v
                          for v in mc["state_rmse"]],
                "flow": [None if not np.isfinite(v) else v
                         for v in mc["flow_rmse"]],
            },
            "moment_errors": mm,
            "runtimes": runtimes,
        })
    print(f"benchmark: {case.name} n={bench.n} "
          f"({bench.wall_time:.2f}s, resampled={bench.resampled}) -> {out}")
    return 0


def _result_from_dict(d: dict) -> plf.PlfResult:
    """Rebuild the pieces the metrics need from a result.json payload."""
    y_gmm = gmm.from_dict(d["y_gmm"])
    flow_gmm = gmm.from_dict(d["flow_gmm"])
    mom = d["moments"]
    corr = d["correction"]
    ny = y_gmm.dim
    nbr = flow_gmm.dim
    coeffs = plf.CorrectionCoeffs(
        mode=corr["mode"],
        rho=np.asarray(corr["rho"], dtype=float).reshape(3, ny),
        varsigma=np.asarray(corr["varsigma"], dtype=float).reshape(3, ny),
        flow_rho=np.asarray(corr["flow_rho"], dtype=float).reshape(3, nbr),
        flow_varsigma=np.asarray(corr["flow_varsigma"],
                                 dtype=float).reshape(3, nbr),
        h=int(corr["h"]),
        fitted=np.asarray(corr["fitted"], dtype=int))
    return plf.PlfResult(
        y_gmm=y_gmm, flow_gmm=flow_gmm,
        segment_probs=np.asarray(d["segment_probs"], dtype=float),
        method=d["method"], L=int(d["L"]), J=int(d["J"]), correction=coeffs,
        state_mean=np.asarray(mom["state_mean"], dtype=float),
        state_var=np.asarray(mom["state_var"], dtype=float),
        flow_mean=np.asarray(mom["flow_mean"], dtype=float),
        flow_var=np.asarray(mom["flow_var"], dtype=float))


def cmd_windgen(preset_name: str | None, spec_path: str | None,
                out_dir: str, n: int | None, seed: int | None,
                scale: float) -> int:
    if (preset_name is None) == (spec_path is None):
        raise UsageError("windgen needs exactly one of --preset or --spec")
    try:
        if preset_name is not None:
            spec = windgen.preset(preset_name,
                                  scale=scale,
                                  n_samples=n if n is not None else 8760,
                                  seed=seed if seed is not None else 0)
        else:
            if not Path(spec_path).is_file():
                raise UsageError(f"spec file not found: {spec_path}")
            raw = json.loads(Path(spec_path).read_text())
            spec = windgen.spec_from_dict(raw)
            if n is not None:
                spec.n_samples = n
            if seed is not None:
                spec.seed = seed
    except UsageError:
        raise
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid wind spec: {exc}") from exc

    hist = windgen.generate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    netcase.write_wind_csv(out / "wind.csv", spec.names, hist)
    _write_json(out / "wind_truth.json", windgen.spec_to_dict(spec))
    print(f"windgen: {spec.n_farms} farms x {spec.n_samples} samples -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="plfgrid",
        description="Analytical probabilistic load flow for transmission "
                    "grids with frequency regulation")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, need_case=True):
        p.add_argument("--case", required=need_case, help="case file (.m)")
        p.add_argument("--sidecar", help="JSON sidecar: control params, "
                       "AGC units, wind farm placement")
        p.add_argument("--wind", required=need_case,
                       help="wind history CSV (per-unit farm outputs)")
        p.add_argument("--J", type=int, default=5,
                       help="mixture components (default 5)")
        p.add_argument("--seed-gmm", type=int, default=1)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int,
                       help="cap numerical library threads")

    run = sub.add_parser("run", help="run the analytical pipeline")
    common(run)
    run.add_argument("--method", choices=("direct", "indirect"),
                     default="indirect")
    run.add_argument("--L", type=int, help="aggregate sample count "
                     "(default 2000 direct, 10000 indirect)")
    run.add_argument("--H", type=int, default=12,
                     help="correction fitting samples per segment")
    run.add_argument("--correction",
                     choices=("polynomial", "constant", "none"),
                     default="polynomial")
    run.add_argument("--seed-sampling", type=int, default=2)
    run.add_argument("--seed-correction", type=int, default=3)

    bench = sub.add_parser("benchmark", help="AC Monte Carlo reference")
    common(bench)
    bench.add_argument("--n", type=int, default=20000,
                       help="Monte Carlo sample count (>= 1000)")
    bench.add_argument("--seed-benchmark", type=int, default=4)
    bench.add_argument("--result", help="prior result.json to score "
                       "against the benchmark")
    bench.add_argument("--samples", action="store_true",
                       help="also write raw samples.csv")

    wg = sub.add_parser("windgen", help="generate a synthetic wind history")
    wg.add_argument("--preset", help=f"one of {windgen.PRESET_NAMES}")
    wg.add_argument("--spec", help="wind spec JSON file")
    wg.add_argument("--scale", type=float, default=1.0,
                    help="preset magnitude multiplier")
    wg.add_argument("--n", type=int, help="sample count")
    wg.add_argument("--seed", type=int)
    wg.add_argument("--out", default="out", help="output directory")
    return ap


def _threads_context(threads: int | None):
    if threads is None:
        import contextlib
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError as exc:
        raise UsageError(
            "--threads needs the threadpoolctl package") from exc
    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "windgen":
            return cmd_windgen(args.preset, args.spec, args.out, args.n,
                               args.seed, args.scale)
        cfg = RunConfig(
            case_path=args.case,
            sidecar_path=args.sidecar,
            wind_path=args.wind,
            method=getattr(args, "method", "indirect"),
            L=getattr(args, "L", None),
            J=args.J,
            H=getattr(args, "H", 12),
            correction=getattr(args, "correction", "polynomial"),
            seed_gmm=args.seed_gmm,
            seed_sampling=getattr(args, "seed_sampling", 2),
            seed_correction=getattr(args, "seed_correction", 3),
            seed_benchmark=getattr(args, "seed_benchmark", 4),
            out_dir=args.out,
            threads=args.threads,
            benchmark_n=getattr(args, "n", 20000))
        with _threads_context(cfg.threads):
            if args.command == "run":
                return cmd_run(cfg)
            return cmd_benchmark(cfg, getattr(args, "result", None),
                                 getattr(args, "samples", False))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CaseError, AcPowerFlowError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
