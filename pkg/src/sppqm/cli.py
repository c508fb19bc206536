"""Command line front end: figure tables, mode data and memory simulations.

Every output file starts with '#' metadata lines (tool version, config hash,
group-velocity policy and the resolved config) so a run can be reproduced
from its artifacts alone.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .dynamics import PulseSpec, SimGrid, hold, length_for_od, run_retrieval, run_storage, echo_metrics
from .errors import ConfigurationError, DomainError, SppqmError, UnsupportedUnitError
from .materials import DielectricParams, DrudeModel, MaterialPoint, convert_units
from .memory import (
    DriveConfig,
    GaussianBroadening,
    Homogeneous,
    RamanEnsemble,
    coupling_chi,
    crib_plan,
    optical_density_map,
)
from .sppmode import (
    FIG2_EPS_IM,
    InterfaceSpec,
    low_loss_check,
    magnetic_suppression,
    quantization_length_limit,
    solve_mode,
    sweep_figure1,
    sweep_figure2,
)

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2
SWEEP_SUCCESS_FRACTION = 0.9

DEFAULTS = {
    "materials": {
        "eps1": 1.31,
        "mu1": 1.0,
        "eps2": {"re": -1.34, "im": 1e-4},
        "mu2": 0.0,
        "lambda_o": {"value": 285.0, "unit": "nm"},
        "drude": {"eps_inf": 2.0, "omega_e": 1.37e16, "gamma_e": 0.0, "mu_inf": 2.0,
                  "omega_mu": 1.37e16 / 1.67},
        "vg_policy": "phase_velocity",
        "lz_over_lambda": 0.55,
    },
    "sweep": {
        "eps_r": {"start": -2.0, "stop": -1.32, "num": 69},
        "eps_im": list(FIG2_EPS_IM),
    },
    "memory": {
        "n_o": {"value": 2e19, "unit": "cm^-3"},
        "d13": {"value": 1e-3, "unit": "e*a0"},
        "omega_cp": 1e7,
        "delta_p": 1e7,
        "delta_pR": 7e7,
        "gamma21": 1e4,
        "gamma31": 0.0,
        "xi_p_over_lambda": 0.025,
        "xi_cp_over_lambda": 0.025,
        "lx_fraction": 0.1,
        "chi_convention": "gaussian",
        "nu": {"start": 0.0, "stop": 1e8, "num": 201},
        "zo_over_lambda": {"start": 0.0, "stop": 0.5, "num": 51},
        "od_threshold": 3.0,
        "broadening": {"sigma21": 0.0, "sigma31": 0.0},
    },
    "dynamics": {
        # far-detuned regime: Stark width Omega^2/Delta = 4e5 rad/s
        "omega_cp": math.sqrt(4e5 * 5e6),
        "delta_p": 5e6,
        "delta_pR": 0.55 * 4e5,
        "gamma21": 0.0,
        "gamma31": 0.0,
        "zo_over_lambda": 0.3,
        "target_od": 4.0,
        "L_x": None,
        "N_x": 20,
        "N_z": 16,
        "n_inh": 5,
        "dt": 1.9e-8,
        "T": 2.2e-4,
        "hold_time": 0.0,
        "ramp_time": 0.0,
        "pulse": {"shape": "gaussian", "duration": 4 * math.log(2) / (0.2 * 4e5),
                  "amplitude": 1.0, "center": None, "carrier_offset": 0.0},
    },
    "output": {"dir": "out", "formats": ["csv", "json"]},
}

_SI_UNIT = {"n_o": "m^-3", "d13": "C*m", "lambda_o": "m"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def _schema() -> dict:
    with resources.files(__package__).joinpath("config_schema.json").open("r", encoding="utf-8") as fh:
        return json.load(fh)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    """Validate a user config against the schema and merge it over the defaults."""
    user = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
    validator = jsonschema.Draft202012Validator(_schema())
    try:
        validator.validate(user)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"invalid config at {where}: {exc.message}") from None
    resolved = _merge(DEFAULTS, user)
    validator.validate(resolved)
    return resolved


def recorded_config(cfg: dict) -> dict:
    """Config as embedded in outputs; the output directory is not part of a run's identity."""
    rec = copy.deepcopy(cfg)
    rec.get("output", {}).pop("dir", None)
    return rec


def config_hash(cfg: dict) -> str:
    blob = json.dumps(recorded_config(cfg), sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _quantity(q, name):
    if isinstance(q, dict):
        try:
            return float(convert_units(q["value"], q["unit"], _SI_UNIT[name]))
        except UnsupportedUnitError as exc:
            raise UsageError(f"{name}: {exc}") from None
    return float(q)


def _grid(r: dict, name: str) -> np.ndarray:
    if r["num"] < 1:
        raise UsageError(f"{name} grid is empty")
    return np.linspace(r["start"], r["stop"], r["num"])


def build_interface(cfg: dict):
    m = cfg["materials"]
    diel = DielectricParams(m["eps1"], m["mu1"])
    lam = _quantity(m["lambda_o"], "lambda_o")
    spec = InterfaceSpec(diel, MaterialPoint(complex(m["eps2"]["re"], m["eps2"]["im"]), m["mu2"]), lam)
    drude = DrudeModel(**m["drude"]) if m.get("drude") else None
    if m["vg_policy"] == "finite_difference":
        if drude is None:
            raise UsageError("finite_difference group velocity needs a drude model")
        model = drude
    else:
        model = None
    lz = m["lz_over_lambda"] * lam if m["lz_over_lambda"] is not None else None
    if lz is None and drude is None:
        raise UsageError("lz_over_lambda is null and no drude model is given")
    mode = solve_mode(spec, model=model, lz=lz)
    if mode.Lz is None:
        mode = solve_mode(spec, model=drude, lz=None)
    return spec, drude, mode


def build_memory(cfg: dict, spec: InterfaceSpec, z_o: float = 0.0):
    mc = cfg["memory"]
    lam = spec.lambda_o
    b = mc["broadening"]
    broadening = GaussianBroadening(b["sigma21"], b["sigma31"]) if (b["sigma21"] or b["sigma31"]) else Homogeneous()
    ens = RamanEnsemble(
        n_o=_quantity(mc["n_o"], "n_o"), d13=_quantity(mc["d13"], "d13"),
        gamma21=mc["gamma21"], gamma31=mc["gamma31"], z_o=z_o, broadening=broadening,
    )
    drive = DriveConfig(mc["omega_cp"], mc["delta_p"], mc["delta_pR"],
                        mc["xi_p_over_lambda"] * lam, mc["xi_cp_over_lambda"] * lam)
    return ens, drive


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _meta_lines(cfg, command, vg_policy, extra=()):
    lines = [
        f"tool: sppqm {__version__}",
        f"command: {command}",
        f"config_hash: {config_hash(cfg)}",
        f"vg_policy: {vg_policy}",
    ]
    lines += list(extra)
    lines.append("config: " + json.dumps(recorded_config(cfg), sort_keys=True, separators=(",", ":")))
    return lines


def write_csv(path: Path, meta, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in meta:
            fh.write("# " + line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def _provenance(cfg, command, vg_policy) -> dict:
    return {"tool": f"sppqm {__version__}", "command": command, "config_hash": config_hash(cfg),
            "vg_policy": vg_policy, "config": recorded_config(cfg)}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _sweep_command(cfg, out: Path, which: int) -> int:
    m = cfg["materials"]
    eps_r = _grid(cfg["sweep"]["eps_r"], "eps_r")
    eps_im = cfg["sweep"]["eps_im"]
    if not eps_im:
        raise UsageError("eps_im list is empty")
    fn, col = (sweep_figure1, "lx_over_lambda") if which == 1 else (sweep_figure2, "xi1_over_lambda")
    rows = fn(eps_r, eps_im, eps1=m["eps1"], mu1=m["mu1"])
    errors = [f"error: eps_r={_fmt(r.eps_r)} eps_im={_fmt(r.eps_im)}: {r.error}" for r in rows if r.error]
    meta = _meta_lines(cfg, f"fig{which}", "not_used", errors)
    write_csv(out / f"fig{which}.csv", meta, ["eps_r", "eps_im", col],
              [(r.eps_r, r.eps_im, r.value) for r in rows])
    ok = sum(1 for r in rows if not r.error)
    return EXIT_OK if ok >= SWEEP_SUCCESS_FRACTION * len(rows) else EXIT_NUMERIC


def cmd_fig1(cfg, out: Path, args) -> int:
    return _sweep_command(cfg, out, 1)


def cmd_fig2(cfg, out: Path, args) -> int:
    return _sweep_command(cfg, out, 2)


def cmd_fig6(cfg, out: Path, args) -> int:
    spec, _, mode = build_interface(cfg)
    mc = cfg["memory"]
    lam = spec.lambda_o
    ens, drive = build_memory(cfg, spec)
    nu = _grid(mc["nu"], "nu")
    zo = _grid(mc["zo_over_lambda"], "zo_over_lambda") * lam
    L_x = mc["lx_fraction"] * mode.l_x
    chi = coupling_chi(mode, ens, convention=mc["chi_convention"])
    odm = optical_density_map(nu, zo, mode, ens, drive, L_x, chi=chi, threshold=mc["od_threshold"])
    summary = odm.summary(ens.gamma21, lam) if ens.gamma21 > 0 else odm.summary(1.0, lam)
    if ens.gamma21 <= 0:
        summary["capacity"] = None
    rows = []
    for j, z in enumerate(zo):
        for i, v in enumerate(nu):
            rows.append((v, z / lam, odm.od[i, j]))
    meta = _meta_lines(cfg, "fig6", mode.vg_policy, [
        f"chi_p: {_fmt(chi)} (convention {mc['chi_convention']})",
        f"L_x: {_fmt(L_x)}",
        f"failed_cells: {int(odm.error_mask.sum())}",
    ])
    if "csv" in cfg["output"]["formats"]:
        write_csv(out / "fig6.csv", meta, ["nu_rad_per_s", "zo_over_lambda", "od"], rows)
    payload = dict(summary)
    payload.update({"chi_p": chi, "L_x": L_x, "failed_cells": int(odm.error_mask.sum()),
                    "provenance": _provenance(cfg, "fig6", mode.vg_policy)})
    if "json" in cfg["output"]["formats"]:
        write_json(out / "fig6_summary.json", payload)
    return EXIT_OK


def cmd_dispersion(cfg, out: Path, args) -> int:
    spec, drude, mode = build_interface(cfg)
    lam = spec.lambda_o
    diag = low_loss_check(spec)
    payload = {
        "k_par_lambda_over_2pi": mode.k_par * lam / (2 * math.pi),
        "kappa_lambda_over_2pi": mode.kappa * lam / (2 * math.pi),
        "kappa_over_k_par": mode.kappa / mode.k_par,
        "xi1_over_lambda": mode.xi1 / lam,
        "xi2_over_lambda": mode.xi2 / lam,
        "lambda_par_over_lambda": mode.lambda_par / lam,
        "lx_over_lambda": mode.l_x / lam,
        "magnetic_suppression": magnetic_suppression(mode, spec),
        "v_phase": mode.v_phase,
        "v_group": mode.v_group,
        "Lz_over_lambda": mode.Lz / lam if mode.Lz else None,
        "lz_source": mode.lz_source,
        "low_loss": {"loss_ratio": diag.loss_ratio, "detuning_ratio": diag.detuning_ratio,
                     "passed": diag.passed},
        "provenance": _provenance(cfg, "dispersion", mode.vg_policy),
    }
    if drude is not None:
        a, b = quantization_length_limit(drude, spec, mode.xi1)
        payload["Lz_linear_forms_over_lambda"] = [a / lam, b / lam]
    write_json(out / "dispersion.json", payload)
    return EXIT_OK


def _simulation(cfg, out: Path, args, command: str) -> int:
    spec, _, mode = build_interface(cfg)
    lam = spec.lambda_o
    dc = cfg["dynamics"]
    ens, _ = build_memory(cfg, spec, z_o=dc["zo_over_lambda"] * lam)
    ens = RamanEnsemble(ens.n_o, ens.d13, dc["gamma21"], dc["gamma31"], ens.z_o, ens.broadening)
    mc = cfg["memory"]
    drive = DriveConfig(dc["omega_cp"], dc["delta_p"], dc["delta_pR"],
                        mc["xi_p_over_lambda"] * lam, mc["xi_cp_over_lambda"] * lam)
    chi = coupling_chi(mode, ens, convention=mc["chi_convention"])
    p = dc["pulse"]
    pulse = PulseSpec(p["shape"], p["duration"], p["amplitude"], p["center"], p["carrier_offset"])
    if dc["L_x"] is not None:
        L_x = dc["L_x"]
    elif dc["target_od"] is not None:
        L_x = length_for_od(dc["target_od"], p["carrier_offset"], ens, drive, chi)
    else:
        raise UsageError("dynamics needs either L_x or target_od")
    grid = SimGrid(dc["N_x"], L_x, dc["N_z"], 0.0, dc["dt"], dc["T"], dc["n_inh"])
    state = run_storage(grid, mode, ens, drive, pulse, chi=chi)
    retrieve = not args.no_retrieval
    if retrieve:
        state = hold(state, dc["hold_time"], dc["ramp_time"])
        plan = crib_plan(drive, ens, grid.T, pulse.bandwidth)
        state, metrics = run_retrieval(state, plan)
    else:
        metrics = echo_metrics(state)

    extra = [f"chi_p: {_fmt(chi)}", f"L_x: {_fmt(L_x)}"]
    meta = _meta_lines(cfg, command, mode.vg_policy, extra)
    header = ["t", "re_a_in", "im_a_in", "re_a_out", "im_a_out", "stored_excitation"]
    if "csv" in cfg["output"]["formats"]:
        for phase, rec in state.records.items():
            outcol = rec["echo"] if "echo" in rec else rec["a_out"]
            rows = zip(rec["t"], rec["a_in"].real, rec["a_in"].imag, outcol.real, outcol.imag, rec["stored"])
            write_csv(out / f"{phase}_records.csv", meta, header, rows)
        if command == "crib-demo" and retrieve:
            rec = state.records["retrieval"]
            rows = zip(rec["t"], rec["echo"].real, rec["echo"].imag,
                       rec["reference"].real, rec["reference"].imag)
            write_csv(out / "crib_overlay.csv", meta,
                      ["t", "re_echo", "im_echo", "re_reversed_input", "im_reversed_input"], rows)
    payload = metrics.as_dict()
    payload.update({
        "L_x": L_x,
        "chi_p": chi,
        "adiabatic_ok": state.diagnostics["adiabatic_ok"],
        "s13_at_switch": state.diagnostics.get("s13_at_switch"),
        "provenance": _provenance(cfg, command, mode.vg_policy),
    })
    if "json" in cfg["output"]["formats"]:
        write_json(out / "metrics.json", payload)
    return EXIT_OK


def cmd_simulate(cfg, out: Path, args) -> int:
    return _simulation(cfg, out, args, "simulate")


def cmd_crib_demo(cfg, out: Path, args) -> int:
    return _simulation(cfg, out, args, "crib-demo")


COMMANDS = {
    "fig1": cmd_fig1,
    "fig2": cmd_fig2,
    "fig6": cmd_fig6,
    "dispersion": cmd_dispersion,
    "simulate": cmd_simulate,
    "crib-demo": cmd_crib_demo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sppqm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sppqm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        sp.add_argument("--out", type=Path, default=None, help="output directory (overrides output.dir)")
        sp.add_argument("--od-threshold", type=float, default=None, help="optical density threshold")
        sp.add_argument("--no-retrieval", action="store_true", help="stop after storage")
        sp.add_argument("--seed", type=int, default=None, help="reserved; no stochastic path uses it")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.od_threshold is not None:
            if not args.od_threshold > 0:
                raise UsageError("--od-threshold must be positive")
            cfg["memory"]["od_threshold"] = args.od_threshold
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = args.out if args.out is not None else Path(cfg["output"]["dir"])
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except (UsageError, ConfigurationError, DomainError) as exc:
        print(f"sppqm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SppqmError as exc:
        print(f"sppqm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"sppqm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
