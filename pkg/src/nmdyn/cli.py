"""Batch front-end: YAML run configs, solver dispatch, sweeps, CSV and JSON output.

Config layout (YAML; JSON is accepted as a subset)::

    system: {preset: two_level, omega: 1.0, delta0: 0.0}
    coupling: sigma_z
    bath: {kind: drude, lam: 0.01, gamma: 1.0, beta: 0.1}
    method: heom
    heom: {depth: 8}
    grid: {t_max: 5.0, dt: 0.005}
    initial: excited
    observables: [sigma_z, rho]
    output: {dir: out, name: run}

Matrices are nested lists of ``[re, im]`` pairs. Exit codes: 0 success, 1 failed
comparison, 2 config error, 3 numerical failure, 4 positivity violation (NMQJ),
5 budget refusal.
"""
from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bath.correlation import CorrelationSum, correlation_zero_T, matsubara_expansion
from .bath.spectral import BathSpec, Drude, OhmicFamily, Tabulated
from .core import SIGMA_MINUS, SIGMA_PLUS, SIGMA_X, SIGMA_Y, SIGMA_Z, TimeGrid, Trajectory
from .errors import BudgetError, ConfigError, NmdynError, NumericalError, PositivityViolation

EXIT_OK, EXIT_COMPARE, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_POSITIVITY, EXIT_BUDGET = 0, 1, 2, 3, 4, 5

STOCHASTIC = ("hops_linear", "hops_nonlinear", "sln", "nmqj")
METHODS = ("lindblad", "tcl2", "secular", "heom", "hops_linear", "hops_nonlinear", "sln", "nmqj", "niba",
           "exact_amplitude", "exact_qbm", "chain", "dephasing")

# method block: (required fields, defaults)
METHOD_FIELDS = {
    "lindblad": (("rates",), {"channels": None}),
    "tcl2": ((), {"refine": 8, "budget": 1e8}),
    "secular": ((), {}),
    "heom": (("depth",), {"m_max": None, "terminator": "truncate", "max_ados": 200000}),
    "hops_linear": (("n_traj", "k_max"), {"terminator": True}),
    "hops_nonlinear": (("n_traj", "k_max"), {"terminator": True}),
    "sln": (("n_traj",), {"m_max": None}),
    "nmqj": (("n_traj",), {"rates": "exact"}),
    "niba": ((), {}),
    "exact_amplitude": ((), {"markov_rate": 0.0}),
    "exact_qbm": ((), {}),
    "chain": (("n_sites",), {"n_coeffs": None}),
    "dephasing": ((), {"variant": "analytic", "n_modes": 200}),
}

SYSTEM_KEYS = {
    "two_level": {"preset", "omega", "delta0"},
    "oscillator": {"preset", "omega", "n_max"},
    "custom": {"preset", "H"},
}
BATH_KEYS = {
    "none": {"kind"},
    "drude": {"kind", "lam", "gamma", "omega_max", "beta", "statistics"},
    "ohmic": {"kind", "s", "eta", "omega_c", "cutoff_shape", "omega_max", "beta", "statistics"},
    "tabulated": {"kind", "file", "beta", "statistics"},
    "exponential": {"kind", "terms", "beta", "statistics"},
}
TOP_KEYS = {"system", "coupling", "bath", "method", "grid", "initial", "observables", "seed", "output", "sweep",
            *METHODS}


@dataclass
class RunConfig:
    """Validated run configuration; ``raw`` is the resolved dict echoed into metadata."""

    raw: dict
    H: np.ndarray
    coupling: np.ndarray
    bath: object
    method: str
    options: dict
    grid: TimeGrid
    rho0: np.ndarray
    observables: list
    seed: int | None
    out_dir: Path
    name: str
    sweep: dict | None = None

    @property
    def dim(self) -> int:
        return self.H.shape[0]


@dataclass
class RunResult:
    """Observable time series (complex) with optional standard errors, plus metadata."""

    times: np.ndarray
    columns: dict
    stderr: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


# --- parsing -------------------------------------------------------------------------


def _matrix(value, what: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: matrices are nested lists of [re, im] pairs") from exc
    if arr.ndim == 3 and arr.shape[2] == 2 and arr.shape[0] == arr.shape[1]:
        return arr[..., 0] + 1j * arr[..., 1]
    raise ConfigError(f"{what}: expected a square matrix of [re, im] pairs, got shape {arr.shape}")


def _vector(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 2:
        return arr[:, 0] + 1j * arr[:, 1]
    raise ConfigError(f"{what}: expected a list of [re, im] pairs")


def _beta(value) -> float:
    if value is None or (isinstance(value, str) and value.strip().lower() in ("inf", ".inf", "infinity")):
        return math.inf
    try:
        b = float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bath.beta must be a positive number or 'inf', got {value!r}") from exc
    if not b > 0:
        raise ConfigError("bath.beta must be positive")
    return b


def _unknown(section: dict, allowed, where: str):
    extra = sorted(set(section) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys in {where}: {', '.join(map(str, extra))}")


def _ladder(n: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n)), 1).astype(complex)


def named_operator(name: str, dim: int) -> np.ndarray:
    """Operators by name: Pauli set (d = 2), ladder set (any d), ``population_k``, ``identity``."""
    two = {"sigma_x": SIGMA_X, "sigma_y": SIGMA_Y, "sigma_z": SIGMA_Z, "sigma_minus": SIGMA_MINUS,
           "sigma_plus": SIGMA_PLUS}
    if name in two:
        if dim != 2:
            raise ConfigError(f"operator {name!r} needs a two-level system")
        return two[name].copy()
    a = _ladder(dim)
    ladder = {"a": a, "a_dag": a.conj().T, "n": a.conj().T @ a, "x": (a + a.conj().T) / np.sqrt(2),
              "p": (a - a.conj().T) / (1j * np.sqrt(2)), "identity": np.eye(dim, dtype=complex)}
    if name in ladder:
        return ladder[name]
    if name.startswith("population_"):
        k = int(name.split("_", 1)[1])
        if not 0 <= k < dim:
            raise ConfigError(f"{name!r} is outside the {dim}-dimensional space")
        out = np.zeros((dim, dim), dtype=complex)
        out[k, k] = 1.0
        return out
    raise ConfigError(f"unknown operator {name!r}")


def _operator(spec, dim: int, what: str) -> np.ndarray:
    if isinstance(spec, str):
        return named_operator(spec, dim)
    m = _matrix(spec, what)
    if m.shape != (dim, dim):
        raise ConfigError(f"{what} must be {dim}x{dim}")
    return m


def _system(sec) -> tuple[np.ndarray, dict]:
    if not isinstance(sec, dict):
        raise ConfigError("system must be a mapping")
    preset = sec.get("preset", "two_level")
    if preset not in SYSTEM_KEYS:
        raise ConfigError(f"unknown system preset {preset!r} (two_level, oscillator, custom)")
    _unknown(sec, SYSTEM_KEYS[preset], "system")
    if preset == "two_level":
        res = {"preset": preset, "omega": float(sec.get("omega", 1.0)), "delta0": float(sec.get("delta0", 0.0))}
        H = 0.5 * res["omega"] * SIGMA_Z - 0.5 * res["delta0"] * SIGMA_X
    elif preset == "oscillator":
        if "n_max" not in sec:
            raise ConfigError("system preset 'oscillator' needs field 'n_max'")
        res = {"preset": preset, "omega": float(sec.get("omega", 1.0)), "n_max": int(sec["n_max"])}
        if res["n_max"] < 1:
            raise ConfigError("system.n_max must be >= 1")
        a = _ladder(res["n_max"] + 1)
        H = res["omega"] * (a.conj().T @ a)
    else:
        if "H" not in sec:
            raise ConfigError("system preset 'custom' needs field 'H'")
        H = _matrix(sec["H"], "system.H")
        if np.max(np.abs(H - H.conj().T)) > 1e-10:
            raise ConfigError("system.H must be Hermitian")
        res = {"preset": preset, "H": sec["H"]}
    return H, res


def _bath(sec) -> tuple[object, dict]:
    if sec is None:
        return None, {"kind": "none"}
    if not isinstance(sec, dict) or "kind" not in sec:
        raise ConfigError("bath must be a mapping with a 'kind' field")
    kind = sec["kind"]
    if kind not in BATH_KEYS:
        raise ConfigError(f"unknown bath kind {kind!r} ({', '.join(BATH_KEYS)})")
    _unknown(sec, BATH_KEYS[kind], "bath")
    if kind == "none":
        return None, {"kind": "none"}
    beta = _beta(sec.get("beta", "inf"))
    stats = sec.get("statistics", "bosonic")
    res = {"kind": kind, "beta": "inf" if math.isinf(beta) else beta, "statistics": stats}
    try:
        if kind == "exponential":
            terms = np.asarray(sec.get("terms"), dtype=float)
            if terms.ndim != 2 or terms.shape[1] != 4:
                raise ConfigError("bath.terms must be a list of [c_re, c_im, mu_re, mu_im]")
            res["terms"] = terms.tolist()
            return CorrelationSum(terms[:, 0] + 1j * terms[:, 1], terms[:, 2] + 1j * terms[:, 3]), res
        if kind == "drude":
            res.update(lam=float(sec.get("lam", 1.0)), gamma=float(sec.get("gamma", 1.0)),
                       omega_max=sec.get("omega_max"))
            J = Drude(res["lam"], res["gamma"], res["omega_max"])
        elif kind == "ohmic":
            res.update(s=float(sec.get("s", 1.0)), eta=float(sec.get("eta", 1.0)),
                       omega_c=float(sec.get("omega_c", 1.0)), cutoff_shape=sec.get("cutoff_shape", "exponential"),
                       omega_max=sec.get("omega_max"))
            J = OhmicFamily(res["s"], res["eta"], res["omega_c"], res["cutoff_shape"], res["omega_max"])
        else:
            if "file" not in sec:
                raise ConfigError("bath kind 'tabulated' needs field 'file'")
            res["file"] = str(sec["file"])
            J = Tabulated.from_file(res["file"])
        return BathSpec(J, beta, stats), res
    except (ValueError, OSError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bath: {exc}") from exc


def _initial(spec, dim: int):
    if isinstance(spec, str):
        eye = np.eye(dim, dtype=complex)
        if spec in ("excited", "ground", "plus", "minus") and dim != 2:
            raise ConfigError(f"initial state {spec!r} needs a two-level system")
        table = {"excited": eye[0], "ground": eye[1], "plus": (eye[0] + eye[1]) / np.sqrt(2),
                 "minus": (eye[0] - eye[1]) / np.sqrt(2)}
        if spec in table:
            v = table[spec]
            return np.outer(v, v.conj()), spec
        if spec == "mixed":
            return eye / dim, spec
        if spec.startswith("fock_"):
            k = int(spec.split("_", 1)[1])
            if not 0 <= k < dim:
                raise ConfigError(f"initial state {spec!r} is outside the space")
            return np.outer(eye[k], eye[k]), spec
        raise ConfigError(f"unknown initial state {spec!r}")
    if isinstance(spec, dict) and set(spec) == {"vector"}:
        v = _vector(spec["vector"], "initial.vector")
        if v.size != dim:
            raise ConfigError("initial.vector does not match the system dimension")
        v = v / np.linalg.norm(v)
        return np.outer(v, v.conj()), spec
    if isinstance(spec, dict) and set(spec) == {"matrix"}:
        rho = _matrix(spec["matrix"], "initial.matrix")
        if rho.shape != (dim, dim):
            raise ConfigError("initial.matrix does not match the system dimension")
        return rho, spec
    raise ConfigError("initial must be a name, {vector: ...} or {matrix: ...}")


def _options(method: str, block) -> dict:
    required, defaults = METHOD_FIELDS[method]
    block = {} if block is None else block
    if not isinstance(block, dict):
        raise ConfigError(f"method block {method!r} must be a mapping")
    _unknown(block, set(required) | set(defaults), method)
    for name in required:
        if name not in block:
            raise ConfigError(f"method {method!r} needs field {name!r} in its '{method}' block")
    out = dict(defaults)
    out.update(block)
    return out


def parse_config(text: str | dict, *, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    """Parse and validate a YAML (or JSON) config, resolving every default.

    Raises
    ------
    ConfigError
        Unknown keys (all listed), a missing method field (named), a stochastic
        method without a seed, or any invalid value.
    """
    if isinstance(text, dict):
        data = copy.deepcopy(text)
    else:
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    _unknown(data, TOP_KEYS, "config")
    method = data.get("method")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {', '.join(METHODS)}; got {method!r}")
    extra_blocks = sorted(m for m in METHODS if m in data and m != method)
    if extra_blocks:
        raise ConfigError(f"method blocks for unused methods: {', '.join(extra_blocks)}")
    H, sys_res = _system(data.get("system", {"preset": "two_level"}))
    dim = H.shape[0]
    default_coupling = "sigma_z" if sys_res["preset"] == "two_level" else "a" if sys_res["preset"] == "oscillator" else None
    coup = data.get("coupling", default_coupling)
    if coup is None:
        raise ConfigError("a custom system needs an explicit coupling")
    L = _operator(coup, dim, "coupling")
    bath, bath_res = _bath(data.get("bath"))
    options = _options(method, data.get(method))
    grid_sec = data.get("grid")
    if not isinstance(grid_sec, dict) or "t_max" not in grid_sec or "dt" not in grid_sec:
        raise ConfigError("grid needs fields 't_max' and 'dt'")
    _unknown(grid_sec, {"t_max", "dt"}, "grid")
    try:
        grid = TimeGrid.from_span(float(grid_sec["t_max"]), float(grid_sec["dt"]))
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc
    rho0, init_res = _initial(data.get("initial", "excited" if dim == 2 else "fock_0"), dim)
    obs = data.get("observables")
    if obs is None:
        obs = _default_observables(method)
    if isinstance(obs, str) or not isinstance(obs, list):
        raise ConfigError("observables must be a list of names")
    for o in obs:
        _check_observable(o, method, dim)
    if seed is not None:
        data["seed"] = seed
    s = data.get("seed")
    if method in STOCHASTIC and s is None:
        raise ConfigError(f"method {method!r} is stochastic and needs a 'seed'")
    if s is not None and (isinstance(s, bool) or not isinstance(s, int) or s < 0):
        raise ConfigError("seed must be a nonnegative integer")
    out = data.get("output", {}) or {}
    _unknown(out, {"dir", "name"}, "output")
    name = str(out.get("name", "run"))
    directory = Path(out_dir if out_dir is not None else out.get("dir", "."))
    sweep = data.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict) or set(sweep) != {"parameter", "values"} or not isinstance(sweep["values"], list):
            raise ConfigError("sweep needs exactly 'parameter' (dotted path) and 'values' (list)")
        if not sweep["values"]:
            raise ConfigError("sweep.values is empty")
    raw = {
        "system": sys_res,
        "coupling": coup,
        "bath": bath_res,
        "method": method,
        method: options,
        "grid": {"t_max": float(grid_sec["t_max"]), "dt": float(grid_sec["dt"])},
        "initial": init_res,
        "observables": list(obs),
        "seed": s,
        "output": {"name": name},
    }
    if sweep is not None:
        raw["sweep"] = sweep
    return RunConfig(raw, H, L, bath, method, options, grid, rho0, list(obs), s, directory, name, sweep)


SCALAR_OBSERVABLES = {
    "exact_amplitude": ("amplitude",),
    "chain": ("amplitude",),
    "exact_qbm": ("delta", "gamma1", "gamma2"),
    "niba": ("sigma_z",),
}


def _default_observables(method: str) -> list:
    if method in ("exact_qbm",):
        return ["delta", "gamma1", "gamma2"]
    if method == "niba":
        return ["sigma_z"]
    return ["rho"]


def _check_observable(name, method: str, dim: int):
    if not isinstance(name, str):
        raise ConfigError("observable names must be strings")
    if method == "exact_qbm" or method == "niba":
        if name not in SCALAR_OBSERVABLES[method]:
            raise ConfigError(f"method {method!r} provides only {', '.join(SCALAR_OBSERVABLES[method])}")
        return
    if name == "rho" or (name == "amplitude" and method in ("exact_amplitude", "chain")):
        return
    named_operator(name, dim)


# --- dispatch ------------------------------------------------------------------------


def _require_bath(cfg: RunConfig, kinds=None):
    if cfg.bath is None:
        raise ConfigError(f"method {cfg.method!r} needs a bath")
    if kinds == "spectral" and not isinstance(cfg.bath, BathSpec):
        raise ConfigError(f"method {cfg.method!r} needs a spectral-density bath (drude, ohmic, tabulated)")
    return cfg.bath


def _two_level(cfg: RunConfig):
    if cfg.dim != 2:
        raise ConfigError(f"method {cfg.method!r} needs a two-level system")


def _omega_s(cfg: RunConfig) -> float:
    return float(cfg.raw["system"].get("omega", 0.0))


def _zero_t_kernel(cfg: RunConfig):
    """Lab-frame kernel for the one-excitation methods (T = 0 correlation or exponential terms)."""
    bath = _require_bath(cfg)
    if isinstance(bath, CorrelationSum):
        return bath
    if not bath.zero_temperature:
        raise ConfigError(f"method {cfg.method!r} uses the zero-temperature kernel; set bath.beta: inf")
    J = bath.J
    return lambda t: correlation_zero_T(J, t)


def _rotating(kernel, omega_s: float):
    if isinstance(kernel, CorrelationSum):
        return CorrelationSum(kernel.coeffs, kernel.rates - 1j * omega_s)
    return lambda t: np.asarray(kernel(t)) * np.exp(1j * omega_s * np.asarray(t, dtype=float))


def _system_spec(cfg: RunConfig):
    from .mastereq import SystemSpec

    return SystemSpec(cfg.H, (cfg.coupling,), ("L",))


def _pure(rho0):
    e, v = np.linalg.eigh(rho0)
    if e[-1] < 1 - 1e-10:
        raise ConfigError("this method propagates pure states; the initial state must be pure")
    return v[:, -1]


def _solve_states(cfg: RunConfig, rho0, workers: int):
    """Run a density-matrix method from ``rho0``; returns ``(states, ensemble or None, extra metadata)``."""
    from . import exact, heom, mastereq
    from .stochastic import hops_ensemble, nmqj_evolve, sln_ensemble

    m, opt, grid = cfg.method, cfg.options, cfg.grid
    system = _system_spec(cfg)
    if m == "lindblad":
        chans = opt["channels"] or [cfg.raw["coupling"]]
        ops = tuple(_operator(c, cfg.dim, "lindblad.channels") for c in chans)
        spec = mastereq.LindbladSpec(system, tuple(opt["rates"]), ops)
        return mastereq.lindblad_evolve(spec, rho0, grid).states, None, {}
    if m == "tcl2":
        bath = _require_bath(cfg)
        tr = mastereq.tcl2_evolve(system, bath, rho0, grid, refine=int(opt["refine"]), budget=float(opt["budget"]))
        return tr.states, None, {}
    if m == "secular":
        spec = mastereq.secular_markov_generator(system, _require_bath(cfg, "spectral"))
        return mastereq.lindblad_evolve(spec, rho0, grid).states, None, {"rates": list(spec.rates)}
    if m == "heom":
        bath = _require_bath(cfg)
        tr = heom.heom_evolve(system, bath, rho0, int(opt["depth"]), grid, m_max=opt["m_max"],
                              terminator=opt["terminator"], max_ados=int(opt["max_ados"]))
        return tr.states, None, {}
    if m in ("hops_linear", "hops_nonlinear"):
        bath = _require_bath(cfg)
        if not isinstance(bath, CorrelationSum):
            raise ConfigError("HOPS needs bath kind 'exponential' with a single term")
        res = hops_ensemble(system, None, bath, _pure(rho0), grid, int(opt["k_max"]), int(opt["n_traj"]), cfg.seed,
                            nonlinear=(m == "hops_nonlinear"), terminator=bool(opt["terminator"]), workers=workers)
        return res.rho, res, {"n_invalid": res.n_invalid}
    if m == "sln":
        bath = _require_bath(cfg)
        if isinstance(bath, BathSpec):
            if not isinstance(bath.J, Drude) or bath.zero_temperature:
                raise ConfigError("SLN from a spectral density needs a finite-temperature Drude bath")
            bath = matsubara_expansion(bath, opt["m_max"])
        res = sln_ensemble(system, None, bath, rho0, grid, int(opt["n_traj"]), cfg.seed, workers=workers)
        return res.rho, res, {"n_invalid": res.n_invalid}
    if m == "nmqj":
        _two_level(cfg)
        spec = _nmqj_spec(cfg)
        res, jumps = nmqj_evolve(spec, _pure(rho0), grid, int(opt["n_traj"]), cfg.seed)
        return res.rho, res, {"forward_jumps": int(jumps.forward_jumps.sum()),
                              "backward_jumps": int(jumps.backward_jumps.sum())}
    if m == "exact_amplitude":
        _two_level(cfg)
        w = _omega_s(cfg)
        sol = exact.one_excitation_amplitude(_rotating(_zero_t_kernel(cfg), w), grid, w, float(opt["markov_rate"]))
        return sol.density_matrices(rho0), None, {"_amplitude": sol.A}
    if m == "chain":
        _two_level(cfg)
        amp = _chain_amplitude(cfg)
        sol = exact.AmplitudeSolution(grid.times, amp.A, np.zeros_like(amp.A), _omega_s(cfg))
        return sol.density_matrices(rho0), None, {"_amplitude": amp.A, "recurrence_time": amp.recurrence_time}
    if m == "dephasing":
        tr = exact.dephasing_exact(system, _require_bath(cfg, "spectral"), rho0, grid, method=opt["variant"],
                                   n_modes=int(opt["n_modes"]))
        return tr.states, None, {}
    raise ConfigError(f"method {m!r} does not produce density matrices")


def _nmqj_spec(cfg: RunConfig):
    from .exact import exact_tcl_rates
    from .mastereq import TimeLocalSpec

    rates = cfg.options["rates"]
    system = _system_spec(cfg)
    if rates == "exact":
        w = _omega_s(cfg)
        return exact_tcl_rates(_rotating(_zero_t_kernel(cfg), w), w, cfg.grid).spec
    if isinstance(rates, list) and all(isinstance(r, (int, float)) for r in rates) and len(rates) == 1:
        return TimeLocalSpec(system, ((cfg.coupling, float(rates[0])),))
    raise ConfigError("nmqj.rates must be 'exact' or a one-element list of constant rates")


def _chain_amplitude(cfg: RunConfig):
    from .chain import chain_propagate_one_excitation, recurrence_coefficients, star_to_chain

    bath = _require_bath(cfg, "spectral")
    n_sites = int(cfg.options["n_sites"])
    n_coeffs = int(cfg.options["n_coeffs"] or n_sites)
    chain = star_to_chain(recurrence_coefficients(bath.J, n_coeffs))
    return chain_propagate_one_excitation(_omega_s(cfg), chain, n_sites, cfg.grid)


def run(cfg: RunConfig, *, workers: int | None = None, write: bool = True) -> RunResult:
    """Dispatch the configured solver and (optionally) write ``<name>.csv`` and ``<name>.json``."""
    if cfg.sweep is not None:
        raise ConfigError("configs with a sweep are run through run_sweep")
    from .stochastic import default_workers

    workers = default_workers() if workers is None else int(workers)
    grid = cfg.grid
    columns, stderr, meta = {}, {}, {}
    if cfg.method == "exact_qbm":
        from .exact import qbm_coefficients
        from .bath.correlation import thermal_pair

        bath = _require_bath(cfg)
        w = _omega_s(cfg)
        if isinstance(bath, CorrelationSum) or bath.zero_temperature:
            alpha, alpha_plus = _rotating(_zero_t_kernel(cfg), w), None
        else:
            alpha = _rotating(lambda t: thermal_pair(bath, t)[0], w)
            alpha_plus = lambda t: thermal_pair(bath, t)[1]  # noqa: E731
        q = qbm_coefficients(alpha, alpha_plus, w, grid, cfg.raw["bath"].get("statistics", "bosonic"))
        series = {"delta": q.delta, "gamma1": q.gamma1, "gamma2": q.gamma2}
        columns = {k: series[k].astype(complex) for k in cfg.observables}
    elif cfg.method == "niba":
        _two_level(cfg)
        from .mastereq import niba_evolve

        bath = None if cfg.bath is None else _require_bath(cfg, "spectral")
        beta = math.inf if bath is None else bath.beta
        p = niba_evolve(float(cfg.raw["system"]["delta0"]), None if bath is None else bath.J, beta, grid)
        columns = {"sigma_z": p.astype(complex)}
    else:
        states, ens, meta = _solve_states(cfg, cfg.rho0, workers)
        for name in cfg.observables:
            if name == "rho":
                for i in range(cfg.dim):
                    for j in range(cfg.dim):
                        key = f"rho_{i}_{j}"
                        columns[key] = states[:, i, j]
                        if ens is not None:
                            stderr[key] = ens.entry_stderr[:, i, j]
            elif name == "amplitude":
                columns[name] = meta["_amplitude"]
            else:
                op = named_operator(name, cfg.dim)
                columns[name] = np.einsum("ij,tji->t", op, states)
                if ens is not None:
                    stderr[name] = ens.expect_stderr(op)
        if ens is not None:
            meta["n_traj"] = int(ens.n_traj)
    meta = {k: v for k, v in meta.items() if not k.startswith("_")}
    result = RunResult(grid.times, columns, stderr, _metadata(cfg, meta))
    if write:
        write_result(result, cfg.out_dir, cfg.name)
    return result


def _metadata(cfg: RunConfig, summary: dict) -> dict:
    return {"nmdyn_version": __version__, "config": cfg.raw, "rows": int(cfg.grid.n_steps + 1),
            "summary": _jsonable(summary)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return "inf" if math.isinf(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def _fmt(x: float) -> str:
    return format(float(x) + 0.0, ".17g")


def write_csv(path: Path, times, columns: dict, stderr: dict):
    """Header ``t,<obs>_re,<obs>_im[,<obs>_stderr]``; floats in shortest round-trip form."""
    header = ["t"]
    for k in columns:
        header += [f"{k}_re", f"{k}_im"] + ([f"{k}_stderr"] if k in stderr else [])
    lines = [",".join(header)]
    for r, t in enumerate(times):
        row = [_fmt(t)]
        for k, v in columns.items():
            row += [_fmt(v[r].real), _fmt(v[r].imag)]
            if k in stderr:
                row.append(_fmt(stderr[k][r]))
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def write_result(result: RunResult, out_dir: Path, name: str):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / f"{name}.csv", result.times, result.columns, result.stderr)
    (out_dir / f"{name}.json").write_text(json.dumps(result.metadata, indent=2, sort_keys=True) + "\n")


# --- sweeps --------------------------------------------------------------------------


def _set_path(data: dict, path: str, value):
    keys = path.split(".")
    node = data
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"sweep parameter {path!r} does not name a config entry")
        node = node[k]
    node[keys[-1]] = value


def sweep_configs(cfg: RunConfig) -> list[RunConfig]:
    """One config per sweep value, named ``<name>_<k>``."""
    out = []
    for k, value in enumerate(cfg.sweep["values"]):
        data = copy.deepcopy(cfg.raw)
        del data["sweep"]
        _set_path(data, cfg.sweep["parameter"], value)
        data["output"] = {"name": f"{cfg.name}_{k}"}
        out.append(parse_config(data, out_dir=str(cfg.out_dir)))
    return out


def _sweep_point(c: RunConfig) -> RunResult:
    return run(c, workers=1)


def run_sweep(cfg: RunConfig, *, workers: int | None = None) -> list[RunResult]:
    """Run every sweep point; points are spread over ``workers`` processes."""
    from .stochastic import default_workers

    workers = default_workers() if workers is None else int(workers)
    points = sweep_configs(cfg)
    if workers == 1:
        results = [_sweep_point(c) for c in points]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, points))
    index = {"config": cfg.raw, "points": [c.name for c in points]}
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / f"{cfg.name}_sweep.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return results


# --- chain dump and measures ---------------------------------------------------------


def chain_table(cfg: RunConfig) -> dict:
    """Recurrence data, Gauss nodes and weights, and chain energies and hoppings."""
    from .chain import gauss_discretize, recurrence_coefficients, star_to_chain

    bath = _require_bath(cfg, "spectral")
    n = int(cfg.raw.get("chain", {}).get("n_coeffs") or cfg.raw.get("chain", {}).get("n_sites") or 0)
    if n < 1:
        raise ConfigError("the chain command needs method 'chain' with 'n_sites'")
    coeffs = recurrence_coefficients(bath.J, n)
    star = gauss_discretize(coeffs)
    chain = star_to_chain(coeffs)
    hop = np.concatenate([[chain.sys_coupling], chain.hoppings])
    return {"n": np.arange(n), "alpha": coeffs.alphas, "beta": coeffs.betas, "omega_p": star.nodes,
            "W_p": star.weights, "A_n": chain.energies, "B_n": hop}


def write_chain(path: Path, table: dict):
    keys = list(table)
    lines = [",".join(keys)]
    for r in range(len(table["n"])):
        lines.append(",".join(str(int(table[k][r])) if k == "n" else _fmt(table[k][r]) for k in keys))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


MEASURABLE = ("lindblad", "tcl2", "secular", "heom", "exact_amplitude", "dephasing")


def measure(cfg: RunConfig, *, write: bool = True) -> RunResult:
    """Dynamical map of a deterministic qubit method, then BLP, RHP and canonical rates."""
    from .nonmarkov import blp_measure, build_map, canonical_rates, rhp_measure, _pair_curve

    if cfg.method not in MEASURABLE:
        raise ConfigError(f"measure supports {', '.join(MEASURABLE)}; got {cfg.method!r}")
    _two_level(cfg)
    dmap = build_map(lambda r: Trajectory(cfg.grid.times, _solve_states(cfg, r, 1)[0]), 2)
    blp = blp_measure(dmap)
    rhp = rhp_measure(dmap)
    rates = canonical_rates(dmap)
    dist, sigma = _pair_curve(dmap, *blp.pair)
    g = np.append(rhp.g, np.nan)
    columns = {"blp_distance": dist.astype(complex), "blp_sigma": sigma.astype(complex),
               "rhp_g": g.astype(complex)}
    for k in range(rates.rates.shape[1]):
        columns[f"rate_{k}"] = rates.rates[:, k].astype(complex)
    meta = _metadata(cfg, {"blp": blp.value, "rhp": rhp.value})
    result = RunResult(dmap.times, columns, {}, meta)
    if write:
        write_result(result, cfg.out_dir, cfg.name + "_measure")
    return result


# --- compare -------------------------------------------------------------------------


@dataclass
class CompareReport:
    max_diff: dict
    trace_distance: np.ndarray | None
    tolerance: float
    passed: bool

    def lines(self) -> list[str]:
        out = [f"{k}: max |diff| = {v:.3e}" for k, v in self.max_diff.items()]
        if self.trace_distance is not None:
            out.append(f"trace distance: max = {np.max(self.trace_distance):.3e}")
        out.append(f"{'PASS' if self.passed else 'FAIL'} (tol {self.tolerance:g})")
        return out


def read_csv(path) -> tuple[np.ndarray, dict, dict]:
    """Inverse of :func:`write_csv`: ``(times, complex columns, stderr columns)``."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if header[0] != "t":
        raise ConfigError(f"{path}: first column must be 't'")
    cols, se = {}, {}
    for j, h in enumerate(header):
        if h.endswith("_re"):
            base = h[:-3]
            cols[base] = data[:, j] + 1j * data[:, header.index(base + "_im")]
        elif h.endswith("_stderr"):
            se[h[:-7]] = data[:, j]
    return data[:, 0], cols, se


def _rho_stack(cols: dict):
    keys = [k for k in cols if k.startswith("rho_")]
    if not keys:
        return None
    d = int(round(np.sqrt(len(keys))))
    n_t = len(next(iter(cols.values())))
    rho = np.empty((n_t, d, d), dtype=complex)
    for i in range(d):
        for j in range(d):
            rho[:, i, j] = cols[f"rho_{i}_{j}"]
    return rho


def compare(path_a, path_b, tol: float, *, resample: bool = False, n_sigma: float = 0.0) -> CompareReport:
    """Per-observable max abs difference and, with ``rho`` columns, the trace-distance series.

    A time point passes when the difference is within ``max(tol, n_sigma * sqrt(se_a^2 + se_b^2))``.
    Grids must coincide unless ``resample`` is set (B is linearly interpolated onto A).
    """
    ta, ca, sa = read_csv(path_a)
    tb, cb, sb = read_csv(path_b)
    aligned = ta.shape == tb.shape and np.allclose(ta, tb, rtol=0, atol=1e-12)
    if not aligned:
        if not resample:
            raise ConfigError("time grids differ; pass --resample to interpolate B onto A")
        keep = (ta >= tb[0] - 1e-12) & (ta <= tb[-1] + 1e-12)
        ta = ta[keep]
        ca = {k: v[keep] for k, v in ca.items()}
        sa = {k: v[keep] for k, v in sa.items()}
        cb = {k: np.interp(ta, tb, v.real) + 1j * np.interp(ta, tb, v.imag) for k, v in cb.items()}
        sb = {k: np.interp(ta, tb, v) for k, v in sb.items()}
    common = [k for k in ca if k in cb]
    if not common:
        raise ConfigError("the two files share no observable")
    zero = np.zeros(len(ta))
    max_diff, ok = {}, True
    for k in common:
        diff = np.abs(ca[k] - cb[k])
        allowed = np.maximum(tol, n_sigma * np.sqrt(sa.get(k, zero) ** 2 + sb.get(k, zero) ** 2))
        max_diff[k] = float(np.max(diff))
        ok &= bool(np.all(diff <= allowed))
    ra, rb = _rho_stack(ca), _rho_stack(cb)
    tdist = None
    if ra is not None and rb is not None and ra.shape == rb.shape:
        tdist = 0.5 * np.sum(np.abs(np.linalg.eigvalsh(0.5 * ((ra - rb) + np.conj(np.swapaxes(ra - rb, 1, 2))))), axis=1)
        if n_sigma == 0:
            ok &= bool(np.all(tdist <= tol))
    return CompareReport(max_diff, tdist, tol, bool(ok))


# --- entry point ---------------------------------------------------------------------


def _load(path, seed, out):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, seed=seed, out_dir=out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmdyn", description="Non-Markovian open quantum system dynamics")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("simulate", "run a config (including sweeps)"),
                           ("chain", "dump recurrence, Gauss and chain data"),
                           ("measure", "dynamical map, BLP, RHP and canonical rates")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("config")
        s.add_argument("--workers", type=int, default=None, help="worker processes (default: $NMDYN_WORKERS or 1)")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out", default=None, help="output directory")
    c = sub.add_parser("compare", help="compare two result CSVs")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--tol", type=float, required=True)
    c.add_argument("--resample", action="store_true", help="interpolate B onto the grid of A")
    c.add_argument("--sigma", type=float, default=0.0, help="also accept differences within this many stderr")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            rep = compare(args.a, args.b, args.tol, resample=args.resample, n_sigma=args.sigma)
            print("\n".join(rep.lines()))
            return EXIT_OK if rep.passed else EXIT_COMPARE
        cfg = _load(args.config, args.seed, args.out)
        if args.command == "simulate":
            if cfg.sweep is not None:
                res = run_sweep(cfg, workers=args.workers)
                print(f"wrote {len(res)} sweep points to {cfg.out_dir}")
            else:
                run(cfg, workers=args.workers)
                print(f"wrote {cfg.out_dir / (cfg.name + '.csv')}")
        elif args.command == "chain":
            path = cfg.out_dir / f"{cfg.name}_chain.csv"
            write_chain(path, chain_table(cfg))
            print(f"wrote {path}")
        else:
            res = measure(cfg)
            print(f"BLP = {res.metadata['summary']['blp']:.6g}, RHP = {res.metadata['summary']['rhp']:.6g}")
        return EXIT_OK
    except PositivityViolation as exc:
        print(f"positivity violation: {exc}", file=sys.stderr)
        return EXIT_POSITIVITY
    except BudgetError as exc:
        print(f"budget refusal: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, NotImplementedError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NmdynError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
