"""Scenario files: YAML mapping -> validated :class:`ScenarioConfig`.

Sections are optional at parse time (commands that solve an equation need
``xi`` and ``losses``); defaults are filled in and unknown keys are rejected. All problems found are reported together.
Admissibility of the terminal value is checked here with exact Gaussian
quadrature, before any path is sampled.
"""

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from dmrbsde.boundaries import LossFn, LossPair, TimeFn
from dmrbsde.condexp import RegressionSpec, TerminalFn, gaussian_expectation
from dmrbsde.dmr import PicardConfig
from dmrbsde.drivers import DriverSpec
from dmrbsde.errors import AdmissibilityError, ConfigError
from dmrbsde.grid import make_grid
from dmrbsde.penalized import LinearObstacles
from dmrbsde.skorokhod import BoundaryFn, sentinel_lower, sentinel_upper

DEFAULTS = {
    "grid": {"T": 1.0, "N": 200},
    "ensemble": {"M": 20000, "seed": 0, "antithetic": False},
    "driver": {"kind": "zero"},
    "regression": {"degree": 4, "ridge": 1e-10, "standardize": True},
    "picard": {"max_iter": 30, "tol": 1e-8, "subintervals": 1},
    "penalization": {"n_list": [4, 16, 64, 256], "n": 64, "relax_origin": False},
    "dynkin": {"times": [0.0]},
    "sandwich": {"construction": "one_sided", "margins": [0.0, 0.0]},
    "output": {"dir": "out", "formats": ["csv", "json"]},
}

SCHEMA = {
    "grid": {"T", "N"},
    "ensemble": {"M", "seed", "antithetic"},
    "xi": {"kind", "params"},
    "driver": {"kind", "a", "b", "c", "lam1", "lam2"},
    "losses": {"mode", "L", "R", "gap", "l", "r"},
    "regression": {"degree", "ridge", "standardize"},
    "picard": {"max_iter", "tol", "subintervals"},
    "penalization": {"n_list", "n", "relax_origin"},
    "skorokhod": {"direction", "s", "a", "upper", "lower", "eps_root"},
    "dynkin": {"times"},
    "sandwich": {"construction", "margins"},
    "output": {"dir", "formats"},
}

XI_PARAMS = {"affine": {"slope", "intercept"}, "poly": {"coeffs"}, "call": {"strike", "scale"},
             "sin": {"amp", "freq", "phase"}}
LOSS_KEYS = {"kind", "obstacle", "alpha", "shift", "band"}
BOUNDARY_KEYS = {"kind", "obstacle", "alpha"}


@dataclass
class ScenarioConfig:
    raw: dict = field(repr=False)
    grid: object = None
    M: int = 0
    seed: int = 0
    antithetic: bool = False
    xi: TerminalFn = None
    driver: DriverSpec = None
    mode: str = "nonlinear"
    losses: LossPair = None
    obstacles: LinearObstacles = None
    regression: RegressionSpec = None
    picard: PicardConfig = None
    n_list: tuple = ()
    n: float = 64.0
    skorokhod: dict = None
    dynkin_times: tuple = (0.0,)
    sandwich: dict = None
    output_dir: str = "out"
    formats: tuple = ("csv", "json")
    sections: tuple = ()

    @property
    def config_hash(self):
        return config_hash(self.raw)

    def xi_values(self, ensemble):
        return self.xi(ensemble.W[:, -1])


def config_hash(raw):
    """sha256 of the canonical JSON of the scenario (output settings excluded)."""
    body = {k: v for k, v in raw.items() if k != "output"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


class _Collector:
    def __init__(self):
        self.errors = []

    def add(self, where, msg):
        self.errors.append(f"{where}: {msg}")

    def keys(self, where, d, allowed):
        if not isinstance(d, dict):
            self.add(where, f"expected a mapping, got {type(d).__name__}")
            return False
        for k in sorted(set(d) - set(allowed)):
            self.add(where, f"unknown key {k!r}; allowed: {', '.join(sorted(allowed))}")
        return True

    def attempt(self, where, fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except ConfigError as exc:
            for v in exc.violations:
                self.add(where, v)
        except (TypeError, ValueError) as exc:
            self.add(where, str(exc))
        return None


def time_fn(spec):
    """``3.0`` | ``{constant: v}`` | ``{piecewise_linear: [[t, v], ...]}`` | ``{poly: [c0, c1, ...]}``."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return TimeFn.constant(spec)
    if isinstance(spec, dict) and len(spec) == 1:
        (kind, data), = spec.items()
        return TimeFn(kind, data)
    raise ConfigError(f"bad time function {spec!r}; use a number or one of constant, piecewise_linear, poly")


def _loss(col, where, spec):
    if not col.keys(where, spec, LOSS_KEYS):
        return None
    kind = spec.get("kind", "affine")
    if "obstacle" not in spec:
        col.add(where, "missing 'obstacle'")
        return None
    obstacle = col.attempt(where + ".obstacle", time_fn, spec["obstacle"])
    feature, kappa = None, 0.0
    if "shift" in spec:
        sh = spec["shift"]
        if col.keys(where + ".shift", sh, {"feature", "kappa"}):
            feature, kappa = sh.get("feature"), float(sh.get("kappa", 0.0))
    band = tuple(spec["band"]) if "band" in spec else None
    if obstacle is None:
        return None
    return col.attempt(where, LossFn, kind, obstacle, float(spec.get("alpha", 0.0)), feature, kappa, band)


def boundary_from_spec(spec, side):
    """Deterministic boundary for the Skorokhod subcommand; ``{kind: sentinel}`` never binds."""
    if spec.get("kind") == "sentinel":
        return sentinel_upper() if side == "upper" else sentinel_lower()
    kind = spec.get("kind", "affine")
    loss = LossFn(kind, time_fn(spec["obstacle"]), float(spec.get("alpha", 0.0)))
    return BoundaryFn(lambda t, x: float(loss.base(t, x)), loss.band, kind="analytic", name=kind)


def _driver(col, spec, T):
    if not col.keys("driver", spec, SCHEMA["driver"]):
        return None
    kind = spec.get("kind", "zero")
    tf = lambda key: col.attempt(f"driver.{key}", time_fn, spec.get(key, 0.0))
    if kind == "zero":
        extra = set(spec) - {"kind"}
        if extra:
            col.add("driver", f"zero driver takes no parameters, got {sorted(extra)}")
        return DriverSpec.zero()
    if kind == "affine":
        a, b, c = tf("a"), tf("b"), tf("c")
        if None in (a, b, c):
            return None
        return DriverSpec.affine(a, b, c, T=T)
    if kind == "lipschitz":
        c = tf("c")
        return None if c is None else DriverSpec.lipschitz(spec.get("lam1", 0.0), spec.get("lam2", 0.0), c, T=T)
    col.add("driver", f"unknown driver kind {kind!r}; available: zero, affine, lipschitz")
    return None


def _xi(col, spec):
    if not col.keys("xi", spec, SCHEMA["xi"]):
        return None
    kind = spec.get("kind")
    if kind not in XI_PARAMS:
        col.add("xi", f"unknown terminal kind {kind!r}; available: {', '.join(sorted(XI_PARAMS))}")
        return None
    params = spec.get("params", {}) or {}
    if not col.keys("xi.params", params, XI_PARAMS[kind]):
        return None
    return col.attempt("xi", getattr(TerminalFn, kind), **params)


def _feature_fn(loss):
    if not loss.has_shift:
        return lambda x: 0.0
    if loss.feature == "brownian":
        return lambda x: loss.kappa * x
    return lambda x: loss.kappa * np.abs(x)


def expected_loss(loss, xi, T):
    """``E[loss(T, xi(B_T))]`` by quadrature."""
    feat = _feature_fn(loss)
    kinks = tuple(xi.kinks) + ((0.0,) if loss.feature == "abs_brownian" and loss.has_shift else ())
    return gaussian_expectation(lambda x: loss.base(T, xi(x)) + feat(x), 0.0, np.sqrt(T), kinks)


def admissibility_violations(cfg):
    T = cfg.grid.T
    Exi = gaussian_expectation(cfg.xi, 0.0, np.sqrt(T), cfg.xi.kinks)
    bad = []
    if cfg.mode == "linear":
        bad += cfg.obstacles.violations(cfg.grid, Exi, 1e-12)
    else:
        EL, ER = expected_loss(cfg.losses.L, cfg.xi, T), expected_loss(cfg.losses.R, cfg.xi, T)
        if EL > 1e-12:
            bad.append(f"E[L(T, xi)] <= 0 fails: E[L(T, xi)] = {EL:.6g}")
        if ER < -1e-12:
            bad.append(f"E[R(T, xi)] >= 0 fails: E[R(T, xi)] = {ER:.6g}")
    return bad


def parse_mapping(data, seed=None, check_admissible=True):
    """Validate a scenario mapping; ``seed`` overrides ``ensemble.seed``."""
    col = _Collector()
    if not isinstance(data, dict):
        raise ConfigError(f"scenario must be a mapping at top level, got {type(data).__name__}")
    data = copy.deepcopy(data)
    for k in sorted(set(data) - set(SCHEMA)):
        col.add("<top>", f"unknown section {k!r}; allowed: {', '.join(sorted(SCHEMA))}")
    raw = {}
    for sec, default in DEFAULTS.items():
        given = data.get(sec, {}) or {}
        if col.keys(sec, given, SCHEMA[sec]):
            merged = dict(default) if sec != "driver" or "kind" not in given else {}
            merged.update(given)
            raw[sec] = merged
        else:
            raw[sec] = dict(default)
    for sec in ("xi", "losses", "skorokhod"):
        if sec in data:
            raw[sec] = data[sec]
    if seed is not None:
        raw["ensemble"]["seed"] = int(seed)
    cfg = ScenarioConfig(raw=raw, sections=tuple(sorted(data)))

    g = raw["grid"]
    cfg.grid = col.attempt("grid", make_grid, g.get("T"), g.get("N"))
    e = raw["ensemble"]
    if not (isinstance(e["M"], int) and e["M"] >= 2):
        col.add("ensemble.M", f"must be an integer >= 2, got {e['M']!r}")
    if not isinstance(e["seed"], int) or e["seed"] < 0:
        col.add("ensemble.seed", f"must be a non-negative integer, got {e['seed']!r}")
    if e["antithetic"] and isinstance(e["M"], int) and e["M"] % 2:
        col.add("ensemble", "antithetic sampling needs an even M")
    cfg.M, cfg.seed, cfg.antithetic = e["M"], e["seed"], bool(e["antithetic"])

    T = cfg.grid.T if cfg.grid is not None else 1.0
    if "xi" in data:
        cfg.xi = _xi(col, data["xi"])
    cfg.driver = _driver(col, raw["driver"], T)
    r = raw["regression"]
    cfg.regression = col.attempt("regression", RegressionSpec, r["degree"], r["ridge"], bool(r["standardize"]))
    p = raw["picard"]
    cfg.picard = col.attempt("picard", PicardConfig, p["max_iter"], p["tol"], p["subintervals"])
    if cfg.grid is not None and cfg.picard is not None and cfg.grid.N % cfg.picard.subintervals:
        col.add("picard.subintervals", f"{cfg.picard.subintervals} does not divide N={cfg.grid.N}")
    pen = raw["penalization"]
    n_list = pen["n_list"]
    if not (isinstance(n_list, list) and len(n_list) >= 2 and all(isinstance(v, (int, float)) and v > 0 for v in n_list)
            and all(b > a for a, b in zip(n_list, n_list[1:]))):
        col.add("penalization.n_list", f"must be an increasing list of >= 2 positive numbers, got {n_list!r}")
    else:
        cfg.n_list = tuple(float(v) for v in n_list)
    if not (isinstance(pen["n"], (int, float)) and pen["n"] >= 0):
        col.add("penalization.n", f"must be >= 0, got {pen['n']!r}")
    cfg.n = float(pen["n"]) if isinstance(pen["n"], (int, float)) else 0.0

    losses = data.get("losses")
    if losses is not None and col.keys("losses", losses, SCHEMA["losses"]):
        cfg.mode = losses.get("mode", "nonlinear")
        if cfg.mode == "nonlinear":
            for k in ("l", "r"):
                if k in losses:
                    col.add("losses", f"key {k!r} belongs to linear mode")
            L = _loss(col, "losses.L", losses["L"]) if "L" in losses else col.add("losses", "missing 'L'")
            R = _loss(col, "losses.R", losses["R"]) if "R" in losses else col.add("losses", "missing 'R'")
            gap = losses.get("gap")
            if not (isinstance(gap, (int, float)) and gap > 0):
                col.add("losses.gap", f"nonlinear mode needs a declared separation gap > 0, got {gap!r}")
            elif L is not None and R is not None:
                cfg.losses = LossPair(L, R, float(gap))
                if cfg.grid is not None:
                    sep = cfg.losses.separation(cfg.grid.times)
                    if sep < gap - 1e-12 * max(1.0, abs(gap)):
                        col.add("losses", f"separation R - L >= gap fails: measured {sep:.6g} < {gap}")
        elif cfg.mode == "linear":
            for k in ("L", "R", "gap"):
                if k in losses:
                    col.add("losses", f"key {k!r} belongs to nonlinear mode")
            lo = col.attempt("losses.l", time_fn, losses.get("l"))
            hi = col.attempt("losses.r", time_fn, losses.get("r"))
            if lo is not None and hi is not None:
                cfg.obstacles = LinearObstacles(lo, hi, bool(pen["relax_origin"]))
                cfg.losses = cfg.obstacles.as_losses()
        else:
            col.add("losses.mode", f"unknown mode {cfg.mode!r}; available: nonlinear, linear")

    if "skorokhod" in data:
        sk = data["skorokhod"]
        if col.keys("skorokhod", sk, SCHEMA["skorokhod"]):
            cfg.skorokhod = _skorokhod(col, sk)
    dk = raw["dynkin"]["times"]
    if not isinstance(dk, list) or not dk:
        col.add("dynkin.times", f"must be a non-empty list of grid times, got {dk!r}")
    else:
        cfg.dynkin_times = tuple(float(t) for t in dk)
        if cfg.grid is not None:
            for t in cfg.dynkin_times:
                col.attempt("dynkin.times", cfg.grid.index_of, t)
    sw = raw["sandwich"]
    if sw["construction"] not in ("one_sided", "tightened"):
        col.add("sandwich.construction", f"unknown construction {sw['construction']!r}; available: one_sided, tightened")
    cfg.sandwich = {"construction": sw["construction"], "margins": tuple(float(v) for v in sw["margins"])}
    out = raw["output"]
    cfg.output_dir = str(out["dir"])
    cfg.formats = tuple(out["formats"])
    for f in cfg.formats:
        if f not in ("csv", "json"):
            col.add("output.formats", f"unknown format {f!r}; available: csv, json")

    if col.errors:
        raise ConfigError(col.errors)
    if check_admissible and cfg.losses is not None and cfg.xi is not None:
        bad = admissibility_violations(cfg)
        if bad:
            raise AdmissibilityError(bad)
    return cfg


def _skorokhod(col, sk):
    out = {"direction": sk.get("direction", "backward"), "a": float(sk.get("a", 0.0)),
           "eps_root": float(sk.get("eps_root", 1e-10))}
    if out["direction"] not in ("forward", "backward"):
        col.add("skorokhod.direction", f"must be forward or backward, got {out['direction']!r}")
    out["s"] = col.attempt("skorokhod.s", time_fn, sk.get("s", 0.0))
    for side in ("upper", "lower"):
        spec = sk.get(side)
        if spec is None:
            col.add("skorokhod", f"missing {side!r} boundary")
            continue
        if col.keys(f"skorokhod.{side}", spec, BOUNDARY_KEYS):
            out[side] = col.attempt(f"skorokhod.{side}", boundary_from_spec, spec, side)
    return out


def parse_scenario(path, seed=None, check_admissible=True):
    """Read and validate a YAML scenario file."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc.strerror}") from exc
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(f"{path}:{mark.line + 1}:{mark.column + 1}: {exc.problem}") from exc
    return parse_mapping(data, seed=seed, check_admissible=check_admissible)
