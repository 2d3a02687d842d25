"""Experiment configuration: TOML schema (version 1), validation and model construction.

Expressions (driver, terminal value, obstacle, state-dependent volatility) are
written over numpy names and evaluated in a whitelisted namespace. The state is
one-dimensional in configuration files.
"""

from __future__ import annotations

import ast
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .bsde import GeneratorSpec, PicardConfig, StateBins, TerminalSpec
from .measures import DriftControlSet, MeasureFamily
from .paths import Deterministic, ExitOfBox, HittingLevel, SimConfig, TimeGrid, VolatilitySpec
from .rbsde import DEFAULT_LADDER, ObstacleSpec
from .regression import RegressionBasis

SCHEMA_VERSION = 1
KINDS = ("simulate", "bsde", "rbsde", "2bsde")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


# ---------------------------------------------------------------------------
# Expressions

_FUNCS = {
    name: getattr(np, name)
    for name in ("exp", "log", "sqrt", "abs", "maximum", "minimum", "sin", "cos", "tanh", "where",
                 "clip", "sign", "square", "ones_like", "zeros_like", "cosh", "sinh", "arctan")
}
_FUNCS.update({"max": np.maximum, "min": np.minimum, "pos": lambda v: np.maximum(v, 0.0)})
_CONSTS = {"pi": math.pi, "e": math.e, "inf": math.inf}
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant, ast.Compare,
    ast.IfExp, ast.BoolOp, ast.operator, ast.unaryop, ast.cmpop, ast.boolop, ast.Tuple,
)


@dataclass(frozen=True)
class Expr:
    source: str
    variables: tuple
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        known = set(_FUNCS) | set(_CONSTS) | set(self.variables) | set(self.constants)
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED_NODES):
                raise ConfigError(f"expression {self.source!r} uses a disallowed construct ({type(node).__name__})")
            if isinstance(node, ast.Name) and node.id not in known:
                raise ConfigError(f"expression {self.source!r} uses unknown name {node.id!r}")
            if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
                raise ConfigError(f"expression {self.source!r} calls a function outside the whitelist")
        object.__setattr__(self, "_code", compile(tree, "<config>", "eval"))

    def uses(self, name: str) -> bool:
        return any(isinstance(n, ast.Name) and n.id == name for n in ast.walk(ast.parse(self.source, mode="eval")))

    def __call__(self, **values):
        ns = dict(_FUNCS)
        ns.update(_CONSTS)
        ns.update(self.constants)
        ns.update(values)
        return eval(self._code, {"__builtins__": {}}, ns)


# ---------------------------------------------------------------------------
# Experiment


@dataclass(frozen=True)
class CheckSpec:
    name: str
    params: dict


@dataclass
class Experiment:
    raw: dict
    source_text: str
    kind: str
    seed: int
    name: str
    grid: TimeGrid
    rule: Any
    n_paths: int
    x0: float
    volatility: VolatilitySpec
    family: MeasureFamily | None
    gen: GeneratorSpec
    term: TerminalSpec
    obstacle: ObstacleSpec
    controls: DriftControlSet
    basis: RegressionBasis
    picard: PicardConfig
    ladder: tuple
    z_mode: str
    checks: list
    formats: tuple
    plots: bool
    bins: StateBins | None
    n_bins: int
    sweep: dict
    threads: int | None = None
    exprs: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        """Hash of the canonical JSON form, so a manifest re-run hashes identically."""
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def sim_config(self, seed: int | None = None, n_paths: int | None = None, grid: TimeGrid | None = None) -> SimConfig:
        return SimConfig(grid or self.grid, self.rule, n_paths or self.n_paths,
                         self.seed if seed is None else seed, initial_offset=(self.x0,), threads=self.threads)

    def with_overrides(self, **kw) -> "Experiment":
        from dataclasses import replace
        return replace(self, **kw)


def _get(section: dict, key: str, default=None, kind=None, problems=None, where=""):
    v = section.get(key, default)
    if kind is not None and v is not None and not isinstance(v, kind):
        problems.append(f"{where}{key} must be {kind if isinstance(kind, type) else kind}, got {v!r}")
        return default
    return v


_NUM = (int, float)


def _volatility(sec: dict, constants: dict, problems: list) -> VolatilitySpec | None:
    if "sigma" in sec:
        s = sec["sigma"]
        if not isinstance(s, _NUM) or s < 0:
            problems.append(f"volatility.sigma must be a nonnegative number, got {s!r}")
            return None
        return VolatilitySpec.from_constant(float(s))
    if "expr" in sec:
        if "bound" not in sec:
            problems.append("volatility.expr needs a 'bound'")
            return None
        e = Expr(sec["expr"], ("t", "x"), constants)
        bound = float(sec["bound"])
        return VolatilitySpec(
            lambda t, x, _e=e: np.asarray(_e(t=t, x=x[:, 0]), dtype=float).reshape(-1, 1, 1) * np.ones((x.shape[0], 1, 1)),
            bound, label=f"sigma={sec['expr']}",
        )
    return VolatilitySpec.from_constant(1.0)


def _stopping(sec: dict, problems: list):
    kind = sec.get("kind", "deterministic")
    try:
        if kind == "deterministic":
            return Deterministic(float(sec.get("horizon", 1.0)))
        if kind == "exit_box":
            return ExitOfBox(float(sec["lower"]), float(sec["upper"]))
        if kind == "hitting":
            return HittingLevel(0, float(sec["level"]))
    except KeyError as exc:
        problems.append(f"stopping rule {kind!r} needs {exc.args[0]!r}")
        return None
    problems.append(f"unknown stopping kind {kind!r} (deterministic, exit_box, hitting)")
    return None


def _generator(sec: dict, constants: dict, problems: list) -> GeneratorSpec | None:
    src = sec.get("expr", "0")
    try:
        e = Expr(str(src), ("t", "x", "y", "z", "s"), constants)
    except ConfigError as exc:
        problems.extend(exc.problems)
        return None

    def F(t, x, y, z, sig, _e=e):
        return _e(t=t, x=x[:, 0], y=y, z=z[:, 0], s=np.asarray(sig)[:, 0, 0])

    L = float(sec.get("lipschitz_L", 0.0))
    mu = float(sec.get("monotone_mu", 0.0))
    rho = float(sec.get("weight_rho", max(1.0, -mu + 1.0)))
    q = float(sec.get("moment_q", 4.0))
    return GeneratorSpec(F, L, mu, rho, q, label=f"F={src}")


def _terminal(sec: dict, constants: dict, problems: list) -> TerminalSpec | None:
    src = str(sec.get("expr", "0"))
    try:
        e = Expr(src, ("x", "tau"), constants)
    except ConfigError as exc:
        problems.extend(exc.problems)
        return None
    if e.uses("tau"):
        return TerminalSpec(xi_fn=lambda b, _e=e: _e(x=b.stopped_state()[:, 0], tau=b.stop_times), label=src)
    return TerminalSpec(g=lambda x, _e=e: np.broadcast_to(np.asarray(_e(x=x[:, 0], tau=0.0), dtype=float),
                                                          (x.shape[0],)), label=src)


def _obstacle(sec: dict | None, constants: dict, problems: list) -> ObstacleSpec:
    if not sec or sec.get("kind", "expr") == "unconstrained" or "expr" not in sec:
        return ObstacleSpec.unconstrained()
    try:
        e = Expr(str(sec["expr"]), ("t", "x"), constants)
    except ConfigError as exc:
        problems.extend(exc.problems)
        return ObstacleSpec.unconstrained()
    return ObstacleSpec(lambda t, x, _e=e: _e(t=t, x=x[:, 0]), label=str(sec["expr"]))


def _basis(num: dict, problems: list) -> RegressionBasis | None:
    sec = num.get("basis", {})
    try:
        box = sec.get("domain_box")
        return RegressionBasis(
            kind=sec.get("kind", "polynomial"), degree=int(sec.get("degree", 3)), bins=int(sec.get("bins", 20)),
            domain_box=tuple(box) if box else None, max_condition=float(sec.get("max_condition", 1e10)),
        )
    except ValueError as exc:
        problems.append(f"basis: {exc}")
        return None


def validate_windows(gen: GeneratorSpec, checks: list) -> list[str]:
    """Every violated admissibility window, with the offending values."""
    out = []
    mu, rho, q = gen.monotone_mu, gen.weight_rho, gen.moment_q
    if not rho > -mu:
        out.append(f"integrability window violated: need rho > -mu, got rho={rho}, mu={mu}")
    if not q > 1:
        out.append(f"integrability window violated: need q > 1, got q={q}")
    if gen.lipschitz_L < 0:
        out.append(f"Lipschitz constant must be nonnegative, got L={gen.lipschitz_L}")
    for c in checks:
        p = c.params.get("p")
        etas = c.params.get("etas", [c.params["eta"]] if "eta" in c.params else [])
        if p is not None and c.name in ("apriori", "stability_bsde", "stability_rbsde", "two_horizon"):
            if not 1 < float(p) < q:
                out.append(f"check {c.name}: need p in (1, q), got p={p}, q={q}")
        for eta in etas:
            if not -mu <= float(eta) < rho:
                out.append(f"check {c.name}: weight eta={eta} outside [-mu, rho) = [{-mu}, {rho})")
    return out


def load_config(path: str | Path, seed_override: int | None = None, threads: int | None = None) -> Experiment:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if path.suffix == ".json":
        # a run manifest: the embedded configuration and seed reproduce the run
        try:
            man = json.loads(text)
            raw = dict(man["config"])
        except (ValueError, KeyError, TypeError):
            raise ConfigError(f"{path} is not a run manifest") from None
        raw["experiment"] = dict(raw.get("experiment", {}), seed=man.get("seed"))
        return build_experiment(raw, "", seed_override, threads)
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return build_experiment(raw, text, seed_override, threads)


def build_experiment(raw: dict, text: str = "", seed_override: int | None = None,
                     threads: int | None = None) -> Experiment:
    problems: list[str] = []
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        problems.append(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    exp = raw.get("experiment", {})
    kind = exp.get("kind", "bsde")
    if kind not in KINDS:
        problems.append(f"experiment.kind must be one of {KINDS}, got {kind!r}")
    seed = exp.get("seed") if seed_override is None else seed_override
    if seed is None:
        problems.append("experiment.seed is required (no nondeterministic default)")
    elif not isinstance(seed, int) or seed < 0:
        problems.append(f"experiment.seed must be a nonnegative integer, got {seed!r}")
    prob = raw.get("problem", {})
    constants = dict(prob.get("constants", {}))
    num = raw.get("numerics", {})

    rule = _stopping(prob.get("stopping", {}), problems)
    vol = _volatility(prob.get("volatility", {}), constants, problems)
    fam_sec = prob.get("family")
    family = None
    if fam_sec is not None:
        sig = fam_sec.get("sigmas", [])
        if not sig:
            problems.append("family.sigmas must be a nonempty list")
        else:
            family = MeasureFamily.constant_volatilities([float(s) for s in sig])
    elif kind == "2bsde":
        problems.append("a 2bsde experiment needs a [problem.family] section")
    gen = _generator(prob.get("generator", {}), constants, problems)
    term = _terminal(prob.get("terminal", {}), constants, problems)
    obstacle = _obstacle(prob.get("obstacle"), constants, problems)
    ctl = prob.get("controls", {})
    controls = DriftControlSet.constants(float(ctl.get("bound_L", gen.lipschitz_L if gen else 0.0)),
                                         ctl.get("values", []))
    if any(abs(v) > controls.bound_L + 1e-12 for v in ctl.get("values", [])):
        problems.append(f"controls.values exceed bound_L={controls.bound_L}")

    horizon_cap = float(num.get("horizon_cap", rule.T if isinstance(rule, Deterministic) else 8.0))
    step_h = num.get("step_h")
    n_steps = num.get("n_steps")
    grid = None
    try:
        if step_h is not None:
            grid = TimeGrid(float(step_h), int(round(horizon_cap / float(step_h))))
        else:
            grid = TimeGrid.from_horizon(horizon_cap, int(n_steps or 64))
    except (ValueError, ZeroDivisionError) as exc:
        problems.append(f"grid: {exc}")
    n_paths = int(num.get("n_paths", 10000))
    if n_paths < 2:
        problems.append("numerics.n_paths must be at least 2")
    basis = _basis(num, problems)
    pic = num.get("picard", {})
    picard = PicardConfig(max_iters=int(pic.get("max_iters", 50)), tol=float(pic.get("tol", 1e-6)),
                          implicit=bool(pic.get("implicit", False)))
    if gen is not None and grid is not None and not picard.implicit:
        guard = grid.step_h * (gen.lipschitz_L + abs(gen.monotone_mu))
        if guard >= 0.5:
            problems.append(f"explicit Picard guard violated: h*(L+|mu|) = {guard:.3g} >= 0.5 (use implicit=true)")
    ladder = tuple(float(v) for v in num.get("truncation_ladder", DEFAULT_LADDER))
    z_mode = num.get("z_mode", "covariation")
    if z_mode not in ("covariation", "markov"):
        problems.append(f"numerics.z_mode must be covariation or markov, got {z_mode!r}")

    checks = []
    for c in raw.get("checks", []):
        if "name" not in c:
            problems.append("every [[checks]] entry needs a name")
            continue
        checks.append(CheckSpec(c["name"], {k: v for k, v in c.items() if k != "name"}))
    from .checks import CATALOG
    for c in checks:
        if c.name not in CATALOG:
            problems.append(f"unknown check {c.name!r} (see list-checks)")
    if gen is not None:
        problems.extend(validate_windows(gen, checks))

    outs = raw.get("outputs", {})
    formats = tuple(outs.get("formats", ["json", "csv"]))
    bins = None
    if "bins" in outs and isinstance(outs["bins"], dict):
        b = outs["bins"]
        bins = StateBins(float(b["lower"]), float(b["upper"]), int(b.get("n", 20)))
    if problems:
        raise ConfigError(problems)
    return Experiment(
        raw=raw, source_text=text or json.dumps(raw, sort_keys=True), kind=kind, seed=int(seed),
        name=str(exp.get("name", "experiment")), grid=grid, rule=rule, n_paths=n_paths,
        x0=float(prob.get("x0", 0.0)), volatility=vol, family=family, gen=gen, term=term,
        obstacle=obstacle, controls=controls, basis=basis, picard=picard, ladder=ladder, z_mode=z_mode,
        checks=checks, formats=formats, plots=bool(outs.get("plots", False)), bins=bins,
        n_bins=int(outs.get("n_bins", 20)), sweep=dict(raw.get("sweep", {})), threads=threads,
    )
