"""Experiment configuration: flat sectioned key-value files, schema-checked.

Boxes are written compactly as lower/upper bounds; general polytopic sets
use ``*_normals``/``*_offsets`` matrix keys. Matrices are written with
rows separated by ``;`` and entries by whitespace. ``dump_config`` is the
canonical serializer: loading and re-serializing is idempotent and the
config hash embedded in every output file is the hash of that canonical
text.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

import numpy as np

from .model import LtiModel, ProblemData
from .polytope import HPolytope, VertexSet, box, box_vertices


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending field."""


def _fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_vector(v) -> str:
    return " ".join(_fmt_float(x) for x in np.asarray(v, dtype=float).reshape(-1))


def _fmt_matrix(M) -> str:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return "; ".join(" ".join(_fmt_float(x) for x in row) for row in M)


def _parse_vector(text: str, field: str) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in text.replace(",", " ").split()])
    except ValueError as exc:
        raise ConfigError(f"config field '{field}': not a numeric vector: {text!r}") from exc


def _parse_matrix(text: str, field: str) -> np.ndarray:
    rows = [r.strip() for r in text.split(";") if r.strip()]
    parsed = [_parse_vector(r, field) for r in rows]
    widths = {p.size for p in parsed}
    if len(widths) != 1:
        raise ConfigError(f"config field '{field}': ragged matrix rows")
    return np.vstack(parsed)


@dataclass(frozen=True)
class SetSpec:
    """One constraint set, as bounds (box) or a general H-representation."""

    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    normals: np.ndarray | None = None
    offsets: np.ndarray | None = None

    @property
    def is_box(self) -> bool:
        return self.lower is not None

    def to_polytope(self, constraint_set: bool = True) -> HPolytope:
        if self.is_box:
            return box(self.lower, self.upper, constraint_set=constraint_set)
        return HPolytope(self.normals, self.offsets, constraint_set=constraint_set)

    def vertices(self) -> VertexSet:
        if not self.is_box:
            from .polytope import vertices_2d
            return vertices_2d(self.to_polytope(constraint_set=False))
        return box_vertices(self.lower, self.upper)


@dataclass(frozen=True)
class ExperimentConfig:
    a: np.ndarray
    b: np.ndarray
    x_set: SetSpec
    u_set: SetSpec
    w_set: SetSpec
    q: np.ndarray
    r: np.ndarray
    horizon: int
    memory_capacity: int
    schedule: str  # 'background' or a decimal period
    rho: float
    secondary_cost: str
    tightening_mu: float
    seed_state: np.ndarray
    mrpi_contraction: float
    mrpi_eps: float
    mrpi_step_cap: int
    solver_tol: float
    solver_max_iter: int
    seed: int
    steps: int
    x0: np.ndarray
    tube_snapshot_steps: tuple[int, ...]
    grid_spacing: float
    grid_bounds: np.ndarray | None


def _read_set(cp: configparser.ConfigParser, prefix: str) -> SetSpec:
    sec = cp["constraints"]
    lo_key, up_key = f"{prefix}_lower", f"{prefix}_upper"
    nm_key, of_key = f"{prefix}_normals", f"{prefix}_offsets"
    has_bounds = lo_key in sec or up_key in sec
    has_hrep = nm_key in sec or of_key in sec
    if has_bounds and has_hrep:
        raise ConfigError(f"config field 'constraints.{prefix}_*': give bounds or normals, not both")
    if has_bounds:
        if lo_key not in sec or up_key not in sec:
            raise ConfigError(f"config field 'constraints.{prefix}_lower/upper': both bounds required")
        lo = _parse_vector(sec[lo_key], f"constraints.{lo_key}")
        up = _parse_vector(sec[up_key], f"constraints.{up_key}")
        if lo.size != up.size:
            raise ConfigError(f"config field 'constraints.{prefix}_*': bound lengths differ")
        return SetSpec(lower=lo, upper=up)
    if has_hrep:
        if nm_key not in sec or of_key not in sec:
            raise ConfigError(f"config field 'constraints.{prefix}_normals/offsets': both required")
        return SetSpec(normals=_parse_matrix(sec[nm_key], f"constraints.{nm_key}"),
                       offsets=_parse_vector(sec[of_key], f"constraints.{of_key}"))
    raise ConfigError(f"config field 'constraints.{prefix}_lower': missing constraint set '{prefix}'")


def _get(cp, section, key, conv, default=None, field=None):
    field = field or f"{section}.{key}"
    if section not in cp:
        if default is not None:
            return default
        raise ConfigError(f"config field '{field}': missing section '{section}'")
    if key not in cp[section]:
        if default is not None:
            return default
        raise ConfigError(f"config field '{field}': missing")
    raw = cp[section][key]
    try:
        return conv(raw)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"config field '{field}': cannot parse {raw!r}") from exc


def load_config_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc

    a = _get(cp, "model", "a", lambda s: _parse_matrix(s, "model.a"))
    b_mat = _get(cp, "model", "b", lambda s: _parse_matrix(s, "model.b"))
    if a.shape[0] != a.shape[1]:
        raise ConfigError("config field 'model.a': must be square")
    n = a.shape[0]
    if b_mat.shape[0] != n:
        # Allow a single row vector for single-input systems written inline.
        if b_mat.shape == (1, n):
            b_mat = b_mat.T
        else:
            raise ConfigError(f"config field 'model.b': needs {n} rows")

    if "constraints" not in cp:
        raise ConfigError("config field 'constraints': missing section")
    x_set = _read_set(cp, "x")
    u_set = _read_set(cp, "u")
    w_set = _read_set(cp, "w")

    def cost_matrix(text, field, dim):
        M = _parse_matrix(text, field)
        if M.shape == (1, 1):
            return float(M[0, 0]) * np.eye(dim)
        if M.shape != (dim, dim):
            raise ConfigError(f"config field '{field}': expected scalar or {dim}x{dim} matrix")
        return M

    m = b_mat.shape[1]
    q = _get(cp, "cost", "q", lambda s: cost_matrix(s, "cost.q", n))
    r = _get(cp, "cost", "r", lambda s: cost_matrix(s, "cost.r", m))

    horizon = _get(cp, "mpc", "horizon", int)
    if horizon < 2:
        raise ConfigError("config field 'mpc.horizon': must be at least 2")
    memory_capacity = _get(cp, "mpc", "memory_capacity", int, default=3)
    schedule = _get(cp, "mpc", "schedule", str, default="5").strip()
    if schedule != "background":
        try:
            period = int(schedule)
        except ValueError:
            raise ConfigError("config field 'mpc.schedule': integer period or 'background'") from None
        if period < 1:
            raise ConfigError("config field 'mpc.schedule': period must be >= 1")
        schedule = str(period)
    rho = _get(cp, "mpc", "rho", float, default=1e-3)
    secondary_cost = _get(cp, "mpc", "secondary_cost", str, default="nominal").strip()
    if secondary_cost not in ("nominal", "tightening"):
        raise ConfigError("config field 'mpc.secondary_cost': 'nominal' or 'tightening'")
    tightening_mu = _get(cp, "mpc", "tightening_mu", float, default=1e-3)
    seed_state = _get(cp, "mpc", "seed_state",
                      lambda s: _parse_vector(s, "mpc.seed_state"), default=np.zeros(n))
    if seed_state.size != n:
        raise ConfigError(f"config field 'mpc.seed_state': needs {n} entries")

    mrpi_contraction = _get(cp, "terminal", "mrpi_contraction", float, default=0.1)
    mrpi_eps = _get(cp, "terminal", "mrpi_eps", float, default=1e-9)
    mrpi_step_cap = _get(cp, "terminal", "mrpi_step_cap", int, default=200)

    solver_tol = _get(cp, "solver", "tol", float, default=1e-8)
    solver_max_iter = _get(cp, "solver", "max_iter", int, default=200)

    seed = _get(cp, "sim", "seed", int, default=0)
    steps = _get(cp, "sim", "steps", int, default=25)
    x0 = _get(cp, "sim", "x0", lambda s: _parse_vector(s, "sim.x0"), default=np.zeros(n))
    if x0.size != n:
        raise ConfigError(f"config field 'sim.x0': needs {n} entries")
    snap = _get(cp, "sim", "tube_snapshot_steps",
                lambda s: tuple(int(t) for t in s.split()), default=(1, 5, 10, 15))

    grid_spacing = _get(cp, "grid", "spacing", float, default=0.05)
    if grid_spacing <= 0:
        raise ConfigError("config field 'grid.spacing': must be positive")
    grid_bounds = None
    if "grid" in cp and "bounds" in cp["grid"]:
        grid_bounds = _parse_matrix(cp["grid"]["bounds"], "grid.bounds")
        if grid_bounds.shape != (2, n):
            raise ConfigError(f"config field 'grid.bounds': expected 2x{n} (lower; upper)")

    return ExperimentConfig(a=a, b=b_mat, x_set=x_set, u_set=u_set, w_set=w_set,
                            q=q, r=r, horizon=horizon, memory_capacity=memory_capacity,
                            schedule=schedule, rho=rho, secondary_cost=secondary_cost,
                            tightening_mu=tightening_mu, seed_state=seed_state,
                            mrpi_contraction=mrpi_contraction, mrpi_eps=mrpi_eps,
                            mrpi_step_cap=mrpi_step_cap, solver_tol=solver_tol,
                            solver_max_iter=solver_max_iter, seed=seed, steps=steps,
                            x0=x0, tube_snapshot_steps=snap, grid_spacing=grid_spacing,
                            grid_bounds=grid_bounds)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return load_config_text(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical serialization; stable under load/dump round trips."""
    out = io.StringIO()

    def section(name, items):
        out.write(f"[{name}]\n")
        for k, v in items:
            out.write(f"{k} = {v}\n")
        out.write("\n")

    section("model", [("a", _fmt_matrix(cfg.a)), ("b", _fmt_matrix(cfg.b))])
    cons = []
    for prefix, s in (("x", cfg.x_set), ("u", cfg.u_set), ("w", cfg.w_set)):
        if s.is_box:
            cons.append((f"{prefix}_lower", _fmt_vector(s.lower)))
            cons.append((f"{prefix}_upper", _fmt_vector(s.upper)))
        else:
            cons.append((f"{prefix}_normals", _fmt_matrix(s.normals)))
            cons.append((f"{prefix}_offsets", _fmt_vector(s.offsets)))
    section("constraints", cons)
    section("cost", [("q", _fmt_matrix(cfg.q)), ("r", _fmt_matrix(cfg.r))])
    section("mpc", [("horizon", str(cfg.horizon)),
                    ("memory_capacity", str(cfg.memory_capacity)),
                    ("schedule", cfg.schedule),
                    ("rho", _fmt_float(cfg.rho)),
                    ("secondary_cost", cfg.secondary_cost),
                    ("tightening_mu", _fmt_float(cfg.tightening_mu)),
                    ("seed_state", _fmt_vector(cfg.seed_state))])
    section("terminal", [("mrpi_contraction", _fmt_float(cfg.mrpi_contraction)),
                         ("mrpi_eps", _fmt_float(cfg.mrpi_eps)),
                         ("mrpi_step_cap", str(cfg.mrpi_step_cap))])
    section("solver", [("tol", _fmt_float(cfg.solver_tol)),
                       ("max_iter", str(cfg.solver_max_iter))])
    section("sim", [("seed", str(cfg.seed)), ("steps", str(cfg.steps)),
                    ("x0", _fmt_vector(cfg.x0)),
                    ("tube_snapshot_steps", " ".join(str(t) for t in cfg.tube_snapshot_steps))])
    grid = [("spacing", _fmt_float(cfg.grid_spacing))]
    if cfg.grid_bounds is not None:
        grid.append(("bounds", _fmt_matrix(cfg.grid_bounds)))
    section("grid", grid)
    return out.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]


def problem_data(cfg: ExperimentConfig) -> ProblemData:
    """Instantiate the validated problem data from a config."""
    model = LtiModel(cfg.a, cfg.b)
    w_poly = cfg.w_set.to_polytope(constraint_set=False)
    return ProblemData(model=model,
                       X=cfg.x_set.to_polytope(constraint_set=True),
                       U=cfg.u_set.to_polytope(constraint_set=True),
                       W=w_poly, W_vertices=cfg.w_set.vertices(),
                       Q=cfg.q, R=cfg.r, N=cfg.horizon)
