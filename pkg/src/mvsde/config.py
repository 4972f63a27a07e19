"""Experiment configuration: YAML schema, validation and defaults.

See ``docs/config_schema.md`` for the documented keys.  Validation collects
every violation, each prefixed with its dotted path in the document.
"""

import copy
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .calculus import TEST_FUNCTIONS
from .coefficients import COEFFICIENT_CATALOG
from .errors import ConfigError
from .monotone import OPERATOR_KINDS, operator_from_dict
from .noise import MARK_LAWS
from .solver import SCHEMES, _is_multiple

EXPERIMENT_KINDS = ("simulate", "averaging", "stability", "ito_check", "audits")
STABILITY_CRITERIA = ("exp_ms", "ultimate", "as")

SYSTEM_DEFAULTS = {
    "dim": 1,
    "operator": {"kind": "zero"},
    "coefficients": {"name": "linear_mean_field", "params": {}},
    "jumps": {"rate": 0.0, "alpha": 1.0, "mark_law": "uniform_ball", "scale": 1.0},
    "initial": 1.0,
}
SOLVER_DEFAULTS = {
    "scheme": "resolvent",
    "yosida_lambda": 0.01,
    "epsilon": 1.0,
    "seed": 0,
    "threads": 1,
    "compensator_marks": 1000,
}
EXPERIMENT_DEFAULTS = {
    "simulate": {},
    "averaging": {"delta": 0.1},
    "stability": {
        "criteria": list(STABILITY_CRITERIA),
        "alpha": 1.0,
        "C": 1.0,
        "fit_window": None,
        "min_r2": 0.99,
        "M": 1.0,
        "lambda": 1.0,
        "W": 0.0,
        "delta": 1e-3,
        "tail_window": None,
        "lyapunov": "quadratic",
        "audit_bounds": {"a1": 1.0, "a2": 1.0},
    },
    "ito_check": {"test_function": "measure_quadratic", "steps": None, "jump_mc": None},
    "audits": {"monotonicity_pairs": 1000, "inherited_pairs": 200, "T1": [6.283185307179586],
               "n_quad": 1000, "isometry_trials": 10000, "defect_state": 1.0},
}
OUTPUT_DEFAULTS = {"directory": "out", "retain_snapshots": False}


@dataclass
class ExperimentConfig:
    system: dict
    solver: dict
    experiment: dict
    output: dict = field(default_factory=lambda: dict(OUTPUT_DEFAULTS))

    @property
    def kind(self):
        return self.experiment["kind"]

    def to_dict(self):
        return {"system": copy.deepcopy(self.system), "solver": copy.deepcopy(self.solver),
                "experiment": copy.deepcopy(self.experiment), "output": copy.deepcopy(self.output)}

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in (given or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _number(errors, path, value, positive=False, integer=False, allow_zero=True):
    try:
        x = int(value) if integer else float(value)
        if integer and float(value) != x:
            raise ValueError
    except (TypeError, ValueError):
        errors.append(f"{path}: expected {'an integer' if integer else 'a number'}, got {value!r}")
        return None
    if positive and not (x > 0 or (allow_zero and x == 0)):
        errors.append(f"{path}: must be {'>= 0' if allow_zero else '> 0'}, got {value!r}")
        return None
    return x


def _check_system(errors, system):
    dim = _number(errors, "system.dim", system.get("dim"), positive=True, integer=True,
                  allow_zero=False)
    op = system.get("operator")
    if not isinstance(op, dict) or "kind" not in op:
        errors.append("system.operator.kind: missing required key")
    elif op["kind"] not in OPERATOR_KINDS:
        errors.append(f"system.operator.kind: unknown operator kind {op['kind']!r}; "
                      f"valid kinds: {sorted(OPERATOR_KINDS)}")
    else:
        try:
            built = operator_from_dict(op, dim)
            if dim is not None and built.dim != dim:
                errors.append(f"system.operator: dimension {built.dim} does not match system.dim={dim}")
        except Exception as exc:  # noqa: BLE001 - every failure is a config violation
            errors.append(f"system.operator: {exc}")
    coeffs = system.get("coefficients")
    if not isinstance(coeffs, dict) or "name" not in coeffs:
        errors.append("system.coefficients.name: missing required key")
    elif coeffs["name"] not in COEFFICIENT_CATALOG:
        errors.append(f"system.coefficients.name: unknown coefficient system {coeffs['name']!r}; "
                      f"valid: {sorted(COEFFICIENT_CATALOG)}")
    elif not isinstance(coeffs.get("params", {}), dict):
        errors.append("system.coefficients.params: expected a mapping")
    jumps = system.get("jumps", {})
    _number(errors, "system.jumps.rate", jumps.get("rate"), positive=True)
    _number(errors, "system.jumps.alpha", jumps.get("alpha"), positive=True, allow_zero=False)
    _number(errors, "system.jumps.scale", jumps.get("scale"), positive=True, allow_zero=False)
    if jumps.get("mark_law") not in MARK_LAWS:
        errors.append(f"system.jumps.mark_law: unknown mark law {jumps.get('mark_law')!r}; "
                      f"valid: {list(MARK_LAWS)}")
    init = system.get("initial")
    if isinstance(init, dict):
        if init.get("kind", "gaussian") != "gaussian":
            errors.append(f"system.initial.kind: unknown initial law {init.get('kind')!r}; "
                          "valid: ['gaussian']")
    elif not isinstance(init, (int, float, list)):
        errors.append(f"system.initial: expected a number, list or gaussian mapping, got {init!r}")


def _check_solver(errors, solver, kind):
    for key in ("n_particles", "step", "horizon"):
        if key not in solver:
            errors.append(f"solver.{key}: missing required key")
    n = _number(errors, "solver.n_particles", solver.get("n_particles", 1), positive=True,
                integer=True, allow_zero=False)
    h = _number(errors, "solver.step", solver.get("step", 1.0), positive=True, allow_zero=False)
    T = _number(errors, "solver.horizon", solver.get("horizon", 1.0), positive=True,
                allow_zero=False)
    if h and T and not _is_multiple(T, h):
        errors.append(f"solver.horizon: T not an integer multiple of h (T={T}, h={h})")
    if solver.get("scheme") not in SCHEMES:
        errors.append(f"solver.scheme: unknown scheme {solver.get('scheme')!r}; valid: {list(SCHEMES)}")
    _number(errors, "solver.yosida_lambda", solver.get("yosida_lambda"), positive=True, allow_zero=False)
    _number(errors, "solver.seed", solver.get("seed"), positive=True, integer=True)
    _number(errors, "solver.threads", solver.get("threads"), positive=True, integer=True,
            allow_zero=False)
    _number(errors, "solver.compensator_marks", solver.get("compensator_marks"), positive=True,
            integer=True, allow_zero=False)
    if kind == "averaging":
        eps = solver.get("epsilons")
        if not isinstance(eps, list) or not eps:
            errors.append("solver.epsilons: averaging needs a non-empty list")
        else:
            vals = [_number(errors, f"solver.epsilons[{i}]", e, positive=True, allow_zero=False)
                    for i, e in enumerate(eps)]
            if None not in vals and vals != sorted(vals, reverse=True):
                errors.append("solver.epsilons: must be sorted in descending order")
    else:
        _number(errors, "solver.epsilon", solver.get("epsilon"), positive=True, allow_zero=False)
    return n, h, T


def _check_experiment(errors, exp, horizon):
    kind = exp["kind"]
    if kind == "stability":
        crit = exp.get("criteria")
        if not isinstance(crit, list):
            errors.append("experiment.criteria: expected a list")
        else:
            for i, c in enumerate(crit):
                if c not in STABILITY_CRITERIA:
                    errors.append(f"experiment.criteria[{i}]: unknown criterion {c!r}; "
                                  f"valid: {list(STABILITY_CRITERIA)}")
        for key in ("alpha", "C", "M", "lambda", "W", "delta"):
            _number(errors, f"experiment.{key}", exp.get(key), positive=True)
        if exp.get("lyapunov") not in TEST_FUNCTIONS:
            errors.append(f"experiment.lyapunov: unknown test function {exp.get('lyapunov')!r}; "
                          f"valid: {sorted(TEST_FUNCTIONS)}")
        tw = exp.get("tail_window")
        if tw is not None and horizon and not 0 <= float(tw) <= horizon:
            errors.append("experiment.tail_window: must lie in [0, horizon]")
    elif kind == "ito_check":
        if exp.get("test_function") not in TEST_FUNCTIONS:
            errors.append(f"experiment.test_function: unknown test function "
                          f"{exp.get('test_function')!r}; valid: {sorted(TEST_FUNCTIONS)}")
        steps = exp.get("steps")
        if steps is not None:
            if not isinstance(steps, list) or not steps:
                errors.append("experiment.steps: expected a non-empty list")
            else:
                for i, s in enumerate(steps):
                    v = _number(errors, f"experiment.steps[{i}]", s, positive=True, allow_zero=False)
                    if v and horizon and not _is_multiple(horizon, v):
                        errors.append(f"experiment.steps[{i}]: T not an integer multiple of h")
    elif kind == "averaging":
        _number(errors, "experiment.delta", exp.get("delta"), positive=True, allow_zero=False)


def parse_config(text, kind=None):
    """Parse and validate YAML ``text`` into an :class:`ExperimentConfig`.

    ``kind`` (e.g. from a CLI subcommand) fills ``experiment.kind`` when the
    document omits it.  Raises :class:`ConfigError` listing every violation.
    """
    try:
        doc = yaml.safe_load(text) if isinstance(text, str) else text
    except yaml.YAMLError as exc:
        raise ConfigError([f"<document>: not valid YAML ({exc})"]) from exc
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError(["<document>: expected a mapping at the top level"])
    errors = []
    for key in doc:
        if key not in ("system", "solver", "experiment", "output"):
            errors.append(f"{key}: unknown top-level key")
    exp_in = dict(doc.get("experiment") or {})
    given_kind = exp_in.get("kind")
    if kind is not None and given_kind is not None and given_kind != kind:
        errors.append(f"experiment.kind: config declares {given_kind!r} but {kind!r} was requested")
    kind = given_kind or kind
    if kind is None:
        errors.append("experiment.kind: missing required key")
        kind = "simulate"
    elif kind not in EXPERIMENT_KINDS:
        errors.append(f"experiment.kind: unknown experiment kind {kind!r}; valid: {list(EXPERIMENT_KINDS)}")
        kind = "simulate"

    system = _merge(SYSTEM_DEFAULTS, doc.get("system"))
    solver = _merge(SOLVER_DEFAULTS, doc.get("solver"))
    exp_in["kind"] = kind
    experiment = _merge(EXPERIMENT_DEFAULTS[kind], exp_in)
    output = _merge(OUTPUT_DEFAULTS, doc.get("output"))

    _check_system(errors, system)
    _, _, horizon = _check_solver(errors, solver, kind)
    _check_experiment(errors, experiment, horizon)
    if kind == "stability" and "as" in (experiment.get("criteria") or []) \
            and isinstance(system.get("initial"), dict):
        errors.append("system.initial: the as criterion needs a deterministic initial state")
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(system, solver, experiment, output)


def load_config(path, kind=None):
    with open(path) as fh:
        return parse_config(fh.read(), kind)
