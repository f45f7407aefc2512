"""Line-based run configuration.

Format: one ``section.key = value`` per line, ``#`` starts a comment.
Values are numbers, booleans, names, bracketed numeric lists, or field
expressions built from the catalog, e.g.

    problem.target = sinpi(10, 2) + constant(0.5)
    problem.adjoint = linear(0, 4, -2) * sinpi(1, 1)

All validation errors are collected and reported together.
"""

from __future__ import annotations

import ast
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import CATALOG, FieldSpec
from .grid import make_grid
from .objective import Ball, PerturbationE, ProblemInstance, make_instance, target_for_adjoint
from .optimize import switching_vertex
from .pde import NONLINEARITIES, Coefficients, Nonlinearity, assemble_operator

COMMANDS = (
    "solve", "subgradient", "fd-check", "holder-sweep", "measure-fit",
    "growth-check", "ssc-check", "coderivative-check", "sweep-bounded",
)
BANGBANG_COMMANDS = ("holder-sweep", "growth-check", "ssc-check")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


# key -> (kind, default); kinds: int, float, bool, name, list, field, ladder
SCHEMA = {
    "problem.dim": ("int", 1),
    "problem.extents": ("list", [0.0, 1.0]),
    "problem.n": ("int", 63),
    "problem.operator": ("name", "laplace"),
    "problem.coefficients": ("list", None),
    "problem.nonlinearity": ("name", "zero"),
    "problem.nonlinearity_scale": ("float", 1.0),
    "problem.target": ("field", None),
    "problem.adjoint": ("field", None),
    "problem.tracking_weight": ("float", 1.0),
    "problem.zeta": ("field", 0.0),
    "problem.alpha": ("field", -1.0),
    "problem.beta": ("field", 1.0),
    "problem.Q": ("name", "whole"),
    "problem.radius": ("float", None),
    "problem.norm_mode": ("name", "l2"),
    "problem.sigma": ("float", None),
    "perturbation.e_J": ("field", 0.0),
    "perturbation.e_y": ("field", 0.0),
    "perturbation.e_alpha": ("field", 0.0),
    "perturbation.e_beta": ("field", 0.0),
    "perturbation.family": ("name", "e_J"),
    "perturbation.family_field": ("field", 1.0),
    "perturbation.ladder": ("list", None),
    "perturbation.ladder_points": ("int", 6),
    "experiment.seed": ("int", 0),
    "experiment.tol": ("float", 1e-9),
    "experiment.max_iter": ("int", 2000),
    "experiment.n_starts": ("int", 3),
    "experiment.steps": ("list", [1e-2, 3e-3, 1e-3, 3e-4]),
    "experiment.tol_pass": ("float", 5e-3),
    "experiment.eps": ("list", None),
    "experiment.phi": ("field", None),
    "experiment.kappa_min": ("float", None),
    "experiment.kappa_max": ("float", None),
    "experiment.K_min": ("float", None),
    "experiment.K_max": ("float", None),
    "experiment.n_samples": ("int", 1000),
    "experiment.tau": ("float", None),
    "experiment.delta_target": ("float", 0.0),
    "experiment.oracle_rtol": ("float", 0.1),
    "experiment.min_exponent": ("float", 0.85),
    "experiment.min_r2": ("float", 0.98),
    "experiment.candidates": ("int", 100),
    "experiment.candidate_nodes": ("int", 8),
    "experiment.i2_cert": ("float", 1e-8),
    "experiment.out": ("name", "out"),
}

FAMILIES = ("e_J", "e_y", "e_alpha", "e_beta", "bounds")


def parse_field(text: str):
    """Parse a number or a sum/product of catalog calls into a FieldSpec."""
    tree = ast.parse(text.strip(), mode="eval").body

    def walk(node):
        if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Mult)):
            a, b = walk(node.left), walk(node.right)
            return a + b if isinstance(node.op, ast.Add) else a * b
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            if node.func.id not in CATALOG:
                raise ValueError(f"unknown field {node.func.id!r}; catalog: {', '.join(CATALOG)}")
            args = [ast.literal_eval(a) for a in node.args]
            return FieldSpec.call(node.func.id, *args)
        value = ast.literal_eval(node)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"expected a number or field expression, got {text!r}")
        return FieldSpec.const(value)

    return walk(tree)


def _convert(kind: str, text: str):
    text = text.strip()
    if kind == "int":
        v = ast.literal_eval(text)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ValueError(f"expected an integer, got {text!r}")
        return v
    if kind == "float":
        v = ast.literal_eval(text)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"expected a number, got {text!r}")
        return float(v)
    if kind == "bool":
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if kind == "name":
        if not re.fullmatch(r"[A-Za-z0-9_./-]+", text):
            raise ValueError(f"expected a name, got {text!r}")
        return text
    if kind == "list":
        v = ast.literal_eval(text)
        if not isinstance(v, (list, tuple)):
            raise ValueError(f"expected a bracketed list, got {text!r}")
        return [float(x) for x in np.ravel(np.asarray(v, dtype=float))]
    if kind == "field":
        return parse_field(text)
    raise AssertionError(kind)


@dataclass
class RunConfig:
    values: dict
    text: str
    path: str = ""
    provided: set = field(default_factory=set)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def override(self, key: str, text: str) -> "RunConfig":
        full = key if "." in key else f"experiment.{key}"
        if full not in SCHEMA:
            raise ConfigError([f"unknown override key {key!r}"])
        vals = dict(self.values)
        vals[full] = _convert(SCHEMA[full][0], text)
        return RunConfig(vals, self.text + f"\n# override {full} = {text}", self.path, self.provided | {full})

    # ---- builders

    def domain(self):
        return make_grid(self["problem.dim"], self["problem.extents"], int(self["problem.n"]))

    def build_instance(self) -> ProblemInstance:
        dom = self.domain()
        coeffs = None
        if self["problem.operator"] == "diagonal":
            coeffs = Coefficients.diagonal_constant(self["problem.coefficients"])
        f = Nonlinearity(self["problem.nonlinearity"], self["problem.nonlinearity_scale"])
        alpha = self["problem.alpha"](dom)
        beta = self["problem.beta"](dom)
        weight = self["problem.tracking_weight"]
        target = self["problem.target"](dom) if self["problem.target"] is not None else dom.zeros()
        if self["problem.adjoint"] is not None:
            # manufactured: pick y_d so the given field is the adjoint at the switching control
            op = assemble_operator(dom, coeffs)
            phi = self["problem.adjoint"](dom)
            u = switching_vertex(phi, alpha, beta, 0.5 * (alpha + beta), 0.0)
            target = target_for_adjoint(op, f, u, phi, weight)
        Q = Ball(self["problem.radius"]) if self["problem.Q"] == "ball" else None
        return make_instance(
            dom, nonlinearity=f, target=target, tracking_weight=weight, zeta=self["problem.zeta"](dom),
            alpha=alpha, beta=beta, coefficients=coeffs, Q=Q, norm_mode=self["problem.norm_mode"],
            sigma=self["problem.sigma"],
        )

    def base_perturbation(self, dom) -> PerturbationE:
        return PerturbationE(*(self[f"perturbation.{c}"](dom) for c in ("e_J", "e_y", "e_alpha", "e_beta")))

    def family(self, dom) -> PerturbationE:
        fam = self["perturbation.family"]
        v = self["perturbation.family_field"](dom)
        if fam == "bounds":
            z = dom.zeros()
            return PerturbationE(z, z.copy(), v, v.copy())
        return PerturbationE.single(dom, fam, v)


def _validate(values: dict, provided: set, command: str | None) -> list[str]:
    errors = []
    if values["problem.dim"] not in (1, 2):
        errors.append(f"problem.dim must be 1 or 2, got {values['problem.dim']}")
    if values["problem.nonlinearity"] not in NONLINEARITIES:
        errors.append(
            f"problem.nonlinearity: unknown name {values['problem.nonlinearity']!r}; catalog: {', '.join(NONLINEARITIES)}"
        )
    if values["problem.operator"] not in ("laplace", "diagonal"):
        errors.append(f"problem.operator: unknown name {values['problem.operator']!r}; catalog: laplace, diagonal")
    if values["problem.operator"] == "diagonal" and values["problem.coefficients"] is None:
        errors.append("problem.operator = diagonal needs problem.coefficients")
    if values["problem.Q"] not in ("whole", "ball"):
        errors.append(f"problem.Q: unknown name {values['problem.Q']!r}; catalog: whole, ball")
    if values["problem.Q"] == "ball" and not (values["problem.radius"] or 0) > 0:
        errors.append("problem.Q = ball needs a positive problem.radius")
    if values["problem.norm_mode"] not in ("l2", "bangbang"):
        errors.append(f"problem.norm_mode: unknown name {values['problem.norm_mode']!r}; catalog: l2, bangbang")
    if values["perturbation.family"] not in FAMILIES:
        errors.append(f"perturbation.family: unknown name {values['perturbation.family']!r}; catalog: {', '.join(FAMILIES)}")
    steps = values["experiment.steps"]
    if any(s <= 0 for s in steps) or any(b >= a for a, b in zip(steps, steps[1:])):
        errors.append("experiment.steps must be positive and strictly decreasing")
    for key in ("experiment.tol", "experiment.tol_pass"):
        if not values[key] > 0:
            errors.append(f"{key} must be positive")
    zeta_nonzero = _is_nonzero_const(values["problem.zeta"])
    if values["problem.norm_mode"] == "bangbang" and (zeta_nonzero or values["problem.Q"] != "whole"):
        errors.append(
            "regime: problem.norm_mode = bangbang requires problem.zeta = 0 and problem.Q = whole"
        )
    if command in BANGBANG_COMMANDS:
        bad = []
        if zeta_nonzero:
            bad.append(f"problem.zeta = {values['problem.zeta']!r}")
        if values["problem.Q"] != "whole":
            bad.append(f"problem.Q = {values['problem.Q']}")
        if values["problem.norm_mode"] != "bangbang":
            bad.append(f"problem.norm_mode = {values['problem.norm_mode']}")
        if bad:
            errors.append(f"regime: command {command} needs the bang-bang regime; offending keys: {', '.join(bad)}")
    if command == "sweep-bounded" and values["problem.Q"] != "whole":
        errors.append("regime: command sweep-bounded needs problem.Q = whole")
    if command == "measure-fit" and values["experiment.eps"] is None:
        errors.append("command measure-fit needs experiment.eps")
    return errors


def _is_nonzero_const(spec) -> bool:
    """True unless the field expression is the constant 0 (conservative)."""
    if spec is None:
        return False
    for product in spec.terms:
        if any(name == "constant" and args[0] == 0 for name, args in product):
            continue
        return True
    return False


def parse_text(text: str, command: str | None = None, path: str = "") -> RunConfig:
    errors = []
    values = {k: (parse_field(repr(d)) if kind == "field" and d is not None else d) for k, (kind, d) in SCHEMA.items()}
    provided = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'section.key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in provided:
            errors.append(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(SCHEMA[key][0], value)
            provided.add(key)
        except (ValueError, SyntaxError) as exc:
            errors.append(f"line {lineno}: {key}: {exc}")
    errors += _validate(values, provided, command)
    if errors:
        raise ConfigError(errors)
    return RunConfig(values, text, path, provided)


def parse_config(path, command: str | None = None) -> RunConfig:
    path = Path(path)
    return parse_text(path.read_text(), command, str(path))
