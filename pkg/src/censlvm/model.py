import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from censlvm.exceptions import ModelSyntaxException, ModelSpecificationException, ParameterMapException, \
    DataException
from censlvm.util import status_column, OBSERVED_FLAG

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
BINARY = "binary"
CENSORED = "censored"

CENSORING_SIDES = ("left", "right", "both")
KEYWORDS = {"latent", "binary", "censored", "cov", "slope"}
INTERCEPT = "1"

MEASUREMENTS = "Measurements"
REGRESSIONS = "Regressions"
RANDOM_SLOPES = "Random Slopes"
INTERCEPTS = "Intercepts"
VARIANCES = "Residual Variances"
COVARIANCES = "Residual Covariances"
GROUPS = (MEASUREMENTS, REGRESSIONS, RANDOM_SLOPES, INTERCEPTS, VARIANCES, COVARIANCES)

MATRICES = ("nu", "alpha", "Lambda", "K", "B", "Gamma", "Theta", "Psi", "slope")

_TOKEN = re.compile(r"""
    (?P<space>\s+)
  | (?P<arrow><-)
  | (?P<number>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<punct>[@(),*=])
""", re.VERBOSE)


@dataclass(frozen=True)
class Constraint:
    """
    How a cell of a structural matrix is determined: estimated freely,
    fixed to a value, or shared with every other cell carrying the same label
    (optionally with the label itself fixed).
    """
    kind: str = "free"
    value: Optional[float] = None
    label: Optional[str] = None

    @property
    def is_fixed(self) -> bool:
        return self.value is not None


FREE = Constraint()


@dataclass(frozen=True)
class Edge:
    to: str
    source: str
    constraint: Constraint = FREE
    line: int = 0


@dataclass(frozen=True)
class Covariance:
    a: str
    b: str
    constraint: Constraint = FREE
    line: int = 0


@dataclass(frozen=True)
class Slope:
    outcome: str
    latent: str
    moderator: str
    constraint: Constraint = FREE
    line: int = 0


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """
    Parsed and validated model: variables, their kinds and every edge.

    ``bounds`` holds optional (left, right) censoring limits per censored
    variable. They are only used when simulating; estimation reads the
    limits from the data.
    """
    manifest: Tuple[str, ...]
    latent: Tuple[str, ...]
    covariates: Tuple[str, ...]
    kinds: Dict[str, str]
    censoring: Dict[str, str]
    bounds: Dict[str, Tuple[Optional[float], Optional[float]]]
    edges: Tuple[Edge, ...]
    covariances: Tuple[Covariance, ...]
    slopes: Tuple[Slope, ...]

    def kind(self, name: str) -> str:
        return self.kinds.get(name, CONTINUOUS)

    def is_latent(self, name: str) -> bool:
        return name in self.latent

    def is_manifest(self, name: str) -> bool:
        return name in self.manifest


@dataclass(frozen=True, eq=False)
class ParameterMap:
    """
    Bijection between the free parameter vector theta and the cells of the
    structural matrices.

    Variance parameters (diagonal cells of Theta and Psi) are carried as
    log-variances in theta; ``natural`` maps theta back to the reporting scale.
    """
    spec: ModelSpec
    names: Tuple[str, ...]
    groups: Tuple[str, ...]
    display: Tuple[str, ...]
    transforms: Tuple[str, ...]
    slots: Tuple[Tuple[Tuple[str, int, int], ...], ...]
    fixed: Tuple[Tuple[Tuple[str, int, int], float], ...]
    labels: frozenset = frozenset()
    _index: Dict = field(default=None, repr=False)

    def __post_init__(self):
        index = {}
        for matrix in MATRICES:
            params, rows, cols = [], [], []
            for t, cells in enumerate(self.slots):
                for m, i, j in cells:
                    if m == matrix:
                        params.append(t)
                        rows.append(i)
                        cols.append(j)
            index[matrix] = (np.array(params, dtype=int), np.array(rows, dtype=int), np.array(cols, dtype=int))
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_log", np.array([t == "log" for t in self.transforms], dtype=bool))

    @property
    def d(self) -> int:
        return len(self.names)

    @property
    def shapes(self) -> Dict[str, Tuple[int, int]]:
        p, l, q = len(self.spec.manifest), len(self.spec.latent), len(self.spec.covariates)
        return {"nu": (p, 1), "alpha": (l, 1), "Lambda": (p, l), "K": (p, q), "B": (l, l), "Gamma": (l, q),
                "Theta": (p, p), "Psi": (l, l), "slope": (len(self.spec.slopes), 1)}

    @property
    def has_slopes(self) -> bool:
        return len(self.spec.slopes) > 0

    def natural(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.where(self._log, np.exp(np.where(self._log, theta, 0.0)), theta)

    def internal(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if np.any(values[self._log] <= 0):
            raise ParameterMapException("variance parameters must be positive")
        return np.where(self._log, np.log(np.where(self._log, values, 1.0)), values)

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        """d natural / d theta, elementwise."""
        return np.where(self._log, self.natural(theta), 1.0)

    def matrices(self, theta: np.ndarray) -> Dict[str, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.d,):
            raise ParameterMapException(f"theta has length {theta.size}, the model has {self.d} free parameters")
        values = self.natural(theta)
        out = {name: np.zeros(shape) for name, shape in self.shapes.items()}
        for (m, i, j), value in self.fixed:
            out[m][i, j] = value
        for matrix, (params, rows, cols) in self._index.items():
            out[matrix][rows, cols] = values[params]
        return out

    def derivatives(self, theta: np.ndarray) -> Dict[str, np.ndarray]:
        """Derivative of every structural matrix in theta, parameter axis last."""
        jac = self.jacobian(theta)
        out = {name: np.zeros(shape + (self.d,)) for name, shape in self.shapes.items()}
        for matrix, (params, rows, cols) in self._index.items():
            out[matrix][rows, cols, params] = jac[params]
        return out

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ParameterMapException(f"unknown parameter '{name}'")


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """
    Model-implied mean and covariance of the latent responses of one row,
    with d xi / d theta' (p x d) and d vec omega / d theta' (p*p x d).
    """
    xi: np.ndarray
    omega: np.ndarray
    dxi: np.ndarray
    domega: np.ndarray


@dataclass(frozen=True, eq=False)
class MomentBatch:
    """
    Moments for many rows at once: xi (n, p), omega (n, p, p),
    dxi (n, p, d) and domega (n, p, p, d).
    """
    xi: np.ndarray
    omega: np.ndarray
    dxi: np.ndarray
    domega: np.ndarray

    def row(self, i: int) -> MomentSystem:
        p = self.xi.shape[1]
        return MomentSystem(xi=self.xi[i].copy(), omega=self.omega[i].copy(), dxi=self.dxi[i].copy(),
                            domega=self.domega[i].reshape(p * p, -1).copy())


def _tokenize(line: str, lineno: int) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(line):
        match = _TOKEN.match(line, pos)
        if match is None:
            raise ModelSyntaxException(f"unexpected character '{line[pos]}'", lineno, pos + 1)
        kind = match.lastgroup
        if kind != "space":
            tokens.append((kind, match.group(), pos + 1))
        pos = match.end()
    return tokens


class _LineParser:

    def __init__(self, tokens: List[Tuple[str, str, int]], lineno: int, width: int):
        self.tokens = tokens
        self.lineno = lineno
        self.width = width
        self.pos = 0

    def fail(self, message: str):
        column = self.tokens[self.pos][2] if self.pos < len(self.tokens) else self.width + 1
        raise ModelSyntaxException(message, self.lineno, column)

    def peek(self) -> Optional[Tuple[str, str, int]]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, kind: str, text: Optional[str] = None) -> str:
        token = self.peek()
        if token is None or token[0] != kind or (text is not None and token[1] != text):
            expected = f"'{text}'" if text else kind
            found = f"'{token[1]}'" if token else "end of line"
            self.fail(f"expected {expected}, found {found}")
        self.pos += 1
        return token[1]

    def name(self) -> str:
        value = self.take("name")
        if value in KEYWORDS:
            self.pos -= 1
            self.fail(f"'{value}' is a reserved word")
        return value

    def at(self, kind: str, text: Optional[str] = None) -> bool:
        token = self.peek()
        return token is not None and token[0] == kind and (text is None or token[1] == text)

    def done(self):
        if self.peek() is not None:
            self.fail(f"unexpected '{self.peek()[1]}'")

    def constraint(self) -> Constraint:
        if not self.at("punct", "@"):
            return FREE
        self.take("punct", "@")
        if self.at("number"):
            return Constraint(kind="fixed", value=float(self.take("number")))
        label = self.name()
        if self.at("punct", "="):
            self.take("punct", "=")
            return Constraint(kind="label", label=label, value=float(self.take("number")))
        return Constraint(kind="label", label=label)


def parse_model(text: str) -> ModelSpec:
    """
    Parse the model description language into a validated ModelSpec.

    One statement per line, ``#`` starts a comment:

        latent eta
        binary Y2
        censored right Y3 @1.5
        Y1 <- eta @1
        Y2 <- eta @l
        eta <- X1
        Y2 <- 1 @0           # intercept
        cov(Y1, Y3)          # residual covariance, cov(Y1, Y1) is a variance
        slope Y1 <- eta * V  # random slope, loading of Y1 on eta moves with V

    Args:
        text:   Model description.

    Returns:
        A validated ModelSpec. Identifiers that are neither latent nor on the
        left of an arrow become covariates.

    Raises:
        ModelSyntaxException with line and column on malformed statements,
        ModelSpecificationException on structurally invalid models.
    """
    latent: List[str] = []
    kinds: Dict[str, str] = {}
    censoring: Dict[str, str] = {}
    bounds: Dict[str, Tuple[Optional[float], Optional[float]]] = {}
    edges: List[Edge] = []
    covariances: List[Covariance] = []
    slopes: List[Slope] = []
    order: List[str] = []

    def seen(name: str):
        if name not in order:
            order.append(name)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        tokens = _tokenize(line, lineno)
        if not tokens:
            continue
        parser = _LineParser(tokens, lineno, len(line.rstrip()))
        head = tokens[0][1] if tokens[0][0] == "name" else None

        if head in ("latent", "binary"):
            parser.take("name")
            names = [parser.name()]
            while parser.at("name"):
                names.append(parser.name())
            parser.done()
            for name in names:
                seen(name)
                if head == "latent":
                    if name not in latent:
                        latent.append(name)
                else:
                    _set_kind(kinds, name, BINARY, lineno)
        elif head == "censored":
            parser.take("name")
            side = parser.take("name")
            if side not in CENSORING_SIDES:
                parser.pos -= 1
                parser.fail(f"censoring side must be one of {', '.join(CENSORING_SIDES)}")
            names = [parser.name()]
            while parser.at("name"):
                names.append(parser.name())
            limits = None
            if parser.at("punct", "@"):
                parser.take("punct", "@")
                limits = [float(parser.take("number"))]
                if parser.at("punct", ","):
                    parser.take("punct", ",")
                    limits.append(float(parser.take("number")))
                if len(limits) != (2 if side == "both" else 1):
                    parser.fail(f"censored {side} takes {2 if side == 'both' else 1} bound(s)")
            parser.done()
            for name in names:
                seen(name)
                _set_kind(kinds, name, CENSORED, lineno)
                censoring[name] = side
                if limits is not None:
                    if side == "both":
                        bounds[name] = (limits[0], limits[1])
                    elif side == "left":
                        bounds[name] = (limits[0], None)
                    else:
                        bounds[name] = (None, limits[0])
        elif head == "cov":
            parser.take("name")
            parser.take("punct", "(")
            a = parser.name()
            parser.take("punct", ",")
            b = parser.name()
            parser.take("punct", ")")
            constraint = parser.constraint()
            parser.done()
            seen(a)
            seen(b)
            covariances.append(Covariance(a=a, b=b, constraint=constraint, line=lineno))
        elif head == "slope":
            parser.take("name")
            outcome = parser.name()
            parser.take("arrow")
            source = parser.name()
            parser.take("punct", "*")
            moderator = parser.name()
            constraint = parser.constraint()
            parser.done()
            for name in (outcome, source, moderator):
                seen(name)
            slopes.append(Slope(outcome=outcome, latent=source, moderator=moderator, constraint=constraint,
                                line=lineno))
        else:
            to = parser.name()
            parser.take("arrow")
            if parser.at("number"):
                number = parser.take("number")
                if float(number) != 1.0:
                    parser.pos -= 1
                    parser.fail("the only numeric regressor is 1 (intercept)")
                source = INTERCEPT
            else:
                source = parser.name()
            constraint = parser.constraint()
            parser.done()
            seen(to)
            if source != INTERCEPT:
                seen(source)
            edges.append(Edge(to=to, source=source, constraint=constraint, line=lineno))

    return _validate(order, latent, kinds, censoring, bounds, edges, covariances, slopes)


def _set_kind(kinds: Dict[str, str], name: str, kind: str, lineno: int):
    if name in kinds and kinds[name] != kind:
        raise ModelSpecificationException(f"line {lineno}: '{name}' declared both {kinds[name]} and {kind}")
    kinds[name] = kind


def _validate(order, latent, kinds, censoring, bounds, edges, covariances, slopes) -> ModelSpec:
    latent_set = set(latent)
    for name in kinds:
        if name in latent_set:
            raise ModelSpecificationException(f"'{name}' is declared latent and {kinds[name]}")

    manifest_set = set(kinds)
    for edge in edges:
        if edge.to not in latent_set:
            manifest_set.add(edge.to)
    for cov in covariances:
        for name in (cov.a, cov.b):
            if name not in latent_set:
                manifest_set.add(name)
    for slope in slopes:
        if slope.outcome not in latent_set:
            manifest_set.add(slope.outcome)

    manifest = tuple(name for name in order if name in manifest_set)
    covariates = tuple(name for name in order if name not in manifest_set and name not in latent_set)
    covariate_set = set(covariates)

    seen_edges = set()
    for edge in edges:
        if edge.source == edge.to:
            raise ModelSpecificationException(f"line {edge.line}: cycle '{edge.to} <- {edge.source}' makes I - B "
                                              f"singular")
        if edge.source in manifest_set:
            raise ModelSpecificationException(f"line {edge.line}: regression of '{edge.to}' on observed outcome "
                                              f"'{edge.source}' is not supported")
        key = (edge.to, edge.source)
        if key in seen_edges:
            raise ModelSpecificationException(f"line {edge.line}: duplicate edge '{edge.to} <- {edge.source}'")
        seen_edges.add(key)

    seen_covariances = set()
    for cov in covariances:
        if (cov.a in latent_set) != (cov.b in latent_set):
            raise ModelSpecificationException(f"line {cov.line}: covariance between an observed and a latent "
                                              f"residual is not supported")
        key = frozenset((cov.a, cov.b))
        if key in seen_covariances:
            raise ModelSpecificationException(f"line {cov.line}: duplicate covariance 'cov({cov.a},{cov.b})'")
        seen_covariances.add(key)
        if cov.a == cov.b and kinds.get(cov.a) == BINARY and cov.constraint.value != 1.0:
            raise ModelSpecificationException(f"line {cov.line}: binary variable '{cov.a}' must have residual "
                                              f"variance fixed at 1")

    seen_slopes = set()
    for slope in slopes:
        if slope.latent not in latent_set:
            raise ModelSpecificationException(f"line {slope.line}: '{slope.latent}' in a random slope must be latent")
        if slope.moderator not in covariate_set:
            raise ModelSpecificationException(f"line {slope.line}: moderator '{slope.moderator}' must be a covariate")
        if slope.outcome == slope.latent:
            raise ModelSpecificationException(f"line {slope.line}: random slope of '{slope.latent}' on itself makes "
                                              f"I - B singular")
        key = (slope.outcome, slope.latent, slope.moderator)
        if key in seen_slopes:
            raise ModelSpecificationException(f"line {slope.line}: duplicate random slope")
        seen_slopes.add(key)

    spec = ModelSpec(manifest=manifest, latent=tuple(latent), covariates=covariates, kinds=dict(kinds),
                     censoring=dict(censoring), bounds=dict(bounds), edges=tuple(edges),
                     covariances=tuple(covariances), slopes=tuple(slopes))
    _check_fixed_cycles(spec)
    return spec


def _check_fixed_cycles(spec: ModelSpec):
    structural = [e for e in spec.edges if e.to in spec.latent and e.source in spec.latent]
    if not structural or not all(e.constraint.is_fixed for e in structural):
        return
    l = len(spec.latent)
    beta = np.zeros((l, l))
    for edge in structural:
        beta[spec.latent.index(edge.to), spec.latent.index(edge.source)] = edge.constraint.value
    if abs(np.linalg.det(np.eye(l) - beta)) < 1e-12:
        raise ModelSpecificationException("the fixed latent regressions form a cycle with I - B singular")


def compile(spec: ModelSpec) -> ParameterMap:
    """
    Build the ParameterMap of a ModelSpec.

    Besides the explicit statements, the lava-style identification defaults
    are applied: the first declared loading of each latent is fixed to 1
    unless some loading of that latent is already fixed; that reference
    indicator's intercept is fixed to 0 and the latent's intercept is
    estimated; binary items get residual variance 1.

    Parameters are ordered by group (measurements, regressions, random
    slopes, intercepts, residual variances, residual covariances) and within a
    group by the declaration order of the variables involved.
    """
    manifest, latent, covariates = spec.manifest, spec.latent, spec.covariates
    position = {name: i for i, name in enumerate(manifest)}
    position.update({name: len(manifest) + i for i, name in enumerate(latent)})
    position.update({name: len(manifest) + len(latent) + i for i, name in enumerate(covariates)})

    # entries: (group, sort key, cells, constraint, default name, display name, transform)
    entries = []
    explicit_intercepts = {e.to: e.constraint for e in spec.edges if e.source == INTERCEPT}

    loading_constraints: Dict[Tuple[str, str], Constraint] = {}
    for edge in spec.edges:
        if edge.source in latent and edge.to in manifest:
            loading_constraints[(edge.to, edge.source)] = edge.constraint
    reference: Dict[str, str] = {}
    for eta in latent:
        indicators = [e for e in spec.edges if e.source == eta and e.to in manifest]
        if not indicators:
            continue
        fixed = [e for e in indicators if e.constraint.is_fixed]
        if fixed:
            reference[eta] = fixed[0].to
            continue
        first = indicators[0]
        if first.constraint.kind == "label":
            pinned = Constraint(kind="label", label=first.constraint.label, value=1.0)
            for key, constraint in loading_constraints.items():
                if constraint.label == first.constraint.label:
                    loading_constraints[key] = pinned
        else:
            loading_constraints[(first.to, eta)] = Constraint(kind="fixed", value=1.0)
        reference[eta] = first.to

    for edge in spec.edges:
        if edge.source == INTERCEPT:
            continue
        to, source = edge.to, edge.source
        if to in manifest and source in latent:
            cell = ("Lambda", position[to], latent.index(source))
            entries.append((MEASUREMENTS, (position[to], position[source]), [cell], loading_constraints[(to, source)],
                            f"{to}<-{source}", f"{to}<-{source}", "identity"))
        elif to in manifest:
            cell = ("K", position[to], covariates.index(source))
            entries.append((REGRESSIONS, (position[to], position[source]), [cell], edge.constraint,
                            f"{to}<-{source}", f"{to}<-{source}", "identity"))
        elif source in latent:
            cell = ("B", latent.index(to), latent.index(source))
            entries.append((REGRESSIONS, (position[to], position[source]), [cell], edge.constraint,
                            f"{to}<-{source}", f"{to}<-{source}", "identity"))
        else:
            cell = ("Gamma", latent.index(to), covariates.index(source))
            entries.append((REGRESSIONS, (position[to], position[source]), [cell], edge.constraint,
                            f"{to}<-{source}", f"{to}<-{source}", "identity"))

    for s, slope in enumerate(spec.slopes):
        name = f"{slope.outcome}<-{slope.latent}*{slope.moderator}"
        entries.append((RANDOM_SLOPES, (position[slope.outcome], position[slope.latent], position[slope.moderator]),
                        [("slope", s, 0)], slope.constraint, name, name, "identity"))

    reference_indicators = set(reference.values())
    for name in manifest:
        if name in explicit_intercepts:
            constraint = explicit_intercepts[name]
        elif name in reference_indicators:
            constraint = Constraint(kind="fixed", value=0.0)
        else:
            constraint = FREE
        entries.append((INTERCEPTS, (position[name],), [("nu", position[name], 0)], constraint, name, name,
                        "identity"))
    for k, eta in enumerate(latent):
        if eta in explicit_intercepts:
            constraint = explicit_intercepts[eta]
        elif eta in reference:
            ref = reference[eta]
            ref_constraint = explicit_intercepts.get(ref, Constraint(kind="fixed", value=0.0))
            constraint = FREE if ref_constraint.is_fixed else Constraint(kind="fixed", value=0.0)
        else:
            constraint = Constraint(kind="fixed", value=0.0)
        entries.append((INTERCEPTS, (position[eta],), [("alpha", k, 0)], constraint, eta, eta, "identity"))

    variance_statements = {}
    for cov in spec.covariances:
        if cov.a == cov.b:
            variance_statements[cov.a] = cov.constraint
    for name in manifest:
        i = position[name]
        if name in variance_statements:
            constraint = variance_statements[name]
        elif spec.kind(name) == BINARY:
            constraint = Constraint(kind="fixed", value=1.0)
        else:
            constraint = FREE
        entries.append((VARIANCES, (i,), [("Theta", i, i)], constraint, f"{name}~~{name}", name, "log"))
    for k, eta in enumerate(latent):
        constraint = variance_statements.get(eta, FREE)
        entries.append((VARIANCES, (position[eta],), [("Psi", k, k)], constraint, f"{eta}~~{eta}", eta, "log"))

    for cov in spec.covariances:
        if cov.a == cov.b:
            continue
        a, b = sorted((cov.a, cov.b), key=position.get)
        if a in latent:
            i, j, matrix = latent.index(a), latent.index(b), "Psi"
        else:
            i, j, matrix = position[a], position[b], "Theta"
        name = f"{a}~~{b}"
        entries.append((COVARIANCES, (position[a], position[b]), [(matrix, i, j), (matrix, j, i)], cov.constraint,
                        name, name, "identity"))

    entries.sort(key=lambda e: (GROUPS.index(e[0]), e[1]))
    return _assemble(spec, entries)


def _assemble(spec: ModelSpec, entries) -> ParameterMap:
    names, groups, display, transforms, slots = [], [], [], [], []
    fixed = []
    label_values: Dict[str, float] = {}
    label_transform: Dict[str, str] = {}
    for group, _, cells, constraint, name, shown, transform in entries:
        if constraint.kind == "label":
            label = constraint.label
            if label_transform.setdefault(label, transform) != transform:
                raise ModelSpecificationException(f"label '{label}' is shared between a variance and a "
                                                  f"non-variance parameter")
            if constraint.value is not None:
                if label in label_values and label_values[label] != constraint.value:
                    raise ParameterMapException(f"label '{label}' is fixed to two different values "
                                                f"({label_values[label]} and {constraint.value})")
                label_values[label] = constraint.value

    label_index: Dict[str, int] = {}
    for group, _, cells, constraint, name, shown, transform in entries:
        if constraint.kind == "label" and constraint.label in label_values:
            fixed.extend((cell, label_values[constraint.label]) for cell in cells)
        elif constraint.kind == "label":
            label = constraint.label
            if label in label_index:
                slots[label_index[label]].extend(cells)
                continue
            label_index[label] = len(names)
            names.append(label)
            groups.append(group)
            display.append(label)
            transforms.append(transform)
            slots.append(list(cells))
        elif constraint.is_fixed:
            if transform == "log" and constraint.value <= 0:
                raise ParameterMapException(f"variance '{shown}' fixed to non-positive value {constraint.value}")
            fixed.extend((cell, constraint.value) for cell in cells)
        else:
            names.append(name)
            groups.append(group)
            display.append(shown)
            transforms.append(transform)
            slots.append(list(cells))

    for label, value in label_values.items():
        if label_transform[label] == "log" and value <= 0:
            raise ParameterMapException(f"variance label '{label}' fixed to non-positive value {value}")

    return ParameterMap(spec=spec, names=tuple(names), groups=tuple(groups), display=tuple(display),
                        transforms=tuple(transforms), slots=tuple(tuple(s) for s in slots), fixed=tuple(fixed),
                        labels=frozenset(label_index))


def _slope_parts(pm: ParameterMap, values: np.ndarray, covariates: np.ndarray):
    """
    Indicator tensors placing each random slope in Lambda or B, and the
    moderator values of every row.
    """
    spec = pm.spec
    p, l = len(spec.manifest), len(spec.latent)
    s = len(spec.slopes)
    to_lambda = np.zeros((s, p, l))
    to_beta = np.zeros((s, l, l))
    moderators = np.zeros((covariates.shape[0], s))
    for k, slope in enumerate(spec.slopes):
        col = spec.latent.index(slope.latent)
        if slope.outcome in spec.latent:
            to_beta[k, spec.latent.index(slope.outcome), col] = 1.0
        else:
            to_lambda[k, spec.manifest.index(slope.outcome), col] = 1.0
        moderators[:, k] = covariates[:, spec.covariates.index(slope.moderator)]
    return to_lambda, to_beta, moderators


def moment_batch(pm: ParameterMap, theta: np.ndarray, covariates: np.ndarray) -> MomentBatch:
    """
    Model-implied moments of the latent responses for every row of a
    covariate matrix, with analytic derivatives.

    With A = (I - B_i)^-1 and m_i = alpha + Gamma x_i:

        xi_i    = nu + Lambda_i A m_i + K x_i
        omega_i = Lambda_i A Psi A' Lambda_i' + Theta

    where Lambda_i and B_i include the random-slope terms. Derivatives use
    dA = A dB A and the product rule.
    """
    mats = pm.matrices(theta)
    ders = pm.derivatives(theta)
    x = np.asarray(covariates, dtype=float)
    n = x.shape[0]
    if x.shape[1] != len(pm.spec.covariates):
        raise DataException(f"expected {len(pm.spec.covariates)} covariate columns, got {x.shape[1]}")
    l = len(pm.spec.latent)

    if pm.has_slopes:
        to_lambda, to_beta, moderators = _slope_parts(pm, mats["slope"][:, 0], x)
        weighted = moderators * mats["slope"][:, 0]
        lam = mats["Lambda"][None] + np.einsum("ns,spl->npl", weighted, to_lambda)
        beta = mats["B"][None] + np.einsum("ns,sab->nab", weighted, to_beta)
        dslope = ders["slope"][:, 0, :]
        dlam = ders["Lambda"][None] + np.einsum("ns,st,spl->nplt", moderators, dslope, to_lambda)
        dbeta = ders["B"][None] + np.einsum("ns,st,sab->nabt", moderators, dslope, to_beta)
    else:
        lam, beta = mats["Lambda"][None], mats["B"][None]
        dlam, dbeta = ders["Lambda"][None], ders["B"][None]

    ib = np.eye(l)[None] - beta
    if l:
        det = np.linalg.det(ib)
        if np.any(np.abs(det) < 1e-12):
            raise ModelSpecificationException("I - B is singular at the current parameter values")
    a = np.linalg.inv(ib) if l else ib
    da = np.einsum("nab,nbct,ncd->nadt", a, dbeta, a)

    la = lam @ a
    dla = np.einsum("nplt,nlk->npkt", dlam, a) + np.einsum("npl,nlkt->npkt", lam, da)
    m = mats["alpha"][:, 0][None] + x @ mats["Gamma"].T
    dm = ders["alpha"][:, 0, :][None] + np.einsum("lqt,nq->nlt", ders["Gamma"], x)

    big = (n,) + la.shape[1:]
    la_n = np.broadcast_to(la, big)
    dla_n = np.broadcast_to(dla, big + (pm.d,))
    xi = mats["nu"][:, 0][None] + np.einsum("npl,nl->np", la_n, m) + x @ mats["K"].T
    dxi = (ders["nu"][:, 0, :][None] + np.einsum("npkt,nk->npt", dla_n, m) + np.einsum("npk,nkt->npt", la_n, dm)
           + np.einsum("pqt,nq->npt", ders["K"], x))

    psi = mats["Psi"]
    la_psi = la @ psi
    omega = la_psi @ np.swapaxes(la, 1, 2) + mats["Theta"][None]
    cross = np.einsum("npkt,nrk->nprt", dla, la_psi)
    domega = (cross + np.swapaxes(cross, 1, 2) + np.einsum("npk,klt,nrl->nprt", la, ders["Psi"], la)
              + ders["Theta"][None])

    p = len(pm.spec.manifest)
    omega = np.broadcast_to(omega, (n, p, p))
    domega = np.broadcast_to(domega, (n, p, p, pm.d))
    return MomentBatch(xi=xi, omega=omega, dxi=dxi, domega=domega)


def implied_moments(pm: ParameterMap, theta: np.ndarray, row_covariates: Sequence[float]) -> MomentSystem:
    covariates = np.asarray(row_covariates, dtype=float).reshape(1, -1)
    if covariates.shape[1] == 0:
        covariates = np.zeros((1, len(pm.spec.covariates)))
    return moment_batch(pm, theta, covariates).row(0)


def starting_values(pm: ParameterMap, data: pd.DataFrame) -> np.ndarray:
    """
    Deterministic starting values on the internal (log-variance) scale.

    Intercepts start at observed means (0 for binary items), residual
    variances at observed variances (1 for binary items, floored at 0.1),
    loadings at 1, regressions at 0 and covariances at 0. Regressions of an
    observed outcome on a covariate, and of a latent on a covariate through
    its reference indicator, are then refined by least squares on the
    uncensored rows.

    Raises:
        DataException if the dataset is empty or misses model columns.
    """
    spec = pm.spec
    if data is None or len(data) == 0:
        raise DataException("cannot compute starting values from an empty dataset")
    missing = [c for c in spec.manifest + spec.covariates if c not in data.columns]
    if missing:
        raise DataException(f"dataset is missing columns: {', '.join(missing)}")

    def uncensored(name: str) -> pd.Series:
        values = pd.to_numeric(data[name], errors="coerce")
        status = status_column(name)
        if status in data.columns:
            flags = data[status].fillna(OBSERVED_FLAG).astype(str).str.strip()
            values = values.where(flags.isin([OBSERVED_FLAG, ""]))
        return values

    def slope_on(y: pd.Series, x_name: str) -> float:
        x = pd.to_numeric(data[x_name], errors="coerce")
        ok = y.notna() & x.notna()
        if ok.sum() < 3 or x[ok].var() <= 0:
            return 0.0
        return float(np.cov(y[ok], x[ok])[0, 1] / x[ok].var())

    reference = {}
    for eta in spec.latent:
        for (m, i, j), value in pm.fixed:
            if m == "Lambda" and spec.latent[j] == eta and value == 1.0 and eta not in reference:
                reference[eta] = spec.manifest[i]

    values = np.zeros(pm.d)
    for t, cells in enumerate(pm.slots):
        matrix, i, j = cells[0]
        if matrix == "Lambda":
            values[t] = 1.0
        elif matrix == "K":
            name = spec.manifest[i]
            if spec.kind(name) != BINARY:
                values[t] = slope_on(uncensored(name), spec.covariates[j])
        elif matrix == "Gamma":
            ref = reference.get(spec.latent[i])
            if ref is not None and spec.kind(ref) != BINARY:
                values[t] = slope_on(uncensored(ref), spec.covariates[j])
        elif matrix == "nu":
            name = spec.manifest[i]
            if spec.kind(name) != BINARY:
                mean = pd.to_numeric(data[name], errors="coerce").mean()
                values[t] = 0.0 if np.isnan(mean) else float(mean)
        elif matrix == "Theta" and i == j:
            name = spec.manifest[i]
            if spec.kind(name) == BINARY:
                values[t] = 1.0
            else:
                var = pd.to_numeric(data[name], errors="coerce").var()
                values[t] = max(0.1, 0.0 if np.isnan(var) else float(var))
        elif matrix == "Psi" and i == j:
            ref = reference.get(spec.latent[i])
            if ref is not None and spec.kind(ref) != BINARY:
                var = pd.to_numeric(data[ref], errors="coerce").var()
                values[t] = max(0.1, 0.5 * (0.0 if np.isnan(var) else float(var)))
            else:
                values[t] = 1.0
    return pm.internal(values)
