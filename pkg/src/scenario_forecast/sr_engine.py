"""Symbolic regression over lagged sensor inputs.

An :data:`Expression` is an immutable binary tree whose leaves are either
numeric constants or references to a channel value ``lag`` steps in the
past.  Genetic programming (tournament selection, subtree crossover, three
mutation flavours, single elitism) searches tree space; fitness is training
MSE plus a parsimony penalty proportional to node count.  Constants of a
fixed structure can be re-optimized later with derivative-free local search.

Expressions serialize to a canonical prefix text form, e.g.::

    (+ (* 0.5 Tin[t-3]) Tout[t-36])

with ``Tin``/``Tout``/``P`` naming the indoor-temperature, outdoor-
temperature and HVAC-power channels.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from datetime import timedelta
from typing import Union

import numpy as np
from scipy.optimize import minimize

from .ingest import CHANNELS

#: |denominator| below this makes protected division return 1.
DIVISION_EPS = 1e-12

BINARY_OPS = ("+", "-", "*", "/")
UNARY_OPS = ("neg", "abs", "sin", "cos")

_CHANNEL_TOKEN = {"indoor_temp": "Tin", "outdoor_temp": "Tout", "hvac_power": "P"}
_TOKEN_CHANNEL = {v: k for k, v in _CHANNEL_TOKEN.items()}

#: Bundled per-mode reference models, also used as verification vectors.
BUILTIN_COOLING_MODEL = (
    "(+ (* (* 0.000073 (- Tin[t-3] 23.49)) "
    "(+ (- Tin[t-3] P[t-3]) (* 0.2614 P[t-72]))) Tin[t-3])"
)
BUILTIN_HEATING_MODEL = (
    "(- Tin[t-3] (* (* 0.00014 (- (- Tin[t-3] Tin[t-103]) 2.316)) "
    "(+ (* 0.3573 (- P[t-3] Tout[t-36])) Tin[t-72])))"
)
BUILTIN_MODELS = {"cooling": BUILTIN_COOLING_MODEL, "heating": BUILTIN_HEATING_MODEL}


class ExpressionSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvaluationError(ValueError):
    """An expression referenced a lag the row cannot supply."""


# ---------------------------------------------------------------------------
# Tree node types


@dataclass(frozen=True)
class LagRef:
    channel: str
    lag: int

    def __post_init__(self):
        object.__setattr__(self, "lag", int(self.lag))
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")
        if self.lag < 1:
            raise ValueError(f"lag must be >= 1, got {self.lag}")


@dataclass(frozen=True)
class Var:
    ref: LagRef


@dataclass(frozen=True)
class Const:
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        if not math.isfinite(self.value):
            raise ValueError("constants must be finite")


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Expression"

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary operator {self.op!r}")


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expression"
    right: "Expression"

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary operator {self.op!r}")


Expression = Union[Var, Const, Unary, Binary]


def walk(expr):
    """Yield nodes in preorder."""
    stack = [expr]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Unary):
            stack.append(node.child)
        elif isinstance(node, Binary):
            stack.append(node.right)
            stack.append(node.left)


def complexity(expr) -> int:
    """Node count."""
    return sum(1 for _ in walk(expr))


def lag_refs(expr):
    return [node.ref for node in walk(expr) if isinstance(node, Var)]


def max_lag(expr) -> int:
    refs = lag_refs(expr)
    return max((r.lag for r in refs), default=0)


def validate_expression(expr, lag_budget: int, max_complexity: int | None = None) -> None:
    bad = [r for r in lag_refs(expr) if r.lag > lag_budget]
    if bad:
        raise ValueError(f"lag {bad[0].lag} exceeds budget {lag_budget}")
    if max_complexity is not None and complexity(expr) > max_complexity:
        raise ValueError(f"complexity {complexity(expr)} exceeds {max_complexity}")


# ---------------------------------------------------------------------------
# Evaluation

_UNARY_FUNC = {"neg": np.negative, "abs": np.abs, "sin": np.sin, "cos": np.cos}


def evaluate_expression(expr, row) -> float:
    """Evaluate against one lag snapshot (any ``row[LagRef] -> float`` mapping).

    Protected division returns 1 whenever |denominator| < 1e-12.
    """
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Var):
        try:
            return float(row[expr.ref])
        except KeyError:
            raise EvaluationError(f"row does not supply {format_expression(expr)}") from None
    if isinstance(expr, Unary):
        return float(_UNARY_FUNC[expr.op](evaluate_expression(expr.child, row)))
    left = evaluate_expression(expr.left, row)
    right = evaluate_expression(expr.right, row)
    if expr.op == "+":
        return left + right
    if expr.op == "-":
        return left - right
    if expr.op == "*":
        return left * right
    return 1.0 if abs(right) < DIVISION_EPS else left / right


def evaluate_on_data(expr, data) -> np.ndarray:
    """Vectorized evaluation across every row of a training set."""
    if isinstance(expr, Const):
        return np.full(data.n_rows, expr.value)
    if isinstance(expr, Var):
        return data.lag_values(expr.ref)
    with np.errstate(all="ignore"):
        if isinstance(expr, Unary):
            return _UNARY_FUNC[expr.op](evaluate_on_data(expr.child, data))
        left = evaluate_on_data(expr.left, data)
        right = evaluate_on_data(expr.right, data)
        if expr.op == "+":
            return left + right
        if expr.op == "-":
            return left - right
        if expr.op == "*":
            return left * right
        quotient = left / right
        return np.where(np.abs(right) < DIVISION_EPS, 1.0, quotient)


def training_mse(expr, data) -> float:
    predictions = evaluate_on_data(expr, data)
    if not np.all(np.isfinite(predictions)):
        return math.inf
    return float(np.mean((predictions - data.targets) ** 2))


# ---------------------------------------------------------------------------
# Training data


class LagSnapshot:
    """Read-only view of all lags available at one step of channel arrays."""

    __slots__ = ("_channels", "_t")

    def __init__(self, channels: dict, t: int):
        self._channels = channels
        self._t = t

    def __getitem__(self, ref: LagRef) -> float:
        arr = self._channels.get(ref.channel)
        if arr is None:
            raise KeyError(ref)
        idx = self._t - ref.lag
        if idx < 0:
            raise KeyError(ref)
        return float(arr[idx])


class TrainingSet:
    """(lag snapshot, target) rows over one contiguous block of days.

    The first ``n`` steps only provide history, so a block of T steps yields
    T - n rows.
    """

    def __init__(self, channels: dict, n: int):
        lengths = {len(v) for v in channels.values()}
        if len(lengths) != 1:
            raise ValueError("channel arrays must share a length")
        total = lengths.pop()
        if total <= n:
            raise ValueError(f"insufficient history: {total} steps <= lag budget {n}")
        self.channels = {k: np.asarray(v, dtype=float) for k, v in channels.items()}
        self.n = int(n)
        self._total = total

    @property
    def n_rows(self) -> int:
        return self._total - self.n

    @property
    def targets(self) -> np.ndarray:
        return self.channels["indoor_temp"][self.n:]

    def lag_values(self, ref: LagRef) -> np.ndarray:
        if ref.lag > self.n:
            raise EvaluationError(f"lag {ref.lag} exceeds budget {self.n}")
        return self.channels[ref.channel][self.n - ref.lag : self._total - ref.lag]

    def row(self, i: int) -> LagSnapshot:
        if not 0 <= i < self.n_rows:
            raise IndexError(i)
        return LagSnapshot(self.channels, self.n + i)


class MergedTrainingSet:
    """Rows pooled from several contiguous blocks (one per in-cluster run)."""

    def __init__(self, sets):
        sets = list(sets)
        if not sets:
            raise ValueError("need at least one training set")
        if len({s.n for s in sets}) != 1:
            raise ValueError("training sets must share the lag budget")
        self.sets = sets
        self.n = sets[0].n
        self._targets = np.concatenate([s.targets for s in sets])
        self._cache: dict = {}

    @property
    def n_rows(self) -> int:
        return self._targets.size

    @property
    def targets(self) -> np.ndarray:
        return self._targets

    def lag_values(self, ref: LagRef) -> np.ndarray:
        if ref not in self._cache:
            self._cache[ref] = np.concatenate([s.lag_values(ref) for s in self.sets])
        return self._cache[ref]

    def row(self, i: int) -> LagSnapshot:
        for s in self.sets:
            if i < s.n_rows:
                return s.row(i)
            i -= s.n_rows
        raise IndexError(i)


def build_training_set(windows, n: int = 288) -> TrainingSet:
    """Flatten contiguous day windows into lagged training rows."""
    windows = list(windows)
    if not windows:
        raise ValueError("need at least one window")
    for a, b in zip(windows, windows[1:]):
        if b.date - a.date != timedelta(days=1):
            raise ValueError(f"windows not contiguous between {a.date} and {b.date}")
    channels = {
        ch: np.concatenate([w.channel(ch) for w in windows]) for ch in CHANNELS
    }
    return TrainingSet(channels, n)


# ---------------------------------------------------------------------------
# GP configuration and variation operators


@dataclass(frozen=True)
class GpConfig:
    population: int = 500
    generations: int = 40
    max_complexity: int = 30
    binary_ops: tuple = ("+", "-", "*")
    unary_ops: tuple = ()
    crossover_prob: float = 0.7
    mutation_prob: float = 0.3
    subtree_mutation_prob: float = 0.5
    point_mutation_prob: float = 0.3
    constant_jitter_prob: float = 0.2
    parsimony: float = 1e-4
    tournament_size: int = 5
    constant_prob: float = 0.2
    constant_range: tuple = (-2.0, 2.0)
    channels: tuple = CHANNELS
    max_lag: int = 288
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "binary_ops", tuple(self.binary_ops))
        object.__setattr__(self, "unary_ops", tuple(self.unary_ops))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "constant_range", tuple(self.constant_range))
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if self.max_complexity < 1:
            raise ValueError("max_complexity must be >= 1")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be >= 1")
        if self.max_lag < 1:
            raise ValueError("max_lag must be >= 1")
        for name in ("crossover_prob", "mutation_prob", "subtree_mutation_prob",
                     "point_mutation_prob", "constant_jitter_prob", "constant_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.crossover_prob + self.mutation_prob > 1.0 + 1e-12:
            raise ValueError("crossover_prob + mutation_prob must be <= 1")
        mutation_total = (self.subtree_mutation_prob + self.point_mutation_prob
                          + self.constant_jitter_prob)
        if mutation_total > 1.0 + 1e-12:
            raise ValueError("mutation sub-probabilities must sum to <= 1")
        for op in self.binary_ops:
            if op not in BINARY_OPS:
                raise ValueError(f"unknown binary operator {op!r}")
        for op in self.unary_ops:
            if op not in UNARY_OPS:
                raise ValueError(f"unknown unary operator {op!r}")
        if not self.binary_ops:
            raise ValueError("need at least one binary operator")
        for ch in self.channels:
            if ch not in CHANNELS:
                raise ValueError(f"unknown channel {ch!r}")


def _max_full_depth(max_complexity: int) -> int:
    # Largest d with 2^(d+1) - 1 <= max_complexity, i.e. a full binary tree fits.
    depth = 0
    while 2 ** (depth + 2) - 1 <= max_complexity:
        depth += 1
    return depth


def _random_leaf(config: GpConfig, rng) -> Expression:
    if rng.random() < config.constant_prob:
        lo, hi = config.constant_range
        return Const(rng.uniform(lo, hi))
    channel = config.channels[int(rng.integers(len(config.channels)))]
    return Var(LagRef(channel, int(rng.integers(1, config.max_lag + 1))))


def _random_tree(config: GpConfig, rng, depth: int, method: str) -> Expression:
    if depth <= 0:
        return _random_leaf(config, rng)
    if method == "grow" and rng.random() < 0.3:
        return _random_leaf(config, rng)
    n_ops = len(config.binary_ops) + len(config.unary_ops)
    pick = int(rng.integers(n_ops))
    if pick < len(config.binary_ops):
        return Binary(
            config.binary_ops[pick],
            _random_tree(config, rng, depth - 1, method),
            _random_tree(config, rng, depth - 1, method),
        )
    return Unary(config.unary_ops[pick - len(config.binary_ops)],
                 _random_tree(config, rng, depth - 1, method))


def random_expression(config: GpConfig, rng) -> Expression:
    """Ramped half-and-half initialization, always within max_complexity."""
    max_depth = _max_full_depth(config.max_complexity)
    if max_depth < 1:
        return _random_leaf(config, rng)
    depth = int(rng.integers(1, max_depth + 1))
    method = "full" if rng.random() < 0.5 else "grow"
    return _random_tree(config, rng, depth, method)


def _node_at(expr, index: int):
    for i, node in enumerate(walk(expr)):
        if i == index:
            return node
    raise IndexError(index)


def _replace_node(root, index: int, replacement):
    count = 0

    def rec(node):
        nonlocal count
        if count == index:
            count += 1
            return replacement
        count += 1
        if isinstance(node, Unary):
            return Unary(node.op, rec(node.child))
        if isinstance(node, Binary):
            left = rec(node.left)
            right = rec(node.right)
            return Binary(node.op, left, right)
        return node

    return rec(root)


def mutate(expr, config: GpConfig, rng) -> Expression:
    """Subtree replacement, point mutation, or constant jitter.

    Offspring that would exceed max_complexity are rejected and the parent
    returned unchanged; with all three probabilities zero this is a no-op.
    """
    r = rng.random()
    if r < config.subtree_mutation_prob:
        index = int(rng.integers(complexity(expr)))
        depth = int(rng.integers(0, 3))
        candidate = _replace_node(expr, index, _random_tree(config, rng, depth, "grow"))
        return candidate if complexity(candidate) <= config.max_complexity else expr
    r -= config.subtree_mutation_prob

    if r < config.point_mutation_prob:
        # same-arity node swap, so complexity never changes
        index = int(rng.integers(complexity(expr)))
        node = _node_at(expr, index)
        if isinstance(node, Binary):
            op = config.binary_ops[int(rng.integers(len(config.binary_ops)))]
            replacement = Binary(op, node.left, node.right)
        elif isinstance(node, Unary):
            if not config.unary_ops:
                return expr
            op = config.unary_ops[int(rng.integers(len(config.unary_ops)))]
            replacement = Unary(op, node.child)
        else:
            replacement = _random_leaf(config, rng)
        return _replace_node(expr, index, replacement)
    r -= config.point_mutation_prob

    if r < config.constant_jitter_prob:
        positions = [i for i, node in enumerate(walk(expr)) if isinstance(node, Const)]
        if not positions:
            return expr
        index = positions[int(rng.integers(len(positions)))]
        node = _node_at(expr, index)
        new_value = node.value + rng.normal() * 0.1 * (1.0 + abs(node.value))
        return _replace_node(expr, index, Const(new_value))

    return expr


def crossover(a, b, config: GpConfig, rng) -> Expression:
    """Swap a random subtree of ``b`` into a random position of ``a``."""
    target = int(rng.integers(complexity(a)))
    donor = _node_at(b, int(rng.integers(complexity(b))))
    candidate = _replace_node(a, target, donor)
    return candidate if complexity(candidate) <= config.max_complexity else a


# ---------------------------------------------------------------------------
# Evolution loop


def _fitness(expr, data, config: GpConfig) -> float:
    mse = training_mse(expr, data)
    if not math.isfinite(mse):
        return math.inf
    return mse + config.parsimony * complexity(expr)


def run_evolution(train, config: GpConfig):
    """Evolve a population against a training set.

    Returns ``(best_expression, history)`` where ``history`` holds the best
    fitness of each generation, starting with the initial population; with
    single-individual elitism the sequence is non-increasing.  The returned
    expression is the lowest-fitness individual ever evaluated.  Fully
    deterministic for a fixed config seed.
    """
    if train.n_rows < 1:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)

    population = [random_expression(config, rng) for _ in range(config.population)]
    fitnesses = np.array([_fitness(e, train, config) for e in population])

    best_idx = int(np.argmin(fitnesses))
    best_expr, best_fit = population[best_idx], float(fitnesses[best_idx])
    history = [best_fit]

    def select():
        contenders = rng.integers(0, config.population, size=config.tournament_size)
        winner = contenders[int(np.argmin(fitnesses[contenders]))]
        return population[int(winner)]

    for _ in range(config.generations):
        elite = population[int(np.argmin(fitnesses))]
        offspring = [elite]
        while len(offspring) < config.population:
            r = rng.random()
            if r < config.crossover_prob:
                child = crossover(select(), select(), config, rng)
            elif r < config.crossover_prob + config.mutation_prob:
                child = mutate(select(), config, rng)
            else:
                child = select()
            offspring.append(child)
        population = offspring
        fitnesses = np.array([_fitness(e, train, config) for e in population])
        gen_idx = int(np.argmin(fitnesses))
        gen_fit = float(fitnesses[gen_idx])
        if gen_fit < best_fit:
            best_expr, best_fit = population[gen_idx], gen_fit
        history.append(gen_fit)

    return best_expr, history


# ---------------------------------------------------------------------------
# Constant refitting


def _constant_positions(expr):
    return [i for i, node in enumerate(walk(expr)) if isinstance(node, Const)]


def _with_constants(expr, values) -> Expression:
    out = expr
    for position, value in zip(_constant_positions(expr), values):
        out = _replace_node(out, position, Const(float(value)))
    return out


def refit_constants(expr, data) -> Expression:
    """Re-optimize numeric constants with Nelder-Mead; structure is frozen.

    Starts from the current constants with a budget of 200 objective
    evaluations per constant, and never returns a tree with higher training
    MSE than the input.  Expressions without constants pass through.
    """
    positions = _constant_positions(expr)
    if not positions:
        return expr
    start = np.array([_node_at(expr, p).value for p in positions])

    def objective(values):
        if not np.all(np.isfinite(values)):
            return 1e30
        mse = training_mse(_with_constants(expr, values), data)
        return mse if math.isfinite(mse) else 1e30

    initial = objective(start)
    result = minimize(
        objective,
        start,
        method="Nelder-Mead",
        options={"maxfev": 200 * len(positions), "xatol": 1e-10, "fatol": 1e-14},
    )
    if result.fun <= initial and np.all(np.isfinite(result.x)):
        return _with_constants(expr, result.x)
    return expr


# ---------------------------------------------------------------------------
# Canonical text form

_TOKEN_SPEC = [
    ("ws", r"\s+"),
    ("lparen", r"\("),
    ("rparen", r"\)"),
    ("lbrack", r"\["),
    ("rbrack", r"\]"),
    ("number", r"[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?"),
    ("name", r"[A-Za-z_][A-Za-z0-9_]*"),
    ("op", r"[+\-*/]"),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{k}>{p})" for k, p in _TOKEN_SPEC))


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise ExpressionSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = match.lastgroup
        if kind != "ws":
            tokens.append((kind, match.group(), pos))
        pos = match.end()
    return tokens


class _Parser:
    def __init__(self, tokens, text):
        self.tokens = tokens
        self.text = text
        self.i = 0

    def _peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, "", len(self.text))

    def _next(self, expected=None):
        kind, value, pos = self._peek()
        if kind is None:
            raise ExpressionSyntaxError("unexpected end of input", pos)
        if expected is not None and kind != expected:
            raise ExpressionSyntaxError(f"expected {expected}, found {value!r}", pos)
        self.i += 1
        return kind, value, pos

    def parse(self):
        node = self.expression()
        kind, value, pos = self._peek()
        if kind is not None:
            raise ExpressionSyntaxError(f"unexpected trailing input {value!r}", pos)
        return node

    def expression(self):
        kind, value, pos = self._peek()
        if kind == "number":
            self._next()
            return Const(float(value))
        if kind == "name":
            return self.variable()
        if kind == "lparen":
            return self.call()
        raise ExpressionSyntaxError(f"expected expression, found {value!r}", pos)

    def variable(self):
        _, name, pos = self._next("name")
        if name not in _TOKEN_CHANNEL:
            raise ExpressionSyntaxError(
                f"unknown variable {name!r} (expected Tin, Tout or P)", pos
            )
        self._next("lbrack")
        kind, t_name, t_pos = self._next("name")
        if t_name != "t":
            raise ExpressionSyntaxError(f"expected 't', found {t_name!r}", t_pos)
        kind, value, lag_pos = self._peek()
        if kind == "number":
            self._next()
            lag = -float(value)
        elif kind == "op" and value == "-":
            self._next()
            _, digits, lag_pos = self._next("number")
            lag = float(digits)
        else:
            raise ExpressionSyntaxError(f"expected lag offset, found {value!r}", lag_pos)
        if lag != int(lag) or int(lag) < 1:
            raise ExpressionSyntaxError(f"lag must be a positive integer, got {lag}", lag_pos)
        self._next("rbrack")
        return Var(LagRef(_TOKEN_CHANNEL[name], int(lag)))

    def call(self):
        self._next("lparen")
        kind, op, pos = self._next()
        if kind == "op":
            left = self.expression()
            right = self.expression()
            self._next("rparen")
            return Binary(op, left, right)
        if kind == "name" and op in UNARY_OPS:
            child = self.expression()
            self._next("rparen")
            return Unary(op, child)
        raise ExpressionSyntaxError(f"unknown operator {op!r}", pos)


def parse_expression(text: str) -> Expression:
    """Parse canonical prefix notation; errors carry the character position."""
    try:
        return _Parser(_tokenize(text), text).parse()
    except ValueError as err:
        if isinstance(err, ExpressionSyntaxError):
            raise
        raise ExpressionSyntaxError(str(err), 0) from None


def format_expression(expr) -> str:
    """Canonical prefix text; constants use shortest round-trip formatting."""
    if isinstance(expr, Const):
        return repr(expr.value)
    if isinstance(expr, Var):
        return f"{_CHANNEL_TOKEN[expr.ref.channel]}[t-{expr.ref.lag}]"
    if isinstance(expr, Unary):
        return f"({expr.op} {format_expression(expr.child)})"
    return f"({expr.op} {format_expression(expr.left)} {format_expression(expr.right)})"
