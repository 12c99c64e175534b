"""Core types for probabilistic state-dependent grammars (PSDGs).

A PSDG is a context-free grammar whose production probabilities are
functions of a world state rather than constants.  The state lives in a
finite factored space: a fixed list of features, each with a finite value
domain.  The grammar owns three probability objects:

* per-production probability functions p(q), guard-rule tables over the
  factored state, normalized per left-hand symbol for every state q;
* a factored prior over the initial state (one independent distribution
  per feature);
* factored single-step state dynamics: each feature carries a CPT whose
  parents are previous-step features plus the terminal emitted this step.

Symbols are classified implicitly: anything that appears as a left-hand
side is a nonterminal, everything else appearing on a right-hand side is a
terminal.  Recursion is restricted to direct tail recursion (the left-hand
symbol may reappear only as the final right-hand symbol), which keeps the
expansion depth of every derivation bounded; the validator rejects
anything else.

States are represented internally as plain tuples of value indices, one
per feature in declaration order.  StatePoint and StateSet are thin
validated wrappers used at API boundaries.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

from .errors import Diagnostic, GrammarError, SetTooLarge

NORMALIZATION_TOL = 1e-9
DISTRIBUTION_TOL = 1e-12
DEFAULT_SET_BOUND = 10**6
DEFAULT_JOINT_BOUND = 10**6


### Raw (pre-validation) declarations.  The text parser and the test
### builders both produce these; compile_grammar turns them into a Psdg.


@dataclass
class RawFeature:
    name: str
    values: list[str]
    prior: list[float]
    parents: list[str] | None = None      # None means "self" with identity rows
    cpt: list[RawCptRow] | None = None
    line: int = 0
    column: int = 0


@dataclass
class RawCptRow:
    parent_values: list[str]              # one per parent, "*" wildcard allowed
    terminal: str                         # terminal name or "*"
    probs: list[float]
    line: int = 0
    column: int = 0


@dataclass
class RawRule:
    guard: list[tuple[str, list[str]]]    # conjunction of feature-in-set tests
    value: float
    line: int = 0
    column: int = 0


@dataclass
class RawProduction:
    index: int
    lhs: str
    rhs: list[str]
    rules: list[RawRule] = field(default_factory=list)
    default: float = 1.0
    line: int = 0
    column: int = 0


@dataclass
class RawGrammar:
    features: list[RawFeature]
    productions: list[RawProduction]
    start: str
    start_line: int = 0


### Validated model types.


@dataclass(frozen=True)
class CptRow:
    """One transition row: parent value indices (None = wildcard), the
    conditioning terminal (None = wildcard), and a distribution over the
    feature's own domain.  Rows are matched first to last."""

    parent_values: tuple[int | None, ...]
    terminal: str | None
    probs: tuple[float, ...]


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    values: tuple[str, ...]
    prior: tuple[float, ...]
    parent_indices: tuple[int, ...]       # feature indices at the previous step
    cpt: tuple[CptRow, ...]

    def value_index(self, label: str) -> int:
        return self.values.index(label)


@dataclass(frozen=True)
class StatePoint:
    """A full assignment of one value per feature, held as value indices
    in feature declaration order."""

    idx: tuple[int, ...]

    def labels(self, psdg: Psdg) -> dict[str, str]:
        return {f.name: f.values[v] for f, v in zip(psdg.features, self.idx)}


class StateSet:
    """A product-form set of states: an allowed value subset per feature.

    Iteration order is lexicographic over feature declaration order with
    values in domain order, so it is deterministic.
    """

    __slots__ = ("allowed",)

    def __init__(self, allowed: tuple[frozenset[int], ...]):
        if any(not s for s in allowed):
            raise ValueError("state set has an empty feature component")
        self.allowed = allowed

    @classmethod
    def full(cls, psdg: Psdg) -> StateSet:
        return cls(tuple(frozenset(range(len(f.values))) for f in psdg.features))

    @classmethod
    def from_labels(cls, psdg: Psdg, mapping: dict[str, object]) -> StateSet:
        """Build from {feature: value-or-list}; absent features are
        unconstrained.  Raises ValueError on unknown names."""
        allowed = [set(range(len(f.values))) for f in psdg.features]
        for name, vals in mapping.items():
            if name not in psdg.feature_index:
                raise ValueError(f"unknown feature {name!r} in observation")
            fi = psdg.feature_index[name]
            feat = psdg.features[fi]
            if isinstance(vals, str):
                vals = [vals]
            chosen = set()
            for v in vals:
                if v not in feat.values:
                    raise ValueError(f"unknown value {v!r} for feature {name!r}")
                chosen.add(feat.values.index(v))
            if not chosen:
                raise ValueError(f"empty constraint for feature {name!r}")
            allowed[fi] = chosen
        return cls(tuple(frozenset(a) for a in allowed))

    def size(self) -> int:
        return math.prod(len(s) for s in self.allowed)

    def __contains__(self, idx: tuple[int, ...]) -> bool:
        return all(v in s for v, s in zip(idx, self.allowed))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, StateSet) and self.allowed == other.allowed

    def __hash__(self) -> int:
        return hash(self.allowed)

    def iter_states(self):
        return itertools.product(*(sorted(s) for s in self.allowed))

    def labels(self, psdg: Psdg) -> dict[str, list[str]]:
        out = {}
        for f, s in zip(psdg.features, self.allowed):
            if len(s) < len(f.values):
                out[f.name] = [f.values[i] for i in sorted(s)]
        return out


@dataclass(frozen=True)
class ProbabilityFunction:
    """State-dependent probability: an ordered guard-rule table.

    Each rule is (guard, value) where the guard is a conjunction of
    feature-in-set tests over value indices.  Evaluation walks the rules
    first to last and falls through to the default.
    """

    rules: tuple[tuple[tuple[tuple[int, frozenset[int]], ...], float], ...]
    default: float

    def evaluate(self, idx: tuple[int, ...]) -> float:
        for guard, value in self.rules:
            if all(idx[f] in vals for f, vals in guard):
                return value
        return self.default

    def scope(self) -> frozenset[int]:
        """Feature indices the value can depend on."""
        return frozenset(f for guard, _ in self.rules for f, _ in guard)


@dataclass(frozen=True)
class Production:
    index: int
    lhs: str
    rhs: tuple[str, ...]
    prob: ProbabilityFunction
    tail_recursive: bool

    def __str__(self) -> str:
        return f"{self.index}: {self.lhs} -> {' '.join(self.rhs)}"


class Psdg:
    """A validated grammar.  Treat as immutable after construction."""

    def __init__(
        self,
        features: tuple[FeatureSpec, ...],
        start: str,
        productions: tuple[Production, ...],
        terminals: tuple[str, ...],
        nonterminals: tuple[str, ...],
        levels: dict[str, tuple[int, ...]],
        depth: int,
    ):
        self.features = features
        self.feature_index = {f.name: i for i, f in enumerate(features)}
        self.start = start
        self.productions = productions
        self.terminals = terminals
        self.terminal_set = frozenset(terminals)
        self.nonterminals = nonterminals
        self.by_lhs = {
            nt: tuple(p.index for p in productions if p.lhs == nt)
            for nt in nonterminals
        }
        self.levels = levels
        self.depth = depth
        self.max_rhs = max(len(p.rhs) for p in productions)
        self.state_count = math.prod(len(f.values) for f in features)

    def is_terminal(self, sym: str) -> bool:
        return sym in self.terminal_set

    def production(self, index: int) -> Production:
        p = self.productions[index]
        if p.index != index:        # indices are dense in practice; fall back
            for q in self.productions:
                if q.index == index:
                    return q
            raise KeyError(index)
        return p

    def state_from_labels(self, mapping: dict[str, str]) -> StatePoint:
        idx = []
        for f in self.features:
            if f.name not in mapping:
                raise ValueError(f"missing feature {f.name!r} in state")
            v = mapping[f.name]
            if v not in f.values:
                raise ValueError(f"unknown value {v!r} for feature {f.name!r}")
            idx.append(f.values.index(v))
        return StatePoint(tuple(idx))

    def state_labels(self, idx: tuple[int, ...]) -> dict[str, str]:
        return {f.name: f.values[v] for f, v in zip(self.features, idx)}

    def summary(self) -> dict[str, int]:
        return {
            "nonterminals": len(self.nonterminals),
            "terminals": len(self.terminals),
            "productions": len(self.productions),
            "depth": self.depth,
            "max_rhs": self.max_rhs,
            "states": self.state_count,
        }


def _as_idx(state) -> tuple[int, ...]:
    return state.idx if isinstance(state, StatePoint) else tuple(state)


### Evaluation.


def production_probability(psdg: Psdg, production, state) -> float:
    """p(q) for one production; production may be an index or a Production."""
    if isinstance(production, int):
        production = psdg.production(production)
    return production.prob.evaluate(_as_idx(state))


def prior_probability(psdg: Psdg, state) -> float:
    idx = _as_idx(state)
    p = 1.0
    for f, v in zip(psdg.features, idx):
        p *= f.prior[v]
    return p


def _feature_transition(psdg: Psdg, fi: int, prev: tuple[int, ...], terminal: str):
    feat = psdg.features[fi]
    for row in feat.cpt:
        if row.terminal is not None and row.terminal != terminal:
            continue
        ok = True
        for slot, pv in enumerate(row.parent_values):
            if pv is not None and prev[feat.parent_indices[slot]] != pv:
                ok = False
                break
        if ok:
            return row.probs
    return None


def transition_probability(psdg: Psdg, prev, terminal: str, nxt) -> float:
    """pi1(q_prev, x, q_next): product of per-feature CPT entries."""
    if terminal not in psdg.terminal_set:
        raise ValueError(f"unknown terminal {terminal!r}")
    pi = _as_idx(prev)
    ni = _as_idx(nxt)
    p = 1.0
    for fi in range(len(psdg.features)):
        probs = _feature_transition(psdg, fi, pi, terminal)
        if probs is None:       # validation guarantees coverage
            raise ValueError(
                f"no CPT row covers feature {psdg.features[fi].name!r}"
            )
        p *= probs[ni[fi]]
        if p == 0.0:
            return 0.0
    return p


def enumerate_states(psdg: Psdg, constraint: StateSet | None = None,
                     bound: int = DEFAULT_SET_BOUND):
    """All states in the constraint (full space if None), as index tuples.

    Raises SetTooLarge instead of materializing something enormous.
    """
    ss = constraint if constraint is not None else StateSet.full(psdg)
    n = ss.size()
    if n > bound:
        raise SetTooLarge(f"{n} states exceeds bound {bound}")
    return list(ss.iter_states())


### Validation.


def validate_grammar(raw: RawGrammar,
                     joint_bound: int = DEFAULT_JOINT_BOUND
                     ) -> tuple[Psdg | None, list[Diagnostic]]:
    """Check a raw grammar and build the validated model.

    Returns (psdg, []) on success or (None, diagnostics) with every
    violation found, in deterministic order.
    """
    diags: list[Diagnostic] = []

    # Features.
    fnames = [f.name for f in raw.features]
    for name in sorted(set(fnames)):
        if fnames.count(name) > 1:
            diags.append(Diagnostic("BadDistribution",
                                    f"feature {name!r} declared more than once"))
    if not raw.features:
        diags.append(Diagnostic("BadDistribution", "no features declared"))
    feature_index = {f.name: i for i, f in enumerate(raw.features)}

    for f in raw.features:
        if not f.values:
            diags.append(Diagnostic("BadDistribution",
                                    f"feature {f.name!r} has no values",
                                    f.line, f.column))
            continue
        if len(set(f.values)) != len(f.values):
            diags.append(Diagnostic("BadDistribution",
                                    f"feature {f.name!r} has duplicate values",
                                    f.line, f.column))
        if len(f.prior) != len(f.values):
            diags.append(Diagnostic("BadDistribution",
                                    f"feature {f.name!r} prior has "
                                    f"{len(f.prior)} entries for "
                                    f"{len(f.values)} values",
                                    f.line, f.column))
        else:
            _check_distribution(diags, f.prior, f"prior of feature {f.name!r}",
                                f.line, f.column)

    # Symbol classification.
    lhs_symbols = {p.lhs for p in raw.productions}
    rhs_symbols = {s for p in raw.productions for s in p.rhs}
    nonterminals = tuple(sorted(lhs_symbols))
    terminals = tuple(sorted(rhs_symbols - lhs_symbols))
    if not raw.productions:
        diags.append(Diagnostic("EmptyRhs", "no productions declared"))
    if raw.start not in lhs_symbols:
        diags.append(Diagnostic(
            "UndeclaredSymbol",
            f"start symbol {raw.start!r} never appears as a left-hand side",
            raw.start_line))

    # Productions.
    seen_idx: dict[int, RawProduction] = {}
    for p in sorted(raw.productions, key=lambda p: p.index):
        if p.index < 0:
            diags.append(Diagnostic("BadDistribution",
                                    f"production index {p.index} is negative",
                                    p.line, p.column))
        if p.index in seen_idx:
            diags.append(Diagnostic("BadDistribution",
                                    f"production index {p.index} used twice",
                                    p.line, p.column))
        seen_idx[p.index] = p
        if not p.rhs:
            diags.append(Diagnostic("EmptyRhs",
                                    f"production {p.index} ({p.lhs}) has an "
                                    "empty right-hand side",
                                    p.line, p.column))
            continue
        if p.lhs in p.rhs[:-1] or (len(p.rhs) == 1 and p.rhs[0] == p.lhs):
            diags.append(Diagnostic(
                "NonTailRecursion",
                f"production {p.index}: {p.lhs!r} may recur only as the "
                "final right-hand symbol of a longer production",
                p.line, p.column))
        for rule in p.rules:
            for fname, vals in rule.guard:
                if fname not in feature_index:
                    diags.append(Diagnostic("UndeclaredSymbol",
                                            f"production {p.index} guards on "
                                            f"unknown feature {fname!r}",
                                            rule.line, rule.column))
                    continue
                feat = raw.features[feature_index[fname]]
                for v in vals:
                    if v not in feat.values:
                        diags.append(Diagnostic(
                            "UndeclaredSymbol",
                            f"production {p.index} guards on unknown value "
                            f"{v!r} of feature {fname!r}",
                            rule.line, rule.column))
            if not 0.0 <= rule.value <= 1.0 + DISTRIBUTION_TOL:
                diags.append(Diagnostic("BadDistribution",
                                        f"production {p.index} rule value "
                                        f"{rule.value} outside [0, 1]",
                                        rule.line, rule.column))
        if not 0.0 <= p.default <= 1.0 + DISTRIBUTION_TOL:
            diags.append(Diagnostic("BadDistribution",
                                    f"production {p.index} default "
                                    f"{p.default} outside [0, 1]",
                                    p.line, p.column))

    # CPTs (terminals are known only now).
    for f in raw.features:
        parents = f.parents if f.parents is not None else [f.name]
        parent_ok = True
        for pname in parents:
            if pname not in feature_index:
                diags.append(Diagnostic("UndeclaredSymbol",
                                        f"feature {f.name!r} lists unknown "
                                        f"parent {pname!r}",
                                        f.line, f.column))
                parent_ok = False
        rows = f.cpt
        if rows is None:
            continue        # identity rows are synthesized below
        if not parent_ok or len(f.prior) != len(f.values) or not f.values:
            continue
        for row in rows:
            if len(row.parent_values) != len(parents):
                diags.append(Diagnostic("BadDistribution",
                                        f"feature {f.name!r} CPT row has "
                                        f"{len(row.parent_values)} parent values "
                                        f"for {len(parents)} parents",
                                        row.line, row.column))
                continue
            for slot, v in enumerate(row.parent_values):
                if v == "*":
                    continue
                pfeat = raw.features[feature_index[parents[slot]]]
                if v not in pfeat.values:
                    diags.append(Diagnostic("UndeclaredSymbol",
                                            f"feature {f.name!r} CPT row uses "
                                            f"unknown value {v!r} of parent "
                                            f"{parents[slot]!r}",
                                            row.line, row.column))
            if row.terminal != "*" and row.terminal not in terminals:
                diags.append(Diagnostic("UndeclaredSymbol",
                                        f"feature {f.name!r} CPT row conditions "
                                        f"on unknown terminal {row.terminal!r}",
                                        row.line, row.column))
            if len(row.probs) != len(f.values):
                diags.append(Diagnostic("BadDistribution",
                                        f"feature {f.name!r} CPT row has "
                                        f"{len(row.probs)} entries for "
                                        f"{len(f.values)} values",
                                        row.line, row.column))
            else:
                _check_distribution(diags, row.probs,
                                    f"CPT row of feature {f.name!r}",
                                    row.line, row.column)

    if diags:
        return None, diags

    # Build resolved features, synthesizing identity CPTs where omitted.
    features = []
    for f in raw.features:
        parents = f.parents if f.parents is not None else [f.name]
        pidx = tuple(feature_index[p] for p in parents)
        if f.cpt is None:
            if parents != [f.name]:
                diags.append(Diagnostic("BadDistribution",
                                        f"feature {f.name!r} declares parents "
                                        "but no CPT rows", f.line, f.column))
                continue
            # No dynamics given: the feature keeps its value.
            rows = tuple(
                CptRow((vi,), None,
                       tuple(1.0 if j == vi else 0.0
                             for j in range(len(f.values))))
                for vi in range(len(f.values))
            )
        else:
            rows = tuple(
                CptRow(tuple(None if v == "*" else
                             raw.features[feature_index[parents[s]]].values.index(v)
                             for s, v in enumerate(row.parent_values)),
                       None if row.terminal == "*" else row.terminal,
                       tuple(row.probs))
                for row in f.cpt
            )
        features.append(FeatureSpec(f.name, tuple(f.values), tuple(f.prior),
                                    pidx, rows))
    if diags:
        return None, diags
    features = tuple(features)

    # CPT coverage: every (parent combo, terminal) must match a row.
    for f, rawf in zip(features, raw.features):
        domains = [range(len(features[pi].values)) for pi in f.parent_indices]
        for combo in itertools.product(*domains):
            for term in terminals:
                matched = False
                for row in f.cpt:
                    if row.terminal is not None and row.terminal != term:
                        continue
                    if all(pv is None or pv == combo[s]
                           for s, pv in enumerate(row.parent_values)):
                        matched = True
                        break
                if not matched:
                    parents = [features[pi].name for pi in f.parent_indices]
                    vals = ", ".join(
                        f"{n}={features[pi].values[c]}"
                        for n, pi, c in zip(parents, f.parent_indices, combo))
                    diags.append(Diagnostic(
                        "BadDistribution",
                        f"feature {f.name!r} has no CPT row for "
                        f"({vals}) with terminal {term!r}",
                        rawf.line, rawf.column))
    if diags:
        return None, diags

    # Build productions.
    productions = []
    for p in sorted(raw.productions, key=lambda p: p.index):
        rules = tuple(
            (tuple((feature_index[fname],
                    frozenset(raw.features[feature_index[fname]].values.index(v)
                              for v in vals))
                   for fname, vals in rule.guard),
             rule.value)
            for rule in p.rules
        )
        productions.append(Production(
            p.index, p.lhs, tuple(p.rhs),
            ProbabilityFunction(rules, p.default),
            tail_recursive=len(p.rhs) >= 2 and p.rhs[-1] == p.lhs))
    productions = tuple(productions)

    # Level assignment and tail-recursion structure.  Children sit one
    # level below their parent except a trailing child equal to the
    # left-hand symbol, which stays on the parent's level.
    psdg_tmp = Psdg(features, raw.start, productions, terminals,
                    nonterminals, {}, 0)
    levels: dict[str, set[int]] = {raw.start: {1}}
    frontier = [(raw.start, 1)]
    seen = {(raw.start, 1)}
    max_level = 1
    overflow = False
    while frontier:
        sym, lvl = frontier.pop()
        for pi in psdg_tmp.by_lhs[sym]:
            prod = productions[pi]
            last = len(prod.rhs) - 1
            for i, child in enumerate(prod.rhs):
                if child in psdg_tmp.terminal_set:
                    continue
                child_lvl = lvl if (i == last and prod.tail_recursive) else lvl + 1
                if child_lvl > len(nonterminals):
                    overflow = True
                    continue
                levels.setdefault(child, set()).add(child_lvl)
                if (child, child_lvl) not in seen:
                    seen.add((child, child_lvl))
                    frontier.append((child, child_lvl))
                max_level = max(max_level, child_lvl)
    if overflow:
        cycle = _find_level_cycle(psdg_tmp)
        diags.append(Diagnostic(
            "NonTailRecursion",
            "recursion other than direct tail recursion: cycle "
            + " -> ".join(cycle)))
        return None, diags

    # Normalization of production probabilities for every state.
    relevant: dict[str, frozenset[int]] = {}
    for nt in nonterminals:
        scope = frozenset()
        for pi in psdg_tmp.by_lhs[nt]:
            scope |= productions[pi].prob.scope()
        relevant[nt] = scope
    total_states = psdg_tmp.state_count
    for nt in nonterminals:
        if total_states <= joint_bound:
            space = itertools.product(*(range(len(f.values)) for f in features))
        else:
            # The functions only read their guard scopes, so enumerating the
            # scope features (others pinned) still covers every distinct value.
            space = _scoped_states(features, relevant[nt])
        for idx in space:
            s = sum(productions[pi].prob.evaluate(idx)
                    for pi in psdg_tmp.by_lhs[nt])
            if abs(s - 1.0) > NORMALIZATION_TOL:
                labels = ", ".join(f"{f.name}={f.values[v]}"
                                   for f, v in zip(features, idx))
                diags.append(Diagnostic(
                    "NormalizationViolation",
                    f"productions of {nt!r} sum to {s:.12g} at state ({labels})"))
                break
    if diags:
        return None, diags

    lv = {nt: tuple(sorted(levels.get(nt, set()))) for nt in nonterminals}
    return Psdg(features, raw.start, productions, terminals, nonterminals,
                lv, max_level), []


def _scoped_states(features, scope: frozenset[int]):
    ranges = [range(len(f.values)) if i in scope else (0,)
              for i, f in enumerate(features)]
    return itertools.product(*ranges)


def _check_distribution(diags, probs, what, line, column):
    for p in probs:
        if p < 0.0 or p > 1.0 + DISTRIBUTION_TOL:
            diags.append(Diagnostic("BadDistribution",
                                    f"{what} has entry {p} outside [0, 1]",
                                    line, column))
            return
    if abs(sum(probs) - 1.0) > DISTRIBUTION_TOL:
        diags.append(Diagnostic("BadDistribution",
                                f"{what} sums to {sum(probs):.15g}",
                                line, column))


def _find_level_cycle(psdg: Psdg) -> list[str]:
    """Find a cycle in the level-increment graph for the error message."""
    edges: dict[str, set[str]] = {nt: set() for nt in psdg.nonterminals}
    for p in psdg.productions:
        last = len(p.rhs) - 1
        for i, child in enumerate(p.rhs):
            if child in psdg.terminal_set:
                continue
            if i == last and p.tail_recursive:
                continue
            edges[p.lhs].add(child)
    color: dict[str, int] = {}
    stack: list[str] = []

    def dfs(u: str) -> list[str] | None:
        color[u] = 1
        stack.append(u)
        for v in sorted(edges[u]):
            if color.get(v, 0) == 1:
                return stack[stack.index(v):] + [v]
            if color.get(v, 0) == 0:
                found = dfs(v)
                if found:
                    return found
        stack.pop()
        color[u] = 2
        return None

    for nt in sorted(psdg.nonterminals):
        if color.get(nt, 0) == 0:
            found = dfs(nt)
            if found:
                return found
    return ["<unknown>"]


def compile_grammar(features: list[RawFeature],
                    productions: list[RawProduction],
                    start: str) -> Psdg:
    """Builder used by tests and embedded grammars; raises GrammarError."""
    psdg, diags = validate_grammar(RawGrammar(features, productions, start))
    if psdg is None:
        raise GrammarError(diags)
    return psdg
