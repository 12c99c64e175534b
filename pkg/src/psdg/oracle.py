"""Brute-force ground truth for small grammars.

Everything here trades efficiency for obvious correctness: the joint
distribution over parse prefixes and state sequences is materialized by
exhaustive enumeration, and posteriors are computed by filtering that
table.  The recognition engine is validated against these numbers.

The module also builds the state-annotated context-free grammar that is
distribution-equivalent to a given state-dependent grammar over complete
parse trees: nonterminals become ⟨state-in, symbol, state-out⟩ tuples and
production probabilities become constants.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import (ExplosionBound, InvalidTrajectory, UnknownProduction,
                     ZeroEvidenceMass)
from .generate import (Stack, TimeStep, Trajectory, advance_skeleton,
                       enumerate_chains, leaf_terminal, termination_flags)
from .grammar import (Psdg, StatePoint, StateSet, _feature_transition,
                      enumerate_states, prior_probability,
                      production_probability)

DEFAULT_ENTRY_BOUND = 10**7


@dataclass
class JointEntry:
    trajectory: Trajectory
    prob: float
    log_prob: float


@dataclass
class JointTable:
    psdg: Psdg
    horizon: int
    entries: list[JointEntry]
    total_mass: float


def _transition_options(psdg: Psdg, prev: tuple[int, ...], terminal: str
                        ) -> Iterator[tuple[tuple[int, ...], float]]:
    """All next states with positive transition probability, with probs."""
    per_feature = []
    for fi in range(len(psdg.features)):
        row = _feature_transition(psdg, fi, prev, terminal)
        per_feature.append([(v, p) for v, p in enumerate(row) if p > 0.0])
    for combo in itertools.product(*per_feature):
        idx = tuple(v for v, _ in combo)
        p = 1.0
        for _, f in combo:
            p *= f
        yield idx, p


def enumerate_joint(psdg: Psdg, horizon: int,
                    bound: int = DEFAULT_ENTRY_BOUND) -> JointTable:
    """Materialize every positive-probability execution of length <= horizon.

    Completion is absorbing: a run whose root terminates at t < horizon is
    stored once, with length t.  Runs still alive at the horizon are stored
    as length-horizon prefixes.  Raises ExplosionBound when the walk grows
    past `bound` nodes.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    entries: list[JointEntry] = []
    visits = 0

    def walk(q0: StatePoint, steps: tuple[TimeStep, ...], stack: Stack,
             q_prev: tuple[int, ...], logp: float, t: int):
        nonlocal visits
        visits += 1
        if visits > bound:
            raise ExplosionBound(
                f"joint enumeration exceeded {bound} nodes at horizon {horizon}")
        terminal = leaf_terminal(psdg, stack)
        complete_here = termination_flags(psdg, stack)[0]
        for q, tp in _transition_options(psdg, q_prev, terminal):
            steps2 = steps + (TimeStep(stack, terminal, StatePoint(q)),)
            lp = logp + math.log(tp)
            if complete_here or t == horizon:
                traj = Trajectory(q0, steps2, complete=complete_here)
                entries.append(JointEntry(traj, math.exp(lp), lp))
            else:
                kept, fresh_symbol, fresh_level = advance_skeleton(psdg, stack)
                if fresh_symbol is None:
                    walk(q0, steps2, kept, q, lp, t + 1)
                else:
                    for chain, cp in enumerate_chains(
                            psdg, fresh_symbol, fresh_level, q):
                        walk(q0, steps2, kept + chain, q,
                             lp + math.log(cp), t + 1)

    for q0_idx in enumerate_states(psdg):
        p0 = prior_probability(psdg, q0_idx)
        if p0 <= 0.0:
            continue
        for chain, cp in enumerate_chains(psdg, psdg.start, 1, q0_idx):
            walk(StatePoint(q0_idx), (), chain, q0_idx,
                 math.log(p0) + math.log(cp), 1)

    total = math.fsum(e.prob for e in entries)
    return JointTable(psdg, horizon, entries, total)


### Queries against the table.


@dataclass(frozen=True)
class Query:
    """An event over one time slice of the joint.

    kinds: "state" (value: StateSet or index tuple; time may be 0),
    "symbol" (level + nonterminal name), "production" (level + (a, b)),
    "terminal" (terminal name), "terminated" (level), and "completed"
    (the root finished strictly before `time`).
    """
    kind: str
    time: int
    level: Optional[int] = None
    value: object = None


def state_at(traj: Trajectory, t: int) -> tuple[int, ...]:
    """Q^t of the run; the final state is frozen after completion."""
    if t <= 0:
        return traj.initial_state.idx
    if t <= len(traj.steps):
        return traj.steps[t - 1].state.idx
    if traj.complete:
        return traj.steps[-1].state.idx
    raise ValueError(f"time {t} is beyond the enumerated horizon")


def _satisfies_state(traj: Trajectory, t: int, value) -> bool:
    q = state_at(traj, t)
    if isinstance(value, StateSet):
        return q in value
    if isinstance(value, StatePoint):
        return q == value.idx
    return q == tuple(value)


def query_holds(psdg: Psdg, traj: Trajectory, query: Query) -> bool:
    k = query.kind
    if k == "state":
        return _satisfies_state(traj, query.time, query.value)
    if k == "completed":
        return traj.complete and len(traj.steps) < query.time
    if query.time > len(traj.steps):
        return False        # the run has no such slice (finished or cut off)
    stack = traj.steps[query.time - 1].stack
    if k == "terminal":
        return traj.steps[query.time - 1].terminal == query.value
    if k == "symbol":
        return (query.level <= len(stack)
                and stack[query.level - 1].symbol == query.value)
    if k == "production":
        if query.level > len(stack):
            return False
        frame = stack[query.level - 1]
        return (frame.production, frame.cursor) == tuple(query.value)
    if k == "terminated":
        return (query.level <= len(stack)
                and termination_flags(psdg, stack)[query.level - 1])
    raise ValueError(f"unknown query kind {k!r}")


def _matches_evidence(traj: Trajectory, evidence) -> bool:
    return all(_satisfies_state(traj, obs.time, obs.constraint)
               for obs in evidence)


def exact_posterior(joint: JointTable, evidence, query: Query) -> float:
    """Pr(query | evidence) by filtering the table.

    Evidence items need `time` and `constraint` (a StateSet) attributes;
    order is irrelevant.  Raises ZeroEvidenceMass when nothing survives
    the filter.
    """
    ev_mass = 0.0
    q_mass = 0.0
    for entry in joint.entries:
        if not _matches_evidence(entry.trajectory, evidence):
            continue
        ev_mass += entry.prob
        if query_holds(joint.psdg, entry.trajectory, query):
            q_mass += entry.prob
    if ev_mass <= 0.0:
        raise ZeroEvidenceMass("no enumerated run satisfies the evidence")
    return q_mass / ev_mass


### Reference step reports.


def _state_key(psdg: Psdg, idx: tuple[int, ...]) -> str:
    return "|".join(f.values[v] for f, v in zip(psdg.features, idx))


def _slice_marginals(psdg: Psdg, alive: list[tuple[Trajectory, float]],
                     mass: float, t: int) -> dict:
    """Symbol/production/terminal marginals of slice t, plus completed mass."""
    symbols: dict[int, dict[str, float]] = {}
    productions: dict[int, dict[str, float]] = {}
    terminal: dict[str, float] = {}
    completed = 0.0
    for traj, p in alive:
        if len(traj.steps) < t:
            completed += p      # complete runs only; horizon guards the rest
            continue
        step = traj.steps[t - 1]
        for frame in step.stack:
            symbols.setdefault(frame.level, {})
            productions.setdefault(frame.level, {})
            s = symbols[frame.level]
            s[frame.symbol] = s.get(frame.symbol, 0.0) + p
            key = f"{frame.production}:{frame.cursor}"
            r = productions[frame.level]
            r[key] = r.get(key, 0.0) + p
        terminal[step.terminal] = terminal.get(step.terminal, 0.0) + p

    def norm(d):
        return {k: v / mass for k, v in d.items()}

    return {
        "symbols": {lvl: norm(d) for lvl, d in symbols.items()},
        "productions": {lvl: norm(d) for lvl, d in productions.items()},
        "terminal": norm(terminal),
        "completed": completed / mass,
    }


def reference_reports(psdg: Psdg, joint: JointTable, observations) -> list[dict]:
    """The exact step reports an ideal recognizer would emit.

    One dict per observation, same shape as the engine's report (slice
    marginals for the observed step, predictions for the next).  The joint
    horizon must exceed the last observation time so that prediction
    slices exist in the table.
    """
    times = [obs.time for obs in observations]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("observation times must be strictly increasing")
    if times and times[-1] + 1 > joint.horizon:
        raise ValueError("joint horizon too small for prediction slices")
    alive = [(e.trajectory, e.prob) for e in joint.entries]
    mass = math.fsum(p for _, p in alive)
    reports = []
    base_mass = mass
    for obs in observations:
        kept = [(traj, p) for traj, p in alive
                if _satisfies_state(traj, obs.time, obs.constraint)]
        new_mass = math.fsum(p for _, p in kept)
        if new_mass <= 0.0:
            raise ZeroEvidenceMass(
                f"no enumerated run matches the observation at t={obs.time}")
        if obs.time == 0:
            # a restriction of the initial state: rebases the evidence
            # chain instead of producing a report
            alive, mass, base_mass = kept, new_mass, new_mass
            continue
        state: dict[str, float] = {}
        for traj, p in kept:
            key = _state_key(psdg, state_at(traj, obs.time))
            state[key] = state.get(key, 0.0) + p
        report = {
            "t": obs.time,
            "evidence_likelihood": new_mass / mass,
            "log_evidence": math.log(new_mass) - math.log(base_mass),
            "state": {k: v / new_mass for k, v in state.items()},
            "explain": _slice_marginals(psdg, kept, new_mass, obs.time),
            "predict": _slice_marginals(psdg, kept, new_mass, obs.time + 1),
        }
        reports.append(report)
        alive, mass = kept, new_mass
    return reports


def compare_reports(got: dict, want: dict, tol: float = 1e-9
                    ) -> tuple[float, list[str]]:
    """Max absolute deviation between two report dicts, with a note per
    deviation above tol.  Missing distribution entries count as zero."""
    problems: list[str] = []
    worst = 0.0

    def walk(a, b, path):
        nonlocal worst
        if isinstance(a, dict) or isinstance(b, dict):
            a = a if isinstance(a, dict) else {}
            b = b if isinstance(b, dict) else {}
            for key in set(map(str, a)) | set(map(str, b)):
                av = next((v for k, v in a.items() if str(k) == key), 0.0)
                bv = next((v for k, v in b.items() if str(k) == key), 0.0)
                walk(av, bv, f"{path}.{key}")
            return
        av = float(a) if isinstance(a, (int, float)) else math.nan
        bv = float(b) if isinstance(b, (int, float)) else math.nan
        dev = abs(av - bv)
        if not (dev <= tol):
            problems.append(f"{path}: {av!r} vs {bv!r}")
        worst = max(worst, dev if not math.isnan(dev) else math.inf)

    for field_name in ("evidence_likelihood", "log_evidence", "state",
                       "explain", "predict"):
        walk(got.get(field_name), want.get(field_name), field_name)
    return worst, problems


def joint_json_lines(joint: JointTable) -> Iterator[str]:
    psdg = joint.psdg
    for e in joint.entries:
        yield json.dumps({
            "prob": e.prob,
            "log_prob": e.log_prob,
            "complete": e.trajectory.complete,
            "q0": _state_key(psdg, e.trajectory.initial_state.idx),
            "steps": [{
                "t": t,
                "stack": [[f.level, f.symbol, f.production, f.cursor]
                          for f in s.stack],
                "terminal": s.terminal,
                "state": _state_key(psdg, s.state.idx),
            } for t, s in enumerate(e.trajectory.steps, start=1)],
        })


### Parse trees of complete runs.


@dataclass
class TerminalLeaf:
    symbol: str
    time: int
    prev_state: tuple[int, ...] = ()
    next_state: tuple[int, ...] = ()


@dataclass
class ParseNode:
    symbol: str
    production: int
    children: list = field(default_factory=list)
    start_state: tuple[int, ...] = ()
    end_state: tuple[int, ...] = ()


def parse_tree(psdg: Psdg, traj: Trajectory) -> ParseNode:
    """Rebuild the full parse tree of a completed run.

    Fresh frames become nodes hanging off the frame above them (or off the
    node they re-enter, for trailing-lhs recursion); each step's terminal
    becomes a leaf under the deepest node.  Nodes are annotated with the
    state before their first terminal and after their last one.
    """
    if not traj.complete:
        raise InvalidTrajectory("parse trees exist only for completed runs")
    states = [traj.initial_state.idx] + [s.state.idx for s in traj.steps]
    root: Optional[ParseNode] = None
    nodes: list[ParseNode] = []     # node per live stack level
    prev: Optional[Stack] = None
    for t, step in enumerate(traj.steps, start=1):
        stack = step.stack
        if prev is None:
            start = 0
        else:
            # Comparing stacks directly is ambiguous: a trailing-lhs
            # re-entry that resamples the same production reproduces the
            # previous stack bit for bit.  Replaying the deterministic
            # advance of the previous stack gives the true split between
            # carried-over frames and fresh ones.
            skeleton = advance_skeleton(psdg, prev)
            assert skeleton is not None, "root terminated before final step"
            kept, fresh_symbol, _ = skeleton
            k = len(kept)
            assert stack[:k] == kept, "stack does not extend its predecessor"
            start = k
            moved = k > 0 and kept[k - 1] != prev[k - 1]
            if fresh_symbol is None:
                assert len(stack) == k
                nodes = nodes[:k]
            elif moved:
                # cursor advanced onto a nonterminal; the fresh chain
                # hangs below the moved frame's node
                nodes = nodes[:k]
            else:
                # trailing-lhs re-entry: the first fresh frame replaces
                # level k+1 and becomes the final child of the node there
                frame = stack[k]
                assert frame.symbol == fresh_symbol and frame.cursor == 1
                reentered = nodes[k]
                node = ParseNode(frame.symbol, frame.production)
                reentered.children.append(node)
                nodes = nodes[:k] + [node]
                start = k + 1
        for frame in stack[start:]:
            node = ParseNode(frame.symbol, frame.production)
            if frame.level == 1:
                root = node
            else:
                nodes[frame.level - 2].children.append(node)
            nodes.append(node)
        leaf = TerminalLeaf(step.terminal, t, states[t - 1], states[t])
        assert len(nodes) == len(stack)
        nodes[-1].children.append(leaf)
        prev = stack
    assert root is not None

    def annotate(node) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if isinstance(node, TerminalLeaf):
            return node.prev_state, node.next_state
        m = len(psdg.production(node.production).rhs)
        assert len(node.children) == m, "incomplete node in a completed run"
        node.start_state, _ = annotate(node.children[0])
        for child in node.children[1:]:
            annotate(child)
        node.end_state = (node.children[-1].end_state
                          if isinstance(node.children[-1], ParseNode)
                          else node.children[-1].next_state)
        return node.start_state, node.end_state

    annotate(root)
    return root


### The state-annotated constant-probability grammar.


NT = "nt"
TERM = "t"


@dataclass
class PcfgProduction:
    origin: int                 # production index in the source grammar
    rhs: tuple[tuple, ...]
    prob: float


@dataclass
class Pcfg:
    psdg: Psdg
    start: dict[tuple, float]                       # ⟨q, S, q'⟩ -> weight
    productions: dict[tuple, list[PcfgProduction]]
    terminal_symbols: set[tuple]                    # ⟨q, x, q'⟩

    def nonterminal_count(self) -> int:
        return len(self.productions)

    def production_count(self) -> int:
        return sum(len(v) for v in self.productions.values())


def _completion_matrices(psdg: Psdg, states: list[tuple[int, ...]]
                         ) -> dict[str, np.ndarray]:
    """E_sym[i, j] = Pr(an expansion of sym begun in state i completes,
    leaving state j after its final terminal)."""
    n = len(states)
    pos = {q: i for i, q in enumerate(states)}
    mats: dict[str, np.ndarray] = {}
    for x in psdg.terminals:
        m = np.zeros((n, n))
        for i, q in enumerate(states):
            for nxt, p in _transition_options(psdg, q, x):
                m[i, pos[nxt]] = p
        mats[x] = m

    # Nonterminals in dependency order: X needs every rhs symbol except a
    # trailing self-reference, and level validation makes that graph acyclic.
    order: list[str] = []
    seen: set[str] = set()

    def visit(sym: str):
        if sym in seen or psdg.is_terminal(sym):
            return
        seen.add(sym)
        for a in psdg.by_lhs[sym]:
            prod = psdg.production(a)
            rhs = prod.rhs[:-1] if prod.tail_recursive else prod.rhs
            for y in rhs:
                visit(y)
        order.append(sym)

    for sym in psdg.nonterminals:
        visit(sym)

    for sym in order:
        a_mat = np.zeros((n, n))
        b_mat = np.zeros((n, n))
        for a in psdg.by_lhs[sym]:
            prod = psdg.production(a)
            probs = np.array([production_probability(psdg, prod, q)
                              for q in states])
            body = prod.rhs[:-1] if prod.tail_recursive else prod.rhs
            chain = np.eye(n)
            for y in body:
                chain = chain @ mats[y]
            contrib = probs[:, None] * chain
            if prod.tail_recursive:
                b_mat += contrib
            else:
                a_mat += contrib
        if not a_mat.any():
            mats[sym] = np.zeros((n, n))
            continue
        try:
            mats[sym] = np.linalg.solve(np.eye(n) - b_mat, a_mat)
        except np.linalg.LinAlgError:
            # a recursion that completes with probability approaching zero;
            # fall back to the geometric series
            e = a_mat.copy()
            for _ in range(200000):
                nxt = a_mat + b_mat @ e
                if np.max(np.abs(nxt - e)) < 1e-16:
                    e = nxt
                    break
                e = nxt
            mats[sym] = e
    return mats


def to_pcfg(psdg: Psdg, bound: int = DEFAULT_ENTRY_BOUND) -> Pcfg:
    """State-annotated constant-probability grammar over complete trees.

    Nonterminals are ⟨q_in, X, q_out⟩ tuples; a tuple production's
    probability is the source production's probability at q_in times the
    chance of exactly that intermediate state chain, normalized by the
    tuple's total completion mass.  Per-lhs probabilities then sum to 1,
    and a complete tree's probability (start weight times production
    probabilities) equals its probability under the source grammar.
    Start weights are unnormalized: their total is the probability that
    the root plan ever completes.
    """
    states = enumerate_states(psdg)
    n = len(states)
    if len(psdg.nonterminals) * n * n > bound:
        raise ExplosionBound(
            f"{len(psdg.nonterminals)} nonterminals over {n} states exceeds "
            f"bound {bound}")
    pos = {q: i for i, q in enumerate(states)}
    mats = _completion_matrices(psdg, states)

    start: dict[tuple, float] = {}
    for q0 in states:
        p0 = prior_probability(psdg, q0)
        if p0 <= 0.0:
            continue
        row = mats[psdg.start][pos[q0]]
        for j, qf in enumerate(states):
            if row[j] > 0.0:
                start[(NT, q0, psdg.start, qf)] = p0 * row[j]

    productions: dict[tuple, list[PcfgProduction]] = {}
    terminal_symbols: set[tuple] = set()
    pending = list(start)
    seen = set(pending)
    while pending:
        lhs = pending.pop()
        _, q_in, sym, q_out = lhs
        total = mats[sym][pos[q_in], pos[q_out]]
        rules: list[PcfgProduction] = []
        for a in psdg.by_lhs[sym]:
            prod = psdg.production(a)
            p = production_probability(psdg, prod, q_in)
            if p <= 0.0:
                continue

            def expand(i: int, q: tuple[int, ...], factor: float,
                       rhs: tuple[tuple, ...]):
                if i == len(prod.rhs):
                    if q == q_out and factor > 0.0:
                        rules.append(PcfgProduction(a, rhs, factor / total))
                    return
                y = prod.rhs[i]
                mat = mats[y]
                row = mat[pos[q]]
                # the last symbol must land exactly on q_out
                targets = [q_out] if i == len(prod.rhs) - 1 else states
                for q2 in targets:
                    f = row[pos[q2]]
                    if f <= 0.0:
                        continue
                    kind = TERM if psdg.is_terminal(y) else NT
                    expand(i + 1, q2, factor * f, rhs + ((kind, q, y, q2),))

            expand(0, q_in, p, ())
        productions[lhs] = rules
        for rule in rules:
            for child in rule.rhs:
                if child[0] == TERM:
                    terminal_symbols.add(child)
                elif child not in seen:
                    seen.add(child)
                    pending.append(child)
        if len(seen) + len(terminal_symbols) > bound:
            raise ExplosionBound(f"converted grammar exceeds bound {bound}")
    return Pcfg(psdg, start, productions, terminal_symbols)


def pcfg_tree_probability(pcfg: Pcfg, tree: ParseNode) -> float:
    """Log probability of a state-annotated parse tree: the root's start
    weight times constant production probabilities down the tree.  Trees
    that only use pruned (zero-mass) tuples get -inf; structurally alien
    trees raise UnknownProduction."""
    psdg = pcfg.psdg
    dead = False

    def check_origin(node: ParseNode):
        try:
            prod = psdg.production(node.production)
        except (KeyError, IndexError):
            raise UnknownProduction(
                f"production {node.production} does not exist") from None
        if prod.lhs != node.symbol or len(prod.rhs) != len(node.children):
            raise UnknownProduction(
                f"production {node.production} does not fit node "
                f"{node.symbol!r} with {len(node.children)} children")

    def walk(node) -> tuple[tuple, float]:
        nonlocal dead
        if isinstance(node, TerminalLeaf):
            sym = (TERM, node.prev_state, node.symbol, node.next_state)
            if sym not in pcfg.terminal_symbols:
                dead = True
            return sym, 0.0
        check_origin(node)
        lhs = (NT, node.start_state, node.symbol, node.end_state)
        logp = 0.0
        child_syms = []
        for child in node.children:
            s, lp = walk(child)
            child_syms.append(s)
            logp += lp
        for rule in pcfg.productions.get(lhs, ()):
            if rule.origin == node.production and rule.rhs == tuple(child_syms):
                return lhs, logp + math.log(rule.prob)
        dead = True
        return lhs, logp

    root_sym, logp = walk(tree)
    w = pcfg.start.get(root_sym, 0.0)
    if dead or w <= 0.0:
        return float("-inf")
    return math.log(w) + logp


def _render_state(psdg: Psdg, idx: tuple[int, ...]) -> str:
    return ",".join(f.values[v] for f, v in zip(psdg.features, idx))


def _render_symbol(psdg: Psdg, sym: tuple) -> str:
    _, q, name, q2 = sym
    return f"<{_render_state(psdg, q)}|{name}|{_render_state(psdg, q2)}>"


def pcfg_text(pcfg: Pcfg) -> str:
    """Plain `lhs -> rhs  # prob` listing, start weights as comments."""
    psdg = pcfg.psdg
    lines = []
    for sym, w in sorted(pcfg.start.items(), key=lambda kv: str(kv[0])):
        lines.append(f"# start {_render_symbol(psdg, sym)}  # {w:.12g}")
    for lhs in sorted(pcfg.productions, key=str):
        for rule in pcfg.productions[lhs]:
            rhs = " ".join(_render_symbol(psdg, s) for s in rule.rhs)
            lines.append(f"{_render_symbol(psdg, lhs)} -> {rhs}"
                         f"  # {rule.prob:.12g}")
    for sym in sorted(pcfg.terminal_symbols, key=str):
        lines.append(f"{_render_symbol(psdg, sym)} -> {sym[2]}  # 1")
    return "\n".join(lines) + "\n"
