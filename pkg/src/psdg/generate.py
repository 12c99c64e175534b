"""Forward execution of a grammar: expansion stacks and sampled trajectories.

A running plan is a stack of frames, one per level of the active branch.
Frame ⟨a, b⟩ at level ℓ means production a is being expanded and its b-th
right-hand symbol (1-based) is the one currently in progress.  The deepest
frame always sits on a terminal; that terminal is the step's emission.

Levels grow by one from parent to child, with one exception: a production
whose final symbol repeats its own left-hand side re-enters the same level
with a freshly drawn production once the cursor has cleared the preceding
symbols.  The cursor of such a frame therefore never reaches the final
position, and the frame itself never terminates; this is what lets
self-embedding plans run for unbounded time in bounded depth.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

from .errors import DeadEnd, InvalidTrajectory
from .grammar import (Psdg, StatePoint, _feature_transition, prior_probability,
                      production_probability, transition_probability)


class ExpansionFrame(NamedTuple):
    level: int
    symbol: str
    production: int
    cursor: int         # 1-based position into the production's rhs


Stack = tuple[ExpansionFrame, ...]


@dataclass
class TimeStep:
    stack: Stack
    terminal: str
    state: StatePoint   # state after the terminal was emitted


@dataclass
class Trajectory:
    initial_state: StatePoint
    steps: tuple[TimeStep, ...] = ()
    complete: bool = False
    seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.steps)


def leaf_terminal(psdg: Psdg, stack: Stack) -> str:
    frame = stack[-1]
    sym = psdg.production(frame.production).rhs[frame.cursor - 1]
    assert psdg.is_terminal(sym), f"leaf of stack is {sym!r}, not a terminal"
    return sym


def termination_flags(psdg: Psdg, stack: Stack) -> tuple[bool, ...]:
    """Per-level termination at the current step, deepest level decided first.

    A frame terminates iff its cursor is on the final rhs symbol and that
    symbol is the emitted terminal or a child expansion that terminates.
    True entries always form a suffix of the stack.
    """
    flags = [False] * len(stack)
    below = True    # the terminal leaf itself always completes
    for i in range(len(stack) - 1, -1, -1):
        frame = stack[i]
        m = len(psdg.production(frame.production).rhs)
        flags[i] = below and frame.cursor == m
        below = flags[i]
    return tuple(flags)


def expansion_terminates(psdg: Psdg, stack: Stack, level: int) -> bool:
    if not 1 <= level <= len(stack):
        raise IndexError(f"no frame at level {level}")
    return termination_flags(psdg, stack)[level - 1]


def enumerate_chains(psdg: Psdg, symbol: str, level: int,
                     state: StatePoint) -> list[tuple[Stack, float]]:
    """All ways to freshly expand `symbol` down to a terminal leaf.

    Returns (frame chain, probability) pairs in production-index order,
    depth first.  Zero-probability productions are skipped.  Validation
    bounds chain length, so the recursion terminates.
    """
    out: list[tuple[Stack, float]] = []
    for a in psdg.by_lhs[symbol]:
        prod = psdg.production(a)
        p = production_probability(psdg, prod, state)
        if p <= 0.0:
            continue
        head = ExpansionFrame(level, symbol, a, 1)
        first = prod.rhs[0]
        if psdg.is_terminal(first):
            out.append(((head,), p))
        else:
            for tail, tp in enumerate_chains(psdg, first, level + 1, state):
                out.append(((head,) + tail, p * tp))
    return out


def sample_chain(psdg: Psdg, symbol: str, level: int, state: StatePoint,
                 rng: random.Random) -> Stack:
    frames: list[ExpansionFrame] = []
    sym, lev = symbol, level
    while True:
        candidates = psdg.by_lhs[sym]
        weights = [production_probability(psdg, a, state) for a in candidates]
        total = sum(weights)
        if total <= 0.0:
            raise DeadEnd(f"all productions of {sym!r} have probability 0 "
                          f"at state {state.labels(psdg)}")
        r = rng.random() * total
        acc = 0.0
        a = candidates[-1]
        for cand, w in zip(candidates, weights):
            acc += w
            if r < acc:
                a = cand
                break
        frames.append(ExpansionFrame(lev, sym, a, 1))
        first = psdg.production(a).rhs[0]
        if psdg.is_terminal(first):
            return tuple(frames)
        sym, lev = first, lev + 1


def advance_skeleton(psdg: Psdg, stack: Stack
                     ) -> Optional[tuple[Stack, Optional[str], int]]:
    """The deterministic part of one stack advance.

    Returns None when the root has terminated.  Otherwise returns
    (kept frames, symbol needing a fresh chain or None, its level).
    Terminated frames below the deepest surviving level are dropped;
    that frame's cursor moves to the next rhs symbol, which either is
    the new terminal leaf, re-enters the same level (trailing-lhs
    recursion), or opens a fresh chain one level down.
    """
    flags = termination_flags(psdg, stack)
    if flags[0]:
        return None
    d = 0
    while d < len(stack) and not flags[d]:
        d += 1
    frame = stack[d - 1]
    prod = psdg.production(frame.production)
    nxt = frame.cursor + 1
    if prod.tail_recursive and nxt == len(prod.rhs):
        return stack[:d - 1], prod.lhs, frame.level
    moved = frame._replace(cursor=nxt)
    sym = prod.rhs[nxt - 1]
    if psdg.is_terminal(sym):
        return stack[:d - 1] + (moved,), None, 0
    return stack[:d - 1] + (moved,), sym, frame.level + 1


def advance_stack(psdg: Psdg, stack: Stack, state: StatePoint,
                  rng: random.Random) -> Optional[Stack]:
    """One step of the generative process; None once the root terminates.

    Fresh productions (re-entries and newly opened subtrees) are drawn
    with probabilities evaluated at `state`.
    """
    skeleton = advance_skeleton(psdg, stack)
    if skeleton is None:
        return None
    kept, fresh_symbol, fresh_level = skeleton
    if fresh_symbol is None:
        return kept
    return kept + sample_chain(psdg, fresh_symbol, fresh_level, state, rng)


def _sample_indexed(probs: Sequence[float], rng: random.Random) -> int:
    r = rng.random()
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if r < acc:
            return i
    return len(probs) - 1


def sample_initial_state(psdg: Psdg, rng: random.Random) -> StatePoint:
    return StatePoint(tuple(_sample_indexed(f.prior, rng)
                            for f in psdg.features))


def sample_next_state(psdg: Psdg, prev: StatePoint, terminal: str,
                      rng: random.Random) -> StatePoint:
    idx = []
    for fi in range(len(psdg.features)):
        row = _feature_transition(psdg, fi, prev.idx, terminal)
        idx.append(_sample_indexed(row, rng))
    return StatePoint(tuple(idx))


def sample_trajectory(psdg: Psdg, horizon: int, seed: Optional[int] = None
                      ) -> Trajectory:
    """Run the generative process for up to `horizon` steps.

    Draw order is fixed (initial state by feature, then per step: stack
    choices top-down, transition by feature), so equal seeds give equal
    trajectories.  The run ends early if the root expansion terminates.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = random.Random(seed)
    q0 = sample_initial_state(psdg, rng)
    steps = []
    complete = False
    stack = sample_chain(psdg, psdg.start, 1, q0, rng)
    q_prev = q0
    for _ in range(horizon):
        terminal = leaf_terminal(psdg, stack)
        q = sample_next_state(psdg, q_prev, terminal, rng)
        steps.append(TimeStep(stack, terminal, q))
        nxt = advance_stack(psdg, stack, q, rng)
        if nxt is None:
            complete = True
            break
        stack, q_prev = nxt, q
    return Trajectory(q0, tuple(steps), complete, seed)


def _match_chain(psdg: Psdg, frames: Stack, symbol: str, level: int,
                 t: int) -> list[int]:
    """Check that `frames` is a valid fresh chain for `symbol`; return its
    production choices."""
    if not frames:
        raise InvalidTrajectory(f"step {t}: missing expansion of {symbol!r}")
    choices = []
    sym, lev = symbol, level
    for i, frame in enumerate(frames):
        if frame.level != lev or frame.symbol != sym or frame.cursor != 1:
            raise InvalidTrajectory(
                f"step {t}: frame {frame} does not open {sym!r} at level {lev}")
        try:
            prod = psdg.production(frame.production)
        except Exception:
            raise InvalidTrajectory(
                f"step {t}: unknown production {frame.production}") from None
        if prod.lhs != sym:
            raise InvalidTrajectory(
                f"step {t}: production {frame.production} does not expand {sym!r}")
        choices.append(frame.production)
        first = prod.rhs[0]
        if psdg.is_terminal(first):
            if i != len(frames) - 1:
                raise InvalidTrajectory(
                    f"step {t}: frames continue below terminal leaf {first!r}")
            return choices
        sym, lev = first, lev + 1
    raise InvalidTrajectory(f"step {t}: chain for {symbol!r} has no terminal leaf")


def trajectory_probability(psdg: Psdg, traj: Trajectory) -> float:
    """Log joint probability of the trajectory's parse prefix and states.

    Every factor is located at its generation-time state: the prior for
    the initial state, each fresh production at the state current when it
    was drawn, and one transition factor per emitted terminal.  Returns
    -inf when any factor is zero; raises InvalidTrajectory if the stacks
    are not a run of the deterministic advance rules.
    """
    if not traj.steps:
        raise InvalidTrajectory("trajectory has no steps")
    log_p = 0.0
    dead = False

    def times(p: float):
        nonlocal log_p, dead
        if p <= 0.0:
            dead = True
        else:
            log_p += math.log(p)

    times(prior_probability(psdg, traj.initial_state))
    q_prev = traj.initial_state
    prev_stack: Optional[Stack] = None
    for t, step in enumerate(traj.steps, start=1):
        if prev_stack is None:
            kept: Stack = ()
            fresh_symbol: Optional[str] = psdg.start
            fresh_level = 1
        else:
            skeleton = advance_skeleton(psdg, prev_stack)
            if skeleton is None:
                raise InvalidTrajectory(f"step {t}: follows a completed root")
            kept, fresh_symbol, fresh_level = skeleton
        if step.stack[:len(kept)] != kept:
            raise InvalidTrajectory(f"step {t}: carried-over frames differ")
        rest = step.stack[len(kept):]
        if fresh_symbol is None:
            if rest:
                raise InvalidTrajectory(f"step {t}: unexpected fresh frames")
        else:
            for a in _match_chain(psdg, rest, fresh_symbol, fresh_level, t):
                times(production_probability(psdg, a, q_prev))
        terminal = leaf_terminal(psdg, step.stack)
        if terminal != step.terminal:
            raise InvalidTrajectory(
                f"step {t}: terminal {step.terminal!r} but leaf is {terminal!r}")
        times(transition_probability(psdg, q_prev, terminal, step.state))
        q_prev = step.state
        prev_stack = step.stack
    finished = termination_flags(psdg, traj.steps[-1].stack)[0]
    if finished != traj.complete:
        raise InvalidTrajectory("completion flag disagrees with the final stack")
    return float("-inf") if dead else log_p


def trajectory_json_lines(psdg: Psdg, traj: Trajectory) -> Iterator[str]:
    header = {
        "q0": traj.initial_state.labels(psdg),
        "seed": traj.seed,
        "complete": traj.complete,
    }
    yield json.dumps(header)
    for t, step in enumerate(traj.steps, start=1):
        yield json.dumps({
            "t": t,
            "stack": [{"level": f.level, "symbol": f.symbol,
                       "production": f.production, "cursor": f.cursor}
                      for f in step.stack],
            "terminal": step.terminal,
            "state": step.state.labels(psdg),
        })


def observation_json_lines(psdg: Psdg, traj: Trajectory) -> Iterator[str]:
    """The trajectory's state sequence as singleton observation lines."""
    for t, step in enumerate(traj.steps, start=1):
        observe = {name: [value]
                   for name, value in step.state.labels(psdg).items()}
        yield json.dumps({"t": t, "observe": observe})
