"""Command-line front end.

Subcommands: validate, sample, infer, oracle-check, to-pcfg.  Data goes
to standard output as JSON lines (or grammar text for to-pcfg), every
diagnostic to standard error.  Exit codes: 0 success, 1 validation or
model error, 2 I/O or input-format error, 3 zero-evidence under the
`error` policy.

Observation streams are JSON lines `{"t": k, "observe": {feature:
[values, ...]}}` with strictly increasing times.  A `t: 0` line may come
first to restrict the initial state.  Times missing from the stream are
treated as unconstrained steps; they advance the belief but produce no
report line.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import (ExplosionBound, GrammarError, PsdgError, SetTooLarge,
                     SupportTooLarge, ZeroEvidence, ZeroEvidenceMass)
from .generate import observation_json_lines, sample_trajectory, \
    trajectory_json_lines
from .grammar import Psdg
from .infer import (BeliefState, Observation, _project, belief_slice_marginals,
                    init_belief, step)
from .oracle import (compare_reports, enumerate_joint, pcfg_text,
                     reference_reports, to_pcfg)
from .parse import load_text, validate_text

ORACLE_TOL = 1e-9


class _CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _read_grammar(path: str) -> Psdg:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise _CliError(2, f"cannot read {path}: {e}") from None
    try:
        return load_text(text)
    except GrammarError as e:
        for d in e.diagnostics:
            print(json.dumps({"kind": d.kind, "line": d.line,
                              "column": d.column, "message": d.message}),
                  file=sys.stderr, flush=True)
        raise _CliError(1, f"{path}: {len(e.diagnostics)} problem(s)") from None


def _parse_observation(psdg: Psdg, line: str, lineno: int) -> Observation:
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as e:
        raise _CliError(2, f"line {lineno}: invalid JSON: {e.msg}") from None
    if not isinstance(payload, dict) or not isinstance(payload.get("t"), int):
        raise _CliError(2, f"line {lineno}: expected an object with an "
                           f"integer \"t\"")
    t = payload["t"]
    if t < 0:
        raise _CliError(2, f"line {lineno}: negative time {t}")
    observe = payload.get("observe", {})
    if not isinstance(observe, dict):
        raise _CliError(2, f"line {lineno}: \"observe\" must be an object")
    try:
        return Observation.from_labels(psdg, t, observe)
    except ValueError as e:
        raise _CliError(2, f"line {lineno}: {e}") from None


def _read_observations(psdg: Psdg, stream) -> list[Observation]:
    out: list[Observation] = []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        obs = _parse_observation(psdg, line, lineno)
        if out and obs.time <= out[-1].time:
            raise _CliError(2, f"line {lineno}: time {obs.time} does not "
                               f"increase past {out[-1].time}")
        if obs.time == 0 and out:
            raise _CliError(2, f"line {lineno}: t=0 must be the first line")
        out.append(obs)
    return out


def _emit(payload: dict):
    print(json.dumps(payload, sort_keys=True), flush=True)


def cmd_validate(args) -> int:
    try:
        with open(args.grammar, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        print(f"cannot read {args.grammar}: {e}", file=sys.stderr)
        return 2
    psdg, diags = validate_text(text)
    for d in diags:
        print(json.dumps({"kind": d.kind, "line": d.line, "column": d.column,
                          "message": d.message}), file=sys.stderr, flush=True)
    if psdg is None:
        return 1
    _emit(psdg.summary())
    return 0


def cmd_sample(args) -> int:
    psdg = _read_grammar(args.grammar)
    if args.observations_only and args.count != 1:
        raise _CliError(2, "--observations-only requires --count 1")
    for i in range(args.count):
        seed = args.seed + i
        traj = sample_trajectory(psdg, args.horizon, seed)
        lines = (observation_json_lines(psdg, traj) if args.observations_only
                 else trajectory_json_lines(psdg, traj))
        for line in lines:
            print(line, flush=True)
    return 0


def _advance_to(psdg: Psdg, belief: BeliefState, time: int) -> BeliefState:
    """Run unconstrained steps until the belief is ready for `time`."""
    while belief.time < time:
        _, belief = step(psdg, belief, Observation.vacuous(psdg, belief.time))
    return belief


def _reinit_report(psdg: Psdg, belief: BeliefState, time: int) -> dict:
    def state_key(q):
        return "|".join(f.values[v] for f, v in zip(psdg.features, q))

    return {
        "t": time,
        "evidence_likelihood": 0.0,
        "log_evidence": 0.0,
        "state": {state_key(q): p for q, p in belief.b_q.items()},
        "explain": {"symbols": {}, "productions": {}, "terminal": {},
                    "completed": 0.0},
        "predict": belief_slice_marginals(belief),
    }


def cmd_infer(args) -> int:
    psdg = _read_grammar(args.grammar)
    belief: BeliefState | None = None
    restrict = None
    for lineno, line in enumerate(sys.stdin, start=1):
        if not line.strip():
            continue
        obs = _parse_observation(psdg, line, lineno)
        if obs.time == 0:
            if belief is not None:
                raise _CliError(2, f"line {lineno}: t=0 must be the first line")
            restrict = obs.constraint
            continue
        if belief is None:
            belief = init_belief(psdg, args.support_bound, restrict)
        if obs.time < belief.time:
            raise _CliError(2, f"line {lineno}: time {obs.time} is not "
                               f"increasing")
        belief = _advance_to(psdg, belief, obs.time)
        try:
            report, belief = step(psdg, belief, obs)
        except ZeroEvidence as e:
            if args.on_zero_evidence == "error":
                print(f"zero evidence at t={e.time}: the stream contradicts "
                      f"the model", file=sys.stderr)
                return 3
            print(f"zero evidence at t={e.time}: restarting from the prior "
                  f"restricted to the observation", file=sys.stderr)
            belief = init_belief(psdg, args.support_bound,
                                 restrict=obs.constraint, time=obs.time + 1)
            _emit(_reinit_report(psdg, belief, obs.time))
            continue
        _emit(report.to_dict(psdg))
    return 0


def cmd_oracle_check(args) -> int:
    psdg = _read_grammar(args.grammar)
    observations = _read_observations(psdg, sys.stdin)
    last = observations[-1].time if observations else 0
    horizon = max(args.horizon, last + 1, 1)
    joint = enumerate_joint(psdg, horizon)
    want = reference_reports(psdg, joint, observations)

    restrict = None
    queue = list(observations)
    if queue and queue[0].time == 0:
        restrict = queue.pop(0).constraint
    belief = init_belief(psdg, args.support_bound, restrict)
    if args.corrupt_belief:
        # Skew every chart entry by a different factor so the damage
        # cannot hide behind renormalization.
        scale = 1.0
        for row in belief.chart.values():
            for branch in row:
                scale += 0.01
                row[branch] *= scale
        _project(belief)
    got = []
    for obs in queue:
        belief = _advance_to(psdg, belief, obs.time)
        report, belief = step(psdg, belief, obs)
        got.append(report.to_dict(psdg))

    worst = 0.0
    ok = True
    for g, w in zip(got, want):
        dev, problems = compare_reports(g, w, ORACLE_TOL)
        worst = max(worst, dev)
        _emit({"t": g["t"], "max_deviation": dev})
        if problems:
            ok = False
            for p in problems[:20]:
                print(f"t={g['t']}: {p}", file=sys.stderr)
    _emit({"max_deviation": worst, "reports": len(got), "ok": ok})
    return 0 if ok else 1


def cmd_to_pcfg(args) -> int:
    psdg = _read_grammar(args.grammar)
    pcfg = to_pcfg(psdg)
    text = pcfg_text(pcfg)
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as e:
            raise _CliError(2, f"cannot write {args.out}: {e}") from None
    else:
        sys.stdout.write(text)
        sys.stdout.flush()
    n_prods = pcfg.production_count()
    bound = len(psdg.productions) * psdg.state_count ** (psdg.max_rhs + 1)
    print(f"nonterminal tuples: {pcfg.nonterminal_count()}  "
          f"productions: {n_prods}  "
          f"bound |P|*|Q|^(m+1): {bound}  ratio: {n_prods / bound:.6g}",
          file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psdg",
        description="State-dependent grammar tools: validation, sampling, "
                    "online plan recognition, and exact cross-checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a grammar file and print "
                                        "its summary")
    p.add_argument("grammar")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sample", help="sample trajectories as JSON lines")
    p.add_argument("grammar")
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--observations-only", action="store_true",
                   help="emit the state observations instead of the "
                        "full trajectory, for piping into `infer`")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("infer", help="run recognition over an observation "
                                     "stream from stdin")
    p.add_argument("grammar")
    p.add_argument("--support-bound", type=int, default=100_000)
    p.add_argument("--on-zero-evidence", choices=("error", "reinit"),
                   default="error")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("oracle-check",
                       help="compare recognition reports against exhaustive "
                            "enumeration")
    p.add_argument("grammar")
    p.add_argument("--horizon", type=int, default=0,
                   help="enumeration horizon (defaults to one past the "
                        "last observation)")
    p.add_argument("--support-bound", type=int, default=100_000)
    p.add_argument("--corrupt-belief", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("to-pcfg", help="emit the state-annotated "
                                       "constant-probability grammar")
    p.add_argument("grammar")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_to_pcfg)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _CliError as e:
        print(str(e), file=sys.stderr)
        return e.code
    except ZeroEvidence as e:
        print(f"zero evidence at t={e.time}", file=sys.stderr)
        return 3
    except ZeroEvidenceMass as e:
        print(str(e), file=sys.stderr)
        return 3
    except (ExplosionBound, SetTooLarge, SupportTooLarge) as e:
        print(str(e), file=sys.stderr)
        return 1
    except PsdgError as e:
        print(str(e), file=sys.stderr)
        return 1
    except BrokenPipeError:
        # Keep the interpreter's shutdown flush from whining about the
        # closed pipe.
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
