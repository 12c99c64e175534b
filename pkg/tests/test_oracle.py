"""Enumeration oracle, exact posteriors, parse trees, PCFG equivalence."""
import math

import pytest

from helpers import (ab_grammar, build, feature, forcing_grammar, production,
                     random_psdg, repeated_child_grammar, sized_random_psdg,
                     tail_recursive_grammar, traffic, unit_feature)
from psdg.errors import ExplosionBound, UnknownProduction, ZeroEvidenceMass
from psdg.generate import sample_trajectory, trajectory_probability
from psdg.grammar import StateSet
from psdg.infer import Observation
from psdg.oracle import (Query, enumerate_joint, exact_posterior, parse_tree,
                         pcfg_text, pcfg_tree_probability, to_pcfg)


class TestEnumerateJoint:
    def test_deterministic_grammar_single_entry(self):
        g = forcing_grammar()
        joint = enumerate_joint(g, horizon=5)
        assert len(joint.entries) == 1
        assert joint.entries[0].prob == pytest.approx(1.0)
        assert joint.entries[0].trajectory.complete

    def test_two_way_split(self):
        g = ab_grammar(pa=0.3)
        joint = enumerate_joint(g, horizon=1)
        probs = sorted(e.prob for e in joint.entries)
        assert probs == [pytest.approx(0.3), pytest.approx(0.7)]

    def test_mass_sums_to_one(self):
        for g, horizon in ((traffic(), 3), (repeated_child_grammar(), 5),
                           (tail_recursive_grammar(), 4)):
            joint = enumerate_joint(g, horizon)
            assert abs(joint.total_mass - 1.0) <= 1e-9

    def test_no_duplicate_trajectories(self):
        g = tail_recursive_grammar()
        joint = enumerate_joint(g, horizon=4)
        seen = set()
        for e in joint.entries:
            key = (e.trajectory.initial_state.idx,
                   tuple((s.stack, s.terminal, s.state.idx)
                         for s in e.trajectory.steps),
                   e.trajectory.complete)
            assert key not in seen
            seen.add(key)
            assert e.prob > 0.0

    def test_entries_match_trajectory_probability(self):
        g = traffic()
        joint = enumerate_joint(g, horizon=3)
        for e in joint.entries:
            lp = trajectory_probability(g, e.trajectory)
            assert abs(lp - e.log_prob) <= 1e-12 * max(1.0, abs(lp))

    def test_explosion_bound(self):
        g = traffic()
        with pytest.raises(ExplosionBound):
            enumerate_joint(g, horizon=3, bound=100)


def vacuous(g, t):
    return Observation.vacuous(g, t)


class TestExactPosterior:
    def test_query_equals_evidence(self):
        g = tail_recursive_grammar()
        joint = enumerate_joint(g, horizon=4)
        ev = [Observation.from_labels(g, 1, {"g": ["go"]})]
        got = exact_posterior(joint, ev, Query("state", 1,
                                               value=StateSet.from_labels(
                                                   g, {"g": ["go"]})))
        assert got == pytest.approx(1.0)

    def test_vacuous_evidence_terminal_marginal(self):
        g = ab_grammar(pa=0.3)
        joint = enumerate_joint(g, horizon=1)
        got = exact_posterior(joint, [], Query("terminal", 1, value="a"))
        assert got == pytest.approx(0.3)

    def test_production_and_symbol_queries(self):
        g = traffic()
        joint = enumerate_joint(g, horizon=2)
        # pass maneuver at level 2, slice 1
        p_sym = exact_posterior(joint, [], Query("symbol", 1, level=2,
                                                 value="Pass"))
        p_prod = sum(
            exact_posterior(joint, [], Query("production", 1, level=2,
                                             value=(a, 1)))
            for a in (5, 6))
        assert p_sym == pytest.approx(p_prod)
        assert p_sym > 0.0

    def test_zero_evidence_mass(self):
        g = traffic()
        joint = enumerate_joint(g, horizon=2)
        impossible = [
            Observation.from_labels(g, 1, {"lane": ["left-lane"]}),
            Observation.from_labels(g, 2, {"lane": ["right-lane"]}),
        ]
        with pytest.raises(ZeroEvidenceMass):
            exact_posterior(joint, impossible,
                            Query("terminal", 1, value="Stay"))

    def test_evidence_order_invariance(self):
        g = tail_recursive_grammar()
        joint = enumerate_joint(g, horizon=4)
        ev = [Observation.from_labels(g, 1, {"g": ["go"]}),
              Observation.from_labels(g, 3, {"g": ["halt"]})]
        q = Query("terminal", 2, value="a")
        assert exact_posterior(joint, ev, q) == \
            pytest.approx(exact_posterior(joint, list(reversed(ev)), q))

    def test_completed_query(self):
        g = ab_grammar()
        joint = enumerate_joint(g, horizon=3)
        # every run finishes at t=1, so it is completed from slice 2 on
        assert exact_posterior(joint, [], Query("completed", 2)) == \
            pytest.approx(1.0)
        assert exact_posterior(joint, [], Query("completed", 1)) == \
            pytest.approx(0.0)

    def test_terminated_query_matches_structure(self):
        g = traffic()
        joint = enumerate_joint(g, horizon=2)
        # root termination at slice 1 happens exactly on Drive -> Exit
        p_exit = exact_posterior(joint, [], Query("terminal", 1,
                                                  value="Exit"))
        p_term = exact_posterior(joint, [], Query("terminated", 1, level=1))
        assert p_term == pytest.approx(p_exit)


class TestParseTree:
    def test_forced_tree_shape(self):
        g = forcing_grammar()
        traj = sample_trajectory(g, horizon=5, seed=2)
        root = parse_tree(g, traj)
        assert root.symbol == "Drive"
        assert root.production == 3                  # Drive -> Pass Drive
        pass_node, tail = root.children
        assert pass_node.symbol == "Pass" and pass_node.production == 5
        assert [leaf.symbol for leaf in pass_node.children] == \
            ["Left", "Right"]
        assert tail.symbol == "Drive" and tail.production == 4
        assert [leaf.symbol for leaf in tail.children] == ["Exit"]
        # leaves carry the emission times in reading order
        assert [leaf.time for leaf in pass_node.children] == [1, 2]
        assert tail.children[0].time == 3

    def test_incomplete_run_rejected(self):
        g = tail_recursive_grammar()
        joint = enumerate_joint(g, horizon=3)
        incomplete = next(e.trajectory for e in joint.entries
                          if not e.trajectory.complete)
        from psdg.errors import InvalidTrajectory
        with pytest.raises(InvalidTrajectory):
            parse_tree(g, incomplete)

    def test_every_complete_run_has_consistent_tree(self):
        g = tail_recursive_grammar()
        joint = enumerate_joint(g, horizon=4)

        def leaves(node):
            out = []
            for c in node.children:
                if hasattr(c, "children"):
                    out.extend(leaves(c))
                else:
                    out.append(c)
            return out

        for e in joint.entries:
            if not e.trajectory.complete:
                continue
            root = parse_tree(g, e.trajectory)
            got = [leaf.symbol for leaf in leaves(root)]
            want = [s.terminal for s in e.trajectory.steps]
            assert got == want


class TestPcfg:
    def test_single_state_is_isomorphic(self):
        g = ab_grammar(pa=0.3)
        pcfg = to_pcfg(g)
        assert pcfg.production_count() == len(g.productions)
        probs = sorted(pr.prob for prods in pcfg.productions.values()
                       for pr in prods)
        assert probs == [pytest.approx(0.3), pytest.approx(0.7)]
        assert sum(pcfg.start.values()) == pytest.approx(1.0)

    def test_tuple_symbol_bound(self):
        g = repeated_child_grammar()        # |Q| = 2
        pcfg = to_pcfg(g)
        assert pcfg.nonterminal_count() <= len(g.nonterminals) * 4

    def test_tree_probability_equality_traffic(self):
        g = traffic()
        pcfg = to_pcfg(g)
        joint = enumerate_joint(g, horizon=3)
        checked = 0
        for e in joint.entries:
            if not e.trajectory.complete:
                continue
            tree = parse_tree(g, e.trajectory)
            got = pcfg_tree_probability(pcfg, tree)
            assert abs(got - e.log_prob) <= 1e-12 * max(1.0, abs(e.log_prob))
            checked += 1
        assert checked > 0

    def test_unknown_production_rejected(self):
        g = ab_grammar()
        pcfg = to_pcfg(g)
        other = build([unit_feature()],
                      [production(0, "S", ["c", "d"])], "S")
        traj = sample_trajectory(other, horizon=2, seed=0)
        tree = parse_tree(other, traj)
        with pytest.raises(UnknownProduction):
            pcfg_tree_probability(pcfg, tree)

    def test_zero_probability_tree_is_minus_inf(self):
        # two frozen states; only state 0 has prior mass, so every tuple
        # rooted in state 1 is pruned from the constructed grammar
        f = feature("u", ["z", "w"], [1.0, 0.0])
        g = build([f],
                  [production(0, "S", ["a"],
                              rules=[([("u", ["z"])], 1.0)], default=0.0),
                   production(1, "S", ["b"],
                              rules=[([("u", ["z"])], 0.0)], default=1.0)],
                  "S")
        pcfg = to_pcfg(g)
        from psdg.generate import ExpansionFrame, TimeStep, Trajectory
        from psdg.grammar import StatePoint
        dead = Trajectory(
            StatePoint((1,)),
            (TimeStep((ExpansionFrame(1, "S", 1, 1),), "b", StatePoint((1,))),),
            complete=True)
        tree = parse_tree(g, dead)
        got = pcfg_tree_probability(pcfg, tree)
        assert got == -math.inf

    def test_text_export_lists_start_and_rules(self):
        g = ab_grammar()
        text = pcfg_text(to_pcfg(g))
        assert "# start" in text
        assert "->" in text


class TestPcfgEquivalenceSuite:
    def test_ten_random_grammars(self):
        grammars = 0
        seed = 0
        while grammars < 10:
            g, joint = sized_random_psdg(3000 + seed, horizon=5,
                                         max_entries=8000)
            seed += 1
            complete = [e for e in joint.entries if e.trajectory.complete]
            if not complete:
                continue
            try:
                pcfg = to_pcfg(g)
            except ExplosionBound:
                continue
            for e in complete:
                tree = parse_tree(g, e.trajectory)
                got = pcfg_tree_probability(pcfg, tree)
                assert abs(got - e.log_prob) <= \
                    1e-12 * max(1.0, abs(e.log_prob)), \
                    (seed, got, e.log_prob)
            grammars += 1


def test_random_grammar_masses():
    for seed in range(8):
        g = random_psdg(seed)
        try:
            joint = enumerate_joint(g, horizon=4, bound=500_000)
        except ExplosionBound:
            continue
        assert abs(joint.total_mass - 1.0) <= 1e-9
