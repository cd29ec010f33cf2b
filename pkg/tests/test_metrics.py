from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copd.grpo import ConfigError
from copd.metrics import (
    SCHEMA,
    MetricsWriter,
    ProbeSet,
    collect_probe_states,
    default_k,
    jeffreys,
    pair_report,
    read_metrics,
    symmetric_kl,
    top_k_overlap,
    top_k_set,
)
from copd.policy import Policy, Vocab
from copd.tasks import VOCAB, sample_prompts

V4 = Vocab(4, bos=2, eos=3)


def random_policy(seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return Policy(rng.normal(0, scale, (VOCAB.size, 5 * VOCAB.size)), VOCAB, 5)


def bos_policy(logits):
    params = np.zeros((4, 4))
    params[:, V4.bos] = logits
    return Policy(params, V4, 1)


SINGLE = ProbeSet(((V4.bos,),), "manual", 0)


def test_default_k_keeps_top_k_strict():
    assert default_k(15) == 10
    assert default_k(8) == 7


# -- probe states ---------------------------------------------------------------------


def test_probe_states_are_every_visited_prefix():
    pol = random_policy(0)
    prompts = sample_prompts("reverse", 3, 0)
    probe = collect_probe_states(pol, prompts, 2, seed=4)
    assert probe == collect_probe_states(pol, prompts, 2, seed=4)
    starts = {tuple(q) for q in prompts}
    assert all(any(s[: len(q)] == q for q in starts) for s in probe.states)
    other = collect_probe_states(pol, prompts, 2, seed=5)
    assert sorted(probe.states) != sorted(other.states)


def test_rollout_of_length_three_contributes_three_states():
    # a policy that never emits EOS fills the length cap
    params = np.zeros((VOCAB.size, 5 * VOCAB.size))
    params[VOCAB.eos, :] = -1e3
    probe = collect_probe_states(Policy(params, VOCAB, 5), sample_prompts("parity", 1, 0), 1, seed=0, max_len=3)
    assert len(probe) == 3
    assert [len(s) for s in probe.states] == [len(probe.states[0]) + i for i in range(3)]


def test_probe_preconditions():
    pol = random_policy(1)
    with pytest.raises(ValueError):
        collect_probe_states(pol, [], 1, 0)
    with pytest.raises(ValueError):
        ProbeSet((), "x", 0)


# -- top-k overlap ----------------------------------------------------------------------


def test_identical_policies_overlap_fully():
    pol = random_policy(2)
    probe = collect_probe_states(pol, sample_prompts("modsum", 4, 0), 2, 0)
    rep = top_k_overlap(pol, pol, probe, 10)
    assert rep.mean_overlap == 1.0 and rep.sym_kl_mean == 0.0


def test_half_overlap_example():
    a = bos_policy([5.0, 4.0, 0.0, 0.0])  # top-2 {0, 1}
    b = bos_policy([0.0, 4.0, 5.0, 0.0])  # top-2 {1, 2}
    rep = top_k_overlap(a, b, SINGLE, 2)
    assert rep.per_state == (0.5,) and rep.mean_overlap == 0.5


def test_full_vocabulary_overlap_is_one():
    rep = top_k_overlap(random_policy(3), random_policy(4),
                        collect_probe_states(random_policy(3), sample_prompts("parity", 2, 0), 1, 0), VOCAB.size)
    assert rep.mean_overlap == 1.0


def test_k_out_of_range_is_config_error():
    with pytest.raises(ConfigError):
        top_k_overlap(random_policy(5), random_policy(5), SINGLE, VOCAB.size + 1)
    with pytest.raises(ConfigError):
        top_k_overlap(random_policy(5), random_policy(5), SINGLE, 0)


def test_ties_broken_by_ascending_id():
    assert top_k_set(np.zeros(6), 3) == frozenset({0, 1, 2})
    assert top_k_set(np.array([0.0, 1.0, 1.0, 1.0, 0.0]), 2) == frozenset({1, 2})
    # all-zero policies tie everywhere and agree exactly
    z = Policy.zeros(V4, 1)
    assert top_k_overlap(z, z, SINGLE, 2).mean_overlap == 1.0


@given(st.integers(0, 10_000), st.integers(1, VOCAB.size))
@settings(max_examples=40, deadline=None)
def test_overlap_range_mean_and_symmetry(seed, k):
    a, b = random_policy(seed), random_policy(seed + 1)
    probe = collect_probe_states(a, sample_prompts("modsum", 2, seed), 1, seed)
    ab, ba = top_k_overlap(a, b, probe, k), top_k_overlap(b, a, probe, k)
    assert 0.0 <= ab.mean_overlap <= 1.0
    assert ab.mean_overlap == pytest.approx(np.mean(ab.per_state), abs=1e-12)
    assert ab.per_state == ba.per_state
    assert ab.sym_kl_mean == pytest.approx(ba.sym_kl_mean, abs=1e-12)


# -- symmetric KL ------------------------------------------------------------------------


def test_jeffreys_example():
    t, s = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    assert jeffreys(t, s) == pytest.approx(0.2746, abs=1e-4)
    assert jeffreys(t, s) == jeffreys(s, t)
    assert jeffreys(t, t) == 0.0


def test_symmetric_kl_matches_jeffreys_on_single_state():
    a, b = bos_policy([1.0, 0.0, -1.0, 0.5]), bos_policy([0.0, 2.0, 0.0, 0.0])
    pa = np.exp(a.log_probs((V4.bos,)))
    pb = np.exp(b.log_probs((V4.bos,)))
    assert symmetric_kl(a, b, SINGLE) == pytest.approx(jeffreys(pa, pb), abs=1e-12)
    assert symmetric_kl(a, a, SINGLE) == 0.0


def test_pair_report_averages_both_probe_sides():
    a, b = random_policy(6), random_policy(7)
    rep = pair_report(a, b, sample_prompts("reverse", 3, 0), 2, seed=1, k=5, names=("x", "y"))
    assert rep.mean_overlap == pytest.approx(0.5 * (rep.a_probe.mean_overlap + rep.b_probe.mean_overlap))
    assert rep.sym_kl == pytest.approx(0.5 * (rep.a_probe.sym_kl_mean + rep.b_probe.sym_kl_mean))
    assert rep.a_probe.per_state != rep.b_probe.per_state or rep.mean_overlap == 1.0


# -- metrics stream ----------------------------------------------------------------------


def test_writer_round_trip_and_field_names(tmp_path):
    path = tmp_path / "m" / "metrics.jsonl"
    with MetricsWriter(path, "run1") as w:
        w.scalar(0, 1, "I", "modsum", "reward", 0.25)
        w.behavior(0, 1, "I", "modsum|parity", 10, 0.8, 0.3)
        w.record(1, 1, "II", note="x")
    rows = read_metrics(path)
    assert rows == w.rows
    assert set(rows[1]) == {"schema", "run", "step", "cycle", "phase", "branch_pair", "k", "mean_overlap", "sym_kl"}
    assert all(r["schema"] == SCHEMA for r in rows)


def test_writer_rejects_backwards_steps():
    w = MetricsWriter(None, "r")
    w.scalar(5, 1, "I", "a", "reward", 1.0)
    with pytest.raises(ValueError):
        w.scalar(4, 1, "I", "a", "reward", 1.0)


def test_rows_are_flushed_as_written(tmp_path):
    path = tmp_path / "metrics.jsonl"
    w = MetricsWriter(path, "r")
    w.scalar(0, 1, "I", "a", "reward", 0.5)
    assert json.loads(path.read_text().splitlines()[0])["value"] == 0.5
    w.close()


def test_reader_rejects_foreign_schema(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"schema": "other/9", "step": 0}) + "\n")
    with pytest.raises(ValueError):
        read_metrics(path)
