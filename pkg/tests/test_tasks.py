from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from copd.policy import Policy
from copd.seeding import derive_seed
from copd.tasks import (
    BOS,
    DOMAINS,
    EOS,
    EVEN,
    ODD,
    PLUS,
    SEP_SUM,
    VOCAB,
    UnknownDomainError,
    accuracy,
    domain_of,
    eval_prompts,
    exhaustive_prompts,
    generate_prompt,
    get_domain,
    greedy_decode,
    informative,
    oracle_policy,
    pass_rate_filter,
    read_eval_set,
    reward,
    target_of,
    verify,
    write_eval_set,
)

GOLDEN = Path(__file__).parent / "golden"


def test_registry_lookup():
    assert set(DOMAINS) == {"modsum", "reverse", "parity"}
    with pytest.raises(UnknownDomainError):
        get_domain("sorting")


@pytest.mark.parametrize("domain", sorted(DOMAINS))
def test_prompts_are_deterministic_and_well_formed(domain):
    a = generate_prompt(domain, 42)
    assert a == generate_prompt(domain, 42)
    prompt, _ = a
    assert prompt[0] == BOS
    assert prompt[-1] == get_domain(domain).separator
    assert 4 <= len(prompt) <= 6
    assert domain_of(prompt).id == domain


def test_modsum_encodes_second_operand_in_unary():
    dom = get_domain("modsum")
    assert dom.prompt_for((5, 3)) == (BOS, 5, PLUS, PLUS, PLUS, SEP_SUM)
    assert dom.target_fn((5, 3)) == (1,)
    assert dom.payload_of((BOS, 5, PLUS, PLUS, PLUS, SEP_SUM)) == (5, 3)


@given(st.integers(0, 2**40))
def test_reverse_and_parity_targets(seed):
    prompt, target = generate_prompt("reverse", seed)
    assert target == tuple(reversed(prompt[1:-1]))
    prompt, target = generate_prompt("parity", seed)
    assert len(target) == 1
    assert target == ((EVEN if prompt[-2] % 2 == 0 else ODD),)


@pytest.mark.parametrize("domain", sorted(DOMAINS))
def test_verify_definition(domain):
    prompt, target = generate_prompt(domain, 7)
    assert verify(domain, prompt, target + (EOS,)) == 1
    assert verify(domain, prompt, ()) == 0
    assert verify(domain, prompt, target) == 0  # missing EOS
    flipped = ((target[0] + 1) % VOCAB.size,) + target[1:]
    assert verify(domain, prompt, flipped + (EOS,)) == 0
    assert verify(domain, prompt, target + (EOS, EOS)) == 0


def test_verify_rejects_foreign_prompt():
    prompt, target = generate_prompt("parity", 3)
    assert verify("modsum", prompt, target + (EOS,)) == 0
    assert target_of("modsum", prompt) is None


@given(st.integers(0, 2**40))
def test_generate_verify_round_trip(seed):
    for domain in DOMAINS:
        prompt, target = generate_prompt(domain, seed)
        assert verify(domain, prompt, target + (EOS,)) == 1
        assert reward(prompt, target + (EOS,)) == 1


def test_domains_diverge_on_the_same_payload():
    modsum, rev = get_domain("modsum"), get_domain("reverse")
    for i in range(100):
        prompt, target = generate_prompt(modsum, derive_seed("divergence", i))
        payload = modsum.payload_of(prompt)
        assert verify(modsum, prompt, target + (EOS,)) == 1
        assert verify(rev, rev.prompt_for(payload), target + (EOS,)) == 0


@pytest.mark.parametrize("domain", sorted(DOMAINS))
def test_oracle_solves_every_prompt(domain):
    pol = oracle_policy([domain])
    for prompt in exhaustive_prompts(domain):
        assert verify(domain, prompt, greedy_decode(pol, prompt)) == 1
    assert accuracy(pol, domain, get_domain(domain).eval_set) == 1.0


@pytest.mark.parametrize("pair", [("modsum", "parity"), ("reverse", "parity")])
def test_oracle_joint_solutions(pair):
    pol = oracle_policy(pair)
    assert all(accuracy(pol, d, exhaustive_prompts(d)) == 1.0 for d in pair)


def test_zero_policy_accuracy_matches_enumeration():
    pol = Policy.zeros(VOCAB, 5)
    prompts = eval_prompts("modsum", 64, 0)
    # every logit ties, so greedy emits token 0 until the length cap
    expected = np.mean([verify("modsum", p, (0,) * 4) for p in prompts])
    assert accuracy(pol, "modsum", prompts) == expected == 0.0


def test_eval_seeds_are_disjoint_from_training_seeds():
    train = {derive_seed(s, "native", b, c, ph, t, "prompt", d, i)
             for s in range(2) for b in ("modsum", "parity") for c in (1, 2) for ph in ("I", "II")
             for t in range(3) for d in ("modsum", "parity") for i in range(16)}
    held_out = {derive_seed("eval", s, "prompt", d, i) for s in range(2) for d in DOMAINS for i in range(64)}
    assert not train & held_out


@pytest.mark.parametrize("domain", sorted(DOMAINS))
def test_eval_set_matches_golden_file(domain, tmp_path):
    prompts = eval_prompts(domain, 64, 0)
    golden = GOLDEN / f"eval_{domain}.txt"
    assert read_eval_set(golden) == prompts
    write_eval_set(prompts, tmp_path / "e.txt")
    assert (tmp_path / "e.txt").read_bytes() == golden.read_bytes()


# -- pass-rate filter --------------------------------------------------------------


@pytest.mark.parametrize("passes,expected", [(8, False), (0, False), (3, True), (1, True), (7, True)])
def test_informative_pass_counts(passes, expected):
    assert informative(passes, 8) is expected


def test_filter_drops_always_solved_prompts():
    prompts = eval_prompts("parity", 8, 1)
    with pytest.warns(RuntimeWarning):
        kept = pass_rate_filter("parity", oracle_policy(["parity"]), prompts, 8, seed=0)
    assert kept == []


def test_filter_drops_never_solved_prompts():
    with pytest.warns(RuntimeWarning):
        assert pass_rate_filter("reverse", oracle_policy(["parity"]), eval_prompts("reverse", 8, 1), 8, 0) == []


def test_filter_keeps_partially_solved_prompts():
    # a softened oracle succeeds on some samples but not all
    soft = Policy(oracle_policy(["parity"]).params / 40.0, VOCAB, 5)
    prompts = eval_prompts("parity", 16, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        kept = pass_rate_filter("parity", soft, prompts, 8, seed=0)
    assert kept and set(kept) <= set(prompts)


def test_filter_needs_two_samples():
    with pytest.raises(ValueError):
        pass_rate_filter("parity", oracle_policy(["parity"]), eval_prompts("parity", 2, 0), 1, 0)
