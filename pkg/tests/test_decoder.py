import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csasr.conformer import ASRModel, ConformerConfig
from csasr.decoder import (
    CtcPrefixScorer,
    DecodeConfig,
    Hypothesis,
    NBestList,
    beam_search,
    ctc_prefix_score,
    decode_utterance,
    greedy_decode,
    greedy_search,
    rescore_nbest,
)
from csasr.errors import ConfigError, ContractError
from oracles import ctc_brute_force, ctc_prefix_brute_force, random_log_probs

BLANK, SOS, EOS = 0, 1, 2


# -- prefix scoring -----------------------------------------------------------

def test_uniform_two_frame_full_sequence():
    lp = np.log(np.full((2, 2), 0.5))
    assert ctc_prefix_score(lp, [1], full=True) == pytest.approx(math.log(0.75), abs=1e-12)


def test_empty_prefix_scores_zero():
    rng = np.random.default_rng(0)
    assert ctc_prefix_score(random_log_probs(rng, 4, 3), []) == 0.0


@pytest.mark.parametrize("t", [1, 2, 3, 4, 5])
def test_prefix_scores_match_enumeration(t):
    rng = np.random.default_rng(t)
    v = 3
    lp = random_log_probs(rng, t, v)
    for n in range(0, 4):
        for prefix in itertools.product(range(1, v), repeat=n):
            want = ctc_prefix_brute_force(lp, prefix)
            got = ctc_prefix_score(lp, prefix)
            if math.isinf(want):
                assert got == -math.inf
            else:
                assert got == pytest.approx(want, abs=1e-9)


@pytest.mark.parametrize("t", [1, 3, 5])
def test_full_prefix_score_is_ctc_path_sum(t):
    rng = np.random.default_rng(10 + t)
    lp = random_log_probs(rng, t, 3)
    for n in range(0, 4):
        for y in itertools.product(range(1, 3), repeat=n):
            want = -ctc_brute_force(lp, y)
            got = ctc_prefix_score(lp, y, full=True)
            if math.isinf(want):
                assert got == -math.inf
            else:
                assert got == pytest.approx(want, abs=1e-9)


def test_prefix_scorer_rejects_bad_inputs():
    with pytest.raises(ContractError):
        CtcPrefixScorer(np.zeros((0, 3)))
    s = CtcPrefixScorer(np.log(np.full((2, 3), 1 / 3)))
    with pytest.raises(ContractError):
        s.extend(s.initial_state(), [3])


# -- search over synthetic decoders --------------------------------------------

def fixed_step(lp):
    lp = np.asarray(lp, dtype=np.float64)
    return lambda prefixes: np.repeat(lp[None], len(prefixes), axis=0)


def hashed_step(v, seed):
    """A prefix-dependent decoder: each distinct prefix gets its own random distribution."""

    def step(prefixes):
        out = []
        for p in prefixes:
            r = np.random.default_rng([seed, len(p), *p])
            out.append(random_log_probs(r, 1, v)[0])
        return np.array(out)

    return step


def exhaustive(lp, tokens, max_len):
    """Every sequence over ``tokens`` of length <= max_len, ranked with the decoder's tie rule."""
    scored = []
    for n in range(max_len + 1):
        for seq in itertools.product(tokens, repeat=n):
            scored.append((sum(lp[c] for c in seq) + lp[EOS], seq))
    scored.sort(key=lambda x: (-x[0], len(x[1]), x[1]))
    return scored


@pytest.mark.parametrize("tokens,seed", [([3, 4], 3), ([3, 4], 8), ([3, 4, 5], 3), ([3, 4, 5], 5)])
def test_toy_beam_equals_exhaustive_enumeration(tokens, seed):
    # |V| counts eos: a beam of (tokens + 1) ** max_len never has to prune a candidate
    rng = np.random.default_rng(seed)
    lp = random_log_probs(rng, 1, 3 + len(tokens))[0]
    want = exhaustive(lp, tokens, 2)
    beam = (len(tokens) + 1) ** 2
    cfg = DecodeConfig(beam_size=beam, nbest=beam, ctc_weight=0.0)
    nb = beam_search(fixed_step(lp), cfg, SOS, EOS, max_len=2)
    assert [h.tokens for h in nb] == [seq for _, seq in want]
    for h, (score, _) in zip(nb, want):
        assert h.combined == pytest.approx(score, abs=1e-12)


def test_joint_beam_equals_exhaustive_enumeration():
    rng = np.random.default_rng(4)
    v, t, lam = 5, 4, 0.3
    att = random_log_probs(rng, 1, v)[0]
    ctc = random_log_probs(rng, t, v)
    tokens = [3, 4]
    want = []
    for n in range(3):
        for seq in itertools.product(tokens, repeat=n):
            a = sum(att[c] for c in seq) + att[EOS]
            want.append((lam * -ctc_brute_force(ctc, seq) + (1 - lam) * a, seq))
    want.sort(key=lambda x: (-x[0], len(x[1]), x[1]))
    cfg = DecodeConfig(beam_size=4, nbest=4, ctc_weight=lam)
    nb = beam_search(fixed_step(att), cfg, SOS, EOS, 2, ctc_log_probs=ctc)
    assert [h.tokens for h in nb] == [s for _, s in want[:4]]
    for h, (score, _) in zip(nb, want):
        assert h.combined == pytest.approx(score, abs=1e-9)


def reference_greedy(step, v, max_len):
    seq, score = [], 0.0
    for k in range(max_len + 1):
        lp = step([seq])[0].copy()
        lp[[BLANK, SOS]] = -np.inf
        c = EOS if k == max_len else int(np.argmax(lp))
        score += lp[c]
        if c == EOS:
            return seq, score
        seq.append(c)


@pytest.mark.parametrize("seed", range(6))
def test_beam_one_equals_greedy(seed):
    step = hashed_step(6, seed)
    want_seq, want_score = reference_greedy(step, 6, 5)
    nb = beam_search(step, DecodeConfig(beam_size=1, nbest=1, ctc_weight=0.0), SOS, EOS, 5)
    assert list(nb.best.tokens) == want_seq
    assert nb.best.combined == pytest.approx(want_score, abs=1e-12)
    assert greedy_search(step, SOS, EOS, 5) == (want_seq, pytest.approx(want_score, abs=1e-12))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_larger_beam_never_scores_worse(seed, beam):
    step = hashed_step(5, seed)
    a = beam_search(step, DecodeConfig(beam_size=beam, nbest=1, ctc_weight=0.0), SOS, EOS, 4)
    b = beam_search(step, DecodeConfig(beam_size=beam + 3, nbest=1, ctc_weight=0.0), SOS, EOS, 4)
    assert b.best.combined >= a.best.combined - 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_nbest_sorted_and_unique(seed, lam):
    rng = np.random.default_rng(seed)
    ctc = random_log_probs(rng, 5, 5)
    nb = beam_search(hashed_step(5, seed), DecodeConfig(beam_size=4, nbest=4, ctc_weight=lam),
                     SOS, EOS, 3, ctc_log_probs=ctc)
    scores = [h.combined for h in nb]
    assert scores == sorted(scores, reverse=True)
    assert len({h.tokens for h in nb}) == len(nb)
    assert all(np.isfinite(scores))


def test_decode_config_validation():
    with pytest.raises(ConfigError):
        DecodeConfig(beam_size=0)
    with pytest.raises(ConfigError):
        DecodeConfig(ctc_weight=1.5)
    with pytest.raises(ConfigError):
        DecodeConfig(beam_size=2, nbest=3)


def test_joint_search_needs_ctc_posteriors():
    with pytest.raises(ContractError):
        beam_search(fixed_step(np.zeros(4)), DecodeConfig(ctc_weight=0.5, beam_size=2, nbest=2),
                    SOS, EOS, 2)


# -- rescoring -----------------------------------------------------------------

class TableLM:
    def __init__(self, table, shift=0.0):
        self.table, self.shift = table, shift

    def sentence_score(self, words):
        return self.table[" ".join(words)] + self.shift


def two_hyps():
    return NBestList("u", [
        Hypothesis((5,), -1.0, 0.0, text="first"),
        Hypothesis((6,), -1.2, 0.0, text="second"),
    ])


def test_worked_rescoring_example():
    ln10 = math.log(10)
    lm = TableLM({"first": -5 / ln10, "second": -2 / ln10})
    out = rescore_nbest(two_hyps(), lm, 0.2)
    assert [h.text for h in out] == ["second", "first"]
    assert out[0].combined == pytest.approx(-1.6, abs=1e-12)
    assert out[1].combined == pytest.approx(-2.0, abs=1e-12)
    assert [h.am_rank for h in out] == [2, 1]


def test_zero_lm_weight_keeps_order():
    lm = TableLM({"first": -9.0, "second": -0.1})
    out = rescore_nbest(two_hyps(), lm, 0.0)
    assert [h.text for h in out] == ["first", "second"]


@given(st.floats(-50, 50), st.floats(0.0, 2.0))
def test_rescoring_ranking_is_shift_invariant(shift, beta):
    table = {"first": -3.0, "second": -2.2}
    a = rescore_nbest(two_hyps(), TableLM(table), beta)
    b = rescore_nbest(two_hyps(), TableLM(table, shift), beta)
    if abs(a[0].combined - a[1].combined) > 1e-9:
        assert [h.text for h in a] == [h.text for h in b]


def test_nbest_records_carry_scores():
    recs = list(two_hyps().records())
    assert recs[0]["rank"] == 1 and recs[1]["text"] == "second"
    assert {"att", "ctc", "lm", "combined", "tokens", "utt_id"} <= set(recs[0])


# -- real model adapters ---------------------------------------------------------

def tiny_model():
    cfg = ConformerConfig(input_dim=8, d_model=8, attention_heads=2, conv_kernel=3,
                          encoder_layers=1, decoder_layers=1, ff_units=16, dropout=0.0,
                          vocab_size=7)
    return ASRModel(cfg, seed=1)


def test_model_beam_one_matches_batched_greedy():
    model = tiny_model()
    feats = np.random.default_rng(0).normal(size=(24, 8))
    nb = decode_utterance(model, feats, DecodeConfig(beam_size=1, nbest=1, ctc_weight=0.0))
    greedy = greedy_decode(model, feats[None], np.array([24]))
    assert list(nb.best.tokens) == greedy[0]


def test_model_joint_decode_returns_sorted_nbest():
    model = tiny_model()
    feats = np.random.default_rng(1).normal(size=(32, 8))
    nb = decode_utterance(model, feats, DecodeConfig(beam_size=3, nbest=3, ctc_weight=0.3), "x")
    assert 1 <= len(nb) <= 3 and nb.utt_id == "x"
    assert all(model.sos not in h.tokens and model.blank not in h.tokens for h in nb)
