"""Beam search: prefix-scorer consistency with the forward algorithm,
exhaustive-equivalence on tiny instances, determinism, and output files."""

from itertools import product

import numpy as np
import pytest

from voicecond import net, search
from voicecond.autodiff import Tape, constant
from voicecond.errors import NoAlignmentError, ShapeError
from voicecond.seeding import derive_rng


def _tiny_model(labels=("a", "b", "c"), seed=3):
    return net.init_model(net.gradcheck_config(labels), seed=seed)


def _random_log_posteriors(rng, T, V):
    raw = rng.normal(size=(T, V + 1))
    return raw - np.logaddexp.reduce(raw, axis=1, keepdims=True)


def _ctc_full_logprob(lp, label_ids):
    try:
        loss = net.ctc_loss(
            Tape(record=False), net.CtcLattice(log_posteriors=constant(lp), label_ids=label_ids)
        )
    except NoAlignmentError:
        return float("-inf")
    return -float(loss.data)


# -- config and LM ---------------------------------------------------------------


def test_decode_config_validation():
    cfg = search.DecodeConfig()
    assert cfg.lambda_decode == 0.3
    assert cfg.max_steps(10) == 5
    assert search.DecodeConfig(max_output_ratio=0.01).max_steps(10) == 1
    for bad in (
        dict(beam_size=0),
        dict(lambda_decode=1.2),
        dict(lm_weight=-0.5),
        dict(max_output_ratio=0.0),
    ):
        with pytest.raises(ShapeError):
            search.DecodeConfig(**bad)


def test_bigram_lm_rows_normalized():
    rng = derive_rng(0, "lm")
    seqs = [[int(rng.integers(0, 3)) for _ in range(int(rng.integers(0, 5)))] for _ in range(20)]
    lm = search.BigramLm(seqs, vocab_size=3)
    rows = np.logaddexp.reduce(lm.table, axis=1)
    assert np.max(np.abs(rows)) < 1e-6
    # counts actually steer the distribution
    biased = search.BigramLm([[0], [0], [0], [0]], vocab_size=2)
    assert biased.table[2, 0] > biased.table[2, 1]
    logp, state = biased.score(biased.initial_state(), 0)
    assert state == 0
    assert logp < 0.0


# -- CTC prefix scorer ----------------------------------------------------------


def test_prefix_scorer_rejects_unnormalized():
    with pytest.raises(ShapeError):
        search.CtcPrefixScorer(np.zeros((3, 3)))


def test_empty_prefix_blank_track_is_blank_product():
    rng = derive_rng(0, "blank-track")
    lp = _random_log_posteriors(rng, 5, 2)
    state = search.CtcPrefixScorer(lp).initial()
    assert np.allclose(state.r_blank, np.cumsum(lp[:, 0]), atol=1e-12)
    assert np.all(state.r_nonblank == -np.inf)


def test_prefix_scorer_final_matches_forward_algorithm():
    """Consuming Y label by label must reproduce the full-sequence CTC
    probability that the forward algorithm computes for the same Y."""
    rng = derive_rng(0, "prefix-fwd")
    checked = 0
    for _ in range(200):
        V = int(rng.integers(1, 4))
        T = int(rng.integers(1, 7))
        U = int(rng.integers(0, 4))
        label_ids = [int(rng.integers(0, V)) for _ in range(U)]
        lp = _random_log_posteriors(rng, T, V)
        scorer = search.CtcPrefixScorer(lp)
        state = scorer.initial()
        for c in label_ids:
            expansion = scorer.expand(state)
            assert np.all(expansion[0] <= 1e-12)  # prefix probs stay <= 1
            state = scorer.successor(expansion, c)
        got = scorer.final(state)
        want = _ctc_full_logprob(lp, label_ids)
        if want == float("-inf"):
            assert got == float("-inf")
        else:
            assert got == pytest.approx(want, abs=1e-6 * max(1.0, abs(want)))
            checked += 1
    assert checked > 100


def test_prefix_scores_bounded_by_full_sequence():
    # an open prefix can continue many ways, so its prefix probability is at
    # least the probability of ending right here
    rng = derive_rng(1, "prefix-bound")
    lp = _random_log_posteriors(rng, 6, 3)
    scorer = search.CtcPrefixScorer(lp)
    expansion = scorer.expand(scorer.initial())
    for c in range(3):
        state = scorer.successor(expansion, c)
        assert expansion[0][c] >= scorer.final(state) - 1e-12


# -- exhaustive equivalence -------------------------------------------------------


def _attention_logprob(model, ctx, seq):
    """Teacher-forced sum of log p over seq + eos, from a fresh decoder state."""
    tape = Tape(record=False)
    eos = model.vocab.eos_id
    state = net.initial_decoder_state(model, ctx.length)
    prev = eos
    total = 0.0
    for y in list(seq) + [eos]:
        logdist, state = net.attend_step(tape, model, ctx, state, prev)
        total += float(logdist.data[y])
        prev = y
    return total


def _brute_force_best(model, enc, cfg, lm, umax):
    tape = Tape(record=False)
    ctx = net.prepare_attention(tape, model, enc)
    lp = net.ctc_log_posteriors(tape, model, enc).data
    V = model.vocab.size
    best = None
    for U in range(umax + 1):
        for seq in product(range(V), repeat=U):
            att = _attention_logprob(model, ctx, seq)
            ctc = _ctc_full_logprob(lp, list(seq)) if cfg.lambda_decode > 0 else 0.0
            lm_total = 0.0
            if lm is not None and cfg.lm_weight > 0:
                state = lm.initial_state()
                for y in list(seq) + [model.vocab.eos_id]:
                    step, state = lm.score(state, y)
                    lm_total += step
            score = search.joint_score(cfg, att, ctc, lm_total)
            key = (-score, seq)
            if best is None or key < best[0]:
                best = (key, seq, score)
    return best[1], best[2]


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
def test_decode_equals_exhaustive_search(lam):
    rng = derive_rng(0, "exhaustive", str(lam))
    for case in range(3):
        model = _tiny_model(seed=40 + case)
        T = (4, 6, 5)[case]
        frames = rng.normal(size=(T, model.config.input_width))
        tape = Tape(record=False)
        enc = net.encode(tape, model, constant(frames))
        umax = 3
        cfg = search.DecodeConfig(
            beam_size=3 ** umax + 1, lambda_decode=lam, max_output_ratio=umax / T
        )
        assert cfg.max_steps(T) == umax
        want_seq, want_score = _brute_force_best(model, enc, cfg, None, umax)
        got = search.decode(model, enc, cfg)
        assert got.prefix == want_seq
        assert got.joint_score == pytest.approx(want_score, abs=1e-9)


def test_decode_with_lm_matches_exhaustive():
    model = _tiny_model(seed=50)
    lm = search.BigramLm([[0, 1], [0, 1, 2], [2]], vocab_size=model.vocab.size)
    rng = derive_rng(0, "lm-exhaustive")
    frames = rng.normal(size=(6, model.config.input_width))
    enc = net.encode(Tape(record=False), model, constant(frames))
    cfg = search.DecodeConfig(beam_size=28, lambda_decode=0.3, lm_weight=0.7, max_output_ratio=0.5)
    want_seq, want_score = _brute_force_best(model, enc, cfg, lm, umax=3)
    got = search.decode(model, enc, cfg, lm)
    assert got.prefix == want_seq
    assert got.joint_score == pytest.approx(want_score, abs=1e-9)
    assert got.lm_logprob != 0.0


# -- invariants -------------------------------------------------------------------


def test_joint_scores_recomputable_from_parts():
    model = _tiny_model(seed=60)
    rng = derive_rng(0, "recompute")
    frames = rng.normal(size=(7, model.config.input_width))
    enc = net.encode(Tape(record=False), model, constant(frames))
    cfg = search.DecodeConfig(beam_size=4, lambda_decode=0.3)
    hyps = search.decode_nbest(model, enc, cfg)
    assert len(hyps) > 1
    for hyp in hyps:
        again = search.joint_score(cfg, hyp.att_logprob, hyp.ctc_logprob, hyp.lm_logprob)
        assert hyp.joint_score == pytest.approx(again, abs=1e-9)
        assert hyp.finalized


def test_beam_one_is_greedy():
    """Greedy joint decoding: follow the single best open extension each step,
    finalize every visited prefix, and answer with the best finalization."""
    model = _tiny_model(seed=70)
    rng = derive_rng(0, "greedy")
    frames = rng.normal(size=(6, model.config.input_width))
    enc = net.encode(Tape(record=False), model, constant(frames))
    cfg = search.DecodeConfig(beam_size=1, lambda_decode=0.3, max_output_ratio=0.5)

    tape = Tape(record=False)
    ctx = net.prepare_attention(tape, model, enc)
    scorer = search.CtcPrefixScorer(net.ctc_log_posteriors(tape, model, enc).data)
    eos = model.vocab.eos_id
    prefix = ()
    att_total = 0.0
    finals = []
    state = net.initial_decoder_state(model, ctx.length)
    ctc_state = scorer.initial()
    for step in range(cfg.max_steps(6) + 1):
        prev = prefix[-1] if prefix else eos
        logdist, state = net.attend_step(tape, model, ctx, state, prev)
        finals.append(
            (
                search.joint_score(
                    cfg, att_total + float(logdist.data[eos]), scorer.final(ctc_state), 0.0
                ),
                prefix,
            )
        )
        if step == cfg.max_steps(6):
            break
        expansion = scorer.expand(ctc_state)
        scored = sorted(
            (
                (
                    search.joint_score(
                        cfg, att_total + float(logdist.data[c]), float(expansion[0][c]), 0.0
                    ),
                    c,
                )
                for c in range(model.vocab.size)
            ),
            key=lambda item: (-item[0], item[1]),
        )
        _, choice = scored[0]
        att_total += float(logdist.data[choice])
        ctc_state = scorer.successor(expansion, choice)
        prefix = prefix + (choice,)
    best_score, best_prefix = sorted(finals, key=lambda item: (-item[0], item[1]))[0]
    got = search.decode(model, enc, cfg)
    assert got.prefix == best_prefix
    assert got.joint_score == pytest.approx(best_score, abs=1e-9)
    assert len(set(p for _, p in finals)) == len(finals)  # path visited distinct prefixes


def test_ties_break_lexicographically():
    # zero output layer -> uniform attention distribution; with lambda = 0 all
    # same-length sequences tie, so order among length-1 prefixes must be a < b < c
    model = _tiny_model(seed=80)
    model.params["out.w"].data[:] = 0.0
    model.params["out.b"].data[:] = 0.0
    rng = derive_rng(0, "ties")
    frames = rng.normal(size=(6, model.config.input_width))
    enc = net.encode(Tape(record=False), model, constant(frames))
    cfg = search.DecodeConfig(beam_size=30, lambda_decode=0.0, max_output_ratio=0.5)
    hyps = search.decode_nbest(model, enc, cfg)
    # shortest sequence wins outright: every extra step costs log V
    assert hyps[0].prefix == ()
    assert [h.prefix for h in hyps[1:4]] == [(0,), (1,), (2,)]


def test_decode_deterministic():
    model = _tiny_model(seed=90)
    rng = derive_rng(0, "det")
    frames = rng.normal(size=(8, model.config.input_width))
    enc = net.encode(Tape(record=False), model, constant(frames))
    cfg = search.DecodeConfig(beam_size=4)
    first = search.decode_nbest(model, enc, cfg)
    second = search.decode_nbest(model, enc, cfg)
    assert [h.prefix for h in first] == [h.prefix for h in second]
    assert [h.joint_score for h in first] == [h.joint_score for h in second]


def test_decode_utterance_roundtrip():
    model = _tiny_model(seed=95)
    rng = derive_rng(0, "utt")
    frames = rng.normal(size=(6, model.config.input_width))
    hyp = search.decode_utterance(model, frames, None, search.DecodeConfig(beam_size=2))
    assert hyp.finalized
    assert all(0 <= c < model.vocab.size for c in hyp.prefix)


# -- output files ------------------------------------------------------------------


def test_decoded_file_roundtrip(tmp_path):
    path = tmp_path / "decoded.tsv"
    rows = [("mix_a", ["a", "b"]), ("mix_b", []), ("mix_c", ["c"])]
    search.write_decoded(path, rows)
    assert search.read_decoded(path) == {"mix_a": ["a", "b"], "mix_b": [], "mix_c": ["c"]}


def test_nbest_file(tmp_path):
    model = _tiny_model(seed=99)
    rng = derive_rng(0, "nbest")
    frames = rng.normal(size=(6, model.config.input_width))
    enc = net.encode(Tape(record=False), model, constant(frames))
    hyps = search.decode_nbest(model, enc, search.DecodeConfig(beam_size=3))
    path = tmp_path / "nbest.tsv"
    search.write_nbest(path, [("mix_a", hyps[:3])], model.config.labels)
    lines = path.read_text().splitlines()
    assert lines[0] == "utterance-id\trank\tjoint-score\thypothesis"
    assert len(lines) == 4
    first = lines[1].split("\t")
    assert first[0] == "mix_a" and first[1] == "0"
    assert float(first[2]) == pytest.approx(hyps[0].joint_score, abs=1e-6)
