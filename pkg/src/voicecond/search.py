"""Joint CTC/attention beam search with incremental CTC prefix scoring.

The beam ranks label prefixes by lambda * log p_ctc + (1 - lambda) * log p_att
(+ beta * log p_lm when a language model is fused). The CTC term for an open
prefix is its prefix probability, maintained incrementally by the classic
two-track (blank-ending / nonblank-ending) recursion; finalizing on eos swaps
in the full-sequence CTC probability.

Different utterances may be decoded in parallel over shared read-only
parameters; one utterance's beam expansion is single-threaded so that the
lexicographic tie-break is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np

from . import net
from .autodiff import Tape
from .errors import ShapeError

NEG_INF = float("-inf")


@dataclass
class DecodeConfig:
    beam_size: int = 8
    lambda_decode: float = 0.3
    lm_weight: float = 0.0
    max_output_ratio: float = 0.5  # caps hypothesis length at ratio * T'

    def __post_init__(self):
        if self.beam_size < 1:
            raise ShapeError(f"beam size {self.beam_size} must be at least 1")
        if not 0.0 <= self.lambda_decode <= 1.0:
            raise ShapeError(f"lambda_decode {self.lambda_decode} outside [0, 1]")
        if self.lm_weight < 0.0:
            raise ShapeError(f"lm_weight {self.lm_weight} must be nonnegative")
        if self.max_output_ratio <= 0.0:
            raise ShapeError(f"max_output_ratio {self.max_output_ratio} must be positive")

    def max_steps(self, enc_length: int) -> int:
        return max(1, int(self.max_output_ratio * enc_length))


class LmHook(Protocol):
    """Optional fused language model over attention-space ids (labels + eos)."""

    def initial_state(self): ...

    def score(self, state, label: int) -> tuple[float, object]:
        """log p(label | state) and the successor state."""
        ...


class BigramLm:
    """Add-alpha smoothed bigram LM over label ids; eos closes every sequence."""

    def __init__(self, sequences: Iterable[list[int]], vocab_size: int, alpha: float = 1.0):
        if alpha <= 0.0:
            raise ShapeError(f"smoothing alpha {alpha} must be positive")
        self.vocab_size = vocab_size
        start = vocab_size  # start-of-sequence context; eos event shares index V
        counts = np.full((vocab_size + 1, vocab_size + 1), alpha)
        for seq in sequences:
            prev = start
            for y in list(seq) + [vocab_size]:
                if not 0 <= y <= vocab_size:
                    raise ShapeError(f"label id {y} outside vocab of size {vocab_size}")
                counts[prev, y] += 1.0
                prev = y
        self.table = np.log(counts / counts.sum(axis=1, keepdims=True))

    def initial_state(self) -> int:
        return self.vocab_size

    def score(self, state: int, label: int) -> tuple[float, int]:
        return float(self.table[state, label]), label


# -- incremental CTC prefix probabilities ----------------------------------------


@dataclass
class CtcPrefixState:
    """Two log-prob tracks over time for one prefix: paths collapsing to the
    prefix that end in blank vs. in the prefix's last label."""

    r_blank: np.ndarray  # (T,)
    r_nonblank: np.ndarray  # (T,)
    last: int | None  # label id the prefix ends with; None for the empty prefix


class CtcPrefixScorer:
    """Prefix probabilities against one utterance's CTC log-posterior matrix."""

    def __init__(self, log_posteriors: np.ndarray):
        lp = np.asarray(log_posteriors, dtype=np.float64)
        if lp.ndim != 2 or lp.shape[1] < 2:
            raise ShapeError(f"log-posterior matrix shape {lp.shape}, expected (T, V+1)")
        rows = np.logaddexp.reduce(lp, axis=1)
        if np.max(np.abs(rows)) > 1e-6:
            raise ShapeError("log-posterior rows are not normalized")
        self.lp = lp
        self.length = lp.shape[0]
        self.num_labels = lp.shape[1] - 1

    def initial(self) -> CtcPrefixState:
        # empty prefix: only all-blank paths, accumulated over time
        return CtcPrefixState(
            r_blank=np.cumsum(self.lp[:, 0]),
            r_nonblank=np.full(self.length, NEG_INF),
            last=None,
        )

    def expand(self, state: CtcPrefixState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Score all one-label extensions at once.

        Returns (psi, r_nonblank, r_blank): psi[c] is the prefix log-prob of
        prefix+c, and column c of the track matrices is its successor state.
        """
        T, V = self.length, self.num_labels
        lp_label = self.lp[:, 1:]  # (T, V): label c lives in CTC column c+1
        # phi: paths that may emit a fresh c at the next frame; a repeated
        # label must cross a blank, so the nonblank track is masked out
        nb = np.tile(state.r_nonblank[:, None], (1, V))
        if state.last is not None:
            nb[:, state.last] = NEG_INF
        phi = np.logaddexp(state.r_blank[:, None], nb)  # (T, V)
        r_nb = np.empty((T, V))
        r_nb[0] = lp_label[0] if state.last is None else NEG_INF
        for t in range(1, T):
            r_nb[t] = lp_label[t] + np.logaddexp(r_nb[t - 1], phi[t - 1])
        r_b = np.empty((T, V))
        r_b[0] = NEG_INF
        for t in range(1, T):
            r_b[t] = self.lp[t, 0] + np.logaddexp(r_b[t - 1], r_nb[t - 1])
        if T > 1:
            emitted = np.logaddexp.reduce(phi[:-1] + lp_label[1:], axis=0)
            psi = np.logaddexp(r_nb[0], emitted)
        else:
            psi = r_nb[0].copy()
        return psi, r_nb, r_b

    def successor(self, expansion: tuple[np.ndarray, np.ndarray, np.ndarray], label: int) -> CtcPrefixState:
        _, r_nb, r_b = expansion
        return CtcPrefixState(r_blank=r_b[:, label].copy(), r_nonblank=r_nb[:, label].copy(), last=label)

    def final(self, state: CtcPrefixState) -> float:
        """Full-sequence log-probability of the prefix itself (ends here)."""
        return float(np.logaddexp(state.r_blank[-1], state.r_nonblank[-1]))


# -- beam search -----------------------------------------------------------------


@dataclass
class Hypothesis:
    prefix: tuple[int, ...]
    att_logprob: float
    ctc_logprob: float  # prefix log-prob while open; full-sequence once finalized
    lm_logprob: float
    joint_score: float
    dec_state: net.DecoderState | None
    ctc_state: CtcPrefixState | None
    lm_state: object
    finalized: bool = False


def joint_score(cfg: DecodeConfig, att: float, ctc: float, lm: float) -> float:
    score = (1.0 - cfg.lambda_decode) * att + cfg.lm_weight * lm
    if cfg.lambda_decode > 0.0:
        score += cfg.lambda_decode * ctc
    return score


def _order(h: Hypothesis):
    return (-h.joint_score, h.prefix)


def decode_nbest(
    model: net.Model,
    enc: net.EncoderOutput,
    cfg: DecodeConfig,
    lm: LmHook | None = None,
) -> list[Hypothesis]:
    """All finalized hypotheses the beam produced, best joint score first.

    Ties break toward the lexicographically smaller prefix, so identical
    inputs always yield identical outputs.
    """
    tape = Tape(record=False)
    ctx = net.prepare_attention(tape, model, enc)
    vocab = model.vocab
    eos = vocab.eos_id
    use_ctc = cfg.lambda_decode > 0.0
    use_lm = lm is not None and cfg.lm_weight > 0.0
    scorer = CtcPrefixScorer(net.ctc_log_posteriors(tape, model, enc).data) if use_ctc else None

    beam = [
        Hypothesis(
            prefix=(), att_logprob=0.0, ctc_logprob=0.0, lm_logprob=0.0, joint_score=0.0,
            dec_state=net.initial_decoder_state(model, ctx.length),
            ctc_state=scorer.initial() if use_ctc else None,
            lm_state=lm.initial_state() if use_lm else None,
        )
    ]
    done: list[Hypothesis] = []
    max_steps = cfg.max_steps(ctx.length)
    for step in range(max_steps + 1):
        last_round = step == max_steps
        candidates: list[Hypothesis] = []
        for hyp in beam:
            prev = hyp.prefix[-1] if hyp.prefix else eos  # eos doubles as sos
            logdist, dec_state = net.attend_step(tape, model, ctx, hyp.dec_state, prev)
            att = logdist.data
            lm_eos = lm.score(hyp.lm_state, eos)[0] if use_lm else 0.0
            att_f = hyp.att_logprob + float(att[eos])
            ctc_f = scorer.final(hyp.ctc_state) if use_ctc else 0.0
            lm_f = hyp.lm_logprob + lm_eos
            done.append(
                Hypothesis(
                    prefix=hyp.prefix, att_logprob=att_f, ctc_logprob=ctc_f, lm_logprob=lm_f,
                    joint_score=joint_score(cfg, att_f, ctc_f, lm_f),
                    dec_state=None, ctc_state=None, lm_state=None, finalized=True,
                )
            )
            if last_round:
                continue
            expansion = scorer.expand(hyp.ctc_state) if use_ctc else None
            for c in range(vocab.size):
                att_c = hyp.att_logprob + float(att[c])
                ctc_c = float(expansion[0][c]) if use_ctc else 0.0
                if use_lm:
                    lm_step, lm_state_c = lm.score(hyp.lm_state, c)
                else:
                    lm_step, lm_state_c = 0.0, None
                lm_c = hyp.lm_logprob + lm_step
                candidates.append(
                    Hypothesis(
                        prefix=hyp.prefix + (c,), att_logprob=att_c, ctc_logprob=ctc_c,
                        lm_logprob=lm_c, joint_score=joint_score(cfg, att_c, ctc_c, lm_c),
                        dec_state=dec_state,
                        ctc_state=scorer.successor(expansion, c) if use_ctc else None,
                        lm_state=lm_state_c,
                    )
                )
        if last_round:
            break
        candidates.sort(key=_order)
        beam = candidates[: cfg.beam_size]
    done.sort(key=_order)
    return done


def decode(
    model: net.Model,
    enc: net.EncoderOutput,
    cfg: DecodeConfig,
    lm: LmHook | None = None,
) -> Hypothesis:
    """Best finalized hypothesis; its prefix is the decoded label sequence."""
    return decode_nbest(model, enc, cfg, lm)[0]


def decode_utterance(
    model: net.Model,
    frames: np.ndarray,
    embedding: np.ndarray | None,
    cfg: DecodeConfig,
    lm: LmHook | None = None,
) -> Hypothesis:
    """Condition, encode, and decode one utterance's normalized features."""
    tape = Tape(record=False)
    x = net.condition_input(tape, model, frames, embedding)
    enc = net.encode(tape, model, x)
    return decode(model, enc, cfg, lm)


# -- decoded-output files ----------------------------------------------------------


def write_decoded(path, rows: Iterable[tuple[str, list[str]]]) -> None:
    """One `utterance-id<TAB>hypothesis` line per utterance, UTF-8."""
    with open(path, "w", encoding="utf-8") as fh:
        for uid, tokens in rows:
            fh.write(f"{uid}\t{' '.join(tokens)}\n")


def read_decoded(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            uid, _, text = line.partition("\t")
            out[uid] = text.split() if text else []
    return out


def write_nbest(path, rows: Iterable[tuple[str, list[Hypothesis]]], labels: tuple[str, ...]) -> None:
    """N-best variant: utterance-id, rank, joint score, hypothesis."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("utterance-id\trank\tjoint-score\thypothesis\n")
        for uid, hyps in rows:
            for rank, hyp in enumerate(hyps):
                text = " ".join(labels[i] for i in hyp.prefix)
                fh.write(f"{uid}\t{rank}\t{hyp.joint_score:.6f}\t{text}\n")
