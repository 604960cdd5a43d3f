"""Pipeline steps shared by the CLI and the experiment sweeps.

Everything here is a thin composition of the library modules: corpus ->
mixtures -> embeddings -> training -> decoding -> scoring. Each step is
deterministic given its seed, so two runs of the same pipeline produce
bit-identical artifacts.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from . import evaluate, net, search, train
from .errors import ArtifactError, ShapeError
from .frontend import energy_vad, extract_logmel, normalize
from .mixer import MixtureManifest, ToyCorpus, render_mixture
from .speaker import (
    EmbeddingProvider,
    SignatureProvider,
    StackingStrategy,
    average_speaker,
    embed_utterance,
)

# dev mixes speakers seen in training (closed set); eval speakers are held out
SPLIT_CONDITION = {"train": "closed", "dev": "closed", "eval": "open"}

PRESETS = ("desk", "paper-scale")


def corpus_vocab(corpus: ToyCorpus) -> net.Vocab:
    """Label set for a corpus: its configured vocab, or for a corpus loaded
    from disk (which has no config) the sorted union of transcript tokens."""
    if corpus.config is not None:
        return net.Vocab(tuple(corpus.config.vocab))
    tokens = sorted({t for u in corpus.utterances.values() for t in u.transcript.split()})
    if not tokens:
        raise ArtifactError("corpus has no transcript tokens to build a vocab from")
    return net.Vocab(tuple(tokens))


def model_config(
    preset: str,
    labels: tuple[str, ...],
    strategy: str | None = None,
    lambda_train: float | None = None,
) -> net.ModelConfig:
    if preset not in PRESETS:
        raise ShapeError(f"unknown preset {preset!r}; choose from {PRESETS}")
    make = net.desk_config if preset == "desk" else net.paper_config
    cfg = make(labels, strategy=strategy)
    if lambda_train is not None:
        cfg = replace(cfg, lambda_train=lambda_train)
    return cfg


# -- reference embeddings --------------------------------------------------------------


def speakers_of(corpus: ToyCorpus) -> list[str]:
    return sorted({u.speaker_id for u in corpus.utterances.values()})


def reference_uids(corpus: ToyCorpus, speaker: str, count: int) -> list[str]:
    """The speaker's first ``count`` utterances, by utterance id."""
    own = sorted(u for u, utt in corpus.utterances.items() if utt.speaker_id == speaker)
    if len(own) < count:
        raise ArtifactError(
            f"speaker {speaker!r} has {len(own)} utterances, needs {count} references"
        )
    return own[:count]


def reference_embeddings(
    corpus: ToyCorpus,
    refs_per_speaker: int,
    provider: EmbeddingProvider | None = None,
) -> dict[str, np.ndarray]:
    """One unit-norm embedding per speaker, averaged over reference utterances."""
    if refs_per_speaker < 1:
        raise ShapeError(f"refs-per-speaker must be >= 1, got {refs_per_speaker}")
    provider = provider or SignatureProvider()
    table: dict[str, np.ndarray] = {}
    for speaker in speakers_of(corpus):
        vectors = []
        voiced = 0
        for uid in reference_uids(corpus, speaker, refs_per_speaker):
            feat = extract_logmel(corpus.utterance(uid))
            vad = energy_vad(feat)
            vectors.append(embed_utterance(feat, vad, provider, uid))
            voiced += int(vad.voiced.sum())
        table[speaker] = average_speaker(vectors, speaker, voiced).vector
    return table


# -- dataset assembly -------------------------------------------------------------------


def mixture_sets(
    corpus: ToyCorpus,
    manifests: Mapping[str, MixtureManifest],
    embeddings: dict[str, np.ndarray] | None,
    vocab: net.Vocab | None = None,
) -> dict[str, train.DataSet]:
    vocab = vocab or corpus_vocab(corpus)
    return {
        split: train.mixture_dataset(corpus, manifest, embeddings, vocab)
        for split, manifest in manifests.items()
    }


def build_regime(
    corpus: ToyCorpus,
    train_manifest: MixtureManifest,
    embeddings: dict[str, np.ndarray] | None,
    mode: str = "overlapped-only",
    donor_path=None,
    vocab: net.Vocab | None = None,
) -> train.TrainingRegime:
    vocab = vocab or corpus_vocab(corpus)
    overlapped = train.mixture_dataset(corpus, train_manifest, embeddings, vocab)
    clean = None
    if mode == "multi-condition":
        clean = train.clean_dataset(corpus, "train", embeddings, vocab)
    return train.TrainingRegime(
        mode=mode, overlapped=[overlapped], clean=clean, donor_path=donor_path
    )


def transcript_lm(corpus: ToyCorpus, vocab: net.Vocab | None = None, alpha: float = 1.0) -> search.BigramLm:
    """Bigram LM over the train-split transcripts."""
    vocab = vocab or corpus_vocab(corpus)
    seqs = [
        vocab.encode(corpus.utterance(uid).transcript.split())
        for uid in corpus.split_utterances["train"]
    ]
    return search.BigramLm(seqs, len(vocab.labels), alpha=alpha)


# -- decode and score -------------------------------------------------------------------

_WORKER_STATE: dict = {}


def _decode_worker_init(model, cfg, lm):
    _WORKER_STATE["args"] = (model, cfg, lm)


def _decode_worker(sample: train.Sample) -> tuple[str, list[int]]:
    model, cfg, lm = _WORKER_STATE["args"]
    hyp = search.decode_utterance(model, sample.frames, sample.embedding, cfg, lm)
    return sample.uid, list(hyp.prefix)


def decode_samples(
    model: net.Model,
    samples: Iterable[train.Sample],
    cfg: search.DecodeConfig,
    lm: search.LmHook | None = None,
    jobs: int = 1,
) -> dict[str, list[str]]:
    """Hypothesis tokens per utterance id.

    Utterances are independent, so jobs > 1 fans them out over processes;
    results are keyed by id and therefore identical at any parallelism.
    """
    ordered = sorted(samples, key=lambda s: s.uid)
    if jobs > 1 and len(ordered) > 1:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_decode_worker_init, initargs=(model, cfg, lm)
        ) as pool:
            pairs = list(pool.map(_decode_worker, ordered, chunksize=8))
    else:
        _decode_worker_init(model, cfg, lm)
        pairs = [_decode_worker(s) for s in ordered]
    labels = model.vocab.labels
    return {uid: [labels[i] for i in prefix] for uid, prefix in pairs}


def score_samples(
    vocab: net.Vocab,
    samples: Iterable[train.Sample],
    hyps: Mapping[str, list[str]],
    split: str = "",
    condition: str = "",
) -> evaluate.ScoreReport:
    refs = {s.uid: vocab.decode(s.label_ids) for s in samples}
    return evaluate.score_pairs(refs, hyps, split=split, condition=condition)


def decode_and_score(
    model: net.Model,
    samples: list[train.Sample],
    cfg: search.DecodeConfig,
    split: str,
    lm: search.LmHook | None = None,
    jobs: int = 1,
) -> evaluate.ScoreReport:
    hyps = decode_samples(model, samples, cfg, lm=lm, jobs=jobs)
    return score_samples(
        net.Vocab(model.config.labels), samples, hyps,
        split=split, condition=SPLIT_CONDITION.get(split, ""),
    )


# -- experiment cells -------------------------------------------------------------------


@dataclass
class ExperimentCell:
    """One trainable sweep cell: a checkpoint plus how to produce and score it."""

    row: str
    checkpoint_path: str
    trainer: Callable[[], None]  # writes checkpoint_path
    scorer: Callable[[str, net.Model], evaluate.ScoreReport]  # split -> report

    def ensure_trained(self) -> None:
        if not os.path.exists(self.checkpoint_path):
            self.trainer()

    def score(self, split: str) -> evaluate.ScoreReport:
        if not os.path.exists(self.checkpoint_path):
            raise ArtifactError(f"missing checkpoint {self.checkpoint_path}")
        model, _ = net.load_checkpoint(self.checkpoint_path)
        return self.scorer(split, model)


def sweep_cells(
    cells: list[ExperimentCell], splits: tuple[str, ...] = ("dev", "eval"), kind: str = "sweep"
) -> evaluate.SweepTable:
    """Score every (cell, split) pair; missing checkpoints leave absent cells."""
    grid = {
        (cell.row, split): (lambda c=cell, s=split: c.score(s))
        for cell in cells
        for split in splits
    }
    return evaluate.run_sweep(kind, grid)
