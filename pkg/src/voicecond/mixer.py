"""Overlapped-speech dataset construction.

Builds gain-scaled, max-length mixtures of 2 or 3 utterances with
deterministic manifests, plus a synthetic toy corpus whose speakers are
discriminable voice models (base frequency + harmonic profile) and whose
vocabulary items are fixed frequency patterns. Manifest generation runs on a
single seeded stream; rendering individual mixtures is pure and can be
parallelized per mixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ShapeError
from .frontend import (
    FMIN,
    MEL_FILTER_STEP,
    SAMPLE_RATE,
    AudioUtterance,
    hz_to_mel,
    mel_to_hz,
    read_wav,
    write_wav,
)
from .seeding import derive_rng

SPLITS = ("train", "dev", "eval")

TOKEN_SECONDS = 0.25
SILENCE_SECONDS = 0.05
F0_LOW = 90.0
F0_HIGH = 300.0
_CARRIER_WEIGHT = 6.0  # carrier level relative to the harmonic comb
_NOISE_LEVEL = 10.0 ** (-30.0 / 20.0)  # noise bed, relative to token amplitude
_EDGE_SECONDS = 0.01  # raised-cosine fade at token boundaries
_DEV_FRACTION = 0.25  # per-speaker utterances held out as the dev pool

# Carriers sit exactly at mel filter centers: the triangular filters are zero
# at their neighbors' centers, so each carrier lights a single feature band.
# Every speaker owns a slice of three filter slots spaced two apart (adjacent
# slots sit inside the analysis window's mainlobe and would smear together),
# with a two-slot guard gap between slices. Slot 30 is the lowest that clears
# the harmonic combs. Mixtures only ever combine speakers from the same split,
# so a train and an eval speaker may share a slice without ever colliding.
_SLOT_LOW = 30
_SLICE_STRIDE = 2
_SLICE_SPAN = 6
_CARRIERS_PER_SPEAKER = 3
_MAX_SLICES = 8

# A token lights a fixed subset of the speaker's three carrier slots for its
# whole 0.25 s. Per-utterance normalization erases per-band scale, so levels
# cannot code anything; which bands are on versus off survives it, and every
# single frame identifies its token. Ordered so small vocabularies take the
# most separable patterns: a band that is dark between two lit neighbors picks
# up window leakage from both sides, so the two-lit patterns come last.
_TOKEN_PATTERNS = (
    (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1),
    (1, 1, 0), (0, 1, 1), (1, 0, 1),
)
_MAX_VOCAB = len(_TOKEN_PATTERNS)


def _filter_center_hz(slot: int) -> float:
    return float(mel_to_hz(hz_to_mel(FMIN) + (slot + 1.0) * MEL_FILTER_STEP))


def _slice_carriers(index: int) -> tuple[float, ...]:
    base = _SLOT_LOW + _SLICE_SPAN * index
    return tuple(
        _filter_center_hz(base + _SLICE_STRIDE * i) for i in range(_CARRIERS_PER_SPEAKER)
    )


@dataclass
class MixtureSpec:
    components: list[tuple[str, str, float]]  # (utterance-id, speaker-id, gain-dB)
    target_index: int
    mixture_id: str

    def __post_init__(self):
        if not 1 <= len(self.components) <= 3:
            raise ShapeError(f"mixture needs 1..3 components, got {len(self.components)}")
        speakers = [spk for _, spk, _ in self.components]
        if len(set(speakers)) != len(speakers):
            raise ShapeError(f"mixture speakers not distinct: {speakers}")
        if not 0 <= self.target_index < len(self.components):
            raise ShapeError(f"target index {self.target_index} out of range")

    @property
    def target_speaker(self) -> str:
        return self.components[self.target_index][1]

    @property
    def target_utterance(self) -> str:
        return self.components[self.target_index][0]


def mixture_id_for(components: list[tuple[str, str, float]]) -> str:
    return "_".join(f"{uid}_{gain:.4f}" for uid, _, gain in components)


@dataclass
class MixtureManifest:
    split: str
    entries: list[MixtureSpec]
    seed: int


@dataclass
class ToyCorpusConfig:
    n_speakers_train: int = 8
    n_speakers_eval: int = 4
    vocab: tuple[str, ...] = ("a", "b", "c", "d", "e", "f")
    tokens_per_utterance: tuple[int, int] = (2, 4)
    utterances_per_speaker: int = 16
    seed: int = 0

    def __post_init__(self):
        self.vocab = tuple(self.vocab)
        if not 2 <= len(self.vocab) <= _MAX_VOCAB:
            raise ShapeError(f"vocab size {len(self.vocab)} outside [2, {_MAX_VOCAB}]")
        lo, hi = self.tokens_per_utterance
        if not 1 <= lo <= hi:
            raise ShapeError(f"bad tokens-per-utterance range {self.tokens_per_utterance}")
        if self.n_speakers_train + self.n_speakers_eval < 1:
            raise ShapeError("corpus needs at least one speaker")
        if max(self.n_speakers_train, self.n_speakers_eval) > _MAX_SLICES:
            raise ShapeError(
                f"at most {_MAX_SLICES} speakers per split fit disjoint carrier slices"
            )


@dataclass
class SpeakerVoice:
    f0: float
    harmonics: np.ndarray  # (3,) relative amplitudes, first fixed at 1
    carriers: tuple[float, ...] = ()  # Hz, one per owned mel slot; tokens light subsets


@dataclass
class ToyCorpus:
    config: ToyCorpusConfig | None
    utterances: dict[str, AudioUtterance]
    split_utterances: dict[str, list[str]] = field(default_factory=dict)
    split_speakers: dict[str, list[str]] = field(default_factory=dict)
    voices: dict[str, SpeakerVoice] = field(default_factory=dict)

    def utterance(self, uid: str) -> AudioUtterance:
        if uid not in self.utterances:
            raise ArtifactError(f"utterance {uid!r} not in corpus")
        return self.utterances[uid]


def _render_token(voice: SpeakerVoice, token_index: int, amp: float, rng: np.random.Generator) -> np.ndarray:
    """One 0.25 s token: the speaker's harmonic comb (under 1 kHz, the voice)
    plus the token's carrier subset. Every lit carrier plays at the same level,
    so tokens differ only in which feature bands light up. A -30 dB noise bed
    masks window-leakage skirts."""
    n = int(TOKEN_SECONDS * SAMPLE_RATE)
    pattern = _TOKEN_PATTERNS[token_index]
    total = voice.harmonics.sum() + _CARRIER_WEIGHT
    t = np.arange(n) / SAMPLE_RATE
    wave = np.zeros(n)
    for k, w in enumerate(voice.harmonics / total, start=1):
        wave += w * np.sin(2.0 * np.pi * k * voice.f0 * t)
    level = (_CARRIER_WEIGHT / total) / len(pattern)  # sums stay inside [-1, 1]
    for lit, freq in zip(pattern, voice.carriers):
        if lit:
            wave += level * np.sin(2.0 * np.pi * freq * t)
    wave += _NOISE_LEVEL * rng.standard_normal(n)
    edge = int(_EDGE_SECONDS * SAMPLE_RATE)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
    wave[:edge] *= ramp
    wave[-edge:] *= ramp[::-1]
    return amp * wave


def _render_utterance(voice: SpeakerVoice, token_indices, amp: float, rng: np.random.Generator) -> np.ndarray:
    """Tokens joined by 50 ms gaps. Gaps keep the noise bed: digital-zero
    silence would hit the log-energy floor, ~20 log units below everything
    else, and that one outlier would dominate every band's normalization
    statistics and crush the token contrasts to a fraction of a sigma."""
    n_sil = int(SILENCE_SECONDS * SAMPLE_RATE)
    parts = []
    for j, idx in enumerate(token_indices):
        if j:
            parts.append(amp * _NOISE_LEVEL * rng.standard_normal(n_sil))
        parts.append(_render_token(voice, int(idx), amp, rng))
    return np.concatenate(parts)


def synth_toy_corpus(cfg: ToyCorpusConfig) -> ToyCorpus:
    """Deterministic synthetic corpus.

    Speakers get a base frequency from log-spaced strata of [90, 300] Hz
    (jittered within the stratum, so any two speakers in a split stay apart),
    a 3-harmonic amplitude profile, and three private carrier slots on the mel
    filter grid. Each vocabulary item lights a fixed subset of those carriers
    for 0.25 s; utterances join tokens with 50 ms silences.
    """
    train_ids = [f"spk{i:02d}" for i in range(cfg.n_speakers_train)]
    eval_ids = [f"spk{i:02d}" for i in range(cfg.n_speakers_train, cfg.n_speakers_train + cfg.n_speakers_eval)]

    # One global stratification for all speakers, eval strata interleaved
    # among the train strata: any two voices (within or across splits) keep a
    # guaranteed gap in base frequency and in carrier position.
    n_total = len(train_ids) + len(eval_ids)
    eval_strata = {
        int(round((j + 0.5) * n_total / max(len(eval_ids), 1) - 0.5)) for j in range(len(eval_ids))
    }
    train_strata = [i for i in range(n_total) if i not in eval_strata]
    strata = {spk: s for spk, s in zip(train_ids, train_strata)}
    strata.update({spk: s for spk, s in zip(eval_ids, sorted(eval_strata))})

    voices: dict[str, SpeakerVoice] = {}
    f0_span = math.log(F0_HIGH / F0_LOW)
    # slices stratify per split (ranks spread over the 8 positions); base
    # frequencies keep the global interleaved strata so every voice is unique
    slice_ranks = {spk: (r, len(ids)) for ids in (train_ids, eval_ids) for r, spk in enumerate(ids)}
    for spk in train_ids + eval_ids:
        rng = derive_rng(cfg.seed, "voice", spk)
        jitter = rng.uniform(0.35, 0.65)
        pos = (strata[spk] + jitter) / n_total
        f0 = F0_LOW * math.exp(f0_span * pos)
        rank, count = slice_ranks[spk]
        harmonics = np.concatenate([[1.0], rng.uniform(0.1, 0.9, size=2)])
        voices[spk] = SpeakerVoice(
            f0=f0,
            harmonics=harmonics,
            carriers=_slice_carriers(round(rank * (_MAX_SLICES - 1) / max(count - 1, 1))),
        )

    lo, hi = cfg.tokens_per_utterance
    utterances: dict[str, AudioUtterance] = {}
    split_utts: dict[str, list[str]] = {s: [] for s in SPLITS}
    n_dev = max(1, int(round(cfg.utterances_per_speaker * _DEV_FRACTION)))
    for spk in train_ids + eval_ids:
        for j in range(cfg.utterances_per_speaker):
            rng = derive_rng(cfg.seed, "utt", spk, j)
            count = int(rng.integers(lo, hi + 1))
            token_indices = rng.integers(0, len(cfg.vocab), size=count)
            amp = float(rng.uniform(0.25, 0.45))
            samples = _render_utterance(voices[spk], token_indices, amp, rng)
            uid = f"{spk}-{j:03d}"
            transcript = " ".join(cfg.vocab[i] for i in token_indices)
            utterances[uid] = AudioUtterance(samples, SAMPLE_RATE, uid, spk, transcript)
            if spk in eval_ids:
                split_utts["eval"].append(uid)
            elif j < cfg.utterances_per_speaker - n_dev:
                split_utts["train"].append(uid)
            else:
                split_utts["dev"].append(uid)

    return ToyCorpus(
        config=cfg,
        utterances=utterances,
        split_utterances=split_utts,
        split_speakers={"train": train_ids, "dev": train_ids, "eval": eval_ids},
        voices=voices,
    )


# -- manifests --------------------------------------------------------------------


def generate_manifest(
    corpus: ToyCorpus,
    n_mix: int | dict[str, int],
    k_speakers: int = 2,
    seed: int = 0,
) -> dict[str, MixtureManifest]:
    """Per-split mixture manifests with distinct-speaker sampling.

    Gains: g ~ Uniform(0, 2.5) dB, +g to the first component and -g to the
    second; a third component mixes at 0 dB. Targets rotate over component
    positions so scoring a manifest covers every position evenly.
    """
    if k_speakers not in (2, 3):
        raise ShapeError(f"k_speakers must be 2 or 3, got {k_speakers}")
    counts = {s: n_mix for s in SPLITS} if isinstance(n_mix, int) else dict(n_mix)
    manifests: dict[str, MixtureManifest] = {}
    for split in SPLITS:
        want = counts.get(split, 0)
        pool = corpus.split_utterances[split]
        pool_speakers = {corpus.utterances[u].speaker_id for u in pool}
        if want and len(pool_speakers) < k_speakers:
            raise ShapeError(
                f"split {split!r} has {len(pool_speakers)} speakers, needs {k_speakers}"
            )
        rng = derive_rng(seed, "manifest", split)
        entries = []
        for m in range(want):
            while True:
                picks = rng.choice(len(pool), size=k_speakers, replace=False)
                chosen = [corpus.utterances[pool[i]] for i in picks]
                if len({u.speaker_id for u in chosen}) == k_speakers:
                    break
            g = float(rng.uniform(0.0, 2.5))
            gains = [g, -g, 0.0][:k_speakers]
            comps = [(u.utterance_id, u.speaker_id, gain) for u, gain in zip(chosen, gains)]
            entries.append(
                MixtureSpec(components=comps, target_index=m % k_speakers, mixture_id=mixture_id_for(comps))
            )
        manifests[split] = MixtureManifest(split=split, entries=entries, seed=seed)
    return manifests


def render_mixture(spec: MixtureSpec, corpus: ToyCorpus) -> tuple[AudioUtterance, float]:
    """Gain-scale, pad to the longest component, and sum.

    Returns the mixed utterance (id = mixture id, speaker/transcript = the
    target component's) and the applied rescale factor: 1.0 normally, or the
    factor that brought a clipping mixture down to peak 0.99.
    """
    comps = [corpus.utterance(uid) for uid, _, _ in spec.components]
    rates = {c.sample_rate for c in comps}
    if len(rates) != 1:
        raise ArtifactError(f"mixture components disagree on sample rate: {sorted(rates)}")
    length = max(c.samples.size for c in comps)
    out = np.zeros(length)
    for comp, (_, _, gain) in zip(comps, spec.components):
        out[: comp.samples.size] += 10.0 ** (gain / 20.0) * comp.samples
    peak = np.max(np.abs(out))
    scale = 1.0
    if peak > 1.0:
        scale = 0.99 / peak
        out = out * scale
    target = comps[spec.target_index]
    mixed = AudioUtterance(out, target.sample_rate, spec.mixture_id, target.speaker_id, target.transcript)
    return mixed, scale


# -- files -------------------------------------------------------------------------


def write_manifest(path, manifest: MixtureManifest, corpus: ToyCorpus | None = None) -> None:
    """One mixture per line, tab-separated; UTF-8 with LF endings."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# split={manifest.split} seed={manifest.seed}\n")
        for spec in manifest.entries:
            comps = "\t".join(f"{uid}:{gain:.4f}" for uid, _, gain in spec.components)
            transcript = corpus.utterance(spec.target_utterance).transcript if corpus else ""
            fh.write(f"{spec.mixture_id}\t{spec.target_speaker}\t{comps}\t{transcript}\n")


def _speaker_of(uid: str) -> str:
    return uid.rsplit("-", 1)[0]


def read_manifest(path) -> MixtureManifest:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"manifest {path} missing")
    split, seed = "?", 0
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                key, _, value = token.partition("=")
                if key == "split":
                    split = value
                elif key == "seed":
                    seed = int(value)
            continue
        fields = line.split("\t")
        if len(fields) < 4:
            raise ArtifactError(f"{path}:{lineno}: expected ≥4 tab-separated fields")
        mixture_id, target_spk = fields[0], fields[1]
        comps = []
        for part in fields[2:-1]:
            uid, _, gain = part.rpartition(":")
            if not uid:
                raise ArtifactError(f"{path}:{lineno}: bad component field {part!r}")
            comps.append((uid, _speaker_of(uid), float(gain)))
        target_index = next(
            (i for i, (_, spk, _) in enumerate(comps) if spk == target_spk), None
        )
        if target_index is None:
            raise ArtifactError(f"{path}:{lineno}: target {target_spk!r} not a component speaker")
        entries.append(MixtureSpec(components=comps, target_index=target_index, mixture_id=mixture_id))
    return MixtureManifest(split=split, entries=entries, seed=seed)


def save_corpus(corpus: ToyCorpus, directory) -> None:
    directory = Path(directory)
    audio_dir = directory / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    with open(directory / "corpus.tsv", "w", encoding="utf-8", newline="\n") as fh:
        if corpus.config is not None:
            fh.write(f"# seed={corpus.config.seed}\n")
        for split in SPLITS:
            for uid in corpus.split_utterances[split]:
                utt = corpus.utterances[uid]
                fh.write(f"{uid}\t{utt.speaker_id}\t{split}\t{utt.transcript}\n")
                write_wav(audio_dir / f"{uid}.wav", utt)


def load_corpus(directory) -> ToyCorpus:
    directory = Path(directory)
    index = directory / "corpus.tsv"
    if not index.exists():
        raise ArtifactError(f"corpus index {index} missing")
    utterances: dict[str, AudioUtterance] = {}
    split_utts: dict[str, list[str]] = {s: [] for s in SPLITS}
    split_speakers: dict[str, list[str]] = {s: [] for s in SPLITS}
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ArtifactError(f"{index}:{lineno}: expected 4 fields")
        uid, spk, split, transcript = fields
        if split not in SPLITS:
            raise ArtifactError(f"{index}:{lineno}: unknown split {split!r}")
        wav = directory / "audio" / f"{uid}.wav"
        if not wav.exists():
            raise ArtifactError(f"audio file {wav} missing")
        utt = read_wav(wav, utterance_id=uid, speaker_id=spk, transcript=transcript)
        utterances[uid] = utt
        split_utts[split].append(uid)
        if spk not in split_speakers[split]:
            split_speakers[split].append(spk)
    return ToyCorpus(
        config=None,
        utterances=utterances,
        split_utterances=split_utts,
        split_speakers=split_speakers,
    )
