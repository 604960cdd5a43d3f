"""Embedding providers, per-speaker averaging, and the four stacking layouts."""

import numpy as np
import pytest

from voicecond.errors import ArtifactError, NoSpeechError, NumericalError, ShapeError
from voicecond.frontend import SAMPLE_RATE, FeatureMatrix, VadMask, energy_vad, extract_logmel, normalize
from voicecond.mixer import ToyCorpusConfig, synth_toy_corpus
from voicecond.speaker import (
    EMBED_DIM,
    ImportProvider,
    SignatureProvider,
    SpeakerEmbedding,
    StackingStrategy,
    average_speaker,
    embed_utterance,
    read_embeddings,
    signature_projection,
    stack,
    write_embeddings,
)


@pytest.fixture(scope="module")
def corpus():
    return synth_toy_corpus(
        ToyCorpusConfig(n_speakers_train=6, n_speakers_eval=3, utterances_per_speaker=8, seed=2)
    )


@pytest.fixture(scope="module")
def signature_vectors(corpus):
    provider = SignatureProvider()
    vectors = {}
    for uid, utt in corpus.utterances.items():
        feat = extract_logmel(utt)
        vectors[uid] = embed_utterance(feat, energy_vad(feat), provider, uid)
    return vectors


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _unit(rng, n=EMBED_DIM):
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


# -- providers ---------------------------------------------------------------------


def test_signature_deterministic(corpus):
    provider = SignatureProvider()
    utt = next(iter(corpus.utterances.values()))
    feat = extract_logmel(utt)
    vad = energy_vad(feat)
    a = embed_utterance(feat, vad, provider, utt.utterance_id)
    b = embed_utterance(feat, vad, provider, utt.utterance_id)
    assert a.tobytes() == b.tobytes()


def test_signature_projection_orthonormal_columns():
    q = signature_projection()
    assert q.shape == (512, 160)
    assert np.max(np.abs(q.T @ q - np.eye(160))) < 1e-10
    assert np.array_equal(q, signature_projection())


def test_signature_speaker_separability(corpus, signature_vectors):
    intra, inter, inter_same_transcript = [], [], []
    uids = list(signature_vectors)
    for i in range(len(uids)):
        for j in range(i + 1, len(uids)):
            a, b = corpus.utterances[uids[i]], corpus.utterances[uids[j]]
            c = _cos(signature_vectors[uids[i]], signature_vectors[uids[j]])
            if a.speaker_id == b.speaker_id:
                intra.append(c)
            else:
                inter.append(c)
                if a.transcript == b.transcript:
                    inter_same_transcript.append(c)
    assert min(intra) > 0.8
    assert all(c < 0.8 for c in inter_same_transcript)
    assert np.mean(intra) > np.mean(inter)


def test_signature_rejects_normalized_features(corpus):
    utt = next(iter(corpus.utterances.values()))
    feat = extract_logmel(utt)
    vad = energy_vad(feat)
    with pytest.raises(ValueError):
        embed_utterance(normalize(feat), vad, SignatureProvider())


def test_no_voiced_frames_is_no_speech():
    silent = FeatureMatrix(np.full((10, 80), np.log(1e-10)), 0.01)
    vad = energy_vad(silent)
    assert vad.num_voiced == 0
    with pytest.raises(NoSpeechError):
        embed_utterance(silent, vad, SignatureProvider(), "silence")


def test_import_provider_roundtrip_and_missing(tmp_path):
    rng = np.random.default_rng(0)
    table = {"u1": rng.standard_normal(EMBED_DIM), "u2": rng.standard_normal(EMBED_DIM)}
    path = tmp_path / "emb.bin"
    write_embeddings(path, table)
    provider = ImportProvider.from_file(path)
    feat = FeatureMatrix(np.zeros((4, 80)), 0.01)
    vad = VadMask(np.ones(4, dtype=bool))
    assert np.array_equal(embed_utterance(feat, vad, provider, "u1"), table["u1"])
    with pytest.raises(ArtifactError):
        embed_utterance(feat, vad, provider, "unknown")


def test_embedding_file_corruption(tmp_path):
    path = tmp_path / "emb.bin"
    write_embeddings(path, {"k": np.zeros(EMBED_DIM)})
    (tmp_path / "bad").write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ArtifactError):
        read_embeddings(tmp_path / "bad")
    raw = path.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-8])
    with pytest.raises(ArtifactError):
        read_embeddings(tmp_path / "trunc")


def test_write_embeddings_rejects_bad_shape(tmp_path):
    with pytest.raises(ShapeError):
        write_embeddings(tmp_path / "x", {"k": np.zeros(10)})


# -- averaging ---------------------------------------------------------------------


def test_average_single_vector_normalizes():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(EMBED_DIM) * 3.0
    emb = average_speaker([v], "spk")
    assert np.allclose(emb.vector, v / np.linalg.norm(v))
    assert abs(np.linalg.norm(emb.vector) - 1.0) < 1e-6


def test_average_duplicate_invariance():
    rng = np.random.default_rng(2)
    v = rng.standard_normal(EMBED_DIM)
    assert np.allclose(average_speaker([v, v], "s").vector, average_speaker([v], "s").vector)


def test_average_permutation_invariance():
    rng = np.random.default_rng(3)
    vecs = [rng.standard_normal(EMBED_DIM) for _ in range(5)]
    fwd = average_speaker(vecs, "s").vector
    rev = average_speaker(list(reversed(vecs)), "s").vector
    assert np.max(np.abs(fwd - rev)) < 1e-12


def test_average_counts_recorded():
    rng = np.random.default_rng(4)
    emb = average_speaker([rng.standard_normal(EMBED_DIM) for _ in range(3)], "spk07", n_voiced_frames=42)
    assert emb.speaker_id == "spk07"
    assert emb.n_reference_utterances == 3
    assert emb.n_voiced_frames == 42


def test_average_errors():
    with pytest.raises(ShapeError):
        average_speaker([], "s")
    v = np.ones(EMBED_DIM)
    with pytest.raises(NumericalError):
        average_speaker([v, -v], "s")


def test_speaker_embedding_validates_norm():
    with pytest.raises(ShapeError):
        SpeakerEmbedding(np.ones(EMBED_DIM), "s", 1, 1)
    with pytest.raises(ShapeError):
        SpeakerEmbedding(np.ones(7), "s", 1, 1)


# -- stacking ----------------------------------------------------------------------


def _normalized_feat(rng, T):
    return normalize(FeatureMatrix(rng.normal(size=(T, 80)), 0.01))


def test_strategy_table():
    for name, (mode, handling) in {
        "vertical-unchanged": ("vertical", "unchanged"),
        "vertical-downscale": ("vertical", "downscale"),
        "horizontal-downscale": ("horizontal", "downscale"),
        "horizontal-pad": ("horizontal", "pad-acoustic"),
    }.items():
        s = StackingStrategy.from_name(name)
        assert (s.mode, s.embedding_handling) == (mode, handling)
        assert s.name == name
    with pytest.raises(ShapeError):
        StackingStrategy("vertical", "pad-acoustic")
    with pytest.raises(ShapeError):
        StackingStrategy("horizontal", "unchanged")
    with pytest.raises(ShapeError):
        StackingStrategy.from_name("diagonal")


@pytest.mark.parametrize(
    "name,shape_fn",
    [
        ("vertical-unchanged", lambda T: (T, 592)),
        ("vertical-downscale", lambda T: (T, 160)),
        ("horizontal-downscale", lambda T: (T + 1, 80)),
        ("horizontal-pad", lambda T: (T + 1, 512)),
    ],
)
@pytest.mark.parametrize("T", [1, 7, 98])
def test_stack_shapes(name, shape_fn, T):
    rng = np.random.default_rng(T)
    feat = _normalized_feat(rng, T)
    emb = average_speaker([_unit(rng)], "s")
    W = rng.standard_normal((80, 512)) * 0.01
    strategy = StackingStrategy.from_name(name)
    out = stack(feat, emb, strategy, W if strategy.needs_downscale else None)
    assert out.frames.shape == shape_fn(T)
    assert out.frames.shape == (out.effective_length, out.effective_width)
    assert strategy.input_width() == out.effective_width


def test_stack_vertical_unchanged_layout():
    rng = np.random.default_rng(5)
    feat = _normalized_feat(rng, 98)
    emb = average_speaker([_unit(rng)], "s")
    out = stack(feat, emb, StackingStrategy.from_name("vertical-unchanged"))
    assert out.frames.shape == (98, 592)
    assert np.array_equal(out.frames[:, :80], feat.frames)
    for t in range(0, 98, 13):
        assert np.array_equal(out.frames[t, 80:], emb.vector)


def test_stack_horizontal_pad_layout():
    rng = np.random.default_rng(6)
    feat = _normalized_feat(rng, 98)
    emb = average_speaker([_unit(rng)], "s")
    out = stack(feat, emb, StackingStrategy.from_name("horizontal-pad"))
    assert out.frames.shape == (99, 512)
    assert np.array_equal(out.frames[0], emb.vector)
    assert np.array_equal(out.frames[1:, :80], feat.frames)
    assert np.all(out.frames[1:, 80:] == 0.0)
    assert out.frames.shape[1] - 80 == 432


def test_stack_downscale_uses_weight():
    rng = np.random.default_rng(7)
    feat = _normalized_feat(rng, 5)
    emb = average_speaker([_unit(rng)], "s")
    W = rng.standard_normal((80, 512))
    vert = stack(feat, emb, StackingStrategy.from_name("vertical-downscale"), W)
    assert np.allclose(vert.frames[2, 80:], W @ emb.vector)
    horiz = stack(feat, emb, StackingStrategy.from_name("horizontal-downscale"), W)
    assert np.allclose(horiz.frames[0], W @ emb.vector)
    assert np.array_equal(horiz.frames[1:], feat.frames)


def test_stack_zero_embedding_pass_through():
    rng = np.random.default_rng(8)
    feat = _normalized_feat(rng, 4)
    out = stack(feat, np.zeros(512), StackingStrategy.from_name("vertical-unchanged"))
    assert np.array_equal(out.frames[:, :80], feat.frames)
    assert np.all(out.frames[:, 80:] == 0.0)


def test_stack_preconditions():
    rng = np.random.default_rng(9)
    emb = average_speaker([_unit(rng)], "s")
    raw = FeatureMatrix(rng.normal(size=(5, 80)), 0.01)
    with pytest.raises(ValueError):
        stack(raw, emb, StackingStrategy.from_name("vertical-unchanged"))
    feat = _normalized_feat(rng, 5)
    with pytest.raises(ShapeError):
        stack(feat, emb, StackingStrategy.from_name("vertical-downscale"))  # no W
    with pytest.raises(ShapeError):
        stack(feat, emb, StackingStrategy.from_name("horizontal-downscale"), np.ones((80, 80)))
