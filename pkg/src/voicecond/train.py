"""AdaDelta training with dev-accuracy model selection and transfer regimes.

One optimizer step per batch; gradients are averaged over the batch and
globally norm-clipped. "Performance" for epsilon-halving and best-model
selection is teacher-forced per-label accuracy on the dev set. Three regimes:
overlapped-only, parameter-transfer (donor checkpoint, fine-tuned on the
overlapped sets), and multi-condition (clean and overlapped samples shuffled
into one stream).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import net
from .autodiff import Tape, Tensor
from .errors import ArtifactError, NoAlignmentError, ShapeError
from .frontend import extract_logmel, normalize
from .mixer import MixtureManifest, ToyCorpus, render_mixture
from .seeding import derive_rng

log = logging.getLogger("voicecond.train")

REGIME_MODES = ("overlapped-only", "parameter-transfer", "multi-condition")


@dataclass
class OptimizerConfig:
    rho: float = 0.95
    epsilon: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 8
    epochs: int = 10

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ShapeError(f"rho {self.rho} outside (0, 1)")
        if self.epsilon <= 0.0:
            raise ShapeError(f"epsilon {self.epsilon} must be positive")
        if self.clip_norm <= 0.0:
            raise ShapeError(f"clip_norm {self.clip_norm} must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ShapeError("batch_size and epochs must be at least 1")


@dataclass
class Sample:
    uid: str
    frames: np.ndarray  # normalized log-mel features (T, 80)
    embedding: np.ndarray | None  # (512,) target-speaker embedding
    label_ids: list[int]


@dataclass
class DataSet:
    name: str
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class TrainingRegime:
    mode: str = "overlapped-only"
    overlapped: list[DataSet] = field(default_factory=list)
    clean: DataSet | None = None
    donor_path: str | None = None

    def __post_init__(self):
        if self.mode not in REGIME_MODES:
            raise ShapeError(f"unknown regime {self.mode!r}; choose from {REGIME_MODES}")
        if not self.overlapped:
            raise ShapeError("at least one overlapped dataset is required")
        if self.mode == "parameter-transfer" and self.donor_path is None:
            raise ShapeError("parameter-transfer requires a donor checkpoint")


@dataclass
class TrainState:
    sq_grad: dict[str, np.ndarray]
    sq_update: dict[str, np.ndarray]
    epoch: int = 0
    best_dev_accuracy: float = float("-inf")
    epsilon_current: float = 1e-8
    skipped_batches: int = 0
    skipped_samples: int = 0
    halvings: list[tuple[int, float]] = field(default_factory=list)

    def register_dev(self, epoch: int, accuracy: float) -> bool:
        """Track the best dev accuracy; halve epsilon when it fails to improve."""
        if accuracy > self.best_dev_accuracy:
            self.best_dev_accuracy = accuracy
            return True
        self.epsilon_current *= 0.5
        self.halvings.append((epoch, accuracy))
        return False


def init_train_state(model: net.Model, cfg: OptimizerConfig) -> TrainState:
    return TrainState(
        sq_grad={n: np.zeros_like(p.data) for n, p in model.params.items()},
        sq_update={n: np.zeros_like(p.data) for n, p in model.params.items()},
        epsilon_current=cfg.epsilon,
    )


def adadelta_step(
    model: net.Model, grads: dict[str, np.ndarray], state: TrainState, cfg: OptimizerConfig
) -> bool:
    """One clipped AdaDelta update; returns False when the batch is skipped."""
    total_sq = 0.0
    for g in grads.values():
        total_sq += float(np.sum(g * g))
    if not np.isfinite(total_sq):
        state.skipped_batches += 1
        log.warning("skipping batch: non-finite gradient (skip #%d)", state.skipped_batches)
        return False
    norm = np.sqrt(total_sq)
    scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
    eps = state.epsilon_current
    for name, g in grads.items():
        g = g * scale
        eg = state.sq_grad[name]
        eu = state.sq_update[name]
        eg *= cfg.rho
        eg += (1.0 - cfg.rho) * g * g
        delta = -np.sqrt(eu + eps) / np.sqrt(eg + eps) * g
        eu *= cfg.rho
        eu += (1.0 - cfg.rho) * delta * delta
        model.params[name].data += delta
    return True


# -- datasets ----------------------------------------------------------------------


def _sample_from_audio(utt, embedding, vocab: net.Vocab) -> Sample:
    feat = normalize(extract_logmel(utt))
    return Sample(
        uid=utt.utterance_id,
        frames=feat.frames,
        embedding=None if embedding is None else np.asarray(embedding, dtype=np.float64),
        label_ids=vocab.encode(utt.transcript.split()),
    )


def clean_dataset(
    corpus: ToyCorpus,
    split: str,
    embeddings: dict[str, np.ndarray] | None,
    vocab: net.Vocab,
    name: str | None = None,
) -> DataSet:
    """Clean utterances paired with their own speaker's embedding."""
    if split not in corpus.split_utterances:
        raise ArtifactError(f"corpus has no split {split!r}")
    samples = []
    for uid in corpus.split_utterances[split]:
        utt = corpus.utterance(uid)
        emb = None if embeddings is None else _lookup_embedding(embeddings, utt.speaker_id)
        samples.append(_sample_from_audio(utt, emb, vocab))
    return DataSet(name=name or f"clean-{split}", samples=samples)


def mixture_dataset(
    corpus: ToyCorpus,
    manifest: MixtureManifest,
    embeddings: dict[str, np.ndarray] | None,
    vocab: net.Vocab,
    name: str | None = None,
) -> DataSet:
    """Rendered mixtures paired with the target speaker's embedding and transcript."""
    samples = []
    for spec in manifest.entries:
        mixed, _ = render_mixture(spec, corpus)
        emb = None if embeddings is None else _lookup_embedding(embeddings, spec.target_speaker)
        samples.append(_sample_from_audio(mixed, emb, vocab))
    return DataSet(name=name or f"mix-{manifest.split}", samples=samples)


def _lookup_embedding(embeddings: dict[str, np.ndarray], speaker: str) -> np.ndarray:
    if speaker not in embeddings:
        raise ArtifactError(f"no embedding for speaker {speaker!r}")
    return embeddings[speaker]


# -- transfer initialization ---------------------------------------------------------


def transfer_init(config: net.ModelConfig, donor_path, seed: int = 0) -> tuple[net.Model, list[str]]:
    """New model with all donor tensors copied in; returns the fresh-tensor names.

    Only the stack downscale matrix may be missing from the donor (it is then
    freshly initialized); any other name or shape difference is rejected with
    a per-tensor diff.
    """
    donor, meta = net.load_checkpoint(donor_path)
    if tuple(donor.config.labels) != tuple(config.labels):
        raise ArtifactError(
            f"donor vocab {donor.config.labels} differs from target {config.labels}"
        )
    if donor.config.input_width != config.input_width:
        raise ArtifactError(
            f"donor input width {donor.config.input_width} differs from target {config.input_width}"
        )
    model = net.init_model(config, seed=seed)
    fresh: list[str] = []
    problems: list[str] = []
    for name, tensor in model.params.items():
        if name not in donor.params:
            if name == "downscale.w":
                fresh.append(name)
                continue
            problems.append(f"{name}: missing from donor")
            continue
        src = donor.params[name].data
        if src.shape != tensor.data.shape:
            problems.append(f"{name}: donor {src.shape} vs target {tensor.data.shape}")
            continue
        tensor.data = src.copy()
    for name in donor.params:
        if name not in model.params:
            problems.append(f"{name}: donor-only tensor")
    if problems:
        raise ArtifactError("incompatible donor checkpoint: " + "; ".join(sorted(problems)))
    return model, fresh


# -- the loop -----------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_accuracy: float
    epsilon: float
    improved: bool
    skipped_batches: int

    def format(self) -> str:
        return (
            f"epoch={self.epoch} train-loss={self.train_loss:.6f} "
            f"dev-loss={self.dev_loss:.6f} dev-acc={self.dev_accuracy:.6f} "
            f"epsilon={self.epsilon:.6g} halved={0 if self.improved else 1} "
            f"skipped-batches={self.skipped_batches}"
        )


def parse_epoch_record(line: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in line.split())


def _epoch_stream(regime: TrainingRegime, epoch: int, seed: int) -> list[Sample]:
    """Every sample of every participating set exactly once, shuffled.

    The shuffle seed does not depend on the regime name, so multi-condition
    with an empty clean set reproduces overlapped-only exactly.
    """
    samples: list[Sample] = []
    for ds in regime.overlapped:
        samples.extend(ds.samples)
    if regime.mode == "multi-condition" and regime.clean is not None:
        samples.extend(regime.clean.samples)
    if not samples:
        raise ArtifactError("training stream is empty")
    order = derive_rng(seed, "epoch-shuffle", epoch).permutation(len(samples))
    return [samples[i] for i in order]


def _batches(stream: list[Sample], batch_size: int, epoch: int, seed: int) -> list[list[Sample]]:
    """Sort by length, cut into buckets, shuffle the bucket order."""
    by_len = sorted(stream, key=lambda s: (s.frames.shape[0], s.uid))
    buckets = [by_len[i : i + batch_size] for i in range(0, len(by_len), batch_size)]
    order = derive_rng(seed, "bucket-shuffle", epoch).permutation(len(buckets))
    return [buckets[i] for i in order]


def _sample_loss(tape: Tape, model: net.Model, sample: Sample):
    return net.model_loss(tape, model, sample.frames, sample.embedding, sample.label_ids)


def evaluate_dev(model: net.Model, dev: list[Sample]) -> tuple[float, float]:
    """(mean per-utterance hybrid loss, teacher-forced label accuracy)."""
    if not dev:
        raise ArtifactError("dev set is empty")
    total_loss = 0.0
    correct = 0
    steps = 0
    for sample in dev:
        _, stats = _sample_loss(Tape(record=False), model, sample)
        total_loss += stats.loss
        correct += stats.correct
        steps += stats.steps
    return total_loss / len(dev), correct / steps


def train_model(
    model: net.Model,
    regime: TrainingRegime,
    dev: list[Sample],
    cfg: OptimizerConfig,
    seed: int = 0,
    checkpoint_path=None,
    log_path=None,
) -> tuple[net.Model, TrainState, list[EpochRecord]]:
    """Run the full loop; returns (best model, final state, per-epoch records).

    The best model is the checkpoint with the highest dev accuracy; it is also
    written to ``checkpoint_path`` when given. Fixed seed + single worker =>
    bit-identical checkpoints across runs.
    """
    log_lines: list[str] = []
    if regime.mode == "parameter-transfer":
        model, fresh = transfer_init(model.config, regime.donor_path, seed=seed)
        if fresh:
            log_lines.append(f"transfer fresh-tensors={','.join(fresh)}")
    state = init_train_state(model, cfg)
    history: list[EpochRecord] = []
    best_params = {n: p.data.copy() for n, p in model.params.items()}
    best_meta = {"epoch": 0, "dev_accuracy": float("-inf"), "dev_loss": float("inf")}

    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        stream = _epoch_stream(regime, epoch, seed)
        total_loss = 0.0
        n_losses = 0
        skipped_before = state.skipped_batches
        for batch in _batches(stream, cfg.batch_size, epoch, seed):
            grads = {n: np.zeros_like(p.data) for n, p in model.params.items()}
            n_ok = 0
            for sample in batch:
                tape = Tape()
                try:
                    loss, stats = _sample_loss(tape, model, sample)
                except NoAlignmentError:
                    state.skipped_samples += 1
                    log.warning("skipping %s: no CTC alignment", sample.uid)
                    continue
                tape.backward(loss, params=model.param_list())
                for n, p in model.params.items():
                    grads[n] += p.grad
                    p.zero_grad()
                total_loss += stats.loss
                n_losses += 1
                n_ok += 1
            if n_ok == 0:
                continue
            for n in grads:
                grads[n] /= n_ok
            adadelta_step(model, grads, state, cfg)
        dev_loss, dev_acc = evaluate_dev(model, dev)
        improved = state.register_dev(epoch, dev_acc)
        if improved:
            best_params = {n: p.data.copy() for n, p in model.params.items()}
            best_meta = {"epoch": epoch, "dev_accuracy": dev_acc, "dev_loss": dev_loss}
        record = EpochRecord(
            epoch=epoch,
            train_loss=total_loss / max(n_losses, 1),
            dev_loss=dev_loss,
            dev_accuracy=dev_acc,
            epsilon=state.epsilon_current,
            improved=improved,
            skipped_batches=state.skipped_batches - skipped_before,
        )
        history.append(record)
        log_lines.append(record.format())

    best_model = net.Model(model.config, {n: Tensor(d.copy(), name=n) for n, d in best_params.items()})
    if checkpoint_path is not None:
        net.save_checkpoint(
            checkpoint_path,
            best_model,
            epoch=best_meta["epoch"],
            dev_accuracy=best_meta["dev_accuracy"],
            extra={"dev_loss": best_meta["dev_loss"], "seed": seed},
        )
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for line in log_lines:
                fh.write(line + "\n")
    return best_model, state, history
