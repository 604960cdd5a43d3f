"""Hybrid CTC/attention encoder-decoder over conditioned inputs.

Encoder: stacked bidirectional LSTM layers, each followed by a tanh linear
projection, no subsampling. Decoder: location-aware additive attention and a
single LSTM layer, trained with teacher forcing. The CTC branch shares the
encoder. Training loss is the convex combination lambda * L_ctc +
(1 - lambda) * L_att.

Forward/backward for different utterances may run in parallel on shared
read-only parameters; each call builds its own tape.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import LstmParams, Tape, Tensor, constant
from .errors import ArtifactError, NoAlignmentError, ShapeError
from .seeding import derive_rng
from .speaker import EMBED_DIM, StackingStrategy

_CKPT_MAGIC = b"CKPT1"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class Vocab:
    """Ordered label set. CTC ids put <blank> at 0 and labels at 1..V;
    attention ids use 0..V-1 for labels and V for <sos/eos>."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ShapeError(f"duplicate labels in vocab: {self.labels}")
        for reserved in ("<blank>", "<sos/eos>"):
            if reserved in self.labels:
                raise ShapeError(f"{reserved} must not appear among the labels")

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def blank_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return len(self.labels)

    @property
    def ctc_size(self) -> int:
        return len(self.labels) + 1

    @property
    def att_size(self) -> int:
        return len(self.labels) + 1

    def encode(self, tokens: list[str]) -> list[int]:
        try:
            return [self.labels.index(t) for t in tokens]
        except ValueError as exc:
            raise ShapeError(f"label outside vocab: {exc}") from None

    def decode(self, ids: list[int]) -> list[str]:
        return [self.labels[i] for i in ids]


@dataclass
class ModelConfig:
    enc_layers: int
    enc_units: int
    proj_units: int
    dec_units: int
    att_dim: int
    labels: tuple[str, ...]
    input_width: int
    lambda_train: float = 0.2
    att_conv_channels: int = 10
    att_conv_width: int = 100
    strategy: str | None = None  # stacking strategy name, None = unconditioned

    def __post_init__(self):
        self.labels = tuple(self.labels)
        if not 0.0 <= self.lambda_train <= 1.0:
            raise ShapeError(f"lambda_train {self.lambda_train} outside [0, 1]")
        if self.strategy is not None:
            expected = StackingStrategy.from_name(self.strategy).input_width()
            if self.input_width != expected:
                raise ShapeError(
                    f"input width {self.input_width} but strategy {self.strategy} implies {expected}"
                )


def desk_config(labels, strategy: str | None = None, input_width: int | None = None) -> ModelConfig:
    """Small configuration for laptop-scale experiments. The location filters
    shrink with the model: second-long kernels are wider than a whole toy
    utterance and would blur the alignment signal away."""
    if input_width is None:
        input_width = StackingStrategy.from_name(strategy).input_width() if strategy else 80
    return ModelConfig(
        enc_layers=2, enc_units=16, proj_units=16, dec_units=16, att_dim=16,
        labels=tuple(labels), input_width=input_width, strategy=strategy,
        att_conv_channels=8, att_conv_width=15,
    )


def paper_config(labels, strategy: str | None = None, input_width: int | None = None) -> ModelConfig:
    """Full-scale configuration matching the reference system."""
    if input_width is None:
        input_width = StackingStrategy.from_name(strategy).input_width() if strategy else 80
    return ModelConfig(
        enc_layers=4, enc_units=320, proj_units=320, dec_units=300, att_dim=320,
        labels=tuple(labels), input_width=input_width, strategy=strategy,
    )


def gradcheck_config(labels=("a", "b")) -> ModelConfig:
    """Tiny configuration (well under 5k parameters) for finite-difference checks."""
    return ModelConfig(
        enc_layers=2, enc_units=4, proj_units=4, dec_units=4, att_dim=4,
        labels=tuple(labels), input_width=5,
        att_conv_channels=2, att_conv_width=5,
    )


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.vocab = Vocab(config.labels)

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def enc_lstm(self, layer: int, direction: str) -> LstmParams:
        p = self.params
        return LstmParams(
            w_x=p[f"enc.l{layer}.{direction}.w_x"],
            w_h=p[f"enc.l{layer}.{direction}.w_h"],
            b=p[f"enc.l{layer}.{direction}.b"],
        )

    def dec_lstm(self) -> LstmParams:
        p = self.params
        return LstmParams(w_x=p["dec.w_x"], w_h=p["dec.w_h"], b=p["dec.b"])


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    v = len(cfg.labels)
    shapes: dict[str, tuple[int, ...]] = {}
    d_in = cfg.input_width
    for layer in range(cfg.enc_layers):
        for direction in ("fwd", "bwd"):
            shapes[f"enc.l{layer}.{direction}.w_x"] = (d_in, 4 * cfg.enc_units)
            shapes[f"enc.l{layer}.{direction}.w_h"] = (cfg.enc_units, 4 * cfg.enc_units)
            shapes[f"enc.l{layer}.{direction}.b"] = (4 * cfg.enc_units,)
        shapes[f"enc.l{layer}.proj.w"] = (2 * cfg.enc_units, cfg.proj_units)
        shapes[f"enc.l{layer}.proj.b"] = (cfg.proj_units,)
        d_in = cfg.proj_units
    shapes["att.w_q"] = (cfg.dec_units, cfg.att_dim)
    shapes["att.w_h"] = (cfg.proj_units, cfg.att_dim)
    shapes["att.conv"] = (cfg.att_conv_channels, cfg.att_conv_width)
    shapes["att.w_f"] = (cfg.att_conv_channels, cfg.att_dim)
    shapes["att.v"] = (cfg.att_dim,)
    shapes["dec.embed"] = (v + 1, cfg.dec_units)  # labels + shared <sos/eos>
    shapes["dec.w_x"] = (cfg.dec_units + cfg.proj_units, 4 * cfg.dec_units)
    shapes["dec.w_h"] = (cfg.dec_units, 4 * cfg.dec_units)
    shapes["dec.b"] = (4 * cfg.dec_units,)
    shapes["out.w"] = (cfg.dec_units, v + 1)  # labels + <sos/eos>
    shapes["out.b"] = (v + 1,)
    shapes["ctc.w"] = (cfg.proj_units, v + 1)  # <blank> + labels
    shapes["ctc.b"] = (v + 1,)
    if cfg.strategy is not None and StackingStrategy.from_name(cfg.strategy).needs_downscale:
        shapes["downscale.w"] = (80, EMBED_DIM)
    return shapes


def init_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Uniform +-sqrt(3/fan-in) weights (unit input variance preserved), zero
    biases except LSTM forget gates at 1. The downscale matrix sees a unit-norm
    vector rather than unit-variance coordinates, so it gets unit weight
    variance instead of fan-in scaling. At desk sizes anything weaker decays
    the encoder states to the point where attention cannot break symmetry."""
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        rng = derive_rng(seed, "init", name)
        if name.endswith(".b"):
            data = np.zeros(shape)
            if name == "dec.b" or (name.startswith("enc.") and ".proj." not in name):
                units = shape[0] // 4
                data[units : 2 * units] = 1.0  # forget gate
        else:
            fan_in = 1 if name == "downscale.w" else shape[1] if name == "att.conv" else shape[0]
            bound = np.sqrt(3.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, name=name)
    return Model(cfg, params)


# -- conditioning on tape -------------------------------------------------------


def condition_input(tape: Tape, model: Model, frames: np.ndarray, embedding: np.ndarray | None) -> Tensor:
    """Stack an embedding onto normalized features, on tape, so the gradient
    reaches the downscale matrix when the strategy trains one."""
    cfg = model.config
    if cfg.strategy is None:
        if embedding is not None:
            raise ShapeError("model is unconditioned but an embedding was supplied")
        x = constant(frames, name="features")
        if frames.shape[1] != cfg.input_width:
            raise ShapeError(f"input width {frames.shape[1]}, model expects {cfg.input_width}")
        return x
    if embedding is None:
        raise ShapeError(f"strategy {cfg.strategy} requires a speaker embedding")
    strategy = StackingStrategy.from_name(cfg.strategy)
    T = frames.shape[0]
    x = constant(frames, name="features")
    e = constant(np.asarray(embedding, dtype=np.float64), name="embedding")
    if strategy.needs_downscale:
        we = tape.matmul(model.params["downscale.w"], e)  # (80,)
    if strategy.mode == "vertical":
        rows = tape.tile_rows(we if strategy.needs_downscale else e, T)
        return tape.concat([x, rows], axis=1)
    if strategy.needs_downscale:  # horizontal-downscale
        return tape.concat([tape.tile_rows(we, 1), x], axis=0)
    pad = constant(np.zeros((T, EMBED_DIM - frames.shape[1])))
    padded = tape.concat([x, pad], axis=1)
    return tape.concat([tape.tile_rows(e, 1), padded], axis=0)


# -- encoder -------------------------------------------------------------------


@dataclass
class EncoderOutput:
    """Encoder state sequence, same frame rate as the input (no subsampling)."""

    states: Tensor  # (T', proj_units)

    @property
    def length(self) -> int:
        return self.states.data.shape[0]

    @property
    def width(self) -> int:
        return self.states.data.shape[1]


def encode(tape: Tape, model: Model, x: Tensor) -> EncoderOutput:
    """(T', d') -> (T', proj_units); each BLSTM layer feeds a tanh projection."""
    cfg = model.config
    if x.data.ndim != 2 or x.data.shape[1] != cfg.input_width:
        raise ShapeError(f"encoder input {x.data.shape}, expected (T, {cfg.input_width})")
    h = x
    for layer in range(cfg.enc_layers):
        outs = []
        for direction, reverse in (("fwd", False), ("bwd", True)):
            cell = model.enc_lstm(layer, direction)
            zx = tape.add_bias(tape.matmul(h, cell.w_x), cell.b)
            outs.append(tape.lstm_sequence(zx, cell.w_h, reverse=reverse))
        both = tape.concat(outs, axis=1)
        w, b = model.params[f"enc.l{layer}.proj.w"], model.params[f"enc.l{layer}.proj.b"]
        h = tape.tanh(tape.add_bias(tape.matmul(both, w), b))
    return EncoderOutput(states=h)


# -- attention decoder -----------------------------------------------------------


@dataclass
class AttentionContext:
    """Per-utterance cache: encoder states and their attention projection."""

    states: Tensor  # (T', P)
    states_proj: Tensor  # (T', att_dim)

    @property
    def length(self) -> int:
        return self.states.data.shape[0]


@dataclass
class DecoderState:
    q: Tensor  # decoder hidden (dec_units,)
    cell: Tensor  # decoder LSTM cell (dec_units,)
    att_weights: Tensor  # (T',) nonneg, sums to 1
    context: Tensor  # (proj_units,)
    prev_label: int  # attention-space id of the label that produced this state


def prepare_attention(tape: Tape, model: Model, enc: EncoderOutput) -> AttentionContext:
    return AttentionContext(
        states=enc.states, states_proj=tape.matmul(enc.states, model.params["att.w_h"])
    )


def initial_decoder_state(model: Model, length: int) -> DecoderState:
    cfg = model.config
    return DecoderState(
        q=constant(np.zeros(cfg.dec_units)),
        cell=constant(np.zeros(cfg.dec_units)),
        att_weights=constant(np.full(length, 1.0 / length)),
        context=constant(np.zeros(cfg.proj_units)),
        prev_label=model.vocab.eos_id,  # <sos>
    )


def attend_step(
    tape: Tape, model: Model, ctx: AttentionContext, state: DecoderState, y_prev: int
) -> tuple[Tensor, DecoderState]:
    """One teacher-forcing / decoding step.

    Location-aware scores: w^T tanh(W_q q + W_h h_t + W_f (conv * a_prev)_t),
    softmax over time, context = weighted sum of encoder states, then one
    decoder LSTM step on [embed(y_prev) ; context] and log-softmax output.
    """
    p = model.params
    T = ctx.length
    conv = tape.conv1d_same(state.att_weights, p["att.conv"])  # (T', channels)
    loc = tape.matmul(conv, p["att.w_f"])  # (T', att_dim)
    qfeat = tape.tile_rows(tape.matmul(state.q, p["att.w_q"]), T)
    scores = tape.matmul(tape.tanh(tape.add(tape.add(ctx.states_proj, qfeat), loc)), p["att.v"])
    a = tape.softmax(scores, axis=-1)
    r = tape.matmul(a, ctx.states)  # (proj_units,)
    emb = tape.take_row(p["dec.embed"], y_prev)
    x = tape.concat([emb, r], axis=0)
    q, cell = tape.lstm_step(model.dec_lstm(), x, (state.q, state.cell))
    logits = tape.add(tape.matmul(q, p["out.w"]), p["out.b"])
    logdist = tape.log_softmax(logits, axis=-1)
    new_state = DecoderState(q=q, cell=cell, att_weights=a, context=r, prev_label=y_prev)
    return logdist, new_state


def attention_loss(
    tape: Tape, model: Model, enc: EncoderOutput, label_ids: list[int]
) -> tuple[Tensor, int, int]:
    """Teacher-forced -sum log p(y_u|...), eos included; also counts greedy hits."""
    if not label_ids:
        raise ShapeError("attention loss needs a nonempty label sequence")
    vocab = model.vocab
    for y in label_ids:
        if not 0 <= y < vocab.size:
            raise ShapeError(f"label id {y} outside vocab of size {vocab.size}")
    ctx = prepare_attention(tape, model, enc)
    state = initial_decoder_state(model, ctx.length)
    targets = list(label_ids) + [vocab.eos_id]
    prev = vocab.eos_id  # <sos>
    loss = None
    correct = 0
    for y in targets:
        logdist, state = attend_step(tape, model, ctx, state, prev)
        step = tape.scale(tape.take_index(logdist, y), -1.0)
        loss = step if loss is None else tape.add(loss, step)
        correct += int(np.argmax(logdist.data) == y)
        prev = y
    return loss, correct, len(targets)


# -- CTC -----------------------------------------------------------------------


def extended_labels(label_ids: list[int]) -> np.ndarray:
    """Blank-interleaved CTC-space row for the target: [b, y1, b, y2, ..., b]."""
    ext = np.zeros(2 * len(label_ids) + 1, dtype=np.int64)
    ext[1::2] = np.asarray(label_ids, dtype=np.int64) + 1  # CTC space: blank=0
    return ext


def min_ctc_frames(label_ids: list[int]) -> int:
    """Shortest alignable input: one frame per label plus one per adjacent repeat."""
    repeats = sum(1 for a, b in zip(label_ids, label_ids[1:]) if a == b)
    return len(label_ids) + repeats


@dataclass
class CtcLattice:
    log_posteriors: Tensor  # (T', V+1), rows normalized
    label_ids: list[int]
    extended: np.ndarray = field(init=False)

    def __post_init__(self):
        self.extended = extended_labels(self.label_ids)


def ctc_log_posteriors(tape: Tape, model: Model, enc: EncoderOutput) -> Tensor:
    logits = tape.add_bias(tape.matmul(enc.states, model.params["ctc.w"]), model.params["ctc.b"])
    return tape.log_softmax(logits, axis=-1)


def make_lattice(tape: Tape, model: Model, enc: EncoderOutput, label_ids: list[int]) -> CtcLattice:
    for y in label_ids:
        if not 0 <= y < model.vocab.size:
            raise ShapeError(f"label id {y} outside vocab of size {model.vocab.size}")
    return CtcLattice(log_posteriors=ctc_log_posteriors(tape, model, enc), label_ids=list(label_ids))


def _ctc_alpha(lp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Log-space forward lattice (T, S) with stay/advance/skip transitions."""
    T = lp.shape[0]
    S = ext.size
    skip_ok = np.zeros(S, dtype=bool)
    skip_ok[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        best = prev.copy()
        best[1:] = np.logaddexp(best[1:], prev[:-1])
        with np.errstate(invalid="ignore"):
            best[2:] = np.where(skip_ok[2:], np.logaddexp(best[2:], prev[:-2]), best[2:])
        alpha[t] = best + lp[t, ext]
    return alpha


def _ctc_beta(lp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    T = lp.shape[0]
    S = ext.size
    skip_ok = np.zeros(S, dtype=bool)
    skip_ok[: S - 2] = (ext[: S - 2] != 0) & (ext[: S - 2] != ext[2:])
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        best = nxt.copy()
        best[:-1] = np.logaddexp(best[:-1], nxt[1:])
        with np.errstate(invalid="ignore"):
            best[: S - 2] = np.where(skip_ok[: S - 2], np.logaddexp(best[: S - 2], nxt[2:]), best[: S - 2])
        beta[t] = best + lp[t, ext]
    return beta


def ctc_loss(tape: Tape, lattice: CtcLattice) -> Tensor:
    """-log p_ctc(Y|X); raises when no monotone alignment exists.

    Gradient with respect to the log-posteriors is the negative state
    posterior gamma, aggregated per CTC label.
    """
    lp_tensor = lattice.log_posteriors
    lp = lp_tensor.data
    ext = lattice.extended
    T = lp.shape[0]
    if min_ctc_frames(lattice.label_ids) > T:
        raise NoAlignmentError(
            f"{len(lattice.label_ids)} labels cannot align to {T} frames"
        )
    alpha = _ctc_alpha(lp, ext)
    tail = alpha[T - 1, -1] if ext.size == 1 else np.logaddexp(alpha[T - 1, -1], alpha[T - 1, -2])
    if not np.isfinite(tail):
        raise NoAlignmentError("no alignment path has nonzero probability")
    out = Tensor(np.asarray(-tail))

    def bw(g: np.ndarray) -> None:
        if not lp_tensor.requires_grad:
            return
        beta = _ctc_beta(lp, ext)
        # state posteriors; lp counted in both alpha and beta, remove once
        log_gamma = alpha + beta - lp[:, ext] - tail
        grad = np.zeros_like(lp)
        gamma = np.exp(log_gamma)
        for s, k in enumerate(ext):
            grad[:, k] -= gamma[:, s]
        lp_tensor.accumulate(float(g) * grad)

    return tape.custom(out, (lp_tensor,), bw)


def hybrid_loss(tape: Tape, l_ctc: Tensor, l_att: Tensor, lam: float) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ShapeError(f"lambda {lam} outside [0, 1]")
    return tape.add(tape.scale(l_ctc, lam), tape.scale(l_att, 1.0 - lam))


@dataclass
class LossStats:
    loss: float
    ctc: float
    att: float
    correct: int
    steps: int


def model_loss(
    tape: Tape,
    model: Model,
    frames: np.ndarray,
    embedding: np.ndarray | None,
    label_ids: list[int],
) -> tuple[Tensor, LossStats]:
    """Full hybrid loss for one utterance (teacher-forced)."""
    x = condition_input(tape, model, frames, embedding)
    enc = encode(tape, model, x)
    l_att, correct, steps = attention_loss(tape, model, enc, label_ids)
    lam = model.config.lambda_train
    if lam > 0.0:
        lattice = make_lattice(tape, model, enc, label_ids)
        l_ctc = ctc_loss(tape, lattice)
        loss = hybrid_loss(tape, l_ctc, l_att, lam)
        ctc_val = float(l_ctc.data)
    else:
        loss = l_att
        ctc_val = float("nan")
    return loss, LossStats(
        loss=float(loss.data), ctc=ctc_val, att=float(l_att.data), correct=correct, steps=steps
    )


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, model: Model, epoch: int = 0, dev_accuracy: float = 0.0, extra: dict | None = None) -> None:
    """CKPT1: magic, u32 version, u32 tensor count, (name, rank, dims, f64 data)
    records, then a UTF-8 JSON metadata block. Little-endian throughout."""
    meta = {
        "config": asdict(model.config),
        "epoch": epoch,
        "dev_accuracy": dev_accuracy,
    }
    if extra:
        meta.update(extra)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(model.params)))
        for name, tensor in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            dims = tensor.data.shape
            fh.write(struct.pack("<I", len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(tensor.data.astype("<f8").tobytes())
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_checkpoint(path) -> tuple[Model, dict]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ArtifactError(f"checkpoint {path}: {exc}") from None
    with fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ArtifactError(f"checkpoint {path}: bad magic")
        header = fh.read(8)
        if len(header) != 8:
            raise ArtifactError(f"checkpoint {path}: truncated header")
        version, count = struct.unpack("<II", header)
        if version != _CKPT_VERSION:
            raise ArtifactError(f"checkpoint {path}: unsupported version {version}")
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _need(fh, 4, path))
            name = _need(fh, name_len, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _need(fh, 4, path))
            dims = struct.unpack(f"<{rank}I", _need(fh, 4 * rank, path))
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(_need(fh, 8 * n, path), dtype="<f8").reshape(dims).copy()
            params[name] = Tensor(data, name=name)
        (meta_len,) = struct.unpack("<I", _need(fh, 4, path))
        meta = json.loads(_need(fh, meta_len, path).decode("utf-8"))
    cfg_dict = dict(meta["config"])
    cfg_dict["labels"] = tuple(cfg_dict["labels"])
    try:
        cfg = ModelConfig(**cfg_dict)
    except TypeError as exc:
        raise ArtifactError(f"checkpoint {path}: bad config block ({exc})") from None
    model = Model(cfg, params)
    expected = _param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        surplus = sorted(set(params) - set(expected))
        raise ArtifactError(f"checkpoint {path}: tensor set mismatch (missing {missing}, surplus {surplus})")
    for name, shape in expected.items():
        if params[name].data.shape != shape:
            raise ArtifactError(f"checkpoint {path}: {name} has shape {params[name].data.shape}, expected {shape}")
    return model, meta


def _need(fh, n: int, path) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ArtifactError(f"checkpoint {path}: truncated")
    return raw
