"""Command-line pipelines: corpus, mix, embed, train, decode, score, sweep,
project.

Exit codes: 0 success, 2 bad arguments or validation failure, 3 missing or
invalid input artifact, 4 numerical failure, 5 no-speech / no-alignment.
Every artifact is written to a temp name and renamed into place, so an
interrupted run never leaves a truncated file. Each subcommand drops a
resolved-config snapshot (JSON) next to its outputs; the snapshot records the
effective parameters but no filesystem paths, keeping output trees comparable
across machines. Set VOICECOND_LOG=DEBUG|INFO|WARNING to adjust verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import evaluate, figures, mixer, net, search, train, workflows
from .autodiff import Tape
from .errors import (
    ArtifactError,
    NoAlignmentError,
    NoSpeechError,
    NumericalError,
    ShapeError,
    VoicecondError,
)
from .frontend import extract_logmel, normalize
from .speaker import STRATEGY_NAMES, read_embeddings, write_embeddings

log = logging.getLogger("voicecond.cli")

REGIME_FLAG_TO_MODE = {
    "overlapped": "overlapped-only",
    "transfer": "parameter-transfer",
    "multicond": "multi-condition",
}
STRATEGY_CHOICES = tuple(sorted(STRATEGY_NAMES))
SWEEP_KINDS = ("strategy", "refs", "regime", "speakers")
_PATH_ARGS = {"out", "corpus", "mix_dir", "embeddings", "checkpoint", "donor", "refs", "hyps", "func"}


# -- plumbing -----------------------------------------------------------------------


@contextmanager
def _atomic(path):
    """Write to a temp sibling, rename into place on success."""
    path = Path(path)
    tmp = path.parent / f"{path.stem}.{os.getpid()}.tmp{path.suffix}"
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _write_snapshot(out_dir, subcommand: str, args: argparse.Namespace) -> None:
    resolved = {
        k: v for k, v in sorted(vars(args).items()) if k not in _PATH_ARGS
    }
    resolved["subcommand"] = subcommand
    payload = json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n"
    with _atomic(Path(out_dir) / f"{subcommand}.config.json") as tmp:
        tmp.write_text(payload, encoding="utf-8")


def _apply_overrides(cfg: train.OptimizerConfig, pairs: list[str]) -> train.OptimizerConfig:
    """key=value overrides for optimizer fields, typed from the field defaults."""
    fields = {f.name: f.type for f in dataclasses.fields(cfg)}
    updates = {}
    for pair in pairs or []:
        key, eq, value = pair.partition("=")
        if not eq or key not in fields:
            raise ShapeError(f"bad override {pair!r}; known keys: {sorted(fields)}")
        current = getattr(cfg, key)
        updates[key] = type(current)(float(value)) if not isinstance(current, int) else int(value)
    return dataclasses.replace(cfg, **updates)


def _load_corpus(path) -> mixer.ToyCorpus:
    return mixer.load_corpus(path)


def _read_manifest(mix_dir, split: str) -> mixer.MixtureManifest:
    path = Path(mix_dir) / f"{split}.manifest"
    if not path.exists():
        raise ArtifactError(f"manifest {path} missing")
    return mixer.read_manifest(path)


def _load_embeddings(path) -> dict[str, np.ndarray]:
    if not Path(path).exists():
        raise ArtifactError(f"embedding file {path} missing")
    return read_embeddings(path)


def _strategy_or_none(name: str | None) -> str | None:
    return None if name in (None, "none") else name


# -- subcommands --------------------------------------------------------------------


def cmd_corpus(args) -> int:
    if len(set(args.vocab)) != len(args.vocab):
        raise ShapeError(f"vocab {args.vocab!r} has repeated tokens")
    cfg = mixer.ToyCorpusConfig(
        n_speakers_train=args.speakers_train,
        n_speakers_eval=args.speakers_eval,
        vocab=tuple(args.vocab),
        tokens_per_utterance=(args.tokens_min, args.tokens_max),
        utterances_per_speaker=args.utterances_per_speaker,
        seed=args.seed,
    )
    out = Path(args.out)
    if out.exists():
        raise ShapeError(f"output directory {out} already exists")
    corpus = mixer.synth_toy_corpus(cfg)
    tmp = out.parent / f"{out.name}.{os.getpid()}.tmp"
    try:
        mixer.save_corpus(corpus, tmp)
        _write_snapshot(tmp, "corpus", args)
        os.rename(tmp, out)
    except BaseException:
        import shutil

        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"corpus: {len(corpus.utterances)} utterances -> {out}")
    return 0


def cmd_mix(args) -> int:
    corpus = _load_corpus(args.corpus)
    counts = {"train": args.n_train, "dev": args.n_dev, "eval": args.n_eval}
    manifests = mixer.generate_manifest(
        corpus, counts, k_speakers=args.speakers_per_mix, seed=args.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, manifest in manifests.items():
        with _atomic(out / f"{split}.manifest") as tmp:
            mixer.write_manifest(tmp, manifest, corpus)
    _write_snapshot(out, "mix", args)
    sizes = " ".join(f"{s}={len(m.entries)}" for s, m in sorted(manifests.items()))
    print(f"mixtures: {sizes} -> {out}")
    return 0


def cmd_embed(args) -> int:
    corpus = _load_corpus(args.corpus)
    table = workflows.reference_embeddings(corpus, args.refs_per_speaker)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with _atomic(out) as tmp:
        write_embeddings(tmp, table)
    _write_snapshot(out.parent, "embed", args)
    print(f"embeddings: {len(table)} speakers x {args.refs_per_speaker} refs -> {out}")
    return 0


def _train_once(
    corpus,
    train_manifest,
    dev_manifest,
    embeddings,
    *,
    preset: str,
    strategy: str | None,
    regime_mode: str,
    donor_path,
    lambda_train: float,
    opt: train.OptimizerConfig,
    seed: int,
    checkpoint_path,
    log_path=None,
):
    vocab = workflows.corpus_vocab(corpus)
    model_cfg = workflows.model_config(preset, tuple(vocab.labels), strategy, lambda_train)
    regime = workflows.build_regime(
        corpus, train_manifest, embeddings, mode=regime_mode, donor_path=donor_path, vocab=vocab
    )
    dev = train.mixture_dataset(corpus, dev_manifest, embeddings, vocab).samples
    model = net.init_model(model_cfg, seed=seed)
    with _atomic(checkpoint_path) as ckpt_tmp:
        if log_path is None:
            best, state, history = train.train_model(
                model, regime, dev, opt, seed=seed, checkpoint_path=ckpt_tmp
            )
        else:
            with _atomic(log_path) as log_tmp:
                best, state, history = train.train_model(
                    model, regime, dev, opt, seed=seed,
                    checkpoint_path=ckpt_tmp, log_path=log_tmp,
                )
    return best, state, history


def cmd_train(args) -> int:
    corpus = _load_corpus(args.corpus)
    embeddings = _load_embeddings(args.embeddings) if args.embeddings else None
    opt = _apply_overrides(
        train.OptimizerConfig(epochs=args.epochs, batch_size=args.batch_size), args.set
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    best, state, history = _train_once(
        corpus,
        _read_manifest(args.mix_dir, "train"),
        _read_manifest(args.mix_dir, "dev"),
        embeddings,
        preset=args.preset,
        strategy=_strategy_or_none(args.strategy),
        regime_mode=REGIME_FLAG_TO_MODE[args.regime],
        donor_path=args.donor,
        lambda_train=args.lambda_train,
        opt=opt,
        seed=args.seed,
        checkpoint_path=out / "model.ckpt",
        log_path=out / "train.log",
    )
    with _atomic(out / "curves.png") as tmp:
        figures.plot_training_curves(history, tmp)
    _write_snapshot(out, "train", args)
    best_epoch = max(history, key=lambda r: (r.dev_accuracy, -r.epoch))
    print(
        f"trained {len(history)} epochs; best dev-acc {best_epoch.dev_accuracy:.4f} "
        f"at epoch {best_epoch.epoch}; skipped samples {state.skipped_samples} -> {out / 'model.ckpt'}"
    )
    return 0


def cmd_decode(args) -> int:
    corpus = _load_corpus(args.corpus)
    model, _meta = net.load_checkpoint(args.checkpoint)
    embeddings = _load_embeddings(args.embeddings) if args.embeddings else None
    vocab = net.Vocab(model.config.labels)
    samples = train.mixture_dataset(
        corpus, _read_manifest(args.mix_dir, args.split), embeddings, vocab
    ).samples
    lm = workflows.transcript_lm(corpus, vocab) if args.lm_weight > 0.0 else None
    cfg = search.DecodeConfig(
        beam_size=args.beam, lambda_decode=args.lambda_decode, lm_weight=args.lm_weight
    )
    hyps = workflows.decode_samples(model, samples, cfg, lm=lm, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _atomic(out / "decoded.tsv") as tmp:
        search.write_decoded(tmp, sorted(hyps.items()))
    refs = {s.uid: vocab.decode(s.label_ids) for s in samples}
    with _atomic(out / "references.tsv") as tmp:
        search.write_decoded(tmp, sorted(refs.items()))
    _write_snapshot(out, "decode", args)
    print(f"decoded {len(hyps)} utterances ({args.split}) -> {out / 'decoded.tsv'}")
    return 0


def cmd_score(args) -> int:
    refs = search.read_decoded(args.refs)
    hyps = search.read_decoded(args.hyps)
    report = evaluate.score_pairs(refs, hyps, split=args.split, condition=args.condition)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _atomic(out / "score.tsv") as tmp:
        evaluate.write_score_report(tmp, report)
    with _atomic(out / "score.png") as tmp:
        figures.plot_score_report(report, tmp)
    _write_snapshot(out, "score", args)
    t = report.totals()
    print(
        f"WER {100.0 * report.wer:.2f}% (S={t.substitutions} D={t.deletions} "
        f"I={t.insertions} N={t.ref_length}) -> {out / 'score.tsv'}"
    )
    return 0


# -- sweep --------------------------------------------------------------------------


def _sweep_cells(args, corpus, out: Path) -> list[workflows.ExperimentCell]:
    """One ExperimentCell per sweep row; checkpoints land under out/checkpoints.

    A cell's checkpoint acts as the run manifest: re-running the sweep trains
    only rows whose checkpoint is missing.
    """
    vocab = workflows.corpus_vocab(corpus)
    opt = _apply_overrides(
        train.OptimizerConfig(epochs=args.epochs, batch_size=args.batch_size), args.set
    )
    dc = search.DecodeConfig(beam_size=args.beam, lambda_decode=args.lambda_decode)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifests = {s: _read_manifest(args.mix_dir, s) for s in ("train", "dev", "eval")}
    base_embeddings = _load_embeddings(args.embeddings) if args.embeddings else None

    def cell(row, *, strategy, regime_mode="overlapped-only", embeddings=None, donor=None,
             train_manifest=None, test_manifests=None, seed=None, ckpt_name=None):
        ckpt = ckpt_dir / f"{args.kind}-{ckpt_name or row}.ckpt"
        tm = train_manifest or manifests["train"]
        tests = test_manifests or manifests
        emb = embeddings

        def trainer():
            _train_once(
                corpus, tm, manifests["dev"], emb,
                preset=args.preset, strategy=strategy, regime_mode=regime_mode,
                donor_path=donor, lambda_train=args.lambda_train, opt=opt,
                seed=args.seed if seed is None else seed, checkpoint_path=ckpt,
            )

        def scorer(split, model):
            samples = train.mixture_dataset(corpus, tests[split], emb, vocab).samples
            return workflows.decode_and_score(model, samples, dc, split, jobs=args.jobs)

        return workflows.ExperimentCell(
            row=row, checkpoint_path=str(ckpt), trainer=trainer, scorer=scorer
        )

    if args.kind == "strategy":
        if base_embeddings is None:
            raise ShapeError("strategy sweep needs --embeddings")
        return [
            cell(name, strategy=name, embeddings=base_embeddings)
            for name in STRATEGY_CHOICES
        ]

    if args.kind == "refs":
        available = min(
            sum(1 for u in corpus.utterances.values() if u.speaker_id == spk)
            for spk in workflows.speakers_of(corpus)
        )
        counts = [n for n in (1, 2, 5, 10) if n <= available]
        return [
            cell(
                f"refs-{n:02d}",
                strategy=args.strategy or "vertical-unchanged",
                embeddings=workflows.reference_embeddings(corpus, n),
            )
            for n in counts
        ]

    if args.kind == "regime":
        strategy = args.strategy or "vertical-unchanged"
        if base_embeddings is None:
            raise ShapeError("regime sweep needs --embeddings")
        donor_ckpt = ckpt_dir / "clean-donor.ckpt"
        if not donor_ckpt.exists():
            log.info("training clean donor for the transfer row")
            model_cfg = workflows.model_config(
                args.preset, tuple(vocab.labels), strategy, args.lambda_train
            )
            clean = train.clean_dataset(corpus, "train", base_embeddings, vocab)
            dev = train.clean_dataset(corpus, "dev", base_embeddings, vocab)
            regime = train.TrainingRegime(mode="overlapped-only", overlapped=[clean])
            with _atomic(donor_ckpt) as tmp:
                train.train_model(
                    net.init_model(model_cfg, seed=args.seed), regime, dev.samples,
                    opt, seed=args.seed, checkpoint_path=tmp,
                )
        return [
            cell("baseline", strategy=None, embeddings=None),
            cell("emb", strategy=strategy, embeddings=base_embeddings),
            cell(
                "emb-transfer", strategy=strategy, embeddings=base_embeddings,
                regime_mode="parameter-transfer", donor=donor_ckpt,
            ),
            cell(
                "emb-multicond", strategy=strategy, embeddings=base_embeddings,
                regime_mode="multi-condition",
            ),
        ]

    if args.kind == "speakers":
        if base_embeddings is None:
            raise ShapeError("speakers sweep needs --embeddings")
        counts = {s: len(manifests[s].entries) for s in ("train", "dev", "eval")}
        grids = {
            k: mixer.generate_manifest(corpus, counts, k_speakers=k, seed=args.seed)
            for k in (2, 3)
        }
        # two training configurations, each scored on both test grids
        return [
            cell(
                f"train{k_train}-test{k_test}",
                strategy=args.strategy or "vertical-unchanged",
                embeddings=base_embeddings,
                train_manifest=grids[k_train]["train"],
                test_manifests=grids[k_test],
                ckpt_name=f"train{k_train}",
            )
            for k_train in (2, 3)
            for k_test in (2, 3)
        ]

    raise ShapeError(f"unknown sweep kind {args.kind!r}")


def cmd_sweep(args) -> int:
    corpus = _load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = _sweep_cells(args, corpus, out)
    for c in cells:
        c.ensure_trained()
    table = workflows.sweep_cells(cells, kind=args.kind)
    with _atomic(out / "sweep.tsv") as tmp:
        evaluate.write_sweep(tmp, table)
    text = evaluate.format_sweep(table)
    with _atomic(out / "sweep.txt") as tmp:
        tmp.write_text(text + "\n", encoding="utf-8")
    with _atomic(out / "sweep.png") as tmp:
        figures.plot_sweep(table, tmp)
    _write_snapshot(out, "sweep", args)
    print(text)
    return 0


def cmd_project(args) -> int:
    corpus = _load_corpus(args.corpus)
    model, _meta = net.load_checkpoint(args.checkpoint)
    manifest = _read_manifest(args.mix_dir, args.split)
    if not 0 <= args.index < len(manifest.entries):
        raise ShapeError(
            f"mixture index {args.index} outside [0, {len(manifest.entries)})"
        )
    spec = manifest.entries[args.index]
    mixed, _scale = mixer.render_mixture(spec, corpus)
    frames = normalize(extract_logmel(mixed)).frames

    if model.config.strategy is None:
        conditionings: list[tuple[str, np.ndarray | None]] = [("unconditioned", None)]
    else:
        table = _load_embeddings(args.embeddings) if args.embeddings else None
        if table is None:
            raise ShapeError("projecting a conditioned model needs --embeddings")
        conditionings = [
            (spk, table[spk] if spk in table else None)
            for _, spk, _ in spec.components
        ]
        missing = [spk for spk, emb in conditionings if emb is None]
        if missing:
            raise ArtifactError(f"no embeddings for speakers {missing}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dumps: dict[str, evaluate.ProjectionDump] = {}
    for label, emb in conditionings:
        tape = Tape(record=False)
        enc = net.encode(tape, model, net.condition_input(tape, model, frames, emb))
        dump = evaluate.project_encoder_states(enc, args.components)
        dumps[label] = dump
        with _atomic(out / f"projection-{label}.csv") as tmp:
            evaluate.write_projection(tmp, dump)
    with _atomic(out / "projection.png") as tmp:
        figures.plot_projection(dumps, tmp)
    _write_snapshot(out, "project", args)
    labels = list(dumps)
    line = f"projected mixture {spec.mixture_id} under {labels} -> {out}"
    if len(labels) >= 2:
        dist = float(
            np.linalg.norm(dumps[labels[0]].coordinates - dumps[labels[1]].coordinates)
        )
        line += f"; frobenius({labels[0]}, {labels[1]}) = {dist:.4f}"
    print(line)
    return 0


# -- argument parsing ----------------------------------------------------------------


def _add_seed(p, default=0):
    p.add_argument("--seed", type=int, default=default, help="root seed for this step")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voicecond",
        description=__doc__.splitlines()[0],
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("corpus", help="synthesize the toy corpus")
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.add_argument("--speakers-train", type=int, default=8)
    p.add_argument("--speakers-eval", type=int, default=4)
    p.add_argument("--vocab", default="abcdef", help="one token per character")
    p.add_argument("--tokens-min", type=int, default=2)
    p.add_argument("--tokens-max", type=int, default=4)
    p.add_argument("--utterances-per-speaker", type=int, default=16)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("mix", help="sample overlapped-mixture manifests")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-dev", type=int, default=60)
    p.add_argument("--n-eval", type=int, default=80)
    p.add_argument("--speakers-per-mix", type=int, default=2, choices=(2, 3))
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("embed", help="average reference embeddings per speaker")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="embedding table file")
    p.add_argument("--refs-per-speaker", type=int, default=10)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train a recognizer on mixtures")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mix-dir", required=True, help="directory holding <split>.manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", help="speaker embedding table; omit for the unconditioned baseline")
    _add_seed(p)
    p.add_argument("--preset", choices=workflows.PRESETS, default="desk")
    p.add_argument("--strategy", choices=STRATEGY_CHOICES + ("none",), default="none")
    p.add_argument("--regime", choices=sorted(REGIME_FLAG_TO_MODE), default="overlapped")
    p.add_argument("--donor", help="donor checkpoint for --regime transfer")
    p.add_argument("--lambda-train", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="optimizer overrides (rho, epsilon, clip_norm, batch_size, epochs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="beam-search decode a mixture split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mix-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--split", choices=mixer.SPLITS, default="eval")
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--lambda-decode", type=float, default=0.3)
    p.add_argument("--lm-weight", type=float, default=0.0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="parallel decode workers (training always runs single-worker)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="WER of a decode against references")
    p.add_argument("--refs", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="")
    p.add_argument("--condition", default="", help="closed or open speaker set")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", help="train/score an experiment grid; resumes from existing checkpoints")
    p.add_argument("--kind", choices=SWEEP_KINDS, required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--mix-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings")
    _add_seed(p)
    p.add_argument("--preset", choices=workflows.PRESETS, default="desk")
    p.add_argument("--strategy", choices=STRATEGY_CHOICES)
    p.add_argument("--lambda-train", type=float, default=0.2)
    p.add_argument("--lambda-decode", type=float, default=0.3)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("project", help="principal components of encoder states for one mixture")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mix-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", help="needed for conditioned models; one dump per component speaker")
    p.add_argument("--split", choices=mixer.SPLITS, default="eval")
    p.add_argument("--index", type=int, default=0, help="mixture index within the split")
    p.add_argument("--components", type=int, default=2)
    p.set_defaults(func=cmd_project)

    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (NoSpeechError, NoAlignmentError)):
        return 5
    if isinstance(exc, NumericalError):
        return 4
    if isinstance(exc, (ArtifactError, FileNotFoundError)):
        return 3
    if isinstance(exc, (ShapeError, ValueError)):
        return 2
    raise exc


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("VOICECOND_LOG", "WARNING").upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed its message
        return 0 if exc.code in (0, None) else 2
    try:
        return args.func(args)
    except (VoicecondError, FileNotFoundError, ValueError) as exc:
        code = _exit_code(exc)
        message = " ".join(str(exc).split())
        print(f"error\tcode={code}\ttype={type(exc).__name__}\tmsg={message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
