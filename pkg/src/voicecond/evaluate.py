"""WER scoring, sweep tables, and principal-component projections of encoder
states.

WER is aggregated as (S + D + I) / N over the whole set, never as a mean of
per-utterance rates. Alignment ties prefer substitution over insertion over
deletion, implemented by minimizing the tuple (cost, -subs, -ins) cell-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ArtifactError, ShapeError


# -- word error rate ---------------------------------------------------------------


@dataclass(frozen=True)
class WerCounts:
    substitutions: int
    deletions: int
    insertions: int
    ref_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_length


def wer(ref: Sequence[str], hyp: Sequence[str]) -> WerCounts:
    """Levenshtein alignment with unit costs over whitespace tokens."""
    if len(ref) == 0:
        raise ShapeError("empty reference: WER undefined")
    R, H = len(ref), len(hyp)
    # cell value: (cost, -substitutions, -insertions); lexicographic min
    # realizes the substitution > insertion > deletion tie preference
    prev = [(j, 0, -j) for j in range(H + 1)]
    for i in range(1, R + 1):
        cur = [(i, 0, 0)]
        for j in range(1, H + 1):
            eq = ref[i - 1] == hyp[j - 1]
            diag = prev[j - 1]
            diag = (diag[0] + (0 if eq else 1), diag[1] - (0 if eq else 1), diag[2])
            ins = (cur[j - 1][0] + 1, cur[j - 1][1], cur[j - 1][2] - 1)
            dele = (prev[j][0] + 1, prev[j][1], prev[j][2])
            cur.append(min(diag, ins, dele))
        prev = cur
    cost, neg_s, neg_i = prev[H]
    subs, ins = -neg_s, -neg_i
    return WerCounts(
        substitutions=subs, deletions=cost - subs - ins, insertions=ins, ref_length=R
    )


@dataclass
class UtteranceScore:
    uid: str
    counts: WerCounts


@dataclass
class ScoreReport:
    split: str
    condition: str  # closed (seen speakers) or open (held-out speakers)
    utterances: list[UtteranceScore] = field(default_factory=list)

    def totals(self) -> WerCounts:
        return WerCounts(
            substitutions=sum(u.counts.substitutions for u in self.utterances),
            deletions=sum(u.counts.deletions for u in self.utterances),
            insertions=sum(u.counts.insertions for u in self.utterances),
            ref_length=sum(u.counts.ref_length for u in self.utterances),
        )

    @property
    def wer(self) -> float:
        return self.totals().wer


def score_pairs(
    refs: Mapping[str, Sequence[str]],
    hyps: Mapping[str, Sequence[str]],
    split: str = "",
    condition: str = "",
) -> ScoreReport:
    report = ScoreReport(split=split, condition=condition)
    for uid in sorted(refs):
        if uid not in hyps:
            raise ArtifactError(f"no hypothesis for utterance {uid!r}")
        report.utterances.append(UtteranceScore(uid=uid, counts=wer(refs[uid], hyps[uid])))
    return report


def write_score_report(path, report: ScoreReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# split={report.split} condition={report.condition}\n")
        fh.write("utterance-id\tsub\tdel\tins\tref-len\twer\n")
        for u in report.utterances:
            c = u.counts
            fh.write(
                f"{u.uid}\t{c.substitutions}\t{c.deletions}\t{c.insertions}\t{c.ref_length}\t{c.wer:.4f}\n"
            )
        t = report.totals()
        fh.write(f"TOTAL\t{t.substitutions}\t{t.deletions}\t{t.insertions}\t{t.ref_length}\t{t.wer:.4f}\n")


def read_score_report(path) -> ScoreReport:
    try:
        lines = open(path, encoding="utf-8").read().splitlines()
    except OSError as exc:
        raise ArtifactError(f"score report {path}: {exc}") from None
    if not lines or not lines[0].startswith("# split="):
        raise ArtifactError(f"score report {path}: missing header")
    head = dict(part.split("=", 1) for part in lines[0][2:].split())
    report = ScoreReport(split=head.get("split", ""), condition=head.get("condition", ""))
    for line in lines[2:]:
        uid, s, d, i, n, _ = line.split("\t")
        if uid == "TOTAL":
            continue
        report.utterances.append(
            UtteranceScore(uid=uid, counts=WerCounts(int(s), int(d), int(i), int(n)))
        )
    return report


# -- sweeps -------------------------------------------------------------------------


@dataclass
class SweepCell:
    row: str
    column: str
    report: ScoreReport | None
    error: str | None = None

    @property
    def absent(self) -> bool:
        return self.report is None


@dataclass
class SweepTable:
    kind: str
    cells: list[SweepCell]

    def cell(self, row: str, column: str) -> SweepCell:
        for c in self.cells:
            if (c.row, c.column) == (row, column):
                return c
        raise KeyError((row, column))


def run_sweep(
    kind: str, cells: Mapping[tuple[str, str], Callable[[], ScoreReport]]
) -> SweepTable:
    """Evaluate each cell; a missing artifact marks the cell absent and the
    sweep continues."""
    out: list[SweepCell] = []
    for row, column in sorted(cells):
        try:
            report = cells[(row, column)]()
        except ArtifactError as exc:
            out.append(SweepCell(row=row, column=column, report=None, error=str(exc)))
            continue
        out.append(SweepCell(row=row, column=column, report=report))
    return SweepTable(kind=kind, cells=out)


def write_sweep(path, table: SweepTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# sweep={table.kind}\n")
        fh.write("row\tcolumn\twer\tsub\tdel\tins\tref-len\tnote\n")
        for c in table.cells:
            if c.absent:
                fh.write(f"{c.row}\t{c.column}\tabsent\t-\t-\t-\t-\t{c.error}\n")
            else:
                t = c.report.totals()
                fh.write(
                    f"{c.row}\t{c.column}\t{c.report.wer:.4f}\t{t.substitutions}\t{t.deletions}"
                    f"\t{t.insertions}\t{t.ref_length}\t\n"
                )


def format_sweep(table: SweepTable) -> str:
    """Human-readable grid: rows x columns of WER percentages."""
    rows = sorted({c.row for c in table.cells})
    cols = sorted({c.column for c in table.cells})
    by_key = {(c.row, c.column): c for c in table.cells}
    width = max([len(r) for r in rows] + [10])
    header = " ".join([f"{table.kind:<{width}}"] + [f"{c:>10}" for c in cols])
    lines = [header]
    for r in rows:
        parts = [f"{r:<{width}}"]
        for c in cols:
            cell = by_key.get((r, c))
            if cell is None or cell.absent:
                parts.append(f"{'absent':>10}")
            else:
                parts.append(f"{100.0 * cell.report.wer:>9.2f}%")
        lines.append(" ".join(parts))
    return "\n".join(lines)


# -- encoder-state projection ----------------------------------------------------------


@dataclass
class ProjectionDump:
    coordinates: np.ndarray  # (T', k)
    variance_ratios: np.ndarray  # (k,) non-increasing
    components: np.ndarray  # (H, k), orthonormal columns
    mean: np.ndarray  # (H,)


def project_encoder_states(states, k: int) -> ProjectionDump:
    """Top-k principal components of the encoder states over time.

    Components are orthonormal; each component's sign is fixed by making its
    largest-magnitude coordinate positive, so dumps are fully deterministic.
    """
    h = states.states.data if hasattr(states, "states") else np.asarray(states, dtype=np.float64)
    if h.ndim != 2:
        raise ShapeError(f"encoder states must be (T', H), got {h.shape}")
    T, H = h.shape
    if T < 2:
        raise ShapeError(f"projection needs at least 2 frames, got {T}")
    if not 1 <= k <= H:
        raise ShapeError(f"k={k} outside [1, {H}]")
    mean = h.mean(axis=0)
    centered = h - mean
    cov = centered.T @ centered / (T - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    total = float(eigvals.sum())
    ratios = eigvals[:k] / total if total > 0.0 else np.zeros(k)
    components = eigvecs[:, :k]
    coords = centered @ components
    for j in range(k):
        peak = np.argmax(np.abs(coords[:, j]))
        if coords[peak, j] < 0.0:
            coords[:, j] *= -1.0
            components[:, j] *= -1.0
    return ProjectionDump(
        coordinates=coords, variance_ratios=ratios, components=components, mean=mean
    )


def write_projection(path, dump: ProjectionDump) -> None:
    """CSV: header `pc1,..,pck,variance_ratios=r1|..|rk`, one frame per row."""
    k = dump.coordinates.shape[1]
    names = ",".join(f"pc{j + 1}" for j in range(k))
    ratios = "|".join(f"{r:.6f}" for r in dump.variance_ratios)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{names},variance_ratios={ratios}\n")
        for row in dump.coordinates:
            fh.write(",".join(f"{v:.8f}" for v in row) + "\n")


def read_projection(path) -> tuple[np.ndarray, np.ndarray]:
    """(coordinates, variance ratios) back from the CSV."""
    try:
        lines = open(path, encoding="utf-8").read().splitlines()
    except OSError as exc:
        raise ArtifactError(f"projection {path}: {exc}") from None
    if not lines or "variance_ratios=" not in lines[0]:
        raise ArtifactError(f"projection {path}: missing header")
    ratios = np.array([float(v) for v in lines[0].rsplit("=", 1)[1].split("|")])
    coords = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    return coords, ratios
