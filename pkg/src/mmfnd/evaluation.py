"""Metrics, the manipulation robustness grid, majority voting and report rendering."""

from __future__ import annotations

import csv
import enum
import io
import math
import os
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .core import DatasetSplit, Label, MmfndError
from .models import Prediction


class LengthMismatch(MmfndError):
    pass


class UnknownId(MmfndError):
    pass


class EvenMemberCount(MmfndError):
    pass


class MisalignedIds(MmfndError):
    pass


class MissingCache(MmfndError):
    pass


class Averaging(str, enum.Enum):
    MACRO = "MACRO"
    MICRO = "MICRO"
    PER_CLASS = "PER_CLASS"


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class EvalReport:
    """Metrics for one prediction set.

    ``confusion[t][p]`` counts posts of true label ``t`` predicted as ``p``
    (index 0 = FAKE, 1 = REAL). FAKE is the positive class. With
    ``PER_CLASS`` averaging the headline P/R/F1 are those of FAKE.
    """

    set_name: str
    ground_truth_counts: tuple[int, int]
    predicted_counts: tuple[int, int]
    accuracy: float
    precision: float
    recall: float
    f1: float
    averaging: Averaging
    per_class: dict[Label, ClassMetrics]
    confusion: tuple[tuple[int, int], tuple[int, int]]
    zero_division: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return sum(self.ground_truth_counts)

    @property
    def n_correct(self) -> int:
        return self.confusion[0][0] + self.confusion[1][1]


def _ratio(num: int, den: int, what: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(what)
        return 0.0
    return num / den


def _harmonic(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def compute_metrics(
    predictions: Sequence[Prediction],
    labels: Union[Mapping[str, Label], Sequence[Label]],
    averaging: Averaging | str = Averaging.MACRO,
    set_name: str = "",
) -> EvalReport:
    """Confusion-matrix metrics. ``labels`` is either a mapping from post id
    or a sequence aligned with ``predictions``.

    Empty precision/recall denominators give 0.0 and are listed in
    ``zero_division``.
    """
    averaging = Averaging(averaging)
    if isinstance(labels, Mapping):
        if len(labels) != len(predictions):
            raise LengthMismatch(f"{len(predictions)} predictions for {len(labels)} labels")
        try:
            truth = [Label(labels[p.post_id]) for p in predictions]
        except KeyError as exc:
            raise UnknownId(f"no label for post {exc.args[0]!r}") from None
    else:
        if len(labels) != len(predictions):
            raise LengthMismatch(f"{len(predictions)} predictions for {len(labels)} labels")
        truth = [Label(t) for t in labels]
    if not predictions:
        raise LengthMismatch("no predictions to evaluate")

    conf = [[0, 0], [0, 0]]
    for p, t in zip(predictions, truth):
        conf[int(t)][int(p.label)] += 1
    n = len(predictions)
    flags: list[str] = []
    per_class = {}
    for c in (Label.FAKE, Label.REAL):
        tp = conf[c][c]
        pred_c = conf[0][c] + conf[1][c]
        true_c = conf[c][0] + conf[c][1]
        prec = _ratio(tp, pred_c, f"precision[{c.name}]", flags)
        rec = _ratio(tp, true_c, f"recall[{c.name}]", flags)
        per_class[c] = ClassMetrics(prec, rec, _harmonic(prec, rec), true_c)
    accuracy = (conf[0][0] + conf[1][1]) / n
    if averaging is Averaging.MACRO:
        precision = (per_class[Label.FAKE].precision + per_class[Label.REAL].precision) / 2
        recall = (per_class[Label.FAKE].recall + per_class[Label.REAL].recall) / 2
        f1 = (per_class[Label.FAKE].f1 + per_class[Label.REAL].f1) / 2
    elif averaging is Averaging.MICRO:
        precision = recall = accuracy
        f1 = _harmonic(precision, recall)
    else:
        fake = per_class[Label.FAKE]
        precision, recall, f1 = fake.precision, fake.recall, fake.f1
    return EvalReport(
        set_name=set_name,
        ground_truth_counts=(conf[0][0] + conf[0][1], conf[1][0] + conf[1][1]),
        predicted_counts=(conf[0][0] + conf[1][0], conf[0][1] + conf[1][1]),
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        averaging=averaging,
        per_class=per_class,
        confusion=((conf[0][0], conf[0][1]), (conf[1][0], conf[1][1])),
        zero_division=tuple(flags),
    )


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class EnsembleSpec:
    member_checkpoints: tuple[str, ...]
    rule: str = "MAJORITY"

    def __post_init__(self):
        if len(self.member_checkpoints) % 2 == 0:
            raise EvenMemberCount(f"binary majority voting needs an odd number of members, got {len(self.member_checkpoints)}")
        if self.rule != "MAJORITY":
            raise ValueError(f"unsupported voting rule {self.rule!r}")


def majority_vote(member_predictions: Sequence[Sequence[Prediction]]) -> list[Prediction]:
    """Per post, the most common member label. The score is the members'
    mean score and is informational only: it may disagree with the voted label."""
    m = len(member_predictions)
    if m == 0 or m % 2 == 0:
        raise EvenMemberCount(f"binary majority voting needs an odd number of members, got {m}")
    first = member_predictions[0]
    for other in member_predictions[1:]:
        if len(other) != len(first) or any(a.post_id != b.post_id for a, b in zip(first, other)):
            raise MisalignedIds("member predictions do not cover the same posts in the same order")
    out = []
    for k, ref in enumerate(first):
        votes = [member[k] for member in member_predictions]
        n_real = sum(1 for v in votes if v.label == Label.REAL)
        label = Label.REAL if 2 * n_real > m else Label.FAKE
        # anchored mean: identical members reproduce their score bit for bit
        score = ref.score + math.fsum(v.score - ref.score for v in votes) / m
        out.append(Prediction(ref.post_id, score, label))
    return out


# ---------------------------------------------------------------------------
# manipulation grid

GRID_SETS = ("Original", "FakeIm", "RealIm", "EvtRep", "EvtRem")
TOTAL = "Total"

Predictor = Callable[[str, DatasetSplit], Sequence[Prediction]]


def constant_predictor(label: Label) -> Predictor:
    score = 1.0 if label == Label.REAL else 0.0

    def predict(set_name: str, split: DatasetSplit) -> list[Prediction]:
        return [Prediction(p.id, score, Label(label)) for p in split]

    return predict


def ensemble_predictor(members: Sequence[Predictor]) -> Predictor:
    if len(members) % 2 == 0:
        raise EvenMemberCount(f"binary majority voting needs an odd number of members, got {len(members)}")

    def predict(set_name: str, split: DatasetSplit) -> list[Prediction]:
        return majority_vote([m(set_name, split) for m in members])

    return predict


@dataclass
class GridTable:
    set_names: tuple[str, ...]
    rows: dict[str, dict[str, EvalReport]] = field(default_factory=dict)

    def total(self, model: str) -> EvalReport:
        return self.rows[model][TOTAL]


def evaluate_manipulation_grid(
    models: Mapping[str, Predictor],
    test_sets: Mapping[str, DatasetSplit],
    averaging: Averaging | str = Averaging.MACRO,
) -> GridTable:
    """Evaluate every model on every named test set, plus a Total over the
    concatenation of all sets. Sets keep the order of ``test_sets``."""
    names = tuple(test_sets)
    table = GridTable(set_names=names)
    for model_name, predict in models.items():
        row: dict[str, EvalReport] = {}
        all_preds: list[Prediction] = []
        all_truth: list[Label] = []
        for set_name in names:
            split = test_sets[set_name]
            preds = list(predict(set_name, split))
            if [p.post_id for p in preds] != split.ids:
                raise MisalignedIds(f"{model_name} on {set_name}: predictions do not follow the set's posts")
            truth = split.labels()
            row[set_name] = compute_metrics(preds, truth, averaging, set_name)
            all_preds.extend(preds)
            all_truth.extend(truth)
        row[TOTAL] = compute_metrics(all_preds, all_truth, averaging, TOTAL)
        table.rows[model_name] = row
    return table


# ---------------------------------------------------------------------------
# rendering


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def _grid_rows(table: GridTable) -> tuple[list[str], list[list[str]]]:
    header = ["model"]
    for s in table.set_names:
        header += [f"{s}_Acc", f"{s}_NF", f"{s}_NR"]
    header += [f"{TOTAL}_Acc", f"{TOTAL}_NF", f"{TOTAL}_NR"]
    body = []
    for model, row in table.rows.items():
        cells = [model]
        for s in (*table.set_names, TOTAL):
            r = row[s]
            cells += [_fmt(r.accuracy), str(r.predicted_counts[0]), str(r.predicted_counts[1])]
        body.append(cells)
    return header, body


def _metric_rows(reports: Sequence[EvalReport]) -> tuple[list[str], list[list[str]], bool]:
    header = ["set", "averaging", "n_fake", "n_real", "N_F", "N_R", "Acc", "P", "R", "F1"]
    body, flagged = [], False
    for r in reports:
        mark = "*" if r.zero_division else ""
        flagged = flagged or bool(mark)
        body.append(
            [
                r.set_name,
                r.averaging.value,
                str(r.ground_truth_counts[0]),
                str(r.ground_truth_counts[1]),
                str(r.predicted_counts[0]),
                str(r.predicted_counts[1]),
                _fmt(r.accuracy),
                _fmt(r.precision) + mark,
                _fmt(r.recall) + mark,
                _fmt(r.f1) + mark,
            ]
        )
    return header, body, flagged


FOOTNOTE = "* a precision or recall denominator was zero; the value is reported as 0.0"


def render_report(table: GridTable | Sequence[EvalReport], fmt: str = "csv") -> str:
    """Render a grid or a list of reports as CSV or aligned text.

    Column order is fixed, numbers use three decimals, so output bytes only
    depend on the table.
    """
    if isinstance(table, GridTable):
        header, body = _grid_rows(table)
        flagged = False
    else:
        header, body, flagged = _metric_rows(list(table))
    if not body:
        raise ValueError("nothing to render")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
        out = buf.getvalue()
        return out + (f"# {FOOTNOTE}\n" if flagged else "")
    if fmt == "text":
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip()
                 for row in [header, *body]]
        if flagged:
            lines.append(FOOTNOTE)
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


# ---------------------------------------------------------------------------
# predictions file


def write_predictions(preds: Sequence[Prediction], path: str | os.PathLike) -> None:
    lines = ["post_id\tscore\tlabel\n"] + [f"{p.post_id}\t{p.score!r}\t{p.label.name}\n" for p in preds]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_predictions(path: str | os.PathLike) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "post_id\tscore\tlabel":
            raise MmfndError(f"{path}: not a predictions file")
        for line in fh:
            if line.strip():
                pid, score, label = line.rstrip("\n").split("\t")
                out.append(Prediction(pid, float(score), Label[label]))
    return out
