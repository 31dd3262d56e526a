"""Inter-judge agreement on binary verdicts: Cohen's and Fleiss' kappa, Pearson r."""

from __future__ import annotations

import itertools
import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from structmem.errors import StructMemError

logger = logging.getLogger(__name__)


class DegenerateMarginals(StructMemError):
    """A statistic is undefined because the verdict marginals leave no variation."""


def cohen_kappa(a: Sequence[int], b: Sequence[int]) -> float:
    """Cohen's kappa for two raters over the same items (any hashable labels).

    Raises DegenerateMarginals when either rater gives a single label to
    every item, or when chance agreement is 1.
    """
    if len(a) != len(b):
        raise ValueError("raters must label the same items")
    n = len(a)
    if n == 0:
        raise DegenerateMarginals("no items")
    if len(set(a)) < 2 or len(set(b)) < 2:
        raise DegenerateMarginals("a rater gave the same verdict to every item")
    labels = sorted(set(a) | set(b))
    p_o = sum(x == y for x, y in zip(a, b)) / n
    p_e = sum((list(a).count(c) / n) * (list(b).count(c) / n) for c in labels)
    if p_e >= 1.0:
        raise DegenerateMarginals("chance agreement is 1")
    return (p_o - p_e) / (1.0 - p_e)


def fleiss_kappa(counts: np.ndarray | Sequence[Sequence[int]]) -> float:
    """Fleiss' kappa from an items x categories matrix of rating counts.

    Every row must sum to the same number of raters (at least 2).
    """
    m = np.asarray(counts, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError("counts must be a non-empty 2-D matrix")
    raters = m.sum(axis=1)
    if not np.all(raters == raters[0]) or raters[0] < 2:
        raise ValueError("every item needs the same number (>= 2) of ratings")
    n_items, r = m.shape[0], raters[0]
    p_j = m.sum(axis=0) / (n_items * r)
    p_i = (np.sum(m * m, axis=1) - r) / (r * (r - 1))
    p_bar = p_i.mean()
    p_e = float(np.sum(p_j * p_j))
    if p_e >= 1.0:
        raise DegenerateMarginals("every rating falls in one category")
    return float((p_bar - p_e) / (1.0 - p_e))


def verdict_matrix(vectors: Sequence[Sequence[int]], categories: Sequence = (0, 1)) -> np.ndarray:
    """Items x categories count matrix from one verdict vector per rater."""
    cols = {c: j for j, c in enumerate(categories)}
    n = len(vectors[0])
    m = np.zeros((n, len(categories)), dtype=np.int64)
    for vec in vectors:
        if len(vec) != n:
            raise ValueError("raters must label the same items")
        for i, v in enumerate(vec):
            m[i, cols[v]] += 1
    return m


def pearson(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Pearson r and its two-sided p-value."""
    x, y = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(x) < 2 or np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateMarginals("a constant verdict vector has no correlation")
    res = stats.pearsonr(x, y)
    return float(res.statistic), float(res.pvalue)


@dataclass
class PairAgreement:
    judges: tuple[str, str]
    cohen_kappa: float | None
    pearson_r: float | None
    p_value: float | None
    note: str = ""


@dataclass
class AgreementReport:
    judges: list[str]
    questions: int
    dropped: int
    pairs: list[PairAgreement] = field(default_factory=list)
    fleiss_kappa: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def pair(self, a: str, b: str) -> PairAgreement:
        for p in self.pairs:
            if set(p.judges) == {a, b}:
                return p
        raise KeyError((a, b))


def _as_binary(v) -> int:
    if v in (1, True, "correct"):
        return 1
    if v in (0, False, "incorrect"):
        return 0
    raise ValueError(f"not a binary verdict: {v!r}")


def agreement_stats(verdicts: Mapping[str, Mapping[str, object]]) -> AgreementReport:
    """Agreement across judges given ``{judge: {question_id: verdict}}``.

    Verdicts may be 0/1, booleans, or ``correct``/``incorrect``; ``None``
    means unscored. Only questions scored by every judge are used and the
    rest are counted as dropped. Undefined statistics are reported as
    ``None`` with a note.
    """
    judges = list(verdicts)
    if len(judges) < 2:
        raise ValueError("agreement needs at least two judges")
    all_ids = set().union(*(set(v) for v in verdicts.values()))
    shared = sorted(
        q for q in all_ids if all(verdicts[j].get(q) is not None for j in judges)
    )
    vectors = {j: [_as_binary(verdicts[j][q]) for q in shared] for j in judges}
    report = AgreementReport(judges=judges, questions=len(shared), dropped=len(all_ids) - len(shared))
    for a, b in itertools.combinations(judges, 2):
        pair = PairAgreement((a, b), None, None, None)
        notes = []
        try:
            pair.cohen_kappa = cohen_kappa(vectors[a], vectors[b])
        except DegenerateMarginals as exc:
            notes.append(f"kappa undefined: {exc}")
        try:
            pair.pearson_r, pair.p_value = pearson(vectors[a], vectors[b])
        except DegenerateMarginals as exc:
            notes.append(f"r undefined: {exc}")
        pair.note = "; ".join(notes)
        report.pairs.append(pair)
    if shared:
        try:
            report.fleiss_kappa = fleiss_kappa(verdict_matrix([vectors[j] for j in judges]))
        except DegenerateMarginals as exc:
            report.note = f"Fleiss kappa undefined: {exc}"
    else:
        report.note = "no question was scored by every judge"
    return report


def verdict_sets(report_verdicts: Sequence[Mapping]) -> dict[str, dict[str, str | None]]:
    """Group serialized JudgeVerdict records by judge."""
    out: dict[str, dict[str, str | None]] = {}
    for v in report_verdicts:
        out.setdefault(v["judge"], {})[v["question_id"]] = v["verdict"]
    return out
