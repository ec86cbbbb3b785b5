"""Cross-validation, ROC analysis and the three-way ablation report."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mil import MODES, Bag, canonical_mode, predict_bags, train_mil
from .tensor import TrainConfig

EVALUATED_MODELS = 10
TARGET_SENSITIVITY = 0.70
FFR_RANGES = (
    ("FFR <= 0.7", lambda f: f <= 0.7),
    ("0.7 < FFR < 0.9", lambda f: (f > 0.7) & (f < 0.9)),
    ("FFR >= 0.9", lambda f: f >= 0.9),
)


def spread(values) -> float:
    """Population standard deviation; exactly 0 for identical values (shifted by the first element)."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.std(v - v[0]))


# -- folds ---------------------------------------------------------------------

@dataclass
class FoldPlan:
    """Test-index sets of a k-fold split; fold ``i`` trains on everything else."""

    test_folds: list[np.ndarray]
    patient_ids: list[str] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.test_folds)

    @property
    def n(self) -> int:
        return int(sum(len(f) for f in self.test_folds))

    def test(self, i: int) -> np.ndarray:
        return self.test_folds[i]

    def train(self, i: int) -> np.ndarray:
        return np.sort(np.concatenate([f for j, f in enumerate(self.test_folds) if j != i]))

    def assignment(self) -> np.ndarray:
        """Fold index per patient."""
        out = np.empty(self.n, dtype=int)
        for i, f in enumerate(self.test_folds):
            out[f] = i
        return out

    def to_text(self) -> str:
        ids = self.patient_ids or [str(i) for i in range(self.n)]
        return "".join(f"{ids[p]} {i}\n" for i, p in sorted((i, p) for p, i in enumerate(self.assignment())))


def stratified_kfold(labels, k: int, seed: int, patient_ids: Sequence[str] | None = None) -> FoldPlan:
    """Shuffle each class, then deal positives and negatives round-robin in one continuous cycle.

    Fold sizes differ by at most one and each fold's positive count is within
    one of ``n_pos / k``.
    """
    labels = np.asarray(labels).astype(int)
    if k < 2 or k > len(labels):
        raise ValueError(f"need 2 <= k <= {len(labels)}, got k={k}")
    rng = np.random.default_rng(seed)
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels != 1))
    dealt = np.concatenate([pos, neg])
    folds = [np.sort(dealt[i::k]) for i in range(k)]
    return FoldPlan(folds, list(patient_ids) if patient_ids is not None else [])


# -- ROC ------------------------------------------------------------------------

@dataclass
class RocResult:
    """ROC curve in order of decreasing threshold (the first point is ``+inf``: nothing called positive)."""

    thresholds: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    auc: float
    model_aucs: list[float] = field(default_factory=list)

    def operating_point(self, target: float = TARGET_SENSITIVITY) -> tuple[float, float, float]:
        """``(threshold, sensitivity, specificity)`` at the highest threshold reaching ``target`` sensitivity."""
        i = int(np.argmax(self.sensitivity >= target - 1e-12))
        return float(self.thresholds[i]), float(self.sensitivity[i]), float(self.specificity[i])

    def to_csv(self) -> str:
        rows = ["threshold,sensitivity,specificity"]
        rows += [f"{float(t)!r},{float(se)!r},{float(sp)!r}" for t, se, sp in zip(self.thresholds, self.sensitivity, self.specificity)]
        return "\n".join(rows) + "\n"


def roc_auc(scores, labels) -> RocResult:
    """ROC curve over all distinct thresholds and its trapezoidal area.

    Tied scores form one diagonal step, so the area equals the pairwise
    concordance probability with ties counted as one half.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(int).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores for {len(labels)} labels")
    n_pos, n_neg = int((labels == 1).sum()), int((labels != 1).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order] == 1
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # last index of each tie group
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0, tp] / n_pos
    fpr = np.r_[0, fp] / n_neg
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)
    return RocResult(np.r_[np.inf, s[last]], tpr, 1.0 - fpr, auc)


def concordance_auc(scores, labels) -> float:
    """O(n^2) pairwise definition: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    p, n = scores[labels == 1], scores[labels != 1]
    diff = p[:, None] - n[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def sens_spec(scores, labels, threshold: float) -> tuple[float | None, float | None]:
    """Sensitivity over positives and specificity over negatives; ``None`` when a class is absent."""
    scores, labels = np.asarray(scores), np.asarray(labels).astype(int)
    called = scores >= threshold
    pos, neg = labels == 1, labels != 1
    sens = float(called[pos].mean()) if pos.any() else None
    spec = float((~called[neg]).mean()) if neg.any() else None
    return sens, spec


@dataclass
class RangeRow:
    name: str
    sensitivity: float | None
    specificity: float | None
    n_pos: int
    n_neg: int


def range_breakdown(scores, labels, ffr, threshold: float) -> list[RangeRow]:
    """Sensitivity and specificity inside each FFR band; cells without patients of that class are ``None``."""
    scores, labels, ffr = np.asarray(scores), np.asarray(labels).astype(int), np.asarray(ffr, dtype=float)
    rows = []
    for name, inside in FFR_RANGES:
        sel = inside(ffr)
        se, sp = sens_spec(scores[sel], labels[sel], threshold)
        rows.append(RangeRow(name, se, sp, int((labels[sel] == 1).sum()), int((labels[sel] != 1).sum())))
    return rows


# -- fold evaluation ------------------------------------------------------------------

@dataclass
class FoldMetrics:
    mode: str
    aucs: np.ndarray  # per evaluated model
    sensitivity: np.ndarray
    specificity: np.ndarray
    thresholds: np.ndarray
    scores: np.ndarray  # (models, patients)
    labels: np.ndarray
    iterations: np.ndarray

    @property
    def n_models(self) -> int:
        return len(self.aucs)

    @property
    def auc_mean(self) -> float:
        return float(self.aucs.mean())

    @property
    def auc_sd(self) -> float:
        return spread(self.aucs)

    def mean_roc(self) -> RocResult:
        """ROC of the probability averaged over the evaluated models."""
        roc = roc_auc(self.scores.mean(axis=0), self.labels)
        roc.model_aucs = [float(a) for a in self.aucs]
        return roc


def evaluate_fold(checkpoints: Sequence[dict], test_bags: Sequence[Bag], mode: str | None = None,
                  last: int = EVALUATED_MODELS, dtype=np.float32) -> FoldMetrics:
    """Score the test patients with each of the last ``last`` checkpoints."""
    if len(checkpoints) < last:
        raise ValueError(f"need at least {last} checkpoints, got {len(checkpoints)}")
    chosen = list(checkpoints)[-last:]
    found = MODES[int(chosen[0]["meta.mode"])]
    if mode is not None and canonical_mode(mode) != found:
        raise ValueError(f"checkpoints were trained in mode {found!r}, not {mode!r}")
    labels = np.array([b.label for b in test_bags])
    scores = np.stack([predict_bags(c, test_bags, dtype) for c in chosen])
    aucs, sens, spec, thr = [], [], [], []
    for s in scores:
        roc = roc_auc(s, labels)
        t, se, sp = roc.operating_point()
        aucs.append(roc.auc)
        thr.append(t)
        sens.append(se)
        spec.append(sp)
    its = np.array([int(c.get("train.iteration", -1)) for c in chosen])
    return FoldMetrics(found, np.array(aucs), np.array(sens), np.array(spec), np.array(thr), scores, labels, its)


# -- ablation ----------------------------------------------------------------------------

@dataclass
class ModeSummary:
    mode: str
    folds: list[FoldMetrics]
    ranges: list[RangeRow]

    def auc_by_checkpoint(self) -> np.ndarray:
        """Fold-macro-averaged AUC for each evaluated checkpoint index."""
        return np.mean([f.aucs for f in self.folds], axis=0)

    def auc_by_fold(self) -> np.ndarray:
        return np.array([f.auc_mean for f in self.folds])

    @property
    def auc(self) -> float:
        return float(self.auc_by_checkpoint().mean())

    @property
    def auc_sd_checkpoints(self) -> float:
        return spread(self.auc_by_checkpoint())

    @property
    def auc_sd_folds(self) -> float:
        return spread(self.auc_by_fold())

    @property
    def sensitivity(self) -> float:
        return float(np.mean([f.sensitivity.mean() for f in self.folds]))

    @property
    def specificity(self) -> float:
        return float(np.mean([f.specificity.mean() for f in self.folds]))


@dataclass
class AblationReport:
    rows: dict[str, ModeSummary]

    def auc(self, mode: str) -> float:
        return self.rows[canonical_mode(mode)].auc

    def table(self) -> str:
        lines = [
            f"{'mode':<10} {'AUC (ckpt sd)':>16} {'AUC (fold sd)':>16} {'sensitivity':>12} {'specificity':>12}",
        ]
        for m, r in self.rows.items():
            lines.append(
                f"{m:<10} {r.auc:>8.4f} ± {r.auc_sd_checkpoints:.4f} {r.auc:>7.4f} ± {r.auc_sd_folds:.4f}"
                f" {r.sensitivity:>12.4f} {r.specificity:>12.4f}"
            )
        for m, r in self.rows.items():
            lines.append("")
            lines.append(f"FFR ranges ({m}, operating point sensitivity >= {TARGET_SENSITIVITY:.2f})")
            lines.append(f"{'range':<16} {'sensitivity':>12} {'specificity':>12} {'n_pos':>6} {'n_neg':>6}")
            for row in r.ranges:
                se = "-" if row.sensitivity is None else f"{row.sensitivity:.4f}"
                sp = "-" if row.specificity is None else f"{row.specificity:.4f}"
                lines.append(f"{row.name:<16} {se:>12} {sp:>12} {row.n_pos:>6} {row.n_neg:>6}")
        return "\n".join(lines) + "\n"


def average_ranges(per_model: Sequence[Sequence[RangeRow]]) -> list[RangeRow]:
    """Average defined cells over models; a cell stays absent if it is absent everywhere."""
    out = []
    for rows in zip(*per_model):
        se = [r.sensitivity for r in rows if r.sensitivity is not None]
        sp = [r.specificity for r in rows if r.specificity is not None]
        out.append(RangeRow(rows[0].name, float(np.mean(se)) if se else None, float(np.mean(sp)) if sp else None,
                            sum(r.n_pos for r in rows) // len(rows), sum(r.n_neg for r in rows) // len(rows)))
    return out


def fold_ranges(metrics: FoldMetrics, ffr) -> list[list[RangeRow]]:
    return [range_breakdown(s, metrics.labels, ffr, t) for s, t in zip(metrics.scores, metrics.thresholds)]


def fold_seed(seed: int, fold: int) -> int:
    """Training seed of one fold, shared by every mode."""
    return int(np.random.SeedSequence([seed, fold]).generate_state(1, dtype=np.uint64)[0] >> 1)


def summarize_mode(mode: str, folds: list[FoldMetrics], ffr_per_fold: list[np.ndarray]) -> ModeSummary:
    per_fold = [fold_ranges(f, ffr) for f, ffr in zip(folds, ffr_per_fold)]
    rows = average_ranges([rows for fold in per_fold for rows in fold])
    # patient counts are totals over the test folds, so they cover the whole cohort once
    totals = [RangeRow(r.name, r.sensitivity, r.specificity,
                       sum(fold[0][i].n_pos for fold in per_fold), sum(fold[0][i].n_neg for fold in per_fold))
              for i, r in enumerate(rows)]
    return ModeSummary(canonical_mode(mode), folds, totals)


def ablation_report(bags: Sequence[Bag], ffr, plan: FoldPlan, cfg: TrainConfig, modes: Sequence[str] = MODES,
                    out_dir=None, progress: Callable[[str], None] | None = None) -> AblationReport:
    """Train and evaluate every mode on the same folds and fold seeds.

    With ``out_dir`` set, writes ``report.txt`` and ``roc_<mode>_<fold>.csv``.
    """
    ffr = np.asarray(ffr, dtype=float)
    rows = {}
    for mode in modes:
        mode = canonical_mode(mode)
        folds = []
        for i in range(plan.k):
            fold_cfg = TrainConfig(**{**cfg.__dict__, "seed": fold_seed(cfg.seed, i)})
            snaps = train_mil([bags[j] for j in plan.train(i)], fold_cfg, mode, keep_optimizer=False)
            folds.append(evaluate_fold(snaps, [bags[j] for j in plan.test(i)], mode, dtype=cfg.dtype))
            if progress:
                progress(f"{mode} fold {i}: AUC {folds[-1].auc_mean:.4f}")
        rows[mode] = summarize_mode(mode, folds, [ffr[plan.test(i)] for i in range(plan.k)])
    report = AblationReport(rows)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: AblationReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for mode, row in report.rows.items():
        for i, f in enumerate(row.folds):
            (out / f"roc_{mode}_{i}.csv").write_text(f.mean_roc().to_csv())
    (out / "report.txt").write_text(report.table())
