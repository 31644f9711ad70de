"""Box/mask precision, recall, AP@50, mIoU and confidence curves."""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

CLASS_NAMES = ("Branch", "Trunk")


def cxcywh_to_xyxy(box) -> np.ndarray:
    cx, cy, w, h = (float(v) for v in box)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def iou_box(a, b) -> float:
    """IoU of two (x1, y1, x2, y2) boxes; 0 when the union is empty."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_mask(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


@dataclass
class MatchResult:
    tp: dict[int, int]
    fp: dict[int, int]
    fn: dict[int, int]
    scored: list[tuple[float, bool, float, int]]  # (confidence, is_tp, iou, class_id) per prediction
    pairs: list[tuple[int, int]]  # (pred index, gt index) for every TP
    unmatched_gt: list[int]


def match_instances(preds, gts, iou_fn: Callable, threshold: float = 0.5) -> MatchResult:
    """Greedy confidence-priority matching.

    ``preds`` carry ``class_id`` and ``confidence`` and must be sorted by
    confidence descending; ``iou_fn(pred, gt)`` gives the overlap.  Each
    prediction takes the best-overlapping still-unmatched same-class GT at or
    above ``threshold`` (lowest GT index on ties).
    """
    classes = sorted({p.class_id for p in preds} | {g.class_id for g in gts})
    tp = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    fn = {c: 0 for c in classes}
    used = [False] * len(gts)
    scored = []
    pairs = []
    for pi, p in enumerate(preds):
        best_iou, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if used[j] or g.class_id != p.class_id:
                continue
            v = iou_fn(p, g)
            if v >= threshold and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
            tp[p.class_id] += 1
            pairs.append((pi, best_j))
            scored.append((float(p.confidence), True, best_iou, p.class_id))
        else:
            fp[p.class_id] += 1
            scored.append((float(p.confidence), False, 0.0, p.class_id))
    unmatched = [j for j in range(len(gts)) if not used[j]]
    for j in unmatched:
        fn[gts[j].class_id] += 1
    return MatchResult(tp, fp, fn, scored, pairs, unmatched)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    return _ratio(tp, tp + fp), _ratio(tp, tp + fn)


def average_precision(scored: Sequence[tuple[float, bool]], total_gt: int) -> float:
    """All-point interpolated AP over ``(confidence, is_tp)`` sorted by confidence."""
    if total_gt == 0:
        if len(scored):
            warnings.warn("average_precision: predictions without any ground truth; AP = 0")
        return 0.0
    if not len(scored):
        return 0.0
    flags = np.array([bool(s[1]) for s in scored], dtype=np.float64)
    ctp = np.cumsum(flags)
    cfp = np.cumsum(1.0 - flags)
    recall = ctp / total_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    ap: float

    @property
    def best_f1(self) -> tuple[float, float]:
        """(best F1, lowest threshold attaining it)."""
        i = int(np.argmax(self.f1))
        return float(self.f1[i]), float(self.thresholds[i])


def _curve(conf: np.ndarray, is_tp: np.ndarray, total_gt: int, thresholds: np.ndarray) -> PRCurve:
    order = np.argsort(-conf, kind="stable")
    conf, is_tp = conf[order], is_tp[order]
    p = np.zeros(len(thresholds))
    r = np.zeros(len(thresholds))
    for i, t in enumerate(thresholds):
        sel = conf >= t
        n_sel = int(sel.sum())
        n_tp = int(is_tp[sel].sum())
        p[i] = _ratio(n_tp, n_sel)
        r[i] = _ratio(n_tp, total_gt)
    denom = p + r
    f1 = np.where(denom > 0, 2 * p * r / np.where(denom > 0, denom, 1.0), 0.0)
    ap = average_precision(list(zip(conf, is_tp)), total_gt)
    return PRCurve(thresholds, p, r, f1, ap)


def confidence_curves(scored_by_class: dict[int, Sequence], total_gt: dict[int, int],
                      samples: int = 200) -> dict:
    """Per-class PR/F1 curves over ``samples`` thresholds in [0, 1], plus pooled 'all'."""
    thresholds = np.linspace(0.0, 1.0, samples)
    curves = {}
    pooled_conf, pooled_tp = [], []
    for c in sorted(set(scored_by_class) | set(total_gt)):
        items = scored_by_class.get(c, [])
        conf = np.array([float(s[0]) for s in items], dtype=np.float64)
        tp = np.array([bool(s[1]) for s in items], dtype=bool)
        curves[c] = _curve(conf, tp, total_gt.get(c, 0), thresholds)
        pooled_conf.append(conf)
        pooled_tp.append(tp)
    conf = np.concatenate(pooled_conf) if pooled_conf else np.zeros(0)
    tp = np.concatenate(pooled_tp) if pooled_tp else np.zeros(0, dtype=bool)
    curves["all"] = _curve(conf, tp, sum(total_gt.values()), thresholds)
    return curves


def miou(pairs_iou: Sequence[float]) -> float:
    return float(np.mean(pairs_iou)) if len(pairs_iou) else 0.0


# ---------------------------------------------------------------- evaluation

@dataclass
class FamilyStats:
    precision: float
    recall: float
    map50: float


@dataclass
class ClassRow:
    name: str
    box: FamilyStats
    mask: FamilyStats
    miou: float


@dataclass
class EvalReport:
    rows: list[ClassRow]
    n_images: int
    curves: dict = field(default_factory=dict)  # family -> {class key -> PRCurve}
    timing: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def row(self, name: str) -> ClassRow:
        return next(r for r in self.rows if r.name == name)

    @property
    def miou(self) -> float:
        return self.row("All").miou

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "rows": [{"class": r.name, "box": vars(r.box), "mask": vars(r.mask), "miou": r.miou}
                     for r in self.rows],
            "best_f1": {fam: {str(k): list(c.best_f1) for k, c in cs.items()}
                        for fam, cs in self.curves.items()},
            "timing": self.timing,
            "warnings": self.warnings,
        }


REPORT_FIELDS = ["class", "family", "precision", "recall", "map50", "miou"]


def report_csv(rows: Sequence[ClassRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in rows:
        for fam in ("box", "mask"):
            s: FamilyStats = getattr(r, fam)
            w.writerow([r.name, fam, repr(s.precision), repr(s.recall), repr(s.map50),
                        repr(r.miou) if fam == "mask" else ""])
    return buf.getvalue()


def parse_report_csv(text: str) -> list[ClassRow]:
    rows: dict[str, dict] = {}
    order = []
    for rec in csv.DictReader(io.StringIO(text)):
        name = rec["class"]
        if name not in rows:
            rows[name] = {"miou": 0.0}
            order.append(name)
        rows[name][rec["family"]] = FamilyStats(float(rec["precision"]), float(rec["recall"]),
                                                float(rec["map50"]))
        if rec["miou"]:
            rows[name]["miou"] = float(rec["miou"])
    return [ClassRow(n, rows[n]["box"], rows[n]["mask"], rows[n]["miou"]) for n in order]


def curves_csv(curve: PRCurve) -> str:
    lines = ["threshold,precision,recall,f1"]
    for t, p, r, f in zip(curve.thresholds, curve.precision, curve.recall, curve.f1):
        lines.append(f"{t!r},{p!r},{r!r},{f!r}")
    return "\n".join(lines) + "\n"


class _Inst:
    __slots__ = ("class_id", "confidence", "box", "mask")

    def __init__(self, class_id, confidence, box, mask):
        self.class_id = class_id
        self.confidence = confidence
        self.box = box
        self.mask = mask


def _prepare(records, height, width, with_conf):
    out = []
    for r in records:
        out.append(_Inst(r.class_id, r.confidence if with_conf else 1.0, r.box, r.mask(height, width)))
    if with_conf:
        out.sort(key=lambda x: -x.confidence)
    return out


def evaluate_records(pred_sets, gt_sets, class_names=CLASS_NAMES, resolution: tuple[int, int] = (96, 96),
                     iou_threshold: float = 0.5, samples: int = 200) -> EvalReport:
    """Evaluate aligned per-image lists of prediction and ground-truth records."""
    h, w = resolution
    pooled = {fam: {c: [] for c in range(len(class_names))} for fam in ("box", "mask")}
    counts = {fam: {c: [0, 0, 0] for c in range(len(class_names))} for fam in ("box", "mask")}
    gt_total = {c: 0 for c in range(len(class_names))}
    pair_ious: dict[int, list[float]] = {c: [] for c in range(len(class_names))}
    fns = {"box": lambda p, g: iou_box(p.box, g.box), "mask": lambda p, g: iou_mask(p.mask, g.mask)}
    for preds, gts in zip(pred_sets, gt_sets):
        P = _prepare(preds, h, w, True)
        G = _prepare(gts, h, w, False)
        for g in G:
            if g.class_id in gt_total:
                gt_total[g.class_id] += 1
        for fam, fn in fns.items():
            m = match_instances(P, G, fn, iou_threshold)
            for c in m.tp:
                if c not in counts[fam]:
                    continue
                counts[fam][c][0] += m.tp[c]
                counts[fam][c][1] += m.fp[c]
                counts[fam][c][2] += m.fn[c]
            for conf, ok, _iou, c in m.scored:
                if c in pooled[fam]:
                    pooled[fam][c].append((conf, ok))
            if fam == "mask":
                for pi, gi in m.pairs:
                    pair_ious[P[pi].class_id].append(iou_mask(P[pi].mask, G[gi].mask))

    curves = {}
    per_class: dict[str, dict[int, FamilyStats]] = {"box": {}, "mask": {}}
    for fam in ("box", "mask"):
        scored_sorted = {c: sorted(v, key=lambda s: -s[0]) for c, v in pooled[fam].items()}
        curves[fam] = confidence_curves(scored_sorted, gt_total, samples)
        for c in range(len(class_names)):
            tp, fp, fn = counts[fam][c]
            p, r = precision_recall(tp, fp, fn)
            per_class[fam][c] = FamilyStats(p, r, average_precision(scored_sorted[c], gt_total[c]))
    # classes with neither ground truth nor predictions do not enter the "All" means
    active = [c for c in range(len(class_names))
              if gt_total[c] > 0 or counts["box"][c][0] + counts["box"][c][1] > 0]
    all_pairs = [v for c in range(len(class_names)) for v in pair_ious[c]]

    def mean_of(fam, attr):
        return float(np.mean([getattr(per_class[fam][c], attr) for c in active])) if active else 0.0

    rows = [ClassRow("All",
                     FamilyStats(mean_of("box", "precision"), mean_of("box", "recall"), mean_of("box", "map50")),
                     FamilyStats(mean_of("mask", "precision"), mean_of("mask", "recall"), mean_of("mask", "map50")),
                     miou(all_pairs))]
    for c, name in enumerate(class_names):
        rows.append(ClassRow(name, per_class["box"][c], per_class["mask"][c], miou(pair_ious[c])))
    return EvalReport(rows, len(gt_sets), curves)


def evaluate(pred_files, gt_files, class_names=CLASS_NAMES, resolution: tuple[int, int] = (96, 96),
             iou_threshold: float = 0.5, samples: int = 200, strict: bool = True) -> EvalReport:
    """File-based evaluation; a missing prediction file counts as no predictions.

    ``strict=False`` skips malformed label lines and lists them as warnings.
    """
    from .labels import parse_predictions, read_labels

    preds, gts, notes = [], [], []
    for pf, gf in zip(pred_files, gt_files):
        errors: list = []
        gts.append(read_labels(gf, strict=strict, errors=errors))
        notes.extend(f"{gf}: {e}" for e in errors)
        try:
            with open(pf, encoding="utf-8") as fh:
                preds.append(parse_predictions(fh.read()))
        except FileNotFoundError:
            notes.append(f"missing prediction file {pf}")
            preds.append([])
    report = evaluate_records(preds, gts, class_names, resolution, iou_threshold, samples)
    report.warnings.extend(notes)
    return report


def write_report(report: EvalReport, out_dir, prefix: str = "report") -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{prefix}.csv").write_text(report_csv(report.rows), encoding="utf-8")
    (out / f"{prefix}.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n",
                                        encoding="utf-8")
    for fam, cs in report.curves.items():
        for key, curve in cs.items():
            label = key if isinstance(key, str) else CLASS_NAMES[key].lower()
            (out / f"curve_{fam}_{label}.csv").write_text(curves_csv(curve), encoding="utf-8")
