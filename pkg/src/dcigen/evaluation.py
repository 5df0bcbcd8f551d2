"""Single-class detection scoring: IoU, all-point AP, PR curves and AP-decline tables."""

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from html import escape
from pathlib import Path

import numpy as np

from .boxes import iou

__all__ = ["iou", "compute_ap", "APResult", "EvalRow", "EvalReport", "DeclineTable",
           "ap_decline", "emit_report"]


@dataclass(frozen=True)
class APResult:
    ap: float                 # percent
    pr_curve: list            # [(recall, precision), ...] along the ranked list
    n_gt: int
    n_detections: int
    true_positives: list = field(default_factory=list, repr=False)


def compute_ap(detections, ground_truth, iou_threshold=0.5):
    """All-point interpolated AP (percent) over ranked detections.

    ``detections``: ``[(Detection, image_id), ...]``.
    ``ground_truth``: ``[(box or None, image_id, visible), ...]``; every image
    that can carry detections must appear here, invisible vehicles included.
    Invisible entries neither count toward the denominator nor match.
    Detections are ranked by score, ties by input order; each one matches the
    highest-IoU unmatched visible box in its image when that IoU reaches the
    threshold. With no visible ground truth the AP is 0.
    """
    by_image = {}
    for box, image_id, visible in ground_truth:
        by_image.setdefault(image_id, [])
        if visible and box is not None:
            by_image[image_id].append(box)
    for _, image_id in detections:
        if image_id not in by_image:
            raise KeyError(f"detection references unknown image id {image_id!r}")
    n_gt = sum(len(boxes) for boxes in by_image.values())
    matched = {image_id: [False] * len(boxes) for image_id, boxes in by_image.items()}

    scores = np.array([d.score for d, _ in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp_flags = []
    for k in order:
        det, image_id = detections[k]
        best, best_iou = -1, iou_threshold
        for g, box in enumerate(by_image[image_id]):
            if matched[image_id][g]:
                continue
            overlap = iou(det.box, box)
            if overlap >= best_iou:
                if best < 0 or overlap > best_iou:
                    best, best_iou = g, overlap
        if best >= 0:
            matched[image_id][best] = True
        tp_flags.append(best >= 0)

    tp = np.cumsum(tp_flags, dtype=np.float64)
    ranks = np.arange(1, len(tp_flags) + 1, dtype=np.float64)
    precision = tp / ranks if len(ranks) else np.zeros(0)
    recall = tp / n_gt if n_gt else np.zeros(len(tp))
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    previous = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - previous) * envelope)) * 100.0 if n_gt else 0.0
    curve = [(float(r), float(p)) for r, p in zip(recall, precision)]
    return APResult(ap, curve, n_gt, len(detections), [bool(t) for t in tp_flags])


@dataclass(frozen=True)
class EvalRow:
    texture: str
    detector: str
    scene: str
    weather: str
    ap: float
    pr_curve: list
    n_gt: int
    n_detections: int


ALL = "all"


@dataclass
class EvalReport:
    """AP per (texture, detector, scene, weather); ``"all"`` marks aggregate rows."""

    rows: list = field(default_factory=list)
    baseline: str = None
    config: dict = field(default_factory=dict)

    def add(self, texture, detector, result, scene=ALL, weather=ALL):
        self.rows.append(EvalRow(texture, detector, scene, weather, result.ap,
                                 [list(p) for p in result.pr_curve], result.n_gt,
                                 result.n_detections))

    @property
    def textures(self):
        return list(dict.fromkeys(r.texture for r in self.rows))

    @property
    def detectors(self):
        return list(dict.fromkeys(r.detector for r in self.rows))

    @property
    def scenes(self):
        return [s for s in dict.fromkeys(r.scene for r in self.rows) if s != ALL]

    def select(self, texture=None, detector=None, scene=ALL, weather=ALL):
        return [r for r in self.rows
                if (texture is None or r.texture == texture)
                and (detector is None or r.detector == detector)
                and (scene is None or r.scene == scene)
                and (weather is None or r.weather == weather)]

    def get(self, texture, detector, scene=ALL, weather=ALL):
        rows = self.select(texture, detector, scene, weather)
        if not rows:
            raise KeyError((texture, detector, scene, weather))
        return rows[0]

    def table(self, scene=ALL, weather=ALL):
        out = {}
        for r in self.select(scene=scene, weather=weather):
            out.setdefault(r.texture, {})[r.detector] = r.ap
        return out

    def to_dict(self):
        return {"baseline": self.baseline, "config": self.config,
                "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, data):
        return cls([EvalRow(**r) for r in data["rows"]], data.get("baseline"),
                   data.get("config", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class DeclineTable:
    """AP decline in percentage points; ``rows[label][detector]``."""

    rows: dict
    mean: dict
    label: str = "Texture Type"


def ap_decline(baseline, attacked, baseline_texture=None, by="texture"):
    """Baseline AP minus attacked AP per cell, plus the per-detector mean over rows.

    ``by="texture"`` gives one row per attacked texture (overall scene);
    ``by="scene"`` gives one row per scene, averaged over attacked textures.
    Negative declines are kept.
    """
    base_tex = baseline_texture or baseline.baseline or baseline.textures[0]
    if set(baseline.detectors) != set(attacked.detectors):
        raise ValueError(f"detector sets differ: {baseline.detectors} vs {attacked.detectors}")
    detectors = baseline.detectors
    attacked_textures = [t for t in attacked.textures if t != base_tex]
    rows = {}
    if by == "texture":
        for tex in attacked_textures:
            rows[tex] = {d: baseline.get(base_tex, d).ap - attacked.get(tex, d).ap
                         for d in detectors}
        label = "Texture Type"
    elif by == "scene":
        for scene in baseline.scenes:
            rows[scene] = {}
            for d in detectors:
                base = baseline.get(base_tex, d, scene).ap
                drops = [base - attacked.get(t, d, scene).ap for t in attacked_textures]
                rows[scene][d] = sum(drops) / len(drops) if drops else 0.0
        label = "Scene"
    else:
        raise ValueError(f"unknown grouping {by!r}")
    mean = {d: (sum(r[d] for r in rows.values()) / len(rows) if rows else 0.0)
            for d in detectors}
    return DeclineTable(rows, mean, label)


def _table_rows(obj):
    if isinstance(obj, DeclineTable):
        table, label = obj.rows, obj.label
        detectors = list(dict.fromkeys(d for r in table.values() for d in r))
    else:
        table, label = obj.table(), "Texture Type"
        detectors = obj.detectors
    header = [label] + [f"AP@{d}(%)" for d in detectors]
    body = [[name] + [f"{cells[d]:.2f}" if d in cells else "" for d in detectors]
            for name, cells in table.items()]
    return header, body


def _svg_pr(title, curves):
    """Multi-curve PR chart; ``curves`` is ``[(label, [(recall, precision), ...]), ...]``."""
    width, height, left, top, size = 480, 360, 60, 30, 260
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"]

    def xy(r, p):
        return f"{left + r * size:.2f},{top + (1.0 - p) * size:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<title>{escape(title)}</title>',
             f'<rect x="{left}" y="{top}" width="{size}" height="{size}" fill="none" stroke="#000"/>',
             f'<text x="{left + size / 2}" y="{top + size + 35}" text-anchor="middle">Recall</text>',
             f'<text x="15" y="{top + size / 2}" transform="rotate(-90 15 {top + size / 2})" '
             f'text-anchor="middle">Precision</text>']
    for tick in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{left + tick * size:.1f}" y="{top + size + 15}" '
                     f'text-anchor="middle" font-size="10">{tick:.1f}</text>')
        parts.append(f'<text x="{left - 5}" y="{top + (1 - tick) * size + 4:.1f}" '
                     f'text-anchor="end" font-size="10">{tick:.1f}</text>')
    for k, (label, curve) in enumerate(curves):
        color = palette[k % len(palette)]
        points = [(0.0, curve[0][1])] + [tuple(p) for p in curve] if curve else []
        parts.append(f'<g class="pr-curve" data-label="{escape(label)}">')
        if points:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                         f'points="{" ".join(xy(r, p) for r, p in points)}"/>')
        for r, p in curve:
            parts.append(f'<circle class="pr-point" cx="{left + r * size:.2f}" '
                         f'cy="{top + (1 - p) * size:.2f}" r="1.5" fill="{color}"/>')
        parts.append("</g>")
        ly = top + 15 + 16 * k
        parts.append(f'<line x1="{left + size + 12}" y1="{ly - 4}" x2="{left + size + 30}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text class="legend" x="{left + size + 35}" y="{ly}" '
                     f'font-size="11">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _safe(name):
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name.lower().replace(" ", "-"))


def pr_families(report):
    """Curve families: textures overlaid per detector, and weathers per (detector, texture, scene)."""
    families = []
    for det in report.detectors:
        curves = [(r.texture, r.pr_curve) for r in report.select(detector=det)]
        families.append((f"pr_{_safe(det)}", f"PR curves, {det}", curves))
        for tex in report.textures:
            for scene in report.scenes:
                rows = [r for r in report.select(tex, det, scene, weather=None) if r.weather != ALL]
                if rows:
                    families.append((f"pr_{_safe(det)}_{_safe(tex)}_{_safe(scene)}",
                                     f"{scene}, {tex}, {det}",
                                     [(r.weather, r.pr_curve) for r in rows]))
    return families


def emit_report(report, fmt, out_path):
    """Write ``report`` (an EvalReport or DeclineTable) as csv, markdown, svg-pr-curve or pr-csv.

    Table formats write one file at ``out_path``. ``svg-pr-curve`` and
    ``pr-csv`` write one file per curve family into the directory
    ``out_path``. Returns the written paths.
    """
    out_path = Path(out_path)
    if fmt in ("csv", "markdown"):
        header, body = _table_rows(report)
        if fmt == "csv":
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(body)
            text = buf.getvalue()
        else:
            lines = ["| " + " | ".join(header) + " |",
                     "|" + "|".join(["---"] * len(header)) + "|"]
            lines += ["| " + " | ".join(row) + " |" for row in body]
            text = "\n".join(lines) + "\n"
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text, encoding="utf-8")
        return [out_path]
    if fmt in ("svg-pr-curve", "pr-csv"):
        if isinstance(report, DeclineTable):
            raise ValueError("a decline table has no PR curves")
        out_path.mkdir(parents=True, exist_ok=True)
        written = []
        for stem, title, curves in pr_families(report):
            if fmt == "svg-pr-curve":
                path = out_path / f"{stem}.svg"
                path.write_text(_svg_pr(title, curves), encoding="utf-8")
            else:
                path = out_path / f"{stem}.csv"
                buf = io.StringIO()
                writer = csv.writer(buf, lineterminator="\n")
                writer.writerow(["curve", "recall", "precision"])
                for label, curve in curves:
                    writer.writerows([label, f"{r:.6f}", f"{p:.6f}"] for r, p in curve)
                path.write_text(buf.getvalue(), encoding="utf-8")
            written.append(path)
        return written
    raise ValueError(f"unknown report format {fmt!r}")
