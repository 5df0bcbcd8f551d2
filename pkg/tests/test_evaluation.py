import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import box_iou, threshold_sweep_ap
from dcigen.detector import Detection
from dcigen.evaluation import (APResult, EvalReport, ap_decline, compute_ap, emit_report,
                               iou)

SVG = "{http://www.w3.org/2000/svg}"


def det(box, score, image="a"):
    return (Detection(box, score), image)


def test_iou_examples():
    assert iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1 / 3, rel=1e-15)
    assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0
    assert iou([0, 0, 10, 10], [10, 0, 20, 10]) == 0.0


def test_iou_zero_area():
    with pytest.raises(ValueError):
        iou([0, 0, 0, 10], [0, 0, 10, 10])


def test_perfect_detector():
    result = compute_ap([det((0, 0, 10, 10), 0.9)], [((0, 0, 10, 10), "a", True)])
    assert result.ap == 100.0
    assert result.pr_curve == [(1.0, 1.0)]


def test_no_detections():
    assert compute_ap([], [((0, 0, 10, 10), "a", True)]).ap == 0.0


def test_worked_example():
    gts = [((0, 0, 10, 10), "a", True), ((20, 20, 30, 30), "b", True)]
    dets = [det((0, 0, 10, 10), 0.9, "a"), det((50, 50, 60, 60), 0.8, "a"),
            det((20, 20, 30, 30), 0.7, "b")]
    result = compute_ap(dets, gts)
    assert result.ap == pytest.approx(100 * (0.5 * 1 + 0.5 * 2 / 3), rel=1e-12)
    assert round(result.ap, 2) == 83.33
    assert float(threshold_sweep_ap([(d.box, d.score, i) for d, i in dets], gts)) \
        == pytest.approx(result.ap, rel=1e-12)


def test_unknown_image_id():
    with pytest.raises(KeyError):
        compute_ap([det((0, 0, 10, 10), 0.5, "zzz")], [((0, 0, 10, 10), "a", True)])


def test_invisible_ground_truth_excluded():
    gts = [((0, 0, 10, 10), "a", True), (None, "b", False)]
    dets = [det((0, 0, 10, 10), 0.9, "a"), det((0, 0, 10, 10), 0.8, "b")]
    result = compute_ap(dets, gts)
    assert result.n_gt == 1
    assert result.ap == 100.0
    assert compute_ap(dets[1:], [(None, "b", False)]).ap == 0.0


def random_instance(rng):
    images = ["i0", "i1", "i2"]
    gts = []
    for _ in range(rng.integers(0, 6)):
        x, y = rng.integers(0, 12, 2)
        w, h = rng.integers(3, 8, 2)
        gts.append(((int(x), int(y), int(x + w), int(y + h)), str(rng.choice(images)),
                    bool(rng.random() < 0.85)))
    for image in images:
        gts.append((None, image, False))
    n_det = rng.integers(0, 11)
    scores = rng.permutation(np.arange(1, 101))[:n_det] / 100.0
    dets = []
    for score in scores:
        visible = [g for g in gts if g[0] is not None]
        if visible and rng.random() < 0.6:
            box, image, _ = visible[rng.integers(len(visible))]
            jitter = rng.integers(-2, 3, 4)
            x0, y0 = box[0] + jitter[0], box[1] + jitter[1]
            x1, y1 = max(x0 + 1, box[2] + jitter[2]), max(y0 + 1, box[3] + jitter[3])
            dets.append(((int(x0), int(y0), int(x1), int(y1)), float(score), image))
        else:
            x, y = rng.integers(0, 12, 2)
            w, h = rng.integers(2, 8, 2)
            dets.append(((int(x), int(y), int(x + w), int(y + h)), float(score),
                         str(rng.choice(images))))
    return dets, gts


def package_ap(dets, gts):
    return compute_ap([(Detection(b, s), i) for b, s, i in dets], gts)


def test_matches_threshold_sweep_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        dets, gts = random_instance(rng)
        expected = float(threshold_sweep_ap(dets, gts))
        assert package_ap(dets, gts).ap == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_iou_matches_rational_oracle():
    rng = np.random.default_rng(3)
    for _ in range(300):
        a = rng.integers(0, 20, 2).tolist()
        b = rng.integers(0, 20, 2).tolist()
        a += [a[0] + int(rng.integers(1, 9)), a[1] + int(rng.integers(1, 9))]
        b += [b[0] + int(rng.integers(1, 9)), b[1] + int(rng.integers(1, 9))]
        assert iou(a, b) == float(box_iou(a, b))


def test_pr_curve_properties():
    rng = np.random.default_rng(7)
    for _ in range(200):
        dets, gts = random_instance(rng)
        result = package_ap(dets, gts)
        assert 0.0 <= result.ap <= 100.0
        recalls = [r for r, _ in result.pr_curve]
        assert all(0.0 <= r <= 1.0 and 0.0 <= p <= 1.0 for r, p in result.pr_curve)
        assert recalls == sorted(recalls)
        precision = np.array([p for _, p in result.pr_curve])
        if len(precision):
            envelope = np.maximum.accumulate(precision[::-1])[::-1]
            assert np.all(np.diff(envelope) <= 0)


def test_score_scaling_invariance():
    rng = np.random.default_rng(8)
    for _ in range(100):
        dets, gts = random_instance(rng)
        scaled = [(b, s * 0.37, i) for b, s, i in dets]
        assert package_ap(scaled, gts).ap == package_ap(dets, gts).ap


def test_low_false_positive_never_helps():
    rng = np.random.default_rng(9)
    for _ in range(100):
        dets, gts = random_instance(rng)
        extra = dets + [((40, 40, 45, 45), 0.001, "i0")]
        assert package_ap(extra, gts).ap <= package_ap(dets, gts).ap


def test_no_double_matching():
    gts = [((0, 0, 10, 10), "a", True)]
    dets = [det((0, 0, 10, 10), 0.9), det((0, 0, 10, 10), 0.8), det((1, 0, 10, 10), 0.7)]
    result = compute_ap(dets, gts)
    assert result.true_positives == [True, False, False]
    rng = np.random.default_rng(10)
    for _ in range(100):
        d, g = random_instance(rng)
        result = package_ap(d, g)
        assert sum(result.true_positives) <= result.n_gt


def test_score_ties_use_insertion_order():
    gts = [((0, 0, 10, 10), "a", True)]
    first = compute_ap([det((0, 0, 10, 10), 0.5), det((30, 30, 40, 40), 0.5)], gts)
    second = compute_ap([det((30, 30, 40, 40), 0.5), det((0, 0, 10, 10), 0.5)], gts)
    assert first.ap == 100.0
    assert second.ap == 50.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=8, unique=True))
def test_all_true_positives_give_100(scores):
    gts = [((10 * k, 0, 10 * k + 5, 5), "a", True) for k in range(len(scores))]
    dets = [det((10 * k, 0, 10 * k + 5, 5), s) for k, s in enumerate(scores)]
    assert compute_ap(dets, gts).ap == pytest.approx(100.0, rel=1e-12)


def make_report(aps, baseline="Normal", weathers=()):
    report = EvalReport(baseline=baseline)
    for tex, cells in aps.items():
        for detector, ap in cells.items():
            curve = [(0.5, 1.0), (1.0, ap / 100.0)]
            report.add(tex, detector, APResult(ap, curve, 2, 2))
            for w in weathers:
                report.add(tex, detector, APResult(ap, curve, 2, 2), scene="Park Lot", weather=w)
    return report


def test_decline_single_cell():
    base = make_report({"Normal": {"yolov3": 65.37}})
    attacked = make_report({"Normal": {"yolov3": 65.37}, "ASA": {"yolov3": 41.59}})
    table = ap_decline(base, attacked)
    assert table.rows["ASA"]["yolov3"] == pytest.approx(23.78, abs=1e-9)


def test_decline_identical_reports():
    report = make_report({"Normal": {"a": 50.0, "b": 60.0}, "X": {"a": 40.0, "b": 70.0}})
    other = make_report({"Normal": {"a": 50.0, "b": 60.0}, "X": {"a": 50.0, "b": 60.0}})
    table = ap_decline(other, other)
    assert all(v == 0.0 for row in table.rows.values() for v in row.values())
    assert ap_decline(report, report).rows["X"] == {"a": 10.0, "b": -10.0}


def test_decline_mean_recomputed():
    base = make_report({"Normal": {"d": 70.0}})
    attacked = make_report({"Normal": {"d": 70.0}, "A": {"d": 50.0}, "B": {"d": 61.0},
                            "C": {"d": 75.0}})
    table = ap_decline(base, attacked)
    cells = [table.rows[t]["d"] for t in ("A", "B", "C")]
    assert table.mean["d"] == pytest.approx(sum(cells) / 3, rel=1e-15)
    assert table.rows["C"]["d"] == -5.0


def test_decline_detector_mismatch():
    with pytest.raises(ValueError):
        ap_decline(make_report({"Normal": {"a": 1.0}}), make_report({"Normal": {"b": 1.0}}))


def test_markdown_table_shape(tmp_path):
    aps = {t: {d: 50.0 + k + j for j, d in enumerate(["yolov3", "yolov5", "yolov6"])}
           for k, t in enumerate(["Normal", "DAS", "FCA", "ASA"])}
    (path,) = emit_report(make_report(aps), "markdown", tmp_path / "t.md")
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    assert len(lines) == 2 + 4
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    assert header == ["Texture Type", "AP@yolov3(%)", "AP@yolov5(%)", "AP@yolov6(%)"]
    assert all(len(line.strip("|").split("|")) == 4 for line in lines[2:])


def test_csv_table(tmp_path):
    (path,) = emit_report(make_report({"Normal": {"d": 12.345}}), "csv", tmp_path / "t.csv")
    rows = list(csv.reader(path.open(encoding="utf-8")))
    assert rows == [["Texture Type", "AP@d(%)"], ["Normal", "12.35"]]


def test_empty_report(tmp_path):
    empty = EvalReport()
    (md,) = emit_report(empty, "markdown", tmp_path / "e.md")
    (cs,) = emit_report(empty, "csv", tmp_path / "e.csv")
    assert md.read_text(encoding="utf-8").splitlines() == ["| Texture Type |", "|---|"]
    assert cs.read_text(encoding="utf-8") == "Texture Type\n"
    assert emit_report(empty, "svg-pr-curve", tmp_path / "svg") == []


def _svg_points(path):
    root = ET.parse(path).getroot()
    groups = root.findall(f".//{SVG}g[@class='pr-curve']")
    out = []
    for g in groups:
        circles = g.findall(f"{SVG}circle")
        line = g.find(f"{SVG}polyline")
        points = [tuple(map(float, p.split(","))) for p in line.get("points").split()]
        out.append((g.get("data-label"), circles, points))
    return out


def test_svg_point_count(tmp_path):
    gts = [((0, 0, 10, 10), "a", True), ((20, 20, 30, 30), "b", True)]
    dets = [det((0, 0, 10, 10), 0.9, "a"), det((50, 50, 60, 60), 0.8, "a"),
            det((20, 20, 30, 30), 0.7, "b")]
    report = EvalReport()
    report.add("Normal", "toy", compute_ap(dets, gts))
    (path,) = emit_report(report, "svg-pr-curve", tmp_path / "svg")
    ((label, circles, points),) = _svg_points(path)
    curve = report.get("Normal", "toy").pr_curve
    assert label == "Normal"
    assert len(circles) == len(curve) == 3
    left, size = 60, 260
    assert points[0][0] == left
    assert points[-1][0] == pytest.approx(left + size * max(r for r, _ in curve), abs=0.01)
    assert len(points) == len(curve) + 1


def test_svg_weather_family(tmp_path):
    report = make_report({"Normal": {"toy": 50.0}},
                         weathers=["ClearNoon", "WetCloudySunset", "HardRainNoon"])
    paths = emit_report(report, "svg-pr-curve", tmp_path / "svg")
    families = {p.name: _svg_points(p) for p in paths}
    weather_svgs = [v for k, v in families.items() if "park-lot" in k]
    assert len(weather_svgs) == 1
    assert [label for label, _, _ in weather_svgs[0]] == ["ClearNoon", "WetCloudySunset",
                                                          "HardRainNoon"]


def test_pr_csv(tmp_path):
    report = make_report({"Normal": {"toy": 50.0}, "Adv": {"toy": 25.0}})
    paths = emit_report(report, "pr-csv", tmp_path / "pr")
    rows = list(csv.reader(paths[0].open(encoding="utf-8")))
    assert rows[0] == ["curve", "recall", "precision"]
    assert [r[0] for r in rows[1:]] == ["Normal", "Normal", "Adv", "Adv"]


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_report(EvalReport(), "pdf", tmp_path / "x")


def test_report_json_roundtrip(tmp_path):
    report = make_report({"Normal": {"toy": 50.0}}, weathers=["ClearNoon"])
    report.save(tmp_path / "r.json")
    loaded = EvalReport.load(tmp_path / "r.json")
    assert loaded.get("Normal", "toy", "Park Lot", "ClearNoon").ap == 50.0
    assert loaded.baseline == "Normal"
    assert loaded.scenes == ["Park Lot"]
