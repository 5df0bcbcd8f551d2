"""Car detectors: a differentiable linear-logistic anchor detector and a file-exchange adapter."""

import json
import math
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_box, check_image
from .boxes import iou_matrix, nms

CAR_CLASS_ID = 2

DEFAULT_BOX_SIZES = tuple((w, h) for w in (16, 24, 32, 48, 64, 96, 128)
                          for h in (round(0.5 * w), round(0.75 * w), w))


class UnderfitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Detection:
    box: tuple
    score: float
    class_id: int = CAR_CLASS_ID

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        check_box(box)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score!r}")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "class_id", int(self.class_id))

    def to_dict(self):
        return {"box": list(self.box), "score": self.score, "class_id": self.class_id}


class MatchedScore(NamedTuple):
    score: float
    grad: np.ndarray
    anchor: int  # -1 when no anchor matches the target box

    @property
    def matched(self):
        return self.anchor >= 0


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def make_anchors(height, width, stride, box_sizes):
    """Anchors fully inside the image, on a ``stride`` grid, for each box size."""
    boxes, shapes = [], []
    for s, (w, h) in enumerate(box_sizes):
        if w > width or h > height:
            continue
        xs = np.arange(0, width - w + 1, stride)
        ys = np.arange(0, height - h + 1, stride)
        gx, gy = np.meshgrid(xs, ys)
        b = np.stack([gx.ravel(), gy.ravel(), gx.ravel() + w, gy.ravel() + h], axis=1)
        boxes.append(b)
        shapes.append(np.full(len(b), s))
    if not boxes:
        raise ValueError(f"no anchor size fits a {height}x{width} image")
    return np.concatenate(boxes).astype(np.int64), np.concatenate(shapes)


def anchor_regions(anchors, height, width, grid, context):
    """Pooling rectangles per anchor: ``grid x grid`` inner cells then 4 context bands.

    Context bands are ``context * size`` thick on each side, clipped to the
    image; a band clipped to nothing pools to zero.
    """
    x0, y0, x1, y1 = (anchors[:, k] for k in range(4))
    xs = np.rint(x0[:, None] + (x1 - x0)[:, None] * np.arange(grid + 1) / grid).astype(np.int64)
    ys = np.rint(y0[:, None] + (y1 - y0)[:, None] * np.arange(grid + 1) / grid).astype(np.int64)
    rects = []
    for i in range(grid):
        for j in range(grid):
            rects.append(np.stack([xs[:, j], ys[:, i], xs[:, j + 1], ys[:, i + 1]], axis=1))
    if context > 0:
        cw = np.maximum(1, np.rint(context * (x1 - x0))).astype(np.int64)
        ch = np.maximum(1, np.rint(context * (y1 - y0))).astype(np.int64)
        rects.append(np.stack([np.maximum(x0 - cw, 0), y0, x0, y1], axis=1))
        rects.append(np.stack([x1, y0, np.minimum(x1 + cw, width), y1], axis=1))
        rects.append(np.stack([x0, np.maximum(y0 - ch, 0), x1, y0], axis=1))
        rects.append(np.stack([x0, y1, x1, np.minimum(y1 + ch, height)], axis=1))
    return np.stack(rects, axis=1)  # (N, R, 4)


def pooled_features(image, regions):
    """Mean colour over each region, via a summed-area table. Shape (N, R*3)."""
    table = np.zeros((image.shape[0] + 1, image.shape[1] + 1, 3))
    table[1:, 1:] = image.cumsum(axis=0).cumsum(axis=1)
    x0, y0, x1, y1 = (regions[..., k] for k in range(4))
    sums = table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0]
    area = ((x1 - x0) * (y1 - y0)).astype(np.float64)
    means = np.divide(sums, area[..., None], out=np.zeros_like(sums), where=area[..., None] > 0)
    return means.reshape(len(regions), -1)


class ToyDetector(BaseEstimator):
    """Anchor detector scoring ``sigmoid(w_s . pooled(image, anchor) + b_s)``.

    Each anchor pools the mean colour of a ``grid x grid`` partition of its box
    plus four surrounding context bands; ``s`` indexes the anchor's box size,
    so every size has its own filter. The score is linear-logistic in the
    pixels, which makes :meth:`score_grad` exact and closed-form.

    Training is deterministic full-batch gradient descent on a class-balanced,
    L2-regularised logistic loss. ``learning_rate="auto"`` uses ``1/L`` with
    ``L`` the smoothness constant of the loss, so the recorded
    ``loss_curve_`` never increases.
    """

    def __init__(self, stride=4, box_sizes=DEFAULT_BOX_SIZES, grid=3, context=0.25,
                 n_iter=400, learning_rate="auto", alpha=1e-3, negatives_per_image=400,
                 pos_iou=0.7, neg_iou=0.5, score_threshold=0.5, nms_iou=0.5,
                 min_recall=0.9, random_state=0):
        self.stride = stride
        self.box_sizes = box_sizes
        self.grid = grid
        self.context = context
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.alpha = alpha
        self.negatives_per_image = negatives_per_image
        self.pos_iou = pos_iou
        self.neg_iou = neg_iou
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.min_recall = min_recall
        self.random_state = random_state

    def _setup(self, height, width):
        self.image_shape_ = (height, width)
        self.anchors_, self.anchor_shape_ = make_anchors(height, width, self.stride,
                                                         self.box_sizes)
        self.regions_ = anchor_regions(self.anchors_, height, width, self.grid, self.context)

    def fit(self, positives, negatives):
        """Train from ``positives`` = [(image, box), ...] and ``negatives`` = [image, ...]."""
        if len(positives) == 0 or len(negatives) == 0:
            raise ValueError("training needs both positive and negative images")
        first = check_image(positives[0][0])
        self._setup(*first.shape[:2])
        rng = np.random.default_rng(self.random_state)

        rows, labels, shapes = [], [], []

        def add(features, label, idx):
            rows.append(features[idx])
            labels.append(np.full(len(idx), label, dtype=np.float64))
            shapes.append(self.anchor_shape_[idx])

        for image, box in positives:
            feats = self.features(image)
            overlap = iou_matrix(self.anchors_, [check_box(box)])[:, 0]
            pos = np.flatnonzero(overlap >= self.pos_iou)
            # anchors partly covering the car are sampled apart from the rest
            hard = np.flatnonzero((overlap > 0) & (overlap < self.neg_iou))
            easy = np.flatnonzero(overlap == 0)
            add(feats, 1.0, pos)
            add(feats, 0.0, self._subsample(hard, rng))
            add(feats, 0.0, self._subsample(easy, rng))
        for image in negatives:
            feats = self.features(image)
            add(feats, 0.0, self._subsample(np.arange(len(self.anchors_)), rng))

        X = np.concatenate(rows)
        y = np.concatenate(labels)
        s = np.concatenate(shapes)
        if y.sum() == 0:
            raise ValueError("no anchor overlaps any positive box at the positive IoU")
        self._train(X, y, s)
        self._check_recall(positives)
        return self

    def _subsample(self, idx, rng):
        if self.negatives_per_image is None or len(idx) <= self.negatives_per_image:
            return idx
        return np.sort(rng.choice(idx, size=self.negatives_per_image, replace=False))

    def _train(self, X, y, s):
        n_shapes = len(self.box_sizes)
        n_feat = X.shape[1]
        order = np.argsort(s, kind="stable")
        X, y, s = X[order], y[order], s[order]
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale < 1e-12] = 1.0
        Z = (X - mean) / scale

        n_pos = y.sum()
        n_neg = len(y) - n_pos
        sample_w = np.where(y > 0, 0.5 / n_pos, 0.5 / n_neg)

        if self.learning_rate == "auto":
            lipschitz = self.alpha
            for k in range(n_shapes):
                sel = s == k
                if not sel.any():
                    continue
                aug = np.hstack([Z[sel], np.ones((sel.sum(), 1))]) * np.sqrt(sample_w[sel])[:, None]
                lipschitz = max(lipschitz, 0.25 * np.linalg.norm(aug, 2) ** 2 + self.alpha)
            lr = 1.0 / lipschitz
        else:
            lr = float(self.learning_rate)

        # rows are sorted by shape, so each filter owns a contiguous block
        bounds = np.searchsorted(s, np.arange(n_shapes + 1))
        groups = [slice(bounds[k], bounds[k + 1]) for k in range(n_shapes)]
        W = np.zeros((n_shapes, n_feat))
        b = np.zeros(n_shapes)
        curve = []
        z = np.empty(len(y))
        for it in range(self.n_iter + 1):
            for k, rows in enumerate(groups):
                z[rows] = Z[rows] @ W[k] + b[k]
            loss = np.sum(sample_w * (_log1pexp(z) - y * z)) + 0.5 * self.alpha * np.sum(W * W)
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite training loss")
            curve.append(float(loss))
            if it == self.n_iter:
                break
            r = sample_w * (_sigmoid(z) - y)
            for k, rows in enumerate(groups):
                W[k] -= lr * (r[rows] @ Z[rows] + self.alpha * W[k])
                b[k] -= lr * r[rows].sum()

        # fold the standardisation into the filters so scores are linear in pixels
        self.coef_ = W / scale
        self.intercept_ = b - self.coef_ @ mean
        self.learning_rate_ = lr
        self.loss_curve_ = curve

    def _check_recall(self, positives):
        hits = 0
        for image, box in positives:
            # the top detection must match, so firing everywhere earns no recall
            dets = self.detect(image)
            if dets and iou_matrix([dets[0].box], [box])[0, 0] >= 0.5:
                hits += 1
        self.training_recall_ = hits / len(positives)
        if self.training_recall_ < self.min_recall:
            warnings.warn(f"toy detector underfit: training recall {self.training_recall_:.2f} "
                          f"< {self.min_recall}", UnderfitWarning, stacklevel=3)

    def features(self, image):
        image = check_image(image)
        if image.shape[:2] != self.image_shape_:
            raise ValueError(f"detector was built for {self.image_shape_}, got {image.shape[:2]}")
        return pooled_features(image, self.regions_)

    def logits(self, image):
        check_is_fitted(self, "coef_")
        feats = self.features(image)
        return np.einsum("ij,ij->i", feats, self.coef_[self.anchor_shape_]) \
            + self.intercept_[self.anchor_shape_]

    def decision_function(self, image):
        """Per-anchor car scores before NMS."""
        return _sigmoid(self.logits(image))

    def detect(self, image, score_threshold=None):
        threshold = self.score_threshold if score_threshold is None else score_threshold
        scores = self.decision_function(image)
        candidates = np.flatnonzero(scores >= threshold)
        keep = nms(self.anchors_[candidates], scores[candidates], self.nms_iou)
        return [Detection(tuple(self.anchors_[candidates[k]]), float(scores[candidates[k]]))
                for k in keep]

    def predict(self, images, score_threshold=None):
        return [self.detect(image, score_threshold) for image in images]

    def score_grad(self, image, target_box):
        """Best score among anchors with IoU >= 0.5 to ``target_box`` and its image gradient."""
        image = check_image(image)
        target = check_box(target_box, "target_box")
        scores = self.decision_function(image)
        overlap = iou_matrix(self.anchors_, [target])[:, 0]
        matching = np.flatnonzero(overlap >= 0.5)
        grad = np.zeros_like(image)
        if matching.size == 0:
            return MatchedScore(0.0, grad, -1)
        best = int(matching[np.argmax(scores[matching])])
        p = scores[best]
        weights = self.coef_[self.anchor_shape_[best]].reshape(-1, 3) * (p * (1.0 - p))
        for (x0, y0, x1, y1), w in zip(self.regions_[best], weights):
            area = (x1 - x0) * (y1 - y0)
            if area > 0:
                grad[y0:y1, x0:x1] += w / area
        return MatchedScore(float(p), grad, best)

    def to_dict(self):
        check_is_fitted(self, "coef_")
        params = self.get_params()
        params["box_sizes"] = [list(b) for b in params["box_sizes"]]
        return {"params": params, "image_shape": list(self.image_shape_),
                "coef": self.coef_.tolist(), "intercept": self.intercept_.tolist(),
                "loss_curve": self.loss_curve_,
                "training_recall": getattr(self, "training_recall_", None)}

    @classmethod
    def from_dict(cls, data):
        params = dict(data["params"])
        params["box_sizes"] = tuple(tuple(b) for b in params["box_sizes"])
        model = cls(**params)
        model._setup(*data["image_shape"])
        model.coef_ = np.asarray(data["coef"], dtype=np.float64)
        model.intercept_ = np.asarray(data["intercept"], dtype=np.float64)
        model.loss_curve_ = list(data.get("loss_curve", []))
        model.training_recall_ = data.get("training_recall")
        return model

    @classmethod
    def from_weights(cls, image_shape, coef, intercept, **params):
        """Build a detector with given filters (used for analytic checks)."""
        model = cls(**params)
        model._setup(*image_shape)
        model.coef_ = np.asarray(coef, dtype=np.float64).reshape(len(model.box_sizes), -1)
        model.intercept_ = np.asarray(intercept, dtype=np.float64).reshape(len(model.box_sizes))
        model.loss_curve_ = []
        return model


def save_detector(model, path):
    Path(path).write_text(json.dumps(model.to_dict()) + "\n", encoding="utf-8")


def load_detector(path):
    with open(path, encoding="utf-8") as fh:
        return ToyDetector.from_dict(json.load(fh))


class DetectionParseError(ValueError):
    def __init__(self, message, field=None, path=None):
        self.field = field
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def parse_detections(data, path=None):
    """Validate a detections array ``[{box: [x0, y0, x1, y1], score, class_id}, ...]``."""
    if not isinstance(data, list):
        raise DetectionParseError("top level must be an array", None, path)
    out = []
    for k, item in enumerate(data):
        if not isinstance(item, dict):
            raise DetectionParseError(f"item {k} is not an object", None, path)
        box = item.get("box")
        if (not isinstance(box, list) or len(box) != 4
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box)):
            raise DetectionParseError(f"item {k}: field 'box' must be 4 numbers", "box", path)
        score = item.get("score")
        if not isinstance(score, (int, float)) or isinstance(score, bool) \
                or not 0.0 <= score <= 1.0 or math.isnan(score):
            raise DetectionParseError(f"item {k}: field 'score' must be a number in [0, 1], "
                                      f"got {score!r}", "score", path)
        class_id = item.get("class_id", CAR_CLASS_ID)
        if not isinstance(class_id, int) or isinstance(class_id, bool):
            raise DetectionParseError(f"item {k}: field 'class_id' must be an integer",
                                      "class_id", path)
        try:
            out.append(Detection(tuple(box), score, class_id))
        except ValueError as exc:
            raise DetectionParseError(f"item {k}: field 'box' invalid ({exc})", "box", path)
    return out


class ExternalDetector:
    """Exchange-directory adapter for detectors running out of process.

    For an image ``<name>.png`` in the exchange directory the external tool
    writes ``<name>.png.detections.json``. ``timeout=0`` only reads results
    that already exist.
    """

    def __init__(self, exchange_dir, timeout=0.0, poll_interval=0.05, class_id=CAR_CLASS_ID):
        self.exchange_dir = Path(exchange_dir)
        self.timeout = timeout
        self.poll_interval = poll_interval
        self.class_id = class_id

    def detections_path(self, image_path):
        image_path = Path(image_path)
        return image_path.with_name(image_path.name + ".detections.json")

    def detect(self, image, name=None):
        if isinstance(image, (str, Path)):
            image_path = Path(image)
        else:
            from .compositor import save_png
            if name is None:
                raise ValueError("an image array needs a name for the exchange file")
            image_path = self.exchange_dir / f"{name}.png"
            image_path.parent.mkdir(parents=True, exist_ok=True)
            if not image_path.exists():
                save_png(image_path, image)
        result = self.detections_path(image_path)
        deadline = time.monotonic() + self.timeout
        while not result.exists():
            if time.monotonic() >= deadline:
                raise TimeoutError(f"no detections for {image_path} after {self.timeout}s")
            time.sleep(self.poll_interval)
        try:
            data = json.loads(result.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DetectionParseError(f"malformed JSON: {exc}", None, result) from None
        return [d for d in parse_detections(data, result) if d.class_id == self.class_id]
