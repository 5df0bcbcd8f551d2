"""Reference implementations used only by the tests.

Each oracle takes a different route from the package code: the renderer is
checked against a pure-Python edge-function rasterizer, AP against an exact
rational threshold sweep, routing against an independent Dijkstra.
"""

import heapq
import math
from fractions import Fraction


def _sub(a, b):
    return [a[0] - b[0], a[1] - b[1], a[2] - b[2]]


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _cross(a, b):
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def _normalize(a):
    n = math.sqrt(_dot(a, a))
    return [a[0] / n, a[1] / n, a[2] / n]


def pose_transform(pose, point):
    """Model point -> camera coordinates (right, up, forward)."""
    c, s = math.cos(pose.model_angle), math.sin(pose.model_angle)
    x, y, z = point
    world = [c * x - s * y + pose.vehicle_position[0], s * x + c * y + pose.vehicle_position[1],
             z + pose.vehicle_position[2]]
    fwd = list(pose.camera_direction)
    right = _normalize(_cross(list(pose.camera_up), fwd))
    up = _cross(fwd, right)
    rel = _sub(world, list(pose.camera_position))
    return [_dot(rel, right), _dot(rel, up), _dot(rel, fwd)]


def sub_triangle_bin(u, v, t):
    """Bin label of the point (u, v) in a T-subdivided triangle, by explicit point-in-triangle tests.

    Upright cell (i, j) has corners (i, j), (i+1, j), (i, j+1); the inverted cell
    next to it has corners (i+1, j), (i, j+1), (i+1, j+1) and is stored at
    (T-1-i, T-1-j). Returns None for points within 1e-9 of a cell boundary.
    """
    def inside(p, a, b, c):
        d1 = (p[0] - b[0]) * (a[1] - b[1]) - (a[0] - b[0]) * (p[1] - b[1])
        d2 = (p[0] - c[0]) * (b[1] - c[1]) - (b[0] - c[0]) * (p[1] - c[1])
        d3 = (p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])
        lo, hi = min(d1, d2, d3), max(d1, d2, d3)
        if abs(d1) < 1e-9 or abs(d2) < 1e-9 or abs(d3) < 1e-9:
            return "edge"
        return lo > 0 or hi < 0

    for i in range(t):
        for j in range(t - i):
            r = inside((u, v), (i, j), (i + 1, j), (i, j + 1))
            if r == "edge":
                return None
            if r:
                return i * t + j
            if i + j <= t - 2:
                r = inside((u, v), (i + 1, j), (i, j + 1), (i + 1, j + 1))
                if r == "edge":
                    return None
                if r:
                    return (t - 1 - i) * t + (t - 1 - j)
    return None


def render_loop(mesh, texture_values, pose, env, resolution):
    """Per-pixel rasterization with screen-space edge functions.

    Returns ``(image, mask, face, bins, ambiguous)`` as nested lists;
    ``ambiguous[r][c]`` marks pixels on a bin boundary or a depth tie, where
    the tested renderer is allowed its own convention.
    Only meshes entirely in front of the camera are supported.
    """
    height, width = resolution
    f = 0.5 * height / math.tan(0.5 * pose.fov)
    cam = [pose_transform(pose, list(v)) for v in mesh.vertices.tolist()]
    faces = mesh.faces.tolist()
    t = len(texture_values[0])
    light = list(env.light_direction)
    shades = []
    c, s = math.cos(pose.model_angle), math.sin(pose.model_angle)
    for a, b, d in faces:
        va, vb, vd = (mesh.vertices[k].tolist() for k in (a, b, d))
        n = _normalize(_cross(_sub(vb, va), _sub(vd, va)))
        n = [c * n[0] - s * n[1], s * n[0] + c * n[1], n[2]]
        lam = max(0.0, _dot(n, light))
        shades.append([env.ambient_intensity * env.ambient_color[k]
                       + env.directional_intensity * env.directional_color[k] * lam
                       for k in range(3)])
    screen = [(0.5 * width + f * p[0] / p[2], 0.5 * height - f * p[1] / p[2], p[2]) for p in cam]
    assert all(p[2] > 1e-3 for p in screen), "oracle needs geometry in front of the camera"

    image = [[[0.0, 0.0, 0.0] for _ in range(width)] for _ in range(height)]
    mask = [[0] * width for _ in range(height)]
    face_buf = [[-1] * width for _ in range(height)]
    bins = [[-1] * width for _ in range(height)]
    ambiguous = [[False] * width for _ in range(height)]
    for r in range(height):
        for col in range(width):
            px, py = col + 0.5, r + 0.5
            hits = []
            for k, (a, b, d) in enumerate(faces):
                (x0, y0, z0), (x1, y1, z1), (x2, y2, z2) = screen[a], screen[b], screen[d]
                area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
                if area == 0:
                    continue
                l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                l2 = 1.0 - l0 - l1
                if min(l0, l1, l2) < -1e-12:
                    continue
                w = l0 / z0 + l1 / z1 + l2 / z2
                bary = (l0 / z0 / w, l1 / z1 / w, l2 / z2 / w)
                edge = min(l0, l1, l2) < 1e-9
                hits.append((1.0 / w, k, bary, edge))
            if not hits:
                continue
            hits.sort(key=lambda h: (h[0], h[1]))
            depth, k, bary, edge = hits[0]
            if edge or (len(hits) > 1 and hits[1][0] - depth < 1e-9 * depth):
                ambiguous[r][col] = True
            b = sub_triangle_bin(bary[1] * t, bary[2] * t, t)
            if b is None:
                ambiguous[r][col] = True
                continue
            color = texture_values[k][b // t][b % t]
            image[r][col] = [min(1.0, max(0.0, shades[k][ch] * color[ch])) for ch in range(3)]
            mask[r][col] = 1
            face_buf[r][col] = k
            bins[r][col] = b
    return image, mask, face_buf, bins, ambiguous


def composite_loop(car, mask, background):
    height, width = len(mask), len(mask[0])
    return [[list(car[r][c]) if mask[r][c] else list(background[r][c]) for c in range(width)]
            for r in range(height)]


def box_iou(a, b):
    iw = max(Fraction(0), min(Fraction(a[2]), Fraction(b[2])) - max(Fraction(a[0]), Fraction(b[0])))
    ih = max(Fraction(0), min(Fraction(a[3]), Fraction(b[3])) - max(Fraction(a[1]), Fraction(b[1])))
    inter = iw * ih
    area = lambda x: (Fraction(x[2]) - Fraction(x[0])) * (Fraction(x[3]) - Fraction(x[1]))
    return inter / (area(a) + area(b) - inter)


def threshold_sweep_ap(detections, ground_truth, iou_threshold=Fraction(1, 2)):
    """Exact AP in percent by sweeping every score threshold (distinct scores).

    ``detections``: ``[(box, score, image_id)]``; ``ground_truth``:
    ``[(box or None, image_id, visible)]``. For each threshold the kept
    detections are matched greedily in score order to the highest-IoU free
    visible box; AP sums recall increments times the best precision reached
    at that recall or beyond.
    """
    gts = {}
    for box, image_id, visible in ground_truth:
        gts.setdefault(image_id, [])
        if visible and box is not None:
            gts[image_id].append(box)
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return Fraction(0)
    points = []
    for tau in sorted({d[1] for d in detections}):
        kept = sorted([d for d in detections if d[1] >= tau], key=lambda d: -d[1])
        used = {k: [False] * len(v) for k, v in gts.items()}
        tp = 0
        for box, _, image_id in kept:
            best, best_iou = None, None
            for g, gt in enumerate(gts[image_id]):
                if used[image_id][g]:
                    continue
                o = box_iou(box, gt)
                if o >= iou_threshold and (best_iou is None or o > best_iou):
                    best, best_iou = g, o
            if best is not None:
                used[image_id][best] = True
                tp += 1
        points.append((Fraction(tp, n_gt), Fraction(tp, len(kept))))
    ap = Fraction(0)
    previous = Fraction(0)
    for r in sorted({p[0] for p in points}):
        if r == 0:
            continue
        best_precision = max(p for rr, p in points if rr >= r)
        ap += (r - previous) * best_precision
        previous = r
    return ap * 100


def dijkstra(adjacency, start, end):
    """Returns (cost, number of settled nodes); adjacency maps node -> {node: weight}."""
    dist = {start: 0.0}
    settled = set()
    heap = [(0.0, start)]
    while heap:
        d, node = heapq.heappop(heap)
        if node in settled:
            continue
        settled.add(node)
        if node == end:
            return d, len(settled)
        for nxt, w in adjacency[node].items():
            nd = d + w
            if nd < dist.get(nxt, math.inf):
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    return math.inf, len(settled)


def logistic_pixel_descent(color, shade, weights, bias, step, n_steps):
    """Hand-derived descent on one pixel ``x = shade * color`` scored by ``sigmoid(w . x + b)``.

    d score / d color_c = p (1 - p) w_c shade_c; returns (scores before each
    step, colors after each step) in plain floats.
    """
    trace, colors = [], []
    color = list(color)
    for _ in range(n_steps):
        z = sum(w * s * c for w, s, c in zip(weights, shade, color)) + bias
        p = 1.0 / (1.0 + math.exp(-z))
        trace.append(p)
        color = [min(1.0, max(0.0, c - step * p * (1.0 - p) * w * s))
                 for c, w, s in zip(color, weights, shade)]
        colors.append(color)
    return trace, colors
