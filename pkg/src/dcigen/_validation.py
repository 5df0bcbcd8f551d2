"""Input validation helpers shared by the estimators and pipeline functions."""

import numpy as np


def check_resolution(resolution):
    """Return ``(height, width)`` as ints, rejecting empty images."""
    try:
        height, width = (int(v) for v in resolution)
    except (TypeError, ValueError):
        raise ValueError(f"resolution must be a (height, width) pair, got {resolution!r}")
    if height <= 0 or width <= 0:
        raise ValueError(f"zero-area image: resolution {height}x{width}")
    return height, width


def check_image(image, name="image"):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"{name} is empty")
    return image


def check_mask(mask, shape=None, name="mask"):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape):
        raise ValueError(f"{name} shape {mask.shape} does not match {tuple(shape)}")
    return mask.astype(bool)


def check_box(box, name="box"):
    """Validate an ``[x0, y0, x1, y1]`` pixel rectangle with positive area."""
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,) or not np.all(np.isfinite(box)):
        raise ValueError(f"{name} must be four finite numbers, got {box!r}")
    if box[2] <= box[0] or box[3] <= box[1]:
        raise ValueError(f"{name} has zero area: {box.tolist()}")
    return box


def check_unit(vector, name, tol=1e-6):
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector")
    if abs(np.linalg.norm(vector) - 1.0) > tol:
        raise ValueError(f"{name} must have unit length, got norm {np.linalg.norm(vector)!r}")
    return vector


def check_same_shape(*arrays, names=None):
    shapes = [np.shape(a)[:2] for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValueError(f"dimension mismatch between {label}: {shapes}")
