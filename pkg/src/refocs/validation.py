"""Input checks shared by the estimator API and the command line."""
from __future__ import annotations

import numpy as np

from .errors import DataError


def check_images(X, image_size=None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float32 ``(n, 3, H, W)`` array with values in [0, 1].

    Channel-last ``(n, H, W, 3)`` input is transposed, and uint8 input is
    scaled by 1/255. Anything else raises :class:`DataError`.
    """
    arr = np.asarray(X)
    if arr.ndim != 4:
        raise DataError(f"{name} must be 4-D (n, 3, H, W), got shape {arr.shape}")
    if arr.shape[1] != 3 and arr.shape[-1] == 3:
        arr = arr.transpose(0, 3, 1, 2)
    if arr.shape[1] != 3:
        raise DataError(f"{name} must have 3 colour channels, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif not np.issubdtype(arr.dtype, np.number) or np.issubdtype(arr.dtype, np.complexfloating):
        raise DataError(f"{name} has non-numeric dtype {arr.dtype}")
    arr = np.array(arr, dtype=np.float32, order="C")  # private writable copy
    if arr.shape[0] == 0:
        raise DataError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains NaN or infinite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError(f"{name} values must lie in [0, 1]")
    if image_size is not None and tuple(arr.shape[2:]) != tuple(image_size):
        raise DataError(f"{name} images are {arr.shape[2:]}, expected {tuple(image_size)}")
    return arr


def check_labels(y, n_samples: int, name: str = "y") -> np.ndarray:
    """Return integer labels as a 1-D int64 array of length ``n_samples``."""
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.shape[0] != n_samples:
        raise DataError(f"{name} must be 1-D with {n_samples} entries, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.issubdtype(arr.dtype, np.floating) or not np.all(arr == np.round(arr)):
            raise DataError(f"{name} must hold integer class ids")
    return arr.astype(np.int64)


def check_exemplars(exemplars, classes, image_size) -> dict[int, np.ndarray]:
    """Map every class in ``classes`` to one validated ``(3, H, W)`` exemplar."""
    if exemplars is None:
        return {}
    out = {}
    for c, img in dict(exemplars).items():
        c = int(c)
        if c not in set(int(k) for k in classes):
            raise DataError(f"exemplar given for unknown class {c}")
        out[c] = check_images(np.asarray(img)[None], image_size, name=f"exemplar {c}")[0]
    missing = sorted(set(int(k) for k in classes) - set(out))
    if missing:
        raise DataError(f"no exemplar for classes {missing[:10]}")
    return out


def check_support(X, y, n_way: int | None = None):
    """Validate a few-shot support set; every class must have the same shot count."""
    X = check_images(X, name="X_support")
    y = check_labels(y, len(X), name="y_support")
    classes, counts = np.unique(y, return_counts=True)
    if n_way is not None and len(classes) != n_way:
        raise DataError(f"support set has {len(classes)} classes, model expects {n_way}")
    if len(set(counts.tolist())) != 1:
        raise DataError(f"every support class needs the same number of shots, got {counts.tolist()}")
    return X, y, classes
