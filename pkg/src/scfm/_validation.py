import numpy as np
from sklearn.utils.validation import check_array


def check_points(X, dim=None):
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {X.shape[1]}")
    return X


def check_labels(y, n):
    if y is None:
        return None
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if np.any(y < 0):
        raise ValueError("labels must be non-negative")
    return y
