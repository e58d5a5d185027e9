"""Pure-numpy nearest-neighbor kernels.

Fallback used when the compiled extension is unavailable.  Distances are
accumulated dimension by dimension in the same order as the Cython kernel
so both backends return bit-identical results.
"""

import numpy as np

BACKEND = "numpy"


def nearest_code(queries, codes):
    """Row-wise nearest code under squared Euclidean distance.

    Ties broken toward the lowest code index.  Returns (indices, distances).
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    codes = np.ascontiguousarray(codes, dtype=np.float64)
    n, d = queries.shape
    k = codes.shape[0]
    dist = np.zeros((n, k))
    for j in range(d):
        diff = queries[:, j, None] - codes[None, :, j]
        dist += diff * diff
    idx = dist.argmin(axis=1)  # argmin returns the first (lowest) minimizer
    return idx.astype(np.int64), dist[np.arange(n), idx]
