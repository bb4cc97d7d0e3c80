import numpy as np


def solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm along the last axis, batched over the leading axes.

    ``lower[..., 0]`` and ``upper[..., -1]`` are ignored.  Coefficient arrays
    broadcast against ``rhs``.  No pivoting: the caller guarantees diagonal
    dominance.
    """
    rhs = np.asarray(rhs, dtype=float)
    shape = np.broadcast_shapes(np.shape(lower), np.shape(diag), np.shape(upper), rhs.shape)
    a = np.broadcast_to(lower, shape)
    b = np.broadcast_to(diag, shape)
    c = np.broadcast_to(upper, shape)
    d = np.broadcast_to(rhs, shape)
    n = shape[-1]

    cp = np.empty(shape)
    dp = np.empty(shape)
    cp[..., 0] = c[..., 0] / b[..., 0]
    dp[..., 0] = d[..., 0] / b[..., 0]
    for k in range(1, n):
        denom = b[..., k] - a[..., k] * cp[..., k - 1]
        cp[..., k] = c[..., k] / denom
        dp[..., k] = (d[..., k] - a[..., k] * dp[..., k - 1]) / denom

    x = np.empty(shape)
    x[..., -1] = dp[..., -1]
    for k in range(n - 2, -1, -1):
        x[..., k] = dp[..., k] - cp[..., k] * x[..., k + 1]
    return x
