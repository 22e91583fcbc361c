"""Shared builders for the test suite."""
import numpy as np

from msmpsw.panel import LongPanel


def random_panel(seed, n=6, K=4, q=2, p=0, mode="mean"):
    """A random valid panel in the requested mode, with NaN after exit."""
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, K, q)).round(3)
    A = rng.integers(0, 2, size=(n, K)).astype(float)
    B = rng.normal(size=(n, p)).round(3) if p else None
    C = None
    if mode == "mean":
        Y = rng.normal(size=n).round(4)
        return LongPanel(Z, A, Y, B=B)
    exit_t = rng.integers(1, K + 2, size=n)  # K+1 means never leaves
    tt = np.arange(1, K + 1)[None, :]
    if mode == "censor":
        C = (tt >= exit_t[:, None]).astype(float)
        leave = np.minimum(exit_t, K)
        Y = np.where(C[:, -1] == 1, np.nan, rng.normal(size=n).round(4))
    else:
        kind = rng.integers(0, 2, size=n)  # 0 event, 1 censored
        hit = (tt >= exit_t[:, None]).astype(float)
        C = np.where(kind[:, None] == 1, hit, 0.0)
        Y = np.where(kind[:, None] == 0, hit, 0.0)
        # after censoring, event indicators are missing; after an event C is missing
        Y = np.where((kind[:, None] == 1) & (tt >= exit_t[:, None]), np.nan, Y)
        C = np.where((kind[:, None] == 0) & (tt > exit_t[:, None]), np.nan, C)
        leave = np.minimum(exit_t, K)
    gone = np.arange(K)[None, :] >= leave[:, None]
    gone &= (exit_t <= K)[:, None]
    A[gone] = np.nan
    Z[gone] = np.nan
    return LongPanel(Z, A, Y, C=C, B=B)
