"""Exact identities every recorded activation/transition triple must satisfy."""

import numpy as np


def check_identities(tokens, A, E, W):
    tokens = np.asarray(tokens)
    if tokens.ndim == 2:
        tokens = tokens[:, :, None]
    n, L, k = tokens.shape
    # aggregate and per-layer sums, with no tolerance
    assert np.array_equal(W, E.sum(axis=0)) if L > 1 else not W.any()
    assert (A.sum(axis=1) == n * k).all()
    assert E.shape[0] == L - 1
    assert (E.sum(axis=(1, 2)) == n * k * k).all()
    assert (A >= 0).all() and (E >= 0).all()
