"""Input validation shared by the estimators and solvers."""

import numpy as np
from sklearn.utils import check_array


def check_stream(tokens):
    """Validate a routed stream of shape (n_tokens, n_layers, top_k)."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 2:
        tokens = tokens[:, :, None]
    if tokens.ndim != 3:
        raise ValueError(f"routed stream must be 3-D (tokens, layers, top_k), got ndim={tokens.ndim}")
    if tokens.size and not np.issubdtype(tokens.dtype, np.integer):
        if not np.all(tokens == np.round(tokens)):
            raise ValueError("routed stream must hold integer expert ids")
        tokens = tokens.astype(np.int64)
    if tokens.size and tokens.min() < 0:
        raise ValueError("expert ids must be non-negative")
    return tokens.astype(np.int64, copy=False)


def check_activation(A):
    A = check_array(A, dtype=np.float64, ensure_2d=True, ensure_min_samples=1)
    if (A < 0).any():
        raise ValueError("activation matrix must be non-negative")
    return A


def check_pair_weights(W, m):
    if W is None:
        return np.zeros((m, m))
    W = check_array(W, dtype=np.float64)
    if W.shape != (m, m):
        raise ValueError(f"pair weights must be {m}x{m}, got {W.shape}")
    if (W < 0).any():
        raise ValueError("pair weights must be non-negative")
    return W


def check_assignment(assign, m, g):
    assign = np.asarray(assign)
    if assign.shape != (m,):
        raise ValueError(f"assignment must cover {m} experts, got shape {assign.shape}")
    if not np.issubdtype(assign.dtype, np.integer):
        raise ValueError("assignment must be integer GPU ids")
    if (assign < 0).any():
        raise ValueError("placement leaves experts unassigned")
    if (assign >= g).any():
        raise ValueError(f"assignment references GPU >= {g}")
    counts = np.bincount(assign, minlength=g)
    if (counts != m // g).any():
        raise ValueError(f"every GPU must host exactly {m // g} experts, got {counts.tolist()}")
    return assign.astype(np.int64)
