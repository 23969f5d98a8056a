"""Test-time revision: route by pseudo-labels, build contexts from the test
batch itself, classify.  Nothing here touches model parameters."""

from __future__ import annotations

import numpy as np

from .cribnet import CribModel, argmax_lowest
from .numcore import ContractError, ShapeError, active_tape


def predict_batch(model: CribModel, X):
    """Return (predicted 1-based classes, backbone logits) for one batch."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ContractError("predict_batch needs a non-empty (N, B) batch")
    if X.shape[1] != model.B:
        raise ShapeError(f"spectra have {X.shape[1]} bands, model expects {model.B}")
    if active_tape() is not None:
        raise ContractError("inference must not run inside a recording tape")
    pseudo = argmax_lowest(model.pseudo_logits(X).value) + 1
    contexts, _ = model.contexts(X, pseudo, rng=None)
    logits = model.revise_and_classify(X, contexts).value
    return argmax_lowest(logits) + 1, logits


def predict_dataset(model: CribModel, dataset, batch_size=64):
    """Chunk in input order, predict each chunk, concatenate."""
    if batch_size < 1:
        raise ContractError(f"batch size must be >= 1, got {batch_size}")
    X = dataset.X if hasattr(dataset, "X") else np.asarray(dataset, dtype=np.float64)
    preds = [predict_batch(model, X[i:i + batch_size])[0] for i in range(0, len(X), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
