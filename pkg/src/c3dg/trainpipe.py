"""Training loop: true-label routing, context assembly, losses, one Adam
step per batch."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .cribnet import CribModel, TrainConfig
from .hsidata import DataError, DomainDataset, make_batches, make_domain_batches
from .losses import LossBreakdown, cls_terms, loss_recon, loss_rev, loss_total


def rng_streams(seed):
    """Independent generators for batching and latent sampling."""
    return {
        "batch": np.random.default_rng(np.random.SeedSequence([seed, 10])),
        "latent": np.random.default_rng(np.random.SeedSequence([seed, 11])),
    }


def pool_sources(sources, cfg: TrainConfig):
    """Concatenate source domains, optionally capping each one."""
    if isinstance(sources, DomainDataset):
        sources = [sources]
    parts = []
    for k, ds in enumerate(sources):
        if cfg.domain_cap and len(ds) > cfg.domain_cap:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 12, k]))
            ds = ds.subset(np.sort(rng.permutation(len(ds))[: cfg.domain_cap]))
        parts.append(ds)
    return DomainDataset.concat(parts)


def batch_loss(model: CribModel, X, y, d, cfg: TrainConfig, rng):
    """Forward one labelled batch and return (total DiffArray, breakdown, logits)."""
    contexts, lat = model.contexts(X, y, rng)
    l_cls, logits = cls_terms(model, X, y, contexts, cfg.gamma)
    if lat is not None:
        l_recon, kl, supp = loss_recon(model, X, d, lat, cfg.beta, cfg.kl_sign, cfg.supp_sign)
        l_rev = loss_rev(model, lat["z_m"], lat["branch"])
    else:
        l_recon = l_rev = kl = supp = 0.0
    total, parts = loss_total(l_cls, l_recon, l_rev, cfg.lambda1, cfg.lambda2, supp, kl)
    return total, parts, logits


def _check_data(model, data):
    if data.B != model.B:
        raise DataError(f"data has {data.B} bands, model expects {model.B}")
    if len(data) and data.y.max() > model.C:
        raise DataError(f"class index {data.y.max()} exceeds C={model.C}")
    if len(data) and data.d.max() > model.D:
        raise DataError(f"domain id {data.d.max()} exceeds D={model.D}")


def train_epoch(model: CribModel, data, cfg: TrainConfig, rngs, state: nc.AdamState):
    """One pass over ``data`` (a pooled DomainDataset); returns epoch stats."""
    _check_data(model, data)
    if cfg.batching == "domain":
        batches = make_domain_batches(data, cfg.train_batch, rngs["batch"])
    else:
        batches = make_batches(data, cfg.train_batch, rngs["batch"])
    params = model.parameters()
    sums = dict(l_cls=0.0, l_recon=0.0, l_rev=0.0, l_supp=0.0, kl=0.0, total=0.0)
    correct = 0
    for batch in batches:
        model.zero_grad()
        with nc.Tape() as tape:
            total, parts, logits = batch_loss(model, batch.X, batch.y, batch.d, cfg, rngs["latent"])
        tape.backward(total)
        nc.adam_step(params, [p.grad for p in params], state)
        for k, v in parts.as_dict().items():
            sums[k] += v
        correct += int(np.sum(np.argmax(logits.value, axis=1) + 1 == batch.y))
    n = max(len(data), 1)
    stats = {k: v / n for k, v in sums.items()}
    stats["train_oa"] = correct / n
    return stats


def make_optimizer(cfg: TrainConfig):
    return nc.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)


def fit(model: CribModel, sources, cfg: TrainConfig, callback=None):
    """Run ``cfg.epochs`` epochs; returns (model, history)."""
    cfg.validate()
    if model.mode != cfg.context_mode:
        raise DataError(f"model mode {model.mode} differs from config mode {cfg.context_mode}")
    data = pool_sources(sources, cfg)
    rngs = rng_streams(cfg.seed)
    state = make_optimizer(cfg)
    history = []
    for epoch in range(cfg.epochs):
        stats = train_epoch(model, data, cfg, rngs, state)
        stats["epoch"] = epoch + 1
        history.append(stats)
        if callback is not None:
            callback(stats)
    return model, history


def build_model(B, C, D, cfg: TrainConfig):
    return CribModel(B, C, D, mode=cfg.context_mode, seed=cfg.seed)


def summarize(history) -> LossBreakdown:
    last = history[-1]
    return LossBreakdown(last["l_cls"], last["l_recon"], last["l_rev"], last["l_supp"],
                         last["kl"], last["total"])


def total_loss_grad_check(model: CribModel, X, y, d, cfg: TrainConfig, seed=0, tol=1e-4, names=None,
                          max_coords=4):
    """Finite-difference check of the full objective w.r.t. model parameters.

    The latent noise is replayed from ``seed`` on every evaluation so the
    objective is a deterministic function of the parameters.  ``names``
    restricts the checked tensors (default: all).
    """
    names = list(model.params) if names is None else list(names)
    original = {k: model.params[k] for k in names}

    def objective(*arrays):
        for k, a in zip(names, arrays):
            model.params[k] = a
        try:
            total, _, _ = batch_loss(model, X, y, d, cfg, np.random.default_rng(seed))
        finally:
            model.params.update(original)
        return total

    return nc.grad_check(objective, [original[k].value for k in names], tol=tol, max_coords=max_coords,
                         rng=np.random.default_rng(seed))
