"""Loss terms of the conditional revising block and the weighted objective.

Sign conventions: the KL term is *added* with weight beta and the entropy
suppression term is *added* as well, so that minimising the total loss
shrinks both.  ``TrainConfig.kl_sign`` / ``supp_sign`` flip either one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import ContractError, ShapeError


@dataclass
class LossBreakdown:
    l_cls: float
    l_recon: float
    l_rev: float
    l_supp: float
    kl: float
    total: float

    def as_dict(self):
        return dict(l_cls=self.l_cls, l_recon=self.l_recon, l_rev=self.l_rev,
                    l_supp=self.l_supp, kl=self.kl, total=self.total)


def kl_gauss(mu, logvar):
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over all entries."""
    mu, logvar = nc.as_array(mu), nc.as_array(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl_gauss: mu {mu.shape} vs logvar {logvar.shape}")
    inner = nc.sub(nc.add(nc.square(mu), nc.exp(logvar)), nc.add(logvar, 1.0))
    return nc.mul(nc.sum(inner), 0.5)


def entropy_of_logits(logits):
    """Per-row Shannon entropy of softmax(logits), in nats."""
    logp = nc.log_softmax(logits)
    p = nc.exp(logp)
    return nc.mul(nc.sum(nc.mul(p, logp), axis=-1), -1.0)


def loss_supp(model, z_d):
    """Mean entropy of the domain head with its second input zeroed."""
    zeros = np.zeros(z_d.shape)
    return nc.mean(entropy_of_logits(model.domain_logits(z_d, zeros)))


def loss_rev(model, z_m, routes):
    """Sum over samples of ||f_c(f_c^{-1}(z_m)) - z_m||^2 with c the route."""
    routes = np.asarray(routes, dtype=np.int64)
    total = nc.DiffArray(0.0)
    for c in np.unique(routes):
        idx = np.flatnonzero(routes == c)
        zm = nc.take_rows(z_m, idx)
        back = model.branch_forward(int(c), model.branch_inverse(int(c), zm))
        total = nc.add(total, nc.sum(nc.square(nc.sub(back, zm))))
    return total


def loss_recon(model, X, domains, lat, beta=0.1, kl_sign=1.0, supp_sign=1.0):
    """Reconstruction + domain CE + beta * KL + entropy suppression.

    Returns (total, kl, supp) as DiffArrays.  ``domains`` are 1-based.
    """
    if domains is None:
        raise ContractError("loss_recon needs domain labels")
    domains = np.asarray(domains, dtype=np.int64)
    X = nc.as_array(X)
    dec = np.asarray(lat["decoder"])
    sq = nc.DiffArray(0.0)
    for k in np.unique(dec):
        idx = np.flatnonzero(dec == k)
        rec = model.reconstruct(nc.take_rows(lat["z_d"], idx), nc.take_rows(lat["z_m"], idx), int(k))
        sq = nc.add(sq, nc.sum(nc.square(nc.sub(rec, nc.take_rows(X, idx)))))
    ce = nc.sum(nc.softmax_cross_entropy(model.domain_logits(lat["z_d"], lat["z_s"]), domains - 1))
    kl = kl_gauss(lat["mu"], lat["logvar"])
    supp = loss_supp(model, lat["z_d"])
    total = nc.add(nc.add(sq, ce), nc.add(nc.mul(kl, kl_sign * beta), nc.mul(supp, supp_sign)))
    return total, kl, supp


def loss_cls(model, X, y, contexts, gamma=1.0):
    """Backbone CE on revised inputs plus gamma * pseudo-classifier CE, summed."""
    return cls_terms(model, X, y, contexts, gamma)[0]


def cls_terms(model, X, y, contexts, gamma=1.0):
    """Like ``loss_cls`` but also returns the backbone logits."""
    y = np.asarray(y, dtype=np.int64)
    logits = model.revise_and_classify(X, contexts)
    main = nc.sum(nc.softmax_cross_entropy(logits, y - 1))
    if gamma == 0:
        return main, logits
    pse = nc.sum(nc.softmax_cross_entropy(model.pseudo_logits(X), y - 1))
    return nc.add(main, nc.mul(pse, gamma)), logits


def loss_total(l_cls, l_recon, l_rev, lambda1=0.1, lambda2=0.1, l_supp=0.0, kl=0.0):
    """Weighted objective; accepts floats or DiffArrays.

    Returns (total, LossBreakdown).  The breakdown holds plain floats.
    """
    parts = dict(l_cls=l_cls, l_recon=l_recon, l_rev=l_rev, l_supp=l_supp, kl=kl)
    values = {}
    for name, v in parts.items():
        val = float(np.asarray(v.value if isinstance(v, nc.DiffArray) else v))
        if math.isnan(val) or math.isinf(val):
            raise ContractError(f"loss part {name} is not finite ({val})")
        values[name] = val
    total = nc.add(nc.add(l_cls, nc.mul(l_recon, lambda1)), nc.mul(l_rev, lambda2))
    return total, LossBreakdown(total=float(total.value), **values)
