"""Numerical probes of the convergence and risk-bound arguments.

* gradient agreement between domain cross-entropy and entropy suppression
* Monte-Carlo vs. plug-in conditional-entropy estimates
* diagonal minibatch Fisher and a sampled Fisher-ellipsoid risk bound
* linear-probe disentanglement scores against the synthetic latents
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .cribnet import CribModel
from .hsidata import DomainDataset, make_batches

# ---------------------------------------------------------------------------
# gradient agreement


@dataclass
class InnerProductReport:
    per_tensor: dict
    overall: float
    fraction_nonnegative: float
    min_true_conf: float
    max_true_conf: float
    n_samples: int
    n_excluded: int
    closed_form: float | None = None

    def as_dict(self):
        return asdict(self)


def theorem1_closed_form(d_true, d_hat, d_hat_ent, z_sq):
    """``z_sq * A * (A + log((1 - d_ent) / d_ent))`` with
    ``A = (d - d_hat) / (d_hat (1 - d_hat))``."""
    a = (d_true - d_hat) / (d_hat * (1.0 - d_hat))
    return z_sq * a * (a + math.log((1.0 - d_hat_ent) / d_hat_ent))


def one_layer_inner_product(W, b, z_d, z_s, d_true, j):
    """Autodiff version of the one-layer, two-domain construction.

    Output ``d_hat = relu(W u + b)`` read directly as a probability (no
    softmax), component 0.  The likelihood branch sees ``u = (z_d, z_s)``,
    the entropy branch ``(z_d, 0)``.  Both objectives use the log-likelihood
    orientation of the closed form.  Returns (inner product at W[0, j],
    d_hat, d_hat_ent).
    """
    u = np.concatenate([z_d, z_s])
    u0 = np.concatenate([z_d, np.zeros_like(z_s)])
    d_hat = float(np.maximum(np.asarray(W) @ u + b, 0)[0])
    d_ent = float(np.maximum(np.asarray(W) @ u0 + b, 0)[0])
    if not (0 < d_hat < 1 and 0 < d_ent < 1):
        raise nc.ContractError(f"outputs {d_hat}, {d_ent} are not probabilities in (0, 1)")
    W = nc.DiffArray(W, requires_grad=True)
    b = nc.DiffArray(b, requires_grad=True)

    def grad_of(build):
        W.grad = b.grad = None
        with nc.Tape() as tape:
            out = build()
        tape.backward(out)
        return W.grad.copy()

    def loglik():
        p = nc.relu(nc.affine(u, W, b))[0]
        return nc.add(nc.mul(d_true, nc.log(p)), nc.mul(1.0 - d_true, nc.log(nc.sub(1.0, p))))

    def neg_entropy():
        q = nc.relu(nc.affine(u0, W, b))[0]
        return nc.add(nc.mul(q, nc.log(q)), nc.mul(nc.sub(1.0, q), nc.log(nc.sub(1.0, q))))

    g1 = grad_of(loglik)
    g2 = grad_of(neg_entropy)
    return float(g1[0, j] * (g1[0, j] - g2[0, j])), d_hat, d_ent


def _latents_for(model, X, y):
    lat = model.latents(X, y, rng=None)
    return lat["z_d"].value, lat["z_s"].value


def domain_head_grads(model: CribModel, z_d, z_s, d):
    """(g1, g2) over the domain head's tensors.

    g1 = grad of sum CE(h_d(z_d, z_s), d); g2 = grad of sum_k p_k log p_k of
    h_d(z_d, 0).  ``d`` is 1-based.
    """
    head = model.group("dhead.")
    d = np.asarray(d, dtype=np.int64)

    def grads(build):
        model.zero_grad()
        with nc.Tape() as tape:
            out = build()
        tape.backward(out)
        gs = [t.grad.copy() if t.grad is not None else np.zeros_like(t.value) for t in head]
        model.zero_grad()
        return gs

    def neg_entropy():
        logp = nc.log_softmax(model.domain_logits(z_d, np.zeros_like(z_s)))
        return nc.sum(nc.mul(nc.exp(logp), logp))

    g1 = grads(lambda: nc.sum(nc.softmax_cross_entropy(model.domain_logits(z_d, z_s), d - 1)))
    return g1, grads(neg_entropy)


def theorem1_inner_product(model: CribModel, X, y, d, min_conf=None):
    """<g1, g1 - g2> over the domain head's parameters.

    g1 = grad of sum CE(h_d(z_d, z_s), d); g2 = grad of sum_k p_k log p_k of
    h_d(z_d, 0).  Samples whose probabilities saturate to exactly 0 or 1 are
    excluded; with ``min_conf`` only samples whose true-domain probability
    reaches it are kept.
    """
    d = np.asarray(d, dtype=np.int64)
    z_d, z_s = _latents_for(model, X, y)
    logits = model.domain_logits(z_d, z_s).value
    logits0 = model.domain_logits(z_d, np.zeros_like(z_s)).value
    p = np.exp(nc.log_softmax(logits).value)
    p0 = np.exp(nc.log_softmax(logits0).value)
    conf = p[np.arange(len(d)), d - 1]
    keep = np.all((p > 0) & (p < 1), axis=1) & np.all((p0 > 0) & (p0 < 1), axis=1)
    n_excluded = int(np.sum(~keep))
    if min_conf is not None:
        keep &= conf >= min_conf
    idx = np.flatnonzero(keep)
    names = [t.name for t in model.group("dhead.")]
    if len(idx) == 0:
        return InnerProductReport({}, float("nan"), float("nan"), float("nan"), float("nan"), 0, n_excluded)
    g1, g2 = domain_head_grads(model, z_d[idx], z_s[idx], d[idx])
    per = {n: float(np.sum(a * (a - b))) for n, a, b in zip(names, g1, g2)}
    overall = float(sum(per.values()))
    frac = float(np.mean([v >= 0 for v in per.values()]))
    return InnerProductReport(per, overall, frac, float(conf[idx].min()), float(conf[idx].max()),
                              len(idx), n_excluded)


# ---------------------------------------------------------------------------
# conditional entropy estimators


def _head_numpy(model):
    W1, b1 = model.p("dhead.l1.W").value, model.p("dhead.l1.b").value
    W2, b2 = model.p("dhead.l2.W").value, model.p("dhead.l2.b").value

    def entropy(z_d, z_m):
        h = np.maximum(np.concatenate([z_d, z_m], axis=-1) @ W1.T + b1, 0.0)
        logits = h @ W2.T + b2
        logits = logits - logits.max(axis=-1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        return -(np.exp(logp) * logp).sum(axis=-1)

    return entropy


def mc_entropy_draws(model, z_d, K, rng, chunk=2000):
    """Batch-averaged domain-head entropy for each of K draws z_m ~ N(0, I)."""
    entropy = _head_numpy(model)
    n, dim = z_d.shape
    out = np.empty(K)
    for start in range(0, K, chunk):
        k = min(chunk, K - start)
        z_m = rng.standard_normal((k, n, dim))
        zd = np.broadcast_to(z_d, (k, n, dim))
        out[start:start + k] = entropy(zd, z_m).mean(axis=1)
    return out


def entropy_estimator_check(model: CribModel, X, y, K, rng, k_ref=100_000):
    """Monte-Carlo estimate over z_m, the z_m = 0 plug-in and a high-K reference."""
    if K < 1:
        raise nc.ContractError("K must be >= 1")
    z_d, _ = _latents_for(model, X, y)
    draws = mc_entropy_draws(model, z_d, K, rng)
    ref = mc_entropy_draws(model, z_d, k_ref, rng).mean()
    plugin = _head_numpy(model)(z_d, np.zeros_like(z_d)).mean()
    stderr = float(draws.std(ddof=1) / math.sqrt(K)) if K > 1 else float("nan")
    return {"mc_mean": float(draws.mean()), "mc_stderr": stderr,
            "plugin_value": float(plugin), "reference": float(ref), "K": K, "k_ref": k_ref}


# ---------------------------------------------------------------------------
# Fisher information and the risk bound


def revised_inputs(model: CribModel, dataset: DomainDataset, batch_size, rng):
    """Backbone inputs for every sample, contexts from true-label routed
    shuffled batches.  Returns (inputs (N, ch, B), labels) in batch order."""
    inputs, labels = [], []
    for batch in make_batches(dataset, batch_size, rng):
        X2 = batch.X.reshape(-1, 1, model.B)
        contexts, _ = model.contexts(batch.X, batch.y, rng=None)
        if contexts is not None:
            ctx = np.broadcast_to(contexts.vectors.value, (len(batch),) + contexts.vectors.shape)
            X2 = np.concatenate([X2, ctx], axis=1)
        inputs.append(X2)
        labels.append(batch.y)
    return np.concatenate(inputs), np.concatenate(labels)


def fisher_diag(model: CribModel, inputs, labels):
    """Mean over samples of squared per-sample score d log p(y|x)/d theta,
    theta the backbone parameters.  Returns {name: array}."""
    params = model.group("bb.")
    acc = [np.zeros_like(p.value) for p in params]
    labels = np.asarray(labels, dtype=np.int64)
    for i in range(len(labels)):
        model.zero_grad()
        with nc.Tape() as tape:
            logp = nc.mul(nc.softmax_cross_entropy(model.backbone(inputs[i:i + 1]), labels[i:i + 1] - 1), -1.0)
            root = nc.sum(logp)
        tape.backward(root)
        for a, p in zip(acc, params):
            if p.grad is not None:
                a += p.grad * p.grad
    model.zero_grad()
    return {p.name: a / max(len(labels), 1) for p, a in zip(params, acc)}


@dataclass
class BoundProbeReport:
    lhs: float
    rhs: float
    train_loss: float
    max_train_loss: float
    slack: float
    constant: float
    gamma: float
    n: int
    k: int
    delta: float
    K_eps: int
    max_quadratic: float
    ridged_entries: int
    extras: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def bound_slack(k, n, delta, constant=1.0):
    return math.sqrt(constant * (k + math.log(n / (1.0 - delta))) / (n - 1))


def _flat(params):
    return np.concatenate([p.value.ravel() for p in params])


def _set_flat(params, vec):
    pos = 0
    for p in params:
        size = p.value.size
        p.value = vec[pos:pos + size].reshape(p.value.shape).copy()
        pos += size


def _mean_ce(model, inputs, labels):
    logits = model.backbone(inputs).value
    return float(np.mean(nc.softmax_cross_entropy(logits, labels - 1).value))


def sample_ellipsoid(fisher, gamma, K, rng, ridge=1e-8, rel_ridge=1e-2):
    """K points uniform in {eps : sum(f * eps^2) <= gamma}.

    ``f`` is the Fisher diagonal floored at ``max(ridge, rel_ridge * mean)``.
    Flat directions would otherwise admit unbounded shifts; since f >= fisher
    every sample also lies in the unfloored ellipsoid.
    """
    ridge = max(ridge, rel_ridge * float(np.mean(fisher)))
    f = np.where(fisher < ridge, ridge, fisher)
    k = len(f)
    u = rng.standard_normal((K, k))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = rng.uniform(size=(K, 1)) ** (1.0 / k)
    eps = math.sqrt(gamma) * r * u / np.sqrt(f)
    quad = (eps * eps * f).sum(axis=1)
    over = quad > gamma
    if np.any(over):
        eps[over] *= np.sqrt(gamma / quad[over])[:, None] * (1 - 1e-12)
    return eps, f, int(np.sum(fisher < ridge))


def bound_probe(model: CribModel, train: DomainDataset, fresh: DomainDataset, gamma, K_eps,
                rng, batch_size=256, population=None, constant=1.0, fisher_batch=256):
    """Sample backbone perturbations in the Fisher ellipsoid and compare the
    mean fresh-data risk with the worst sampled training risk plus slack.

    The diagonal Fisher is estimated on one training minibatch of
    ``fisher_batch`` samples.  ``population`` is the size of the whole data
    space (delta = n / population).
    """
    if gamma <= 0:
        raise nc.ContractError("gamma must be positive")
    params = model.group("bb.")
    w0 = _flat(params)
    tr_in, tr_y = revised_inputs(model, train, batch_size, rng)
    fr_in, fr_y = revised_inputs(model, fresh, batch_size, rng)
    fb = rng.permutation(len(tr_y))[:fisher_batch]
    fisher = np.concatenate([a.ravel() for a in fisher_diag(model, tr_in[fb], tr_y[fb]).values()])
    eps, f_used, n_ridge = sample_ellipsoid(fisher, gamma, K_eps, rng)
    quad = (eps * eps * fisher).sum(axis=1)
    train_losses, fresh_losses = [], []
    try:
        for e in eps:
            _set_flat(params, w0 + e)
            train_losses.append(_mean_ce(model, tr_in, tr_y))
            fresh_losses.append(_mean_ce(model, fr_in, fr_y))
    finally:
        _set_flat(params, w0)
    n = len(tr_y)
    population = population or n
    delta = n / population
    if delta >= 1.0:
        raise nc.ContractError(f"delta = n/N must be < 1, got {delta}")
    slack = bound_slack(len(w0), n, delta, constant)
    worst = int(np.argmax(train_losses))
    return BoundProbeReport(
        lhs=float(np.mean(fresh_losses)),
        rhs=float(train_losses[worst] + slack),
        train_loss=_mean_ce(model, tr_in, tr_y),
        max_train_loss=float(train_losses[worst]),
        slack=slack, constant=constant, gamma=gamma, n=n, k=len(w0), delta=delta,
        K_eps=K_eps, max_quadratic=float(quad.max()), ridged_entries=n_ridge,
        extras={"eps0_index": worst, "fresh_n": len(fr_y)},
    )


# ---------------------------------------------------------------------------
# disentanglement


def r2_score(features, targets):
    """Pooled OLS R^2 with intercept; returns (r2, rank_deficient)."""
    F = np.column_stack([np.ones(len(features)), features])
    T = np.asarray(targets, dtype=np.float64)
    coef, _, rank, _ = np.linalg.lstsq(F, T, rcond=None)
    resid = T - F @ coef
    ss_tot = np.sum((T - T.mean(axis=0)) ** 2)
    if ss_tot == 0:
        return 0.0, rank < F.shape[1]
    return float(1.0 - np.sum(resid ** 2) / ss_tot), bool(rank < F.shape[1])


def _onehot(v, n):
    out = np.zeros((len(v), n))
    out[np.arange(len(v)), np.asarray(v) - 1] = 1.0
    return out


def disentangle_probe(model: CribModel, dataset: DomainDataset, z_d=None, z_m=None):
    """R^2 of true domain from learned z_d and z_m, and of class from z_m.

    ``z_d``/``z_m`` override the learned codes (used to plant known answers).
    """
    if (z_d is None or z_m is None) and not model.n_enc:
        raise nc.ContractError(f"mode {model.mode!r} has no encoder to probe")
    if z_d is None or z_m is None:
        enc = np.zeros(len(dataset), dtype=np.int64)
        zd_parts, zm_parts = np.zeros((len(dataset), 4)), np.zeros((len(dataset), 4))
        if model.mode == "vaeC":
            enc = dataset.y - 1
        for e in np.unique(enc):
            idx = np.flatnonzero(enc == e)
            _, _, a, b = model.encode(dataset.X[idx], None, encoder=int(e))
            zd_parts[idx], zm_parts[idx] = a.value, b.value
        z_d = zd_parts if z_d is None else z_d
        z_m = zm_parts if z_m is None else z_m
    dom = _onehot(dataset.d, dataset.D)
    cls = _onehot(dataset.y, dataset.C)
    r_dd, f1 = r2_score(z_d, dom)
    r_md, f2 = r2_score(z_m, dom)
    r_mc, f3 = r2_score(z_m, cls)
    return {"r2_zd_domain": r_dd, "r2_zm_domain": r_md, "r2_zm_class": r_mc,
            "rank_deficient": bool(f1 or f2 or f3)}
