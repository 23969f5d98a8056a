"""Learnable components and forward paths of the conditional revising block.

Latent layout: the encoder emits 8 numbers per spectrum, the first four are
the domain latent z_d and the last four the mixed latent z_m.  Class branch
c maps z_m to the class-independent latent z_s; its inverse net maps back.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .hsidata import atomic_write
from .numcore import ContractError, DiffArray, ShapeError

LATENT = 4
MODES = ("erm", "light1", "vae1", "vaeC", "crib")


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    beta: float = 0.1
    gamma: float = 1.0
    lr: float = 0.005
    weight_decay: float = 1e-4
    train_batch: int = 256
    test_batch: int = 64
    epochs: int = 100
    seed: int = 0
    context_mode: str = "crib"
    domain_cap: int = 0
    batching: str = "joint"
    kl_sign: float = 1.0
    supp_sign: float = 1.0
    probe_gamma: float = 0.01
    probe_samples: int = 16

    def validate(self):
        if self.context_mode not in MODES:
            raise ContractError(f"context_mode must be one of {MODES}, got {self.context_mode!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("lambda1 and lambda2 must be non-negative")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batching not in ("joint", "domain"):
            raise ContractError(f"batching must be 'joint' or 'domain', got {self.batching!r}")
        if self.train_batch < 1 or self.test_batch < 1:
            raise ContractError("batch sizes must be >= 1")


@dataclass
class ContextSet:
    vectors: DiffArray  # (K, B)
    present: np.ndarray  # (K,) bool


def _seed_for(seed, name):
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


class CribModel:
    """Encoder(s), class branches, decoder(s), domain head, pseudo classifier
    and backbone for one ablation mode.

    Parameters live in ``self.params`` (insertion ordered).  Each parameter
    is initialised from its own seed stream so that, e.g., the pseudo
    classifier starts identically whatever the mode.
    """

    def __init__(self, B, C, D, mode="crib", seed=0, conv_channels=8, enc_hidden=None):
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}")
        self.B, self.C, self.D, self.mode, self.seed = int(B), int(C), int(D), mode, int(seed)
        self.conv_channels = int(conv_channels)
        self.params: dict[str, DiffArray] = {}
        ch = self.conv_channels

        n_enc = {"vae1": 1, "crib": 1, "vaeC": self.C}.get(mode, 0)
        n_branch = {"vae1": 1, "crib": self.C, "vaeC": self.C}.get(mode, 0)
        n_dec = self.C if mode == "vaeC" else (1 if n_enc else 0)
        self.n_enc, self.n_branch, self.n_dec = n_enc, n_branch, n_dec

        for e in range(n_enc):
            p = f"enc{e}"
            self._conv(f"{p}.conv1", ch, 1)
            self._conv(f"{p}.conv2", ch, ch)
            self._conv(f"{p}.conv3", ch, ch)
            self._lin(f"{p}.mu", 2 * LATENT, ch * self.B)
            self._lin(f"{p}.logvar", 2 * LATENT, ch * self.B, gain=0.1)
        for c in range(n_branch):
            for direction in ("fwd", "inv"):
                self._lin(f"branch{c}.{direction}.l1", 16, LATENT)
                self._lin(f"branch{c}.{direction}.l2", LATENT, 16)
        for k in range(n_dec):
            self._lin(f"dec{k}.l1", 64, 2 * LATENT)
            self._lin(f"dec{k}.l2", self.B, 64)
        if n_enc:
            self._lin("dhead.l1", 32, 2 * LATENT)
            self._lin("dhead.l2", self.D, 32)
        if mode == "light1":
            self._conv("ctxnet.conv", 1, 1)
        self._lin("pse.l1", 64, self.B)
        self._lin("pse.l2", 32, 64)
        self._lin("pse.l3", self.C, 32)
        self._conv("bb.conv1", ch, self.backbone_channels)
        self._conv("bb.conv2", ch, ch)
        self._conv("bb.conv3", ch, ch)
        self._lin("bb.fc1", 64, ch * self.B)
        self._lin("bb.fc2", self.C, 64)

    # construction ------------------------------------------------------------

    @property
    def backbone_channels(self):
        return {"erm": 1, "light1": 2, "vae1": 2}.get(self.mode, self.C + 1)

    def _add(self, name, value):
        self.params[name] = DiffArray(value, requires_grad=True, name=name)

    def _conv(self, name, out_ch, in_ch, k=3):
        fan_in = in_ch * k
        rng = _seed_for(self.seed, name)
        self._add(f"{name}.W", rng.standard_normal((out_ch, in_ch, k)) * np.sqrt(2.0 / fan_in))
        self._add(f"{name}.b", np.zeros(out_ch))

    def _lin(self, name, out_dim, in_dim, gain=1.0):
        rng = _seed_for(self.seed, name)
        self._add(f"{name}.W", gain * rng.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / in_dim))
        self._add(f"{name}.b", np.zeros(out_dim))

    def p(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def group(self, prefix):
        return [v for k, v in self.params.items() if k.startswith(prefix)]

    def zero_grad(self):
        for v in self.params.values():
            v.grad = None

    def snapshot(self):
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_snapshot(self, snap):
        for k, v in snap.items():
            self.params[k].value = v.copy()

    # building blocks -------------------------------------------------------

    def _dense(self, name, x, act=True):
        out = nc.affine(x, self.p(f"{name}.W"), self.p(f"{name}.b"))
        return nc.relu(out) if act else out

    def _convl(self, name, x):
        return nc.relu(nc.conv1d(x, self.p(f"{name}.W"), self.p(f"{name}.b")))

    def _check_bands(self, X):
        X = nc.as_array(X)
        if X.shape[-1] != self.B:
            raise ShapeError(f"spectra have {X.shape[-1]} bands, model expects {self.B}")
        return X

    # forward paths -----------------------------------------------------------

    def encode(self, X, rng=None, encoder=0):
        """Return (mu, logvar, z_d, z_m).  Without ``rng`` z equals mu."""
        X = self._check_bands(X)
        single = X.value.ndim == 1
        h = nc.reshape(X, (-1, 1, self.B))
        p = f"enc{encoder}"
        h = self._convl(f"{p}.conv1", h)
        h = self._convl(f"{p}.conv2", h)
        h = self._convl(f"{p}.conv3", h)
        h = nc.reshape(h, (h.shape[0], -1))
        mu = self._dense(f"{p}.mu", h, act=False)
        logvar = self._dense(f"{p}.logvar", h, act=False)
        z = mu if rng is None else nc.reparameterize(mu, logvar, rng)
        if single:
            mu, logvar, z = nc.reshape(mu, (-1,)), nc.reshape(logvar, (-1,)), nc.reshape(z, (-1,))
        return mu, logvar, z[..., :LATENT], z[..., LATENT:]

    def _check_class(self, c):
        if not 1 <= c <= self.n_branch:
            raise IndexError(f"class {c} outside 1..{self.n_branch}")

    def branch_forward(self, c, z_m):
        self._check_class(c)
        h = self._dense(f"branch{c - 1}.fwd.l1", z_m)
        return self._dense(f"branch{c - 1}.fwd.l2", h, act=False)

    def branch_inverse(self, c, v):
        self._check_class(c)
        h = self._dense(f"branch{c - 1}.inv.l1", v)
        return self._dense(f"branch{c - 1}.inv.l2", h, act=False)

    def reconstruct(self, z_d, z_m, decoder=0):
        z = nc.concat([z_d, z_m], axis=-1)
        h = self._dense(f"dec{decoder}.l1", z)
        return self._dense(f"dec{decoder}.l2", h, act=False)

    def domain_logits(self, z_d, z_s):
        z = nc.concat([z_d, z_s], axis=-1)
        return self._dense("dhead.l2", self._dense("dhead.l1", z), act=False)

    def pseudo_logits(self, X):
        X = self._check_bands(X)
        h = self._dense("pse.l1", X)
        h = self._dense("pse.l2", h)
        return self._dense("pse.l3", h, act=False)

    def backbone(self, inp):
        """(N, channels, B) -> (N, C) logits."""
        h = self._convl("bb.conv1", inp)
        h = self._convl("bb.conv2", h)
        h = self._convl("bb.conv3", h)
        h = nc.reshape(h, (h.shape[0], -1))
        return self._dense("bb.fc2", self._dense("bb.fc1", h), act=False)

    def revise_and_classify(self, X, contexts: ContextSet | None):
        """Concatenate the shared contexts to every spectrum channel-wise and
        run the backbone."""
        X = self._check_bands(X)
        X2 = nc.reshape(X, (-1, 1, self.B))
        if self.mode == "erm" or contexts is None:
            if self.backbone_channels != 1:
                raise ShapeError(f"mode {self.mode} needs contexts")
            return self.backbone(X2)
        ctx = contexts.vectors
        if ctx.shape != (self.backbone_channels - 1, self.B):
            raise ShapeError(f"contexts {ctx.shape} do not match {self.backbone_channels - 1} x {self.B}")
        n = X2.shape[0]
        tiled = nc.mul(np.ones((n, 1, 1)), nc.reshape(ctx, (1,) + ctx.shape))
        return self.backbone(nc.concat([X2, tiled], axis=1))

    # context assembly ------------------------------------------------------

    def latents(self, X, routes, rng=None):
        """Encode a batch and push z_m through the routed branches.

        ``routes`` are 1-based class labels deciding the branch (and, for
        vaeC, the encoder and decoder).  Returns a dict of DiffArrays.
        """
        X = self._check_bands(X)
        n = X.shape[0]
        routes = np.asarray(routes, dtype=np.int64)
        if self.n_enc == 0:
            raise ContractError(f"mode {self.mode} has no latent path")
        if self.mode == "vae1":
            mu, logvar, z_d, z_m = self.encode(X, rng)
            z_s = self.branch_forward(1, z_m)
            return dict(mu=mu, logvar=logvar, z_d=z_d, z_m=z_m, z_s=z_s,
                        branch=np.ones(n, dtype=np.int64), decoder=np.zeros(n, dtype=np.int64))
        groups = [np.flatnonzero(routes == c) for c in range(1, self.C + 1)]
        used = [(c, idx) for c, idx in zip(range(1, self.C + 1), groups) if len(idx)]
        if self.mode == "vaeC":
            parts = {k: [] for k in ("mu", "logvar", "z_d", "z_m", "z_s")}
            for c, idx in used:
                mu, logvar, z_d, z_m = self.encode(nc.take_rows(X, idx), rng, encoder=c - 1)
                for k, v in zip(("mu", "logvar", "z_d", "z_m"), (mu, logvar, z_d, z_m)):
                    parts[k].append(v)
                parts["z_s"].append(self.branch_forward(c, z_m))
            idx_lists = [idx for _, idx in used]
            out = {k: nc.assemble_rows(v, idx_lists, n) for k, v in parts.items()}
            out["decoder"] = routes - 1
        else:
            mu, logvar, z_d, z_m = self.encode(X, rng)
            z_s_parts = [self.branch_forward(c, nc.take_rows(z_m, idx)) for c, idx in used]
            z_s = nc.assemble_rows(z_s_parts, [idx for _, idx in used], n)
            out = dict(mu=mu, logvar=logvar, z_d=z_d, z_m=z_m, z_s=z_s,
                       decoder=np.zeros(n, dtype=np.int64))
        out["branch"] = routes
        return out

    def contexts(self, X, routes, rng=None):
        """Return (ContextSet or None, latents dict or None)."""
        X = self._check_bands(X)
        if self.mode == "erm":
            return None, None
        if self.mode == "light1":
            h = self._convl("ctxnet.conv", nc.reshape(X, (-1, 1, self.B)))
            ctx = nc.mean(nc.reshape(h, (h.shape[0], self.B)), axis=0)
            return ContextSet(nc.reshape(ctx, (1, self.B)), np.array([True])), None
        lat = self.latents(X, routes, rng)
        k = 1 if self.mode == "vae1" else self.C
        groups = np.ones(X.shape[0], dtype=np.int64) if k == 1 else np.asarray(routes)
        return class_context(lat["z_s"], groups, k, self.B), lat


def class_context(z_s, labels, C, B):
    """Class-wise mean of z_s, linearly resampled to B bands.

    Classes with no member in the batch get a zero vector and a false mask.
    """
    z_s = nc.as_array(z_s)
    labels = np.asarray(labels, dtype=np.int64)
    rows, present = [], np.zeros(C, dtype=bool)
    for c in range(1, C + 1):
        idx = np.flatnonzero(labels == c)
        if len(idx):
            present[c - 1] = True
            rows.append(nc.reshape(nc.mean(nc.take_rows(z_s, idx), axis=0), (1, -1)))
        else:
            rows.append(DiffArray(np.zeros((1, z_s.shape[-1]))))
    means = nc.concat(rows, axis=0)
    return ContextSet(nc.interp_linear(means, B), present)


def argmax_lowest(logits):
    """Row-wise argmax; ties go to the lowest index (numpy's rule)."""
    return np.argmax(np.asarray(logits), axis=-1)


# model file ---------------------------------------------------------------

_MAGIC = b"C3DG"
_VERSION = 1
_META = "__meta__"


def model_bytes(model: CribModel) -> bytes:
    meta = np.array([model.B, model.C, model.D, MODES.index(model.mode), model.seed,
                     model.conv_channels], dtype=np.float64)
    sections = [(_META, meta)] + [(k, v.value) for k, v in model.params.items()]
    out = [_MAGIC, struct.pack("<II", _VERSION, len(sections))]
    for name, arr in sections:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def save_model(model: CribModel, path):
    atomic_write(path, model_bytes(model))


def model_from_bytes(raw: bytes) -> CribModel:
    from .hsidata import FormatError

    if raw[:4] != _MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {_MAGIC!r}", 0)
    if len(raw) < 12:
        raise FormatError("truncated header", len(raw))
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = 12
    sections = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(raw):
                raise FormatError(f"section {name!r} truncated", len(raw))
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
            sections.append((name, arr))
    except struct.error as exc:
        raise FormatError(f"truncated section table: {exc}", pos) from None
    if pos != len(raw):
        raise FormatError("trailing bytes after last section", pos)
    if not sections or sections[0][0] != _META:
        raise FormatError("missing metadata section", 12)
    B, C, D, mode_idx, seed, ch = (int(v) for v in sections[0][1])
    model = CribModel(B, C, D, MODES[mode_idx], seed=seed, conv_channels=ch)
    names = [n for n, _ in sections[1:]]
    if names != list(model.params):
        raise FormatError("parameter sections do not match the architecture", 12)
    for name, arr in sections[1:]:
        if arr.shape != model.params[name].shape:
            raise FormatError(f"section {name!r} has shape {arr.shape}", 12)
        model.params[name].value = arr
    return model


def load_model(path) -> CribModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
