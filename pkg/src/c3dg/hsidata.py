"""Hyperspectral containers, binary cube/label files, domain construction
and the causal synthetic scene generator."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .numcore import ContractError, ShapeError


class FormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DataError(ValueError):
    """Inconsistent labels, shapes or ids in otherwise well-formed data."""


class ConstructionError(ValueError):
    pass


@dataclass
class HsiCube:
    data: np.ndarray  # (H, W, B) float64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"cube must be H x W x B, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("cube contains non-finite values")

    @property
    def H(self):
        return self.data.shape[0]

    @property
    def W(self):
        return self.data.shape[1]

    @property
    def B(self):
        return self.data.shape[2]


@dataclass
class LabelMap:
    labels: np.ndarray  # (H, W) ints, 0 = unlabeled

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ShapeError(f"label map must be H x W, got {self.labels.shape}")

    @property
    def H(self):
        return self.labels.shape[0]

    @property
    def W(self):
        return self.labels.shape[1]


@dataclass
class DomainDataset:
    """Flat (spectrum, class, domain) samples; classes and domains are 1-based."""

    X: np.ndarray
    y: np.ndarray
    d: np.ndarray
    C: int
    D: int
    latents: dict | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        self.X = X.reshape(len(self.y), -1) if X.size else X.reshape(len(self.y), X.shape[-1] if X.ndim > 1 else 0)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.int64)
        if len(self.y) and (self.y.min() < 1 or self.y.max() > self.C):
            raise ContractError(f"class labels must lie in 1..{self.C}")
        if len(self.d) and (self.d.min() < 1 or self.d.max() > self.D):
            raise ContractError(f"domain ids must lie in 1..{self.D}")

    def __len__(self):
        return len(self.y)

    @property
    def B(self):
        return self.X.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        lat = None if self.latents is None else {k: v[idx] for k, v in self.latents.items()}
        return DomainDataset(self.X[idx], self.y[idx], self.d[idx], self.C, self.D, lat)

    @staticmethod
    def concat(parts):
        parts = list(parts)
        lat = None
        if all(p.latents is not None for p in parts):
            lat = {k: np.concatenate([p.latents[k] for p in parts]) for k in parts[0].latents}
        return DomainDataset(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.d for p in parts]),
            max(p.C for p in parts),
            max(p.D for p in parts),
            lat,
        )


# binary formats -------------------------------------------------------------

_CUBE_MAGIC = b"HSIC"
_LABEL_MAGIC = b"HSIL"
_VERSION = 1


def atomic_write(path, payload: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cube_bytes(cube: HsiCube) -> bytes:
    header = _CUBE_MAGIC + struct.pack("<4I", _VERSION, cube.H, cube.W, cube.B)
    return header + cube.data.astype("<f4").tobytes(order="C")


def label_bytes(labels: LabelMap) -> bytes:
    if labels.labels.min(initial=0) < 0 or labels.labels.max(initial=0) > 0xFFFF:
        raise ContractError("labels must fit in u16")
    header = _LABEL_MAGIC + struct.pack("<3I", _VERSION, labels.H, labels.W)
    return header + labels.labels.astype("<u2").tobytes(order="C")


def write_cube(cube: HsiCube, path):
    atomic_write(path, cube_bytes(cube))


def write_labels(labels: LabelMap, path):
    atomic_write(path, label_bytes(labels))


def _read_header(raw, magic, n_fields):
    if len(raw) < 4:
        raise FormatError("file shorter than magic", len(raw))
    if raw[:4] != magic:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {magic!r}", 0)
    need = 4 + 4 * n_fields
    if len(raw) < need:
        raise FormatError("truncated header", len(raw))
    fields = struct.unpack_from(f"<{n_fields}I", raw, 4)
    if fields[0] != _VERSION:
        raise FormatError(f"unsupported version {fields[0]}", 4)
    return fields[1:], need


def read_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        return cube_from_bytes(fh.read())


def cube_from_bytes(raw: bytes) -> HsiCube:
    (H, W, B), offset = _read_header(raw, _CUBE_MAGIC, 4)
    expected = offset + 4 * H * W * B
    if len(raw) != expected:
        raise FormatError(f"payload holds {len(raw) - offset} bytes, expected {expected - offset}",
                          min(len(raw), expected))
    data = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(H, W, B)
    return HsiCube(data.astype(np.float64))


def read_labels(path) -> LabelMap:
    with open(path, "rb") as fh:
        return labels_from_bytes(fh.read())


def labels_from_bytes(raw: bytes) -> LabelMap:
    (H, W), offset = _read_header(raw, _LABEL_MAGIC, 3)
    expected = offset + 2 * H * W
    if len(raw) != expected:
        raise FormatError(f"payload holds {len(raw) - offset} bytes, expected {expected - offset}",
                          min(len(raw), expected))
    labels = np.frombuffer(raw, dtype="<u2", offset=offset).reshape(H, W)
    return LabelMap(labels.astype(np.int64))


# domain construction ----------------------------------------------------------

def quadrant_split(cube: HsiCube, labels: LabelMap, n_classes=None):
    """Cut the scene at (H//2, W//2) into NW, NE, SW, SE domains 1..4."""
    if (cube.H, cube.W) != (labels.H, labels.W):
        raise ShapeError(f"cube is {cube.H}x{cube.W} but labels are {labels.H}x{labels.W}")
    C = int(n_classes or labels.labels.max(initial=0))
    hh, ww = cube.H // 2, cube.W // 2
    rows, cols = np.indices((cube.H, cube.W))
    quadrant = 1 + (rows >= hh).astype(int) * 2 + (cols >= ww).astype(int)
    out = []
    for q in range(1, 5):
        mask = (quadrant == q) & (labels.labels > 0)
        y = labels.labels[mask]
        out.append(DomainDataset(cube.data[mask], y, np.full(len(y), q), C, 4))
    return out


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray
    d: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.index)


def batch_of(dataset: DomainDataset, idx) -> Batch:
    idx = np.asarray(idx, dtype=np.intp)
    return Batch(dataset.X[idx], dataset.y[idx], dataset.d[idx], idx)


def make_batches(dataset: DomainDataset, size, rng):
    """Shuffle once and chunk; the last batch may be short."""
    if size < 1:
        raise ContractError(f"batch size must be >= 1, got {size}")
    if len(dataset) == 0:
        return []
    order = rng.permutation(len(dataset))
    return [batch_of(dataset, order[i:i + size]) for i in range(0, len(order), size)]


def make_domain_batches(dataset: DomainDataset, size, rng):
    """Per-domain shuffling and chunking; batch order is then shuffled."""
    if size < 1:
        raise ContractError(f"batch size must be >= 1, got {size}")
    chunks = []
    for dom in np.unique(dataset.d):
        members = np.flatnonzero(dataset.d == dom)
        members = members[rng.permutation(len(members))]
        chunks.extend(members[i:i + size] for i in range(0, len(members), size))
    order = rng.permutation(len(chunks))
    return [batch_of(dataset, chunks[k]) for k in order]


# synthetic scenes -------------------------------------------------------------

LATENT_DIM = 4


def _bumps(B, centers, widths):
    t = np.linspace(0.0, 1.0, B)
    return np.stack([np.exp(-0.5 * ((t - c) / w) ** 2) for c, w in zip(centers, widths)])


@dataclass
class SynthConfig:
    """Causal scene generator settings.

    Spectra are ``base + basis.T @ (class_coef[c] + z_d) + mod_amp * mod_basis.T @ z_m
    + noise``, where z_d ~ N(domain_coef[d], zd_sigma^2 I) and
    z_m = A_c z_s with a fixed orthogonal A_c per class, z_s ~ N(0, I).
    Domains 1..D are sources; domain D+1 is the held-out target.
    """

    C: int = 2
    D: int = 4
    B: int = 48
    samples_per_cell: int = 200
    noise_sigma: float = 0.0
    zd_sigma: float = 0.02
    mod_amp: float = 0.05
    seed: int = 0
    basis_centers: tuple = (0.15, 0.38, 0.62, 0.85)
    basis_widths: tuple = (0.09, 0.09, 0.09, 0.09)
    mod_centers: tuple = (0.05, 0.3, 0.55, 0.8)
    mod_widths: tuple = (0.05, 0.05, 0.05, 0.05)
    class_coef: tuple = ((0.0, 0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0))
    domain_coef: tuple = (
        (0.0, 0.0, 0.0, 0.0),
        (0.0, 0.0, 1.0, 0.0),
        (0.0, 0.0, 0.0, 1.0),
        (0.0, 0.0, 1.0, 1.0),
        (0.0, 0.0, 0.0, 0.0),
    )
    collisions: tuple = (((1, 5), (2, 1)),)
    margin: float = 0.25
    population: int = 0

    @property
    def n_domains(self):
        return self.D + 1

    @property
    def target_domain(self):
        return self.D + 1

    def validate(self):
        if len(self.class_coef) != self.C:
            raise ConstructionError(f"class_coef has {len(self.class_coef)} rows for C={self.C}")
        if len(self.domain_coef) != self.n_domains:
            raise ConstructionError(
                f"domain_coef has {len(self.domain_coef)} rows, need D+1={self.n_domains}")
        for pair in self.collisions:
            (c1, d1), (c2, d2) = pair
            if c1 == c2:
                raise ConstructionError(f"collision {pair} must join different classes")
            for c, d in pair:
                if not (1 <= c <= self.C and 1 <= d <= self.n_domains):
                    raise ConstructionError(f"collision {pair} references an invalid cell")


@dataclass
class SynthPlant:
    """Everything fixed by the config before sampling."""

    cfg: SynthConfig
    base: np.ndarray
    basis: np.ndarray
    mod_basis: np.ndarray
    cell_coef: np.ndarray  # (C, D+1, 4)
    domain_mean: np.ndarray  # (D+1, 4) mean z_d per domain
    rotations: np.ndarray  # (C, 4, 4)
    colliding: set = field(default_factory=set)


def build_plant(cfg: SynthConfig) -> SynthPlant:
    cfg.validate()
    basis = _bumps(cfg.B, cfg.basis_centers, cfg.basis_widths)
    if np.linalg.matrix_rank(basis) < LATENT_DIM:
        raise ConstructionError("spectral basis is rank deficient")
    mod_basis = _bumps(cfg.B, cfg.mod_centers, cfg.mod_widths)
    t = np.linspace(0.0, 1.0, cfg.B)
    base = 0.5 + 0.2 * t
    class_coef = np.asarray(cfg.class_coef, dtype=np.float64)
    domain_mean = np.asarray(cfg.domain_coef, dtype=np.float64).copy()

    # A collision (c1, d1) == (c2, d2) pins the first cell's domain mean.
    pinned = {}
    for pair in cfg.collisions:
        (c1, d1), (c2, d2) = pair
        need = class_coef[c2 - 1] + domain_mean[d2 - 1] - class_coef[c1 - 1]
        if d1 in pinned and not np.array_equal(pinned[d1], need):
            raise ConstructionError(f"collision {pair} conflicts with an earlier pair on domain {d1}")
        pinned[d1] = need
        domain_mean[d1 - 1] = need
    for pair in cfg.collisions:
        (c1, d1), (c2, d2) = pair
        lhs = class_coef[c1 - 1] + domain_mean[d1 - 1]
        rhs = class_coef[c2 - 1] + domain_mean[d2 - 1]
        if not np.allclose(lhs, rhs, rtol=0.0, atol=1e-12):
            raise ConstructionError(f"collision system infeasible at pair {pair}")

    cell_coef = class_coef[:, None, :] + domain_mean[None, :, :]
    colliding = set()
    for pair in cfg.collisions:
        (c1, d1), (c2, d2) = pair
        # bit-identical atoms for colliding cells
        cell_coef[c1 - 1, d1 - 1] = cell_coef[c2 - 1, d2 - 1]
        colliding.update({(c1, d1), (c2, d2)})

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    rotations = np.stack([np.linalg.qr(rng.standard_normal((LATENT_DIM, LATENT_DIM)))[0]
                          for _ in range(cfg.C)])
    plant = SynthPlant(cfg, base, basis, mod_basis, cell_coef, domain_mean, rotations, colliding)
    _check_margin(plant)
    return plant


def cell_spectrum(plant: SynthPlant, c, d):
    """Noise-free spectrum of cell (c, d) with all within-cell latents at their mean."""
    return plant.base + plant.cell_coef[c - 1, d - 1] @ plant.basis


def _collision_groups(plant):
    cfg = plant.cfg
    groups = {}
    for c in range(1, cfg.C + 1):
        for d in range(1, cfg.n_domains + 1):
            key = cell_spectrum(plant, c, d).tobytes()
            groups.setdefault(key, []).append((c, d))
    return list(groups.values())


def _check_margin(plant):
    cfg = plant.cfg
    cells = [(c, d) for c in range(1, cfg.C + 1) for d in range(1, cfg.n_domains + 1)]
    atoms = {cell: cell_spectrum(plant, *cell) for cell in cells}
    for i, a in enumerate(cells):
        for b in cells[i + 1:]:
            if np.array_equal(atoms[a], atoms[b]):
                if a[0] == b[0]:
                    raise ConstructionError(f"cells {a} and {b} coincide within one class")
                continue
            gap = np.max(np.abs(atoms[a] - atoms[b]))
            if gap < cfg.margin:
                raise ConstructionError(
                    f"cells {a} and {b} differ by only {gap:.3g} < margin {cfg.margin}")


def _sample_cell(plant, c, d, n, rng):
    cfg = plant.cfg
    z_s = rng.standard_normal((n, LATENT_DIM))
    z_m = z_s @ plant.rotations[c - 1].T
    z_d = plant.domain_mean[d - 1] + cfg.zd_sigma * rng.standard_normal((n, LATENT_DIM))
    # z_d enters around the cell's (possibly pinned) coefficient
    coef = plant.cell_coef[c - 1, d - 1] + (z_d - plant.domain_mean[d - 1])
    X = plant.base + coef @ plant.basis + cfg.mod_amp * (z_m @ plant.mod_basis)
    if cfg.noise_sigma > 0:
        X = X + cfg.noise_sigma * rng.standard_normal(X.shape)
    return X, z_s, z_m, z_d


def synth_sample(plant: SynthPlant, domains, n_per_cell, rng) -> DomainDataset:
    cfg = plant.cfg
    Xs, ys, ds, lat = [], [], [], {"z_s": [], "z_m": [], "z_d": []}
    for d in domains:
        for c in range(1, cfg.C + 1):
            X, z_s, z_m, z_d = _sample_cell(plant, c, d, n_per_cell, rng)
            Xs.append(X)
            ys.append(np.full(n_per_cell, c))
            ds.append(np.full(n_per_cell, d))
            lat["z_s"].append(z_s)
            lat["z_m"].append(z_m)
            lat["z_d"].append(z_d)
    return DomainDataset(np.concatenate(Xs), np.concatenate(ys), np.concatenate(ds),
                         cfg.C, cfg.n_domains, {k: np.concatenate(v) for k, v in lat.items()})


def synth_generate(cfg: SynthConfig):
    """Return (list of D source datasets, target dataset)."""
    plant = build_plant(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    sources = [synth_sample(plant, [d], cfg.samples_per_cell, rng) for d in range(1, cfg.D + 1)]
    target = synth_sample(plant, [cfg.target_domain], cfg.samples_per_cell, rng)
    return sources, target


def fresh_sampler(cfg: SynthConfig, domains, seed):
    """Callable n -> dataset drawing new i.i.d. samples from the given domains."""
    plant = build_plant(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, seed]))

    def draw(n_per_cell):
        return synth_sample(plant, domains, n_per_cell, rng)

    return draw


def bayes_oracle(cfg: SynthConfig, domains=None):
    """Accuracy ceilings by enumerating (class, domain) cells as atoms.

    Without domain knowledge a spectrum shared by several cells is assigned
    the majority class among them (ties split evenly); with domain knowledge
    every cell is unambiguous.  ``domains`` restricts the scored cells.
    """
    plant = build_plant(cfg)
    domains = list(domains) if domains is not None else list(range(1, cfg.n_domains + 1))
    # with equal cell sizes the prior of each cell is uniform
    correct = 0.0
    total = 0
    for group in _collision_groups(plant):
        counts = {}
        for c, _ in group:
            counts[c] = counts.get(c, 0) + 1
        best = max(counts.values())
        winners = [c for c, k in counts.items() if k == best]
        for c, d in group:
            if d not in domains:
                continue
            total += 1
            if c in winners:
                correct += 1.0 / len(winners)
    return {"oa_no_context": correct / total, "oa_with_context": 1.0}


def synth_scene(cfg: SynthConfig):
    """Lay the synthetic samples out as images.

    Returns ``(source_cube, source_labels, target_cube, target_labels)``;
    the source scene puts domain q in quadrant q so ``quadrant_split``
    recovers the domains.  Requires D == 4 and a square cell count.
    """
    if cfg.D != 4:
        raise ConstructionError("scene layout needs exactly four source domains")
    n = cfg.samples_per_cell * cfg.C
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ConstructionError(f"{n} samples per domain do not fill a square quadrant")
    sources, target = synth_generate(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))

    def tile(ds):
        order = rng.permutation(len(ds))
        return ds.X[order].reshape(side, side, -1), ds.y[order].reshape(side, side)

    cube = np.zeros((2 * side, 2 * side, cfg.B))
    labels = np.zeros((2 * side, 2 * side), dtype=np.int64)
    for q, ds in enumerate(sources):
        r0, c0 = (q // 2) * side, (q % 2) * side
        cube[r0:r0 + side, c0:c0 + side], labels[r0:r0 + side, c0:c0 + side] = tile(ds)
    tcube, tlabels = tile(target)
    return HsiCube(cube), LabelMap(labels), HsiCube(tcube), LabelMap(tlabels)
