"""Accuracy metrics, classification maps, run reports and config files."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .hsidata import DataError, SynthConfig, atomic_write
from .cribnet import TrainConfig
from .numcore import ContractError


@dataclass
class MetricsReport:
    per_class: list
    oa: float
    aa: float
    kappa: float
    skipped_classes: list

    def as_dict(self):
        return dataclasses.asdict(self)


def confusion(preds, truth, C):
    """C x C counts, rows true class, columns predicted; labels are 1-based."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise DataError(f"{len(preds)} predictions for {len(truth)} labels")
    for name, arr in (("prediction", preds), ("label", truth)):
        bad = np.flatnonzero((arr < 1) | (arr > C))
        if len(bad):
            raise DataError(f"{name} {arr[bad[0]]} at index {bad[0]} outside 1..{C}")
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (truth - 1, preds - 1), 1)
    return cm


def metrics(cm) -> MetricsReport:
    """OA, AA (classes without true samples skipped) and Cohen's kappa."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ContractError("confusion matrix is empty")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    diag = np.diag(cm)
    present = rows > 0
    per_class = [float(diag[c] / rows[c]) if present[c] else None for c in range(len(cm))]
    oa = float(diag.sum() / total)
    aa = float(np.mean(diag[present] / rows[present]))
    pe = float((rows * cols).sum() / total ** 2)
    kappa = 1.0 if pe == 1.0 else float((oa - pe) / (1.0 - pe))
    skipped = [c + 1 for c in range(len(cm)) if not present[c]]
    return MetricsReport(per_class, oa, aa, kappa, skipped)


def default_palette(C):
    base = [(0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
            (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60)]
    rng = np.random.default_rng(0)
    while len(base) < C + 1:
        base.append(tuple(int(v) for v in rng.integers(0, 256, 3)))
    return base[: C + 1]


def map_bytes(preds, mask, palette):
    """Binary PPM of the predictions placed at the true entries of ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    preds = np.asarray(preds, dtype=np.int64)
    if len(preds) != int(mask.sum()):
        raise ContractError(f"{len(preds)} predictions for {int(mask.sum())} labelled positions")
    if len(preds) and preds.max() >= len(palette):
        raise ContractError(f"palette has {len(palette)} colours, class {preds.max()} needs more")
    H, W = mask.shape
    grid = np.zeros((H, W), dtype=np.int64)
    grid[mask] = preds
    rgb = np.asarray(palette, dtype=np.uint8)[grid]
    return f"P6\n{W} {H}\n255\n".encode("ascii") + rgb.tobytes()


def render_map(preds, H, W, palette, path, mask=None):
    if mask is None:
        mask = np.ones((H, W), dtype=bool)
    atomic_write(path, map_bytes(preds, np.asarray(mask).reshape(H, W), palette))


# reports --------------------------------------------------------------------

REPORT_KEYS = ("config", "history", "confusion", "metrics", "theory")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def make_report(config=None, history=None, confusion=None, metrics=None, theory=None):
    def dflt(v, empty):
        return empty if v is None else v

    return _plain({"config": dflt(config, {}), "history": dflt(history, []), "confusion": dflt(confusion, []),
                   "metrics": dflt(metrics, {}), "theory": dflt(theory, {})})


def serialize_report(report) -> str:
    # repr-based float output round-trips exactly
    return json.dumps(_plain(report), indent=2, sort_keys=True, allow_nan=True) + "\n"


def parse_report(text) -> dict:
    report = json.loads(text)
    missing = [k for k in REPORT_KEYS if k not in report]
    if missing:
        raise DataError(f"report lacks keys {missing}")
    return report


def write_report(report, path):
    atomic_write(path, serialize_report(report).encode("utf-8"))


# config files -----------------------------------------------------------------

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_SYNTH_FIELDS = {f.name: f for f in dataclasses.fields(SynthConfig)}


def _coerce(raw, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return _tuple(json.loads(raw))
    return raw


def _tuple(v):
    return tuple(_tuple(x) for x in v) if isinstance(v, list) else v


def parse_config(text):
    """``key = value`` lines; ``synth.<field>`` keys configure the generator.

    Tuple-valued synth fields take JSON arrays.  Unknown keys raise.
    """
    train, synth = TrainConfig(), SynthConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise DataError(f"config line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key.startswith("synth."):
            target, fields, name = synth, _SYNTH_FIELDS, key[6:]
        else:
            target, fields, name = train, _TRAIN_FIELDS, key
        if name not in fields:
            raise DataError(f"config line {lineno}: unknown key {key!r}")
        try:
            setattr(target, name, _coerce(raw, getattr(target, name)))
        except (ValueError, json.JSONDecodeError) as exc:
            raise DataError(f"config line {lineno}: bad value for {key!r}: {exc}") from None
    train.validate()
    return train, synth


def read_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_dict(train: TrainConfig, synth: SynthConfig | None = None):
    out = dataclasses.asdict(train)
    if synth is not None:
        out["synth"] = dataclasses.asdict(synth)
    return _plain(out)
