import itertools
import json

import numpy as np
import pytest

from c3dg.cribnet import TrainConfig
from c3dg.evaluation import (confusion, config_dict, default_palette, make_report, map_bytes, metrics,
                             parse_config, parse_report, render_map, serialize_report, write_report)
from c3dg.hsidata import DataError, SynthConfig
from c3dg.numcore import ContractError


def brute(cm):
    """Sample-level oracle: expand the matrix into label pairs and count."""
    pairs = [(t, p) for t, p in itertools.product(range(len(cm)), repeat=2) for _ in range(int(cm[t][p]))]
    n = len(pairs)
    agree = sum(t == p for t, p in pairs) / n
    recalls = []
    for c in range(len(cm)):
        mine = [p for t, p in pairs if t == c]
        if mine:
            recalls.append(sum(p == c for p in mine) / len(mine))
    chance = sum((sum(t == c for t, _ in pairs) / n) * (sum(p == c for _, p in pairs) / n) for c in range(len(cm)))
    kappa = 1.0 if chance == 1 else (agree - chance) / (1 - chance)
    return agree, sum(recalls) / len(recalls), kappa


def test_confusion_orientation():
    cm = confusion([1, 2, 2], [1, 1, 2], 2)
    assert cm.tolist() == [[1, 1], [0, 1]]


def test_confusion_errors():
    with pytest.raises(DataError):
        confusion([1, 3], [1, 1], 2)
    with pytest.raises(DataError):
        confusion([1, 2], [0, 1], 2)
    with pytest.raises(DataError):
        confusion([1], [1, 2], 2)


def test_worked_example():
    rep = metrics([[50, 10], [5, 35]])
    assert rep.oa == pytest.approx(0.85, abs=1e-6)
    assert rep.aa == pytest.approx(0.854167, abs=1e-6)
    assert rep.kappa == pytest.approx(0.693878, abs=1e-6)


def test_perfect_and_empty():
    rep = metrics(np.diag([3, 4, 5]))
    assert rep.oa == rep.aa == rep.kappa == 1.0
    with pytest.raises(ContractError):
        metrics(np.zeros((2, 2)))


def test_skipped_class_in_aa():
    rep = metrics([[4, 0, 1], [0, 0, 0], [1, 0, 4]])
    assert rep.skipped_classes == [2] and rep.per_class[1] is None
    assert rep.aa == pytest.approx(0.8)


def test_random_matrices_vs_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        C = int(rng.integers(2, 6))
        cm = rng.integers(0, 12, (C, C))
        cm[0, 0] += 1
        rep = metrics(cm)
        oa, aa, kappa = brute(cm)
        assert abs(rep.oa - oa) <= 1e-12 and abs(rep.aa - aa) <= 1e-12 and abs(rep.kappa - kappa) <= 1e-12


def test_ppm_header_and_size(tmp_path):
    data = map_bytes([1, 2, 0, 1], np.ones((2, 2), bool), default_palette(2))
    assert data.startswith(b"P6\n2 2\n255\n")
    for H, W in ((2, 2), (3, 7), (10, 1)):
        path = tmp_path / f"{H}x{W}.ppm"
        render_map(np.ones(H * W, dtype=int), H, W, default_palette(2), path)
        header = f"P6\n{W} {H}\n255\n".encode()
        assert path.stat().st_size == len(header) + 3 * H * W


def test_ppm_unlabelled_black():
    mask = np.array([[True, False], [False, True]])
    data = map_bytes([1, 2], mask, default_palette(2))
    body = np.frombuffer(data[len(b"P6\n2 2\n255\n"):], np.uint8).reshape(2, 2, 3)
    assert body[0, 1].tolist() == [0, 0, 0] and body[0, 0].tolist() == list(default_palette(2)[1])


def test_ppm_errors():
    with pytest.raises(ContractError):
        map_bytes([1], np.ones((2, 2), bool), default_palette(2))
    with pytest.raises(ContractError):
        map_bytes([1, 1, 1, 5], np.ones((2, 2), bool), default_palette(2))


def test_report_round_trip(tmp_path):
    rep = make_report(config_dict(TrainConfig(), SynthConfig()), [{"epoch": 1, "total": 0.1 + 0.2}],
                      np.array([[1, 2], [3, 4]]), {"oa": 1 / 3}, {"x": np.float64(2.5), "ok": np.bool_(True)})
    path = tmp_path / "r.json"
    write_report(rep, path)
    back = parse_report(path.read_text())
    assert back == rep and back["history"][0]["total"] == 0.1 + 0.2
    assert serialize_report(back) == path.read_text()
    assert isinstance(back["theory"]["ok"], bool)


def test_report_missing_keys():
    with pytest.raises(DataError):
        parse_report(json.dumps({"config": {}}))


def test_parse_config():
    train, synth = parse_config("epochs = 3  # short\nlambda1=0.5\nsynth.samples_per_cell = 10\n"
                                "synth.collisions = [[[1, 5], [2, 1]]]\n")
    assert train.epochs == 3 and train.lambda1 == 0.5
    assert synth.samples_per_cell == 10 and synth.collisions == (((1, 5), (2, 1)),)


@pytest.mark.parametrize("text", ["bogus = 1", "epochs = 1\nepochs = 2", "epochs", "epochs = many"])
def test_parse_config_errors(text):
    with pytest.raises(DataError):
        parse_config(text)
