import numpy as np
import pytest

from c3dg import numcore as nc
from c3dg import trainpipe
from c3dg.cribnet import MODES, CribModel, TrainConfig
from c3dg.hsidata import DataError, DomainDataset, SynthConfig, synth_generate
from c3dg.numcore import Tape
from c3dg.trainpipe import fit, pool_sources, rng_streams, train_epoch


def small_sources(seed=0, n=20):
    return synth_generate(SynthConfig(samples_per_cell=n, seed=seed))[0]


def test_fit_history_length():
    model = CribModel(48, 2, 4)
    _, history = fit(model, small_sources(), TrainConfig(epochs=1, train_batch=64))
    assert len(history) == 1 and history[0]["epoch"] == 1
    assert set(history[0]) >= {"l_cls", "l_recon", "l_rev", "l_supp", "kl", "total", "train_oa"}


def test_default_lr():
    assert TrainConfig().lr == 0.005
    assert trainpipe.make_optimizer(TrainConfig()).lr == 0.005


def test_class_out_of_range():
    model = CribModel(48, 2, 4)
    bad = DomainDataset(np.zeros((3, 48)), [1, 2, 3], [1, 1, 1], 3, 4)
    with pytest.raises(DataError):
        train_epoch(model, bad, TrainConfig(), rng_streams(0), nc.AdamState())


def test_band_mismatch():
    model = CribModel(40, 2, 4)
    with pytest.raises(DataError):
        fit(model, small_sources(), TrainConfig(epochs=1))


def test_mode_mismatch():
    with pytest.raises(DataError):
        fit(CribModel(48, 2, 4, mode="erm"), small_sources(), TrainConfig(epochs=1))


@pytest.mark.parametrize("mode", MODES)
def test_same_seed_bit_identical(mode):
    def run():
        model = CribModel(48, 2, 4, mode=mode, seed=3)
        _, hist = fit(model, small_sources(), TrainConfig(context_mode=mode, epochs=2, train_batch=32, seed=3))
        return hist, b"".join(v.tobytes() for v in model.snapshot().values())

    h1, p1 = run()
    h2, p2 = run()
    assert h1 == h2 and p1 == p2


def test_erm_degenerate_matches_plain_backbone():
    sources = small_sources()
    cfg = TrainConfig(context_mode="erm", lambda1=0, lambda2=0, gamma=0, epochs=3, train_batch=32, seed=5)
    model = CribModel(48, 2, 4, mode="erm", seed=5)
    fit(model, sources, cfg)

    ref = CribModel(48, 2, 4, mode="erm", seed=5)
    data = pool_sources(sources, cfg)
    rngs = rng_streams(cfg.seed)
    bb = ref.group("bb.")
    state = nc.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    from c3dg.hsidata import make_batches
    for _ in range(cfg.epochs):
        for batch in make_batches(data, cfg.train_batch, rngs["batch"]):
            ref.zero_grad()
            with Tape() as tape:
                loss = nc.sum(nc.softmax_cross_entropy(ref.backbone(batch.X.reshape(-1, 1, 48)), batch.y - 1))
            tape.backward(loss)
            nc.adam_step(bb, [p.grad for p in bb], state)
    for k in model.params:
        if k.startswith("bb."):
            assert model.params[k].value.tobytes() == ref.params[k].value.tobytes(), k
        else:
            # untouched heads keep their initial values
            assert model.params[k].value.tobytes() == CribModel(48, 2, 4, mode="erm", seed=5).params[k].value.tobytes()


def test_one_step_per_batch_fresh_gradients(monkeypatch):
    sources = small_sources(n=10)
    cfg = TrainConfig(context_mode="erm", epochs=1, train_batch=16)
    model = CribModel(48, 2, 4, mode="erm")
    seen = []
    real_step = nc.adam_step

    def spy(params, grads, state):
        seen.append(([p.value.copy() for p in params], [None if g is None else g.copy() for g in grads]))
        return real_step(params, grads, state)

    batches = []
    real_batches = trainpipe.make_batches

    def spy_batches(*a):
        out = real_batches(*a)
        batches.extend(out)
        return out

    monkeypatch.setattr(trainpipe.nc, "adam_step", spy)
    monkeypatch.setattr(trainpipe, "make_batches", spy_batches)
    fit(model, sources, cfg)
    assert len(seen) == len(batches) == 5
    names = list(model.params)
    for (values, grads), batch in zip(seen, batches):
        probe = CribModel(48, 2, 4, mode="erm")
        for k, v in zip(names, values):
            probe.params[k].value = v
        with Tape() as tape:
            total, _, _ = trainpipe.batch_loss(probe, batch.X, batch.y, batch.d, cfg, None)
        tape.backward(total)
        for k, g in zip(names, grads):
            want = probe.params[k].grad
            assert (g is None and want is None) or np.array_equal(g, want), k


def test_coverage_and_mode_paired_batching(monkeypatch):
    orders = {}
    real = trainpipe.make_batches

    def spy(data, size, rng):
        out = real(data, size, rng)
        orders.setdefault(mode, []).append([b.index.copy() for b in out])
        return out

    monkeypatch.setattr(trainpipe, "make_batches", spy)
    sources = small_sources(n=15)
    for mode in ("crib", "erm"):
        fit(CribModel(48, 2, 4, mode=mode), sources, TrainConfig(context_mode=mode, epochs=2, train_batch=32))
    for epoch_a, epoch_b in zip(orders["crib"], orders["erm"]):
        assert all(np.array_equal(a, b) for a, b in zip(epoch_a, epoch_b))
        assert sorted(np.concatenate(epoch_a).tolist()) == list(range(120))


def test_domain_cap():
    data = pool_sources(small_sources(n=20), TrainConfig(domain_cap=10))
    assert len(data) == 40
    assert np.bincount(data.d).tolist() == [0, 10, 10, 10, 10]


def test_default_task_loss_drops(default_crib):
    _, history, *_ = default_crib
    assert history[19]["total"] <= 0.7 * history[0]["total"]
