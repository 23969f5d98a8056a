import numpy as np
import pytest

from c3dg.cribnet import CribModel, TrainConfig
from c3dg.hsidata import SynthConfig, synth_generate
from c3dg.trainpipe import fit

# Collision inside the sources: class 1 in domain 2 reflects the same
# spectrum as class 2 in domain 1, so training itself sees the ambiguity.
IN_SOURCE = dict(collisions=(((1, 2), (2, 1)),),
                 domain_coef=((0, 0, 0, 0), (0, 0, 0, 0), (0, 0, 0, 1), (0, 0, 1, 1), (0, 0, 1, 0)))


def train(mode="crib", epochs=30, seed=0, synth=None, **kw):
    synth = synth or SynthConfig(seed=seed)
    sources, target = synth_generate(synth)
    cfg = TrainConfig(context_mode=mode, epochs=epochs, seed=seed, **kw)
    model = CribModel(synth.B, synth.C, synth.D, mode=mode, seed=seed)
    model, history = fit(model, sources, cfg)
    return model, history, sources, target, cfg


@pytest.fixture(scope="session")
def default_crib():
    return train("crib", epochs=30)


@pytest.fixture(scope="session")
def collision_crib():
    return train("crib", epochs=60, synth=SynthConfig(**IN_SOURCE), batching="domain")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines, printed once at the end of the session
ACCEPTANCE = {}


def record(number, title, ok, detail=""):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip()
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
