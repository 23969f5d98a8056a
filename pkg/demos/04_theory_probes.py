"""Numerical probes on a briefly trained model: gradient agreement of the
domain head, entropy estimators, the Fisher-ellipsoid bound and latent
disentanglement."""

import numpy as np

from c3dg import theorylab as tl
from c3dg.cribnet import CribModel, TrainConfig
from c3dg.hsidata import SynthConfig, fresh_sampler, synth_generate
from c3dg.trainpipe import fit, pool_sources

# one-layer construction with a closed form
W = np.array([[0.5, 0.3]])
ip, d_hat, d_ent = tl.one_layer_inner_product(W, np.array([0.1]), np.array([1.0]), np.array([1.0]), 1.0, 0)
print(f"one layer: autodiff {ip:.6f}, closed form {tl.theorem1_closed_form(1.0, d_hat, d_ent, 1.0):.6f}")

synth = SynthConfig(samples_per_cell=50)
sources, _ = synth_generate(synth)
cfg = TrainConfig(epochs=15)
model, _ = fit(CribModel(synth.B, synth.C, synth.D), sources, cfg)
pooled = pool_sources(sources, cfg)
rng = np.random.default_rng(0)
batch = pooled.subset(rng.permutation(len(pooled))[:64])

rep = tl.theorem1_inner_product(model, batch.X, batch.y, batch.d)
print(f"domain head <g1, g1 - g2> = {rep.overall:.4g} over {rep.n_samples} samples")

ent = tl.entropy_estimator_check(model, batch.X, batch.y, 1000, rng, k_ref=20_000)
print(f"entropy: MC {ent['mc_mean']:.4f} +- {ent['mc_stderr']:.4f}, plug-in {ent['plugin_value']:.4f}, "
      f"reference {ent['reference']:.4f}")

fresh = fresh_sampler(synth, [1, 2, 3, 4], 1)(50)
bound = tl.bound_probe(model, pooled, fresh, 0.01, 8, rng, population=10 * len(pooled))
print(f"bound: fresh risk {bound.lhs:.4f} <= worst train risk + slack {bound.rhs:.4f} "
      f"(slack {bound.slack:.3f}, max eps'F eps {bound.max_quadratic:.2e})")

dis = tl.disentangle_probe(model, pooled)
print("disentanglement R^2:", {k: round(v, 3) for k, v in dis.items() if k.startswith("r2")})
