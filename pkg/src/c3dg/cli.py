"""Command-line entry point: synth, split, train, eval, check."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import numcore as nc
from .cribnet import MODES, CribModel, load_model, save_model
from .evaluation import (confusion, config_dict, default_palette, make_report, metrics,
                         read_config, render_map, serialize_report, write_report)
from .hsidata import (DomainDataset, FormatError, LabelMap, atomic_write, bayes_oracle,
                      fresh_sampler, quadrant_split, read_cube, read_labels, synth_generate,
                      synth_scene, write_cube, write_labels, HsiCube, ConstructionError)
from .inferpipe import predict_dataset
from .trainpipe import fit, pool_sources
from . import theorylab as tl

SOURCE_CUBE, SOURCE_LABELS = "source.hsic", "source.hsil"
TARGET_CUBE, TARGET_LABELS = "target.hsic", "target.hsil"


class UsageError(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="c3dg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=MODES)

    sp = sub.add_parser("synth", help="write a synthetic source/target scene")
    common(sp)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("split", help="cut a scene into four quadrant domains")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="fit a model and evaluate it on the target")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--model", required=True)
    sp.add_argument("--report")
    sp.add_argument("--map")

    sp = sub.add_parser("eval", help="evaluate a saved model on the target")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--model", required=True)
    sp.add_argument("--report")
    sp.add_argument("--map")

    sp = sub.add_parser("check", help="numerical checks")
    sp.add_argument("what", choices=("grads", "theorem1", "entropy", "bound", "disentangle"))
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--model")
    sp.add_argument("--report")
    return p


def _configs(args):
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(args.config)
        train, synth = read_config(args.config)
    else:
        from .cribnet import TrainConfig
        from .hsidata import SynthConfig
        train, synth = TrainConfig(), SynthConfig()
    if getattr(args, "seed", None) is not None:
        train.seed = args.seed
        synth = dataclasses.replace(synth, seed=args.seed)
    if getattr(args, "mode", None):
        train.context_mode = args.mode
    train.validate()
    return train, synth


def _load_scene(data_dir):
    cube = read_cube(os.path.join(data_dir, SOURCE_CUBE))
    labels = read_labels(os.path.join(data_dir, SOURCE_LABELS))
    tcube = read_cube(os.path.join(data_dir, TARGET_CUBE))
    tlabels = read_labels(os.path.join(data_dir, TARGET_LABELS))
    return cube, labels, tcube, tlabels


def _domains(args, synth):
    """(sources, target, target mask or None)."""
    if args.data:
        cube, labels, tcube, tlabels = _load_scene(args.data)
        C = int(max(labels.labels.max(), tlabels.labels.max()))
        sources = quadrant_split(cube, labels, C)
        mask = tlabels.labels > 0
        y = tlabels.labels[mask]
        target = DomainDataset(tcube.data[mask], y, np.full(len(y), 5), C, 5)
        return sources, target, mask
    sources, target = synth_generate(synth)
    side = int(round(np.sqrt(len(target))))
    mask = np.ones((side, side), dtype=bool) if side * side == len(target) else None
    return sources, target, mask


def _evaluate(model, target, train_cfg):
    preds = predict_dataset(model, target, train_cfg.test_batch)
    cm = confusion(preds, target.y, model.C)
    return preds, cm, metrics(cm)


def _write_map(path, preds, mask, C):
    if mask is None:
        raise UsageError("--map needs a target laid out as an image")
    render_map(preds, mask.shape[0], mask.shape[1], default_palette(C), path, mask=mask)


def cmd_synth(args):
    train, synth = _configs(args)
    os.makedirs(args.out, exist_ok=True)
    cube, labels, tcube, tlabels = synth_scene(synth)
    oracle = {"target": bayes_oracle(synth, [synth.target_domain]), "all": bayes_oracle(synth)}
    write_cube(cube, os.path.join(args.out, SOURCE_CUBE))
    write_labels(labels, os.path.join(args.out, SOURCE_LABELS))
    write_cube(tcube, os.path.join(args.out, TARGET_CUBE))
    write_labels(tlabels, os.path.join(args.out, TARGET_LABELS))
    atomic_write(os.path.join(args.out, "oracle.json"), (json.dumps(oracle, indent=2, sort_keys=True) + "\n").encode())
    print(json.dumps(oracle, sort_keys=True))
    return 0


def cmd_split(args):
    cube = read_cube(os.path.join(args.data, SOURCE_CUBE))
    labels = read_labels(os.path.join(args.data, SOURCE_LABELS))
    os.makedirs(args.out, exist_ok=True)
    for q, ds in enumerate(quadrant_split(cube, labels), 1):
        write_cube(HsiCube(ds.X.reshape(1, len(ds), -1)), os.path.join(args.out, f"domain{q}.hsic"))
        write_labels(LabelMap(ds.y.reshape(1, -1)), os.path.join(args.out, f"domain{q}.hsil"))
        print(f"domain {q}: {len(ds)} samples")
    return 0


def theory_section(model, sources, train_cfg, synth):
    """Probes run on the synthetic distribution named by the config."""
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 20]))
    pooled = pool_sources(sources, train_cfg)
    out = {}
    if model.n_enc:
        batch = pooled.subset(rng.permutation(len(pooled))[: train_cfg.test_batch])
        out["theorem1"] = tl.theorem1_inner_product(model, batch.X, batch.y, batch.d).as_dict()
        out["entropy"] = tl.entropy_estimator_check(model, batch.X, batch.y, 1000, rng, k_ref=20_000)
        out["disentangle"] = tl.disentangle_probe(model, pooled)
    fresh = fresh_sampler(synth, list(range(1, synth.D + 1)), train_cfg.seed)(synth.samples_per_cell)
    population = synth.population or synth.samples_per_cell * synth.C * synth.n_domains
    out["bound"] = tl.bound_probe(model, pooled, fresh, train_cfg.probe_gamma, train_cfg.probe_samples,
                                  rng, train_cfg.train_batch, population).as_dict()
    return out


def cmd_train(args):
    train_cfg, synth = _configs(args)
    sources, target, mask = _domains(args, synth)
    B, C = sources[0].B, sources[0].C
    model = CribModel(B, C, len(sources), mode=train_cfg.context_mode, seed=train_cfg.seed)
    model, history = fit(model, sources, train_cfg)
    preds, cm, rep = _evaluate(model, target, train_cfg)
    theory = {} if args.data else theory_section(model, sources, train_cfg, synth)
    save_model(model, args.model)
    report = make_report(config_dict(train_cfg, None if args.data else synth), history,
                         cm.tolist(), rep.as_dict(), theory)
    if args.report:
        write_report(report, args.report)
    if args.map:
        _write_map(args.map, preds, mask, C)
    print(json.dumps({"oa": rep.oa, "aa": rep.aa, "kappa": rep.kappa}))
    return 0


def cmd_eval(args):
    train_cfg, synth = _configs(args)
    model = load_model(args.model)
    _, target, mask = _domains(args, synth)
    preds, cm, rep = _evaluate(model, target, train_cfg)
    report = make_report({"model": os.path.basename(args.model), "test_batch": train_cfg.test_batch},
                         [], cm.tolist(), rep.as_dict(), {})
    if args.report:
        write_report(report, args.report)
    if args.map:
        _write_map(args.map, preds, mask, model.C)
    print(json.dumps({"oa": rep.oa, "aa": rep.aa, "kappa": rep.kappa}))
    return 0


def _grad_suite(seed):
    rng = np.random.default_rng(seed)
    results = {}
    checks = {
        "affine": (lambda x, W, b: nc.sum(nc.square(nc.affine(x, W, b))),
                   lambda: [rng.uniform(-2, 2, 3), rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, 2)]),
        "conv1d": (lambda x, K, b: nc.sum(nc.square(nc.conv1d(x, K, b))),
                   lambda: [rng.uniform(-2, 2, (2, 6)), rng.uniform(-2, 2, (3, 2, 3)), rng.uniform(-2, 2, 3)]),
        "cross_entropy": (lambda z: nc.softmax_cross_entropy(z, 1),
                          lambda: [rng.uniform(-2, 2, 4)]),
        "interp": (lambda v: nc.sum(nc.square(nc.interp_linear(v, 7))),
                   lambda: [rng.uniform(-2, 2, 4)]),
    }
    for name, (f, draw) in checks.items():
        worst = max(nc.grad_check(f, draw()).max_rel_error for _ in range(20))
        results[name] = {"max_rel_error": worst, "passed": bool(worst <= 1e-5)}
    return results


def cmd_check(args):
    train_cfg, synth = _configs(args)
    if args.what == "grads":
        out = _grad_suite(train_cfg.seed)
    else:
        if not args.model:
            raise UsageError(f"check {args.what} needs --model")
        model = load_model(args.model)
        sources, _, _ = _domains(args, synth)
        pooled = pool_sources(sources, train_cfg)
        rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 21]))
        batch = pooled.subset(rng.permutation(len(pooled))[: train_cfg.test_batch])
        if args.what == "theorem1":
            out = tl.theorem1_inner_product(model, batch.X, batch.y, batch.d).as_dict()
        elif args.what == "entropy":
            out = tl.entropy_estimator_check(model, batch.X, batch.y, 1000, rng)
        elif args.what == "disentangle":
            if pooled.latents is None and not args.data:
                raise UsageError("disentangle needs synthetic data")
            out = tl.disentangle_probe(model, pooled)
        else:
            fresh = fresh_sampler(synth, list(range(1, synth.D + 1)), train_cfg.seed)(synth.samples_per_cell)
            population = synth.population or synth.samples_per_cell * synth.C * synth.n_domains
            out = tl.bound_probe(model, pooled, fresh, train_cfg.probe_gamma, train_cfg.probe_samples,
                                 rng, train_cfg.train_batch, population).as_dict()
    text = serialize_report(make_report(theory={args.what: out})) if args.report else None
    if args.report:
        atomic_write(args.report, text.encode("utf-8"))
    print(json.dumps(out, sort_keys=True, default=float))
    return 0


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "check": cmd_check}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"c3dg: usage error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"c3dg: no such file: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (FormatError, ConstructionError, ValueError, IndexError) as exc:
        print(f"c3dg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
