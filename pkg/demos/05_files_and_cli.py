"""Scene files, quadrant domains, maps and the command line, in a temp dir."""

import os
import tempfile

from c3dg.cli import main
from c3dg.hsidata import read_cube, read_labels

with tempfile.TemporaryDirectory() as tmp:
    cfg = os.path.join(tmp, "run.cfg")
    with open(cfg, "w") as fh:
        fh.write("epochs = 3\nsynth.samples_per_cell = 32\n")
    main(["synth", "--config", cfg, "--out", tmp])
    cube = read_cube(os.path.join(tmp, "source.hsic"))
    labels = read_labels(os.path.join(tmp, "source.hsil"))
    print(f"source scene {cube.data.shape}, {int((labels.labels > 0).sum())} labelled pixels")
    main(["split", "--data", tmp, "--out", os.path.join(tmp, "quadrants")])

    model = os.path.join(tmp, "crib.model")
    report = os.path.join(tmp, "report.json")
    ppm = os.path.join(tmp, "target.ppm")
    main(["train", "--config", cfg, "--model", model, "--report", report, "--map", ppm])
    main(["eval", "--config", cfg, "--model", model])
    print(f"model file {os.path.getsize(model)} bytes, map {os.path.getsize(ppm)} bytes")
    print("exit code for a missing model:", main(["eval", "--model", os.path.join(tmp, "missing")]))
