#!/usr/bin/env python3
"""Regenerates data/systems/*.json.

Every block is third order, all-pole (one real pole and one complex pair),
scaled to unit H2 norm. Poles sit close to the unit circle so that the common
denominator is well determined from noisy BLAs.
"""
import json
import pathlib
import sys

import numpy as np
from scipy import signal


def block(real, pair_r, pair_angle):
    roots = [real, pair_r * np.exp(1j * pair_angle), pair_r * np.exp(-1j * pair_angle)]
    a = np.real(np.poly(roots))
    imp = np.zeros(20000)
    imp[0] = 1.0
    h = signal.lfilter([1.0], a, imp)
    return {"num": [float(1.0 / np.sqrt(np.sum(h * h)))], "den": [float(x) for x in a]}


def poly(c):
    return {"kind": "polynomial", "coeffs": c}


H1 = block(0.95, 0.93, 0.7)
S1 = block(-0.94, 0.92, 1.3)
H2 = block(0.85, 0.93, 1.9)
S2 = block(-0.85, 0.92, 2.5)

SYSTEMS = {
    "two_branch_cubic": [(H1, poly([0.0, 1.0, 0.0, 0.25]), S1), (H2, poly([0.0, 1.0, 0.0, -0.1]), S2)],
    "linear": [(H1, poly([0.0, 1.0]), S1)],
    "duplicate_branch": [(H1, poly([0.0, 1.0, 0.0, 0.25]), S1)] * 2,
    "tanh_branch": [(H1, {"kind": "tanh", "a": 1.0, "b": 1.5}, S1)],
}

if __name__ == "__main__":
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/systems")
    out.mkdir(parents=True, exist_ok=True)
    for name, branches in SYSTEMS.items():
        doc = {"name": name, "branches": [{"front": f, "nl": nl, "back": b} for f, nl, b in branches]}
        (out / f"{name}.json").write_text(json.dumps(doc, indent=2) + "\n")
