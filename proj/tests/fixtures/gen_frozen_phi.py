#!/usr/bin/env python3
"""Writes frozen_phi.hpp: a random 2x2x5x5 correlation tensor and the
expected coordinates phi(p) computed by direct enumeration with numpy."""
import numpy as np

BETA, SIGMA, EPS = 50.0, 5.0, 1e-8

rng = np.random.default_rng(20240515)
corr = np.round(rng.uniform(-1.0, 1.0, size=(2, 2, 5, 5)), 6)

def phi(slice_, use_kernel):
    n = slice_ / max(np.linalg.norm(slice_), EPS)
    ys, xs = np.mgrid[0:5, 0:5]
    if use_kernel:
        cy, cx = np.unravel_index(np.argmax(n), n.shape)
        k = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * SIGMA ** 2))
    else:
        k = np.ones_like(n)
    z = BETA * k * n
    m = np.exp(z - z.max())
    m /= m.sum()
    return float((m * xs).sum()), float((m * ys).sum())

lines = ["// Generated by gen_frozen_phi.py; do not edit.", "#pragma once", "",
         "namespace frozen {", "",
         "inline constexpr double kCorrelation[2 * 2 * 5 * 5] = {"]
lines.append("    " + ", ".join(repr(float(v)) for v in corr.ravel()) + "};")
for name, use_kernel in (("kKernelPhi", True), ("kSoftPhi", False)):
    vals = []
    for py in range(2):
        for px in range(2):
            vals.extend(phi(corr[py, px], use_kernel))
    lines.append(f"// (phi_x, phi_y) per source location, beta {BETA}, sigma {SIGMA}")
    lines.append(f"inline constexpr double {name}[8] = {{" + ", ".join(repr(v) for v in vals) + "};")
lines += ["", "}  // namespace frozen", ""]
open(__file__.replace("gen_frozen_phi.py", "frozen_phi.hpp"), "w").write("\n".join(lines))
