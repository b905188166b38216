"""How V, S, U and N are decided for a handful of hand-made crystals.

No training involved; runs in a few seconds.

    python demos/metrics_walkthrough.py
"""

import numpy as np

from crystalconcepts.crystal import Crystal
from crystalconcepts.evaluation import ToyStabilityOracle, compute_metrics
from crystalconcepts.synthetic import TEMPLATES, build_template_crystal


def salt(a, b, name="rock-salt", scale=1.05):
    return build_template_crystal(TEMPLATES[name], {"A": a, "B": b}, scale)


reference = [salt("K", "Cl")]
oracle = ToyStabilityOracle(reference)

theta = np.radians(30)
turn = np.array([[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1]])
nacl = salt("Na", "Cl")
crystals = {
    "NaCl rock salt": nacl,
    "same NaCl, rotated": Crystal(nacl.lattice @ turn.T, nacl.cart_coords @ turn.T, nacl.atomic_numbers),
    "KBr in CsCl form": salt("K", "Br", "cscl"),
    "NaMgCl (no neutral charge)": Crystal.from_fractional(
        np.eye(3) * 6.0, [[0, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5]], [11, 12, 17]),
    "KCl, already known": salt("K", "Cl"),
    "KCl squeezed to 55%": salt("K", "Cl", scale=0.55),
}

m = compute_metrics(list(crystals.values()), reference, oracle)
print(f"{'crystal':30s} valid stable unique novel  e_hull")
for k, name in enumerate(crystals):
    flags = "  ".join("yes " if f else "no  " for f in (m.valid[k], m.stable[k], m.unique[k], m.novel[k]))
    print(f"{name:30s} {flags}  {m.e_hull[k]:.3f}  {' '.join(m.reasons[k])}")
print()
for key, value in m.aggregates.items():
    print(f"{key:8s} {value:.3f}")
