"""Learn a small concept codebook on synthetic crystals and look inside it.

Trains the three-stage VQ-VAE on a few hundred template crystals, checks how
many crystals survive a round trip through the codebook, lists the nearest
local environments for the busiest codes and prints the family similarity
matrix.  Takes a couple of minutes on one CPU core.

    python demos/concepts_tour.py
"""

from collections import Counter

from crystalconcepts.codebook import reconstruction_ratio, train_three_stage
from crystalconcepts.config import load_config
from crystalconcepts.interpretation import crystal_codes, environment_dump, family_profiles, top_k_environments
from crystalconcepts.synthetic import SyntheticTemplateSpec, make_synthetic_dataset

desk = load_config(preset="desk")
spec = SyntheticTemplateSpec(templates=("rock-salt", "cscl", "hexagonal-ab", "tetragonal-ab"), count=240)
crystals = make_synthetic_dataset(spec, seed=0)
print(f"{len(crystals)} crystals, {sum(c.num_atoms for c in crystals)} atoms")

model, log = train_three_stage(crystals, desk.codebook, seed=0)
print(f"final loss {log.history[-1]['loss']:.4f}")
print(f"round-trip match ratio {reconstruction_ratio(crystals, model):.3f}")

usage = Counter(int(k) for codes in crystal_codes(crystals, model) for k in codes)
print(f"{len(usage)} of {len(model.codes)} codes in use")

for code, count in usage.most_common(3):
    dump = environment_dump(top_k_environments(code, crystals, model, k=3), code)
    print(f"\ncode {code} ({count} atoms)")
    for env in dump["environments"]:
        shell = " ".join(f"{s}@{d:.2f}" for s, d in zip(env["neighbors"], env["neighbor_distances"]))
        print(f"  {env['center']} in crystal {env['crystal_index']}: {shell}")

sim = family_profiles(crystals, model)
print("\nfamily similarity")
width = max(len(f) for f in sim.families)
for name, row in zip(sim.families, sim.matrix):
    print(f"  {name:>{width}}  " + "  ".join(f"{v:.2f}" for v in row))
