"""Independent reference implementations used as test oracles.

These are written for clarity, with plain loops, and share no code with the
package beyond the Crystal record itself.
"""

import itertools
import math

import numpy as np


def brute_force_neighbors(lattice, cart, i, xi, K):
    """Neighbor occurrences of atom ``i`` over a 5x5x5 block of images.

    Returns a list of ``(atom, shift tuple, distance)``: every occurrence
    within ``xi * d_min``, at most ``K`` of them, closest first.
    """
    occ = []
    for n in itertools.product(range(-2, 3), repeat=3):
        t = np.array(n, dtype=float) @ lattice
        for j in range(len(cart)):
            if j == i and n == (0, 0, 0):
                continue
            d = math.dist(cart[i], cart[j] + t)
            occ.append((j, n, d))
    d_min = min(d for _, _, d in occ)
    kept = [o for o in occ if o[2] <= xi * d_min]
    kept.sort(key=lambda o: o[2])
    return kept[:K], d_min


def nearest_code(z, codes):
    best, best_d = None, None
    for t, e in enumerate(codes):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(z, e))
        if best_d is None or d < best_d:
            best, best_d = t, d
    return best, best_d


def cross_entropy(logits, target):
    m = max(logits)
    log_z = m + math.log(sum(math.exp(v - m) for v in logits))
    return log_z - logits[target]


def scalar_losses(species, coords, hat, pad, logits, pred_coords, pred_hat, z=None, e=None,
                  mu=None, log_sigma=None):
    """Per-crystal averaged reconstruction terms plus the regularizer, by loops."""
    B, M = len(species), len(species[0])
    la = lx = lreg = lkl = 0.0
    ll = 0.0
    for b in range(B):
        live = [m for m in range(M) if not pad[b][m]]
        la += sum(cross_entropy(logits[b][m], species[b][m]) for m in live) / len(live)
        lx += sum(sum((coords[b][m][k] - pred_coords[b][m][k]) ** 2 for k in range(3)) for m in live) / len(live)
        ll += sum((hat[b][k] - pred_hat[b][k]) ** 2 for k in range(6))
        if z is not None:
            lreg += sum(2 * sum((z[b][m][k] - e[b][m][k]) ** 2 for k in range(len(z[b][m]))) for m in live) / len(live)
        if mu is not None:
            kl = 0.0
            for m in live:
                for u, s in zip(mu[b][m], log_sigma[b][m]):
                    kl += 0.5 * (u * u + math.exp(2 * s) - 1 - 2 * s)
            lkl += kl / len(live)
    return {"L_A": la / B, "L_X": lx / B, "L_L": ll / B, "L_reg": lreg / B, "L_KL": lkl / B}


def naive_metrics(generated, reference, valid_fn, stable_fn, match_fn):
    """V/S/U/N flags by quadratic scans, first occurrence wins for U."""
    n = len(generated)
    V = [valid_fn(c) for c in generated]
    S = [stable_fn(c) for c in generated]
    U = []
    for i in range(n):
        U.append(not any(match_fn(generated[j], generated[i]) for j in range(i)))
    N = [not any(match_fn(c, r) for r in reference) for c in generated]
    return V, S, U, N


def multiset_overlap(assigned, conditioning):
    pool = list(conditioning)
    hits = 0
    for t in assigned:
        if t in pool:
            pool.remove(t)
            hits += 1
    return hits / len(assigned)
