"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--n 16] [--cells 8] [--repeat 3]

Reports the best wall time per backend and the largest relative difference
between the two results, so a speedup is only quoted for matching output.
"""

import argparse
import math
import time

import numpy as np

from couette_kinetics import _backend
from couette_kinetics.geometry import AnnulusGeometry
from couette_kinetics.kinetic_core import CollisionModel, KineticConfig, VelocityGrid, build_nu_table
from couette_kinetics.transport import SpatialGrid, TransportCoeffs, TransportOperator


def best_of(fn, repeat):
    best, out = math.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def rel_diff(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--cells", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _backend.NAME != "compiled":
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    grid = VelocityGrid(6.0, args.n)
    kc = KineticConfig()
    rng = np.random.default_rng(0)
    F = grid.mu * (1.0 + 0.1 * rng.random(grid.mu.shape))
    geom = AnnulusGeometry(0.5, 0.02)
    sg = SpatialGrid(geom.eta1, args.cells)
    table = build_nu_table(kc.gamma, kc.b0_norm, 2 * math.sqrt(3) * grid.v_max + 2)

    cases = {}
    for name in ("compiled", "python"):
        cm = CollisionModel(grid, kc, backend=name)
        t_q, q = best_of(lambda: cm.collide_parts(F, F), args.repeat)
        t_op, op = best_of(lambda: TransportOperator(grid, sg, geom, TransportCoeffs(epsilon=0.1), table, backend=name), 1)
        S = np.random.default_rng(1).random(op.shape)
        cases[name] = {"collide": (t_q, q[0]), "transport build": (t_op, op.apply(S))}

    print(f"grid {args.n}^3, {args.cells} cells, best of {args.repeat}")
    print(f"{'kernel':<18}{'compiled [s]':>14}{'python [s]':>14}{'speedup':>10}{'rel diff':>12}")
    for kernel in cases["compiled"]:
        tc, rc = cases["compiled"][kernel]
        tp, rp = cases["python"][kernel]
        print(f"{kernel:<18}{tc:>14.4f}{tp:>14.4f}{tp / tc:>10.1f}{rel_diff(rc, rp):>12.2e}")


if __name__ == "__main__":
    main()
