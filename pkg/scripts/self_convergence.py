"""Grid self-convergence of the chemotaxis solver in d = 1.

Doubles n_x = n_v and halves the substep h, then compares the final
densities on the shared x nodes. Prints the L1 differences and their ratios
for spectral and semi-Lagrangian (multilinear) transport.
"""
import argparse

import numpy as np

from kinflow import brownian as B, kernel as K, noise as N
from kinflow.fields import Domain, PhaseField, density
from kinflow.solver import SolverConfig, solve


def final_density(n, h, transport, T=0.5):
    dom = Domain(1, 2.0, n, 1.0, n)
    X, V = dom.x_mesh()[0], dom.v_mesh()[0]
    f0 = 0.05 * (1 + 0.5 * np.cos(np.pi * X)) * np.exp(-V ** 2 / 0.08)
    kern = K.angle_kernel(K.linear_rate(20.0), K.constant_profile(1.0), 0.25)
    ens = B.generate(3, B.TimeGrid(0.0, T, 100), 1, 1)
    cfg = SolverConfig(T=T, dt=0.1, h=h, transport=transport)
    tr = solve(PhaseField(dom, np.broadcast_to(f0, dom.shape).copy()), kern, N.zero(1), ens, cfg)
    return dom.dx, density(tr.final)


def main():
    ap = argparse.ArgumentParser(description="solver self-convergence study")
    ap.add_argument("--levels", type=int, default=4)
    args = ap.parse_args()
    sizes = [16 * 2 ** i for i in range(args.levels)]
    for transport in ("spectral", "semi-lagrangian"):
        res = [final_density(n, 0.02 / 2 ** i, transport) for i, n in enumerate(sizes)]
        errs = [np.abs(fine[::2] - coarse).sum() * dx
                for (dx, coarse), (_, fine) in zip(res, res[1:])]
        print(transport)
        for i, e in enumerate(errs):
            ratio = errs[i - 1] / e if i else float("nan")
            print(f"  n={sizes[i]:4d}->{sizes[i + 1]:4d}  L1 diff={e:.3e}  ratio={ratio:.2f}")


if __name__ == "__main__":
    main()
