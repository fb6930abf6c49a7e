"""Monte Carlo against the closed form E[C(t)^2 + S(t)^2] = 4t - 8 + 8 exp(-t/2)."""
import argparse

from kinflow.analysis import counterexample_expectation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--paths", type=int, default=20000)
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    print(f"{'t':>5} {'exact':>12} {'mc_mean':>12} {'std_err':>10} {'z':>7}")
    for t in (0.1, 0.5, 1.0, 2.0, 4.0):
        r = counterexample_expectation(t, args.paths, args.dt, args.seed)
        print(f"{t:5.1f} {r.exact:12.8f} {r.mc_mean:12.8f} {r.std_err:10.2e} {r.z_score:7.2f}")


if __name__ == "__main__":
    main()
