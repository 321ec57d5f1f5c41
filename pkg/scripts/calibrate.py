"""Grid over clipping thresholds and generator step size for the desk run.

The defaults reproduce the sweep behind ``DESK_SETTINGS``.  Each cell costs
one full-budget run, roughly 80 s on a single core.
"""

import argparse
import itertools

from efdp_gan.desk import FdProbe, desk_config, desk_data, run_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--c1", type=float, nargs="+", default=[0.1, 0.05, 0.01])
    ap.add_argument("--c2", type=float, nargs="+", default=[1.0, 4.0])
    ap.add_argument("--eta-g", type=float, nargs="+", default=[1e-3, 3e-3])
    ap.add_argument("--n-f", type=int, nargs="+", default=[0])
    args = ap.parse_args()

    data = desk_data()
    probe = FdProbe(*data)
    print("c1      c2    eta_g   n_f   FD_final  ratio  g2r")
    for c1, c2, eta_g, n_f in itertools.product(args.c1, args.c2, args.eta_g, args.n_f):
        r = run_desk(desk_config(seed=args.seed, c1=c1, c2=c2, eta_g=eta_g, n_f=n_f), data, probe)
        print(f"{c1:<7g} {c2:<5g} {eta_g:<7g} {n_f:<5d} {r.fd_final:8.2f}  "
              f"{r.fd_final / r.fd_init:.3f}  {r.g2r_mlp:.3f}", flush=True)


if __name__ == "__main__":
    main()
