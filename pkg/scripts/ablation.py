"""Ablations on the desk run: latent noise injection off, reconstruction loss off.

Writes one JSON line per (seed, variant) so partial runs are still useful.
"""

import argparse
import json

from efdp_gan.desk import FdProbe, desk_config, desk_data, run_desk

VARIANTS = {
    "base": {},
    "no_injection": {"sigma_noise": 0.0},
    "no_recon": {"gamma_recon": 0.0},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="ablation.jsonl")
    args = ap.parse_args()

    data = desk_data()
    probe = FdProbe(*data)
    with open(args.out, "w") as fh:
        for seed in range(args.seeds):
            for name, overrides in VARIANTS.items():
                r = run_desk(desk_config(seed=seed, **overrides), data, probe)
                row = {"variant": name, **r.as_dict()}
                fh.write(json.dumps(row) + "\n")
                fh.flush()
                print(f"seed {seed} {name:13s} FD {r.fd_final:6.2f}  div {r.diversity:.3f}  "
                      f"g2r {r.g2r_mlp:.3f}", flush=True)


if __name__ == "__main__":
    main()
