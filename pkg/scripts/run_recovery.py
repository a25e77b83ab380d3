"""Monte Carlo parameter recovery for the numeric-only logit.

    python3 scripts/run_recovery.py --seeds 10 --n-tasks 20000
    python3 scripts/run_recovery.py --with-images    # omitted image term, ratio check
"""
import argparse
import json
from dataclasses import asdict, dataclass

import numpy as np

from cvdcm import choice, synth


@dataclass
class RecoveryConfig:
    seeds: int = 10
    n_tasks: int = 20000
    n_images: int = 4000
    with_images: bool = False


def run(cfg: RecoveryConfig) -> dict:
    if cfg.with_images:
        truth = synth.TrueModel()
    else:
        truth = synth.TrueModel(beta_month=np.zeros(12), alpha={})
    rows = []
    for seed in range(cfg.seeds):
        st = synth.make_study(cfg.n_tasks, cfg.n_images, truth, seed=seed, render=False)
        r = choice.estimate_mnl(st.dataset, model=1)
        bh, bt = r.estimate("beta_hhc"), r.estimate("beta_tti")
        rows.append(
            {
                "seed": seed,
                "beta_hhc": bh,
                "beta_tti": bt,
                "z_hhc": (bh - truth.beta_hhc) / r.se("beta_hhc"),
                "z_tti": (bt - truth.beta_tti) / r.se("beta_tti"),
                "vtt": r.vtt,
                "vtt_se": r.vtt_se,
                "ratio_z": (bt / bh - truth.beta_tti / truth.beta_hhc) / choice.ratio_se(bt, bh, r.covariance),
            }
        )
        print(json.dumps(rows[-1]))
    vtts = np.array([r["vtt"] for r in rows])
    return {
        "config": asdict(cfg),
        "true_vtt": truth.vtt,
        "vtt_within_10pct": int(np.sum(np.abs(vtts / truth.vtt - 1) <= 0.1)),
        "within_3se": int(sum(abs(r["z_hhc"]) <= 3 and abs(r["z_tti"]) <= 3 for r in rows)),
        "mean_vtt": float(vtts.mean()),
        "sd_vtt": float(vtts.std(ddof=1)) if len(vtts) > 1 else 0.0,
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--n-tasks", type=int, default=20000)
    p.add_argument("--n-images", type=int, default=4000)
    p.add_argument("--with-images", action="store_true")
    a = p.parse_args()
    print(json.dumps(run(RecoveryConfig(a.seeds, a.n_tasks, a.n_images, a.with_images)), indent=2))


if __name__ == "__main__":
    main()
