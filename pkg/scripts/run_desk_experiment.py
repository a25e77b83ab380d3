"""Train the image-enriched model on synthetic 32x32 scenes and report against Model 2.

    python3 scripts/run_desk_experiment.py --out runs/desk
"""
import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from cvdcm import analysis, choice, synth, trainer, vision
from cvdcm.split import split


@dataclasses.dataclass
class DeskConfig:
    n_tasks: int = 6250
    n_images: int = 14000
    resolution: int = 32
    seed: int = 0
    train_fraction: float = 0.8


def run(cfg: DeskConfig, tcfg: trainer.TrainerConfig, out: Path) -> dict:
    t0 = time.perf_counter()
    st = synth.make_study(cfg.n_tasks, cfg.n_images, synth.TrueModel(), cfg.resolution, cfg.seed)
    s = split(st.dataset, cfg.train_fraction, cfg.seed)
    ext = vision.ExtractorConfig(resolution=cfg.resolution)
    res = trainer.train(s.train, s.test, st.images, ext, tcfg, on_epoch=lambda e: print(json.dumps(e), flush=True))
    m1 = choice.estimate_mnl(s.train, model=1)
    m2 = choice.estimate_mnl(s.train, model=2)
    m3 = trainer.model3_result(s.train, res.params, res.weights, ext, st.images)

    tk, ek = analysis.dataset_key(s.train), analysis.dataset_key(s.test)
    cols = [
        analysis.ModelColumn(r.model, r, analysis.holdout_metrics(choice.log_likelihood(s.test, r.params), s.test.n_obs), tk, ek)
        for r in (m1, m2)
    ]
    cols.append(analysis.ModelColumn("Model 3", m3, analysis.holdout_metrics(res.log.test_ll, s.test.n_obs), tk, ek))
    report = analysis.compare_models(cols)

    test_ids = sorted(s.test.image_ids())
    util = trainer.image_utilities(res.params, res.weights, {i: st.images[i] for i in test_ids}, ext)
    true_u = [synth.true_image_utility(st.images[i].ground_truth, st.true_model.alpha) for i in test_ids]
    groups = analysis.density_quantiles(util, {i: st.images[i].density for i in util}, 6)
    top, bottom = analysis.rank_images(util, 20)
    gap = np.mean([u for _, u in top]) - np.mean([u for _, u in bottom])

    out.mkdir(parents=True, exist_ok=True)
    analysis.write_report(report, out)
    analysis.write_image_csv(util, st.images, out / "test_image_utilities.csv")
    analysis.write_density_csv(groups, out / "density_summary.csv")
    trainer.save_checkpoint(out / "checkpoint", res)
    summary = {
        "test_gain_per_obs": (res.log.test_ll - cols[1].test["loglik"]) / s.test.n_obs,
        "spearman": float(spearmanr([util[i] for i in test_ids], true_u)[0]),
        "density_medians": [g.median for g in groups],
        "wtp_top20_vs_bottom20": analysis.wtp_extremes(float(gap), res.params.beta_hhc),
        "best_epoch": res.log.best_epoch,
        "seconds": time.perf_counter() - t0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(report.to_text())
    print(json.dumps(summary, indent=2))
    return summary


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--l2-gamma", type=float, default=1e-3)
    a = p.parse_args()
    tcfg = trainer.TrainerConfig(learning_rate=a.learning_rate, momentum=a.momentum, l2_gamma=a.l2_gamma, epochs=a.epochs, seed=a.seed)
    run(DeskConfig(seed=a.seed), tcfg, Path(a.out))


if __name__ == "__main__":
    main()
