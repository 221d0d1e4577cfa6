"""The whole pipeline at smoke scale, in a few minutes of CPU.

Generates a 4-subject x 3-site traveling corpus, trains the two stages very
briefly (the smoke preset trades accuracy for speed - expect a rough model,
not a good one), harmonizes every source volume with every method, and
writes the per-pair metrics, summary table, and report figures.

The same entry points back the command-line interface, so after this runs:

    volharm eval   --config demos/out/smoke/config.json
    volharm report --config demos/out/smoke/config.json

Run from the repository root:  python3 demos/05_end_to_end_smoke.py
"""

import pathlib
import shutil

from volharm import harness
from volharm.config import smoke_config

out = pathlib.Path(__file__).parent / "out" / "smoke"
shutil.rmtree(out, ignore_errors=True)
cfg = smoke_config(out, seed=0)
print(f"running the smoke pipeline into {out} "
      f"(epochs: {cfg.stage1.epochs}+{cfg.stage2.epochs}, latent widths "
      f"{cfg.stage1.widths}) ...")

summary = harness.run_experiment(cfg)

print(f"\n{'method':>10} {'WD median':>10} {'SSIM matched':>13} "
      f"{'site-probe BACC':>16}")
for name, row in summary.items():
    print(f"{name:>10} {row['wd_median']:>10.4f} "
          f"{row['ssim_matched_mean']:>13.4f} {row['bacc_post']:>16.3f}")

paths = harness.run_paths(cfg)
print(f"\npairs table : {paths['eval'] / 'pairs.csv'}")
print(f"summary     : {paths['eval'] / 'summary.csv'}")
print(f"report      : {paths['report']}")
print("\nat smoke scale the diffusion model is undertrained - treat this as "
      "a wiring check.")
print("the configuration in the acceptance suite (8 subjects, 4 sites, "
      "200+300 epochs) is where")
print("the quantitative claims are tested.")
