# %% [markdown]
# # Pre-training TD3+BC on a point-mass dataset
#
# We generate a medium-quality dataset, train TD3+BC from scratch and with
# supervised pre-training (behavior cloning for the actor, return regression for
# the critic), and compare how quickly each reaches 90% of the scratch agent's
# final score. Pre-training steps count on the x-axis.
#
# The budget here is smaller than in the acceptance suite so the script runs in a
# few minutes on one core.

# %%
from dataclasses import replace
from pathlib import Path

import numpy as np

from offline_pretrain.agents import AgentConfig, PretrainConfig
from offline_pretrain.cli import main as cli
from offline_pretrain.harness import (compare_efficiency, phase_switch_drop, preset_config,
                                      run_experiment)

out = Path("runs/notebook02")
base = preset_config("pointmass-medium", agent=AgentConfig(batch_size=256), total_steps=1500,
                     eval_every=100, log_every=100, seeds=(0, 1, 2), output_dir=str(out))
env = base.make_env()
data = base.dataset.load(env)
print(f"{data.n_trajectories} trajectories, {len(data)} transitions")

# %% [markdown]
# ## Scratch vs pre-trained
#
# A small bootstrap weight (lambda_mix = 0.1) in the critic target keeps the
# pre-trained critic's action-gradient informative, which smooths the switch to
# off-policy training.

# %%
scratch = run_experiment(replace(base, name="scratch"), data)
pretrained = run_experiment(
    replace(base, name="pretrained", pretrain=PretrainConfig(pretrain_steps=600, lambda_mix=0.1)),
    data)
print("scratch    windowed score %.3f +- %.3f" % (scratch.report.mean, scratch.report.std))
print("pretrained windowed score %.3f +- %.3f" % (pretrained.report.mean, pretrained.report.std))

eff = compare_efficiency(pretrained.records, scratch.records)
print("steps to 90% of scratch's final score:")
print("  pretrained", eff["pretrained"], "median", eff["median_pretrained"])
print("  scratch   ", eff["scratch"], "median", eff["median_scratch"])

# %% [markdown]
# ## What happens at the phase switch
#
# Relative drop of the score right after pre-training ends (positive = decline).

# %%
for seed, recs in pretrained.records.items():
    print(f"seed {seed}: drop {phase_switch_drop(recs):+.3f}")

# %% [markdown]
# ## Learning curves
#
# The CLI draws mean +- std bands across seeds as an SVG.

# %%
csvs = sorted(str(p) for p in out.glob("*_seed*.csv"))
cli(["plot", *csvs, "--group-by", "phase", "--smoothing", "3", "--out", str(out / "phases.svg")])
cli(["plot", *[c for c in csvs if "scratch" in c], "--out", str(out / "scratch.svg")])
print(np.round([r.normalized_score for r in pretrained.records[0]
                if r.normalized_score is not None], 2))
