# %% [markdown]
# # Regularising both actor and critic with little data
#
# With only 25 trajectories, plain behavior cloning is a strong baseline. Here we
# compare it with two hybrids that keep both networks close to the data:
#
# * TD3+BC with a CQL term on the critic (pre-trained with the same term), and
# * an ensemble soft actor-critic with a BC term and an ensemble-diversity
#   regulariser, pre-trained with soft behavior cloning.

# %%
import numpy as np

from offline_pretrain.agents import AgentConfig, PretrainConfig
from offline_pretrain.harness import preset_config, run_experiment

base = dict(total_steps=600, eval_every=100, log_every=100, seeds=(0, 1))
configs = {
    "BC": dict(agent=AgentConfig(algorithm="BC", batch_size=128)),
    "TD3+BC+CQL": dict(
        agent=AgentConfig(algorithm="TD3BC_CQL", batch_size=128, bc_alpha=1.0, cql_weight=1.0),
        pretrain=PretrainConfig(pretrain_steps=300, value_regularizer="CQL")),
    "EnsembleSAC+BC": dict(
        agent=AgentConfig(algorithm="EnsembleSoftAC_BC", batch_size=128, n_critics=5, eta=1.0),
        pretrain=PretrainConfig(pretrain_steps=300, bc_mode="Soft",
                                value_regularizer="EnsembleDiversify")),
}

cfg0 = preset_config("pointmass-small-data", **base)
data = cfg0.dataset.load(cfg0.make_env())
print(f"{data.n_trajectories} trajectories, {len(data)} transitions")

# %%
results = {}
for name, kw in configs.items():
    results[name] = run_experiment(preset_config("pointmass-small-data", **base, **kw), data)
    r = results[name].report
    print(f"{name:15s} windowed score {r.mean:.3f} +- {r.std:.3f}  per seed {r.per_seed}")

# %% [markdown]
# The per-phase view shows where each method spends its steps.

# %%
for name, res in results.items():
    recs = res.records[0]
    phases = {}
    for rec in recs:
        phases.setdefault(rec.phase.value, []).append(rec.step)
    print(name, {p: (min(s), max(s)) for p, s in phases.items()})
    print("   scores", np.round([r.normalized_score for r in recs if r.normalized_score is not None], 2))
