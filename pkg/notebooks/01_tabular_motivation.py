# %% [markdown]
# # Why pre-train values? A four-state example
#
# A single offline trajectory through a small chain is enough to show the effect.
# Q-learning from zero values has to push reward information backwards one
# bootstrap at a time; starting from Monte-Carlo estimates of the same trajectory
# removes most of that work.

# %%
import numpy as np

from offline_pretrain.core import ReturnConfig, annotate_dataset
from offline_pretrain.envs import motivational_mdp, random_tabular_mdp
from offline_pretrain.tabular import (InitStrategy, QTable, first_optimal_epoch,
                                      fitted_q_iteration, mc_initialize, solve_optimal_tabular,
                                      table1_grid)

mdp, ds = motivational_mdp()
ds = annotate_dataset(ds, ReturnConfig(gamma=1.0))
print("states:", mdp.n_states, "actions:", mdp.n_actions, "transitions:", len(ds))
print("return-to-go along the trajectory:", ds.arrays["rtg"])

# %% [markdown]
# ## Monte-Carlo initialisation
#
# Every-visit averaging gives Q(0, right) = 0.5 because state 0 is visited twice
# with returns 0 and 1. First-visit keeps only the first return.

# %%
for mode in ("EveryVisit", "FirstVisit"):
    q = mc_initialize(ds, 1.0, mode, action_mask=mdp.action_mask)
    print(mode, q.values[[0, 1, 1, 2], [1, 0, 1, 1]])

# %% [markdown]
# ## Epoch-by-epoch Q-learning (lr = 1, gamma = 1)

# %%
zero, mc, zero_hist, mc_hist = table1_grid()
print("epoch | zero init          | MC init")
for k in range(len(zero)):
    print(f"{k:5d} | {zero[k]} | {mc[k]}")

q_star = solve_optimal_tabular(mdp, 1.0)
print("zero init: values optimal at epoch", first_optimal_epoch(zero_hist, q_star),
      "policy at epoch", first_optimal_epoch(zero_hist, q_star, policy=True))
print("MC init:   values optimal at epoch", first_optimal_epoch(mc_hist, q_star),
      "policy at epoch", first_optimal_epoch(mc_hist, q_star, policy=True))

# %% [markdown]
# ## The same effect with fitted Q-iteration
#
# On random MDPs, starting closer to Q* (interpolating zero and Q* with weight
# beta) shortens the number of backups needed to get within delta of Q*.

# %%
gamma, delta = 0.9, 1e-3
iters = {b: [] for b in (0.0, 0.25, 0.5, 0.75, 1.0)}
for seed in range(10):
    m = random_tabular_mdp(10, 4, seed)
    qs = solve_optimal_tabular(m, gamma, tol=1e-13)
    for b in iters:
        rep = fitted_q_iteration(m, gamma, InitStrategy.interpolated(b, qs).build(m, gamma), delta)
        iters[b].append(rep.iterations)
for b, ks in iters.items():
    print(f"beta {b:4.2f}: median iterations {np.median(ks):5.1f}")

# %% [markdown]
# With measurement noise in each backup the error is still bounded by the
# contraction term plus the accumulated per-iteration errors.

# %%
m = random_tabular_mdp(10, 4, 0)
rep = fitted_q_iteration(m, gamma, QTable.zeros(m, gamma), 1e-2, noise_scale=0.005, seed=0)
for k, (e, bnd) in enumerate(zip(rep.errors[:8], rep.bound(gamma)[:8])):
    print(f"iter {k}: error {e:.4f} <= bound {bnd:.4f}")
