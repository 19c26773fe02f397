# %% [markdown]
# # Comparing dispatch policies on one random city
#
# We build a small random street grid, place four single-truck stations on it
# and compare four ways of choosing which two trucks answer a call:
# closest-first (CF), the exact optimum (OPT), one improvement step on CF (OSI)
# and the same step driven by a cheap queueing estimate of future cost (OSIA).

# %%
import numpy as np

from firedispatch import (build_cost_table, closest_first_policy, evaluate_policy, make_instance,
                          osi_policy, osia_policy, policy_iteration)
from firedispatch.mdp import Model

inst = make_instance(d=6, station_count=4, rho=0.1, gamma=0.6, correlated=False, seed=3)
print(f"{inst.node_count} nodes, {len(inst.graph.edges)} edges, stations at {inst.stations}")
print(f"late if response time exceeds t* = {inst.t_star:g}")

# %% [markdown]
# Each entry of the cost table is the probability that the faster of the two
# dispatched trucks arrives late. Row 0 of the last two axes is the outside truck.

# %%
costs = build_cost_table(inst)
print(costs.values.shape)
print(np.round(costs.values[inst.stations[0]], 4))

# %% [markdown]
# Evaluate every policy under the same costs. `g` is the long-run rate of late
# arrivals and FLAR divides it by the total call rate.

# %%
model = Model(inst)
cf = closest_first_policy(inst, model)
cf_eval = evaluate_policy(inst, costs, cf, model)
opt, opt_eval = policy_iteration(inst, costs, cf, model=model)
policies = {
    "CF": cf,
    "OPT": opt,
    "OSI": osi_policy(inst, costs, cf_eval, cf, model),
    "OSIA": osia_policy(inst, costs, model=model, cf_policy=cf),
}
for name, pol in policies.items():
    ev = evaluate_policy(inst, costs, pol, model)
    delta = 100 * (cf_eval.g - ev.g) / cf_eval.g
    print(f"{name:5s} FLAR {ev.flar:.4f}  improvement over CF {delta:5.2f}%")

# %% [markdown]
# Where does OPT disagree with closest-first? Count the (state, location)
# decisions that differ.

# %%
differs = np.any(opt.actions != cf.actions, axis=-1)
print(f"{differs.sum()} of {differs.size} decisions changed")
busy = model.space.capacities.sum() - model.space.states.sum(axis=1)
for b in range(busy.max() + 1):
    print(f"{b} busy trucks: {differs[busy == b].mean():.1%} of decisions changed")

# %% [markdown]
# Correlated travel times (two trucks sharing a road share its delay) can only
# make the faster of the two slower, so every policy gets worse.

# %%
corr = build_cost_table(inst, correlated=True)
print("CF  correlated FLAR", evaluate_policy(inst, corr, cf, model).flar)
_, opt_c = policy_iteration(inst, corr, cf, model=model)
print("OPT correlated FLAR", opt_c.flar)
print("OPT(uncorrelated) run on correlated costs", evaluate_policy(inst, corr, opt, model).flar)
