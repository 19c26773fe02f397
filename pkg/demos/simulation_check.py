# %% [markdown]
# # Checking the analytic FLAR by simulation
#
# The Markov model gives the fraction of late arrivals exactly. Here we
# simulate the same system event by event and see whether the 95% confidence
# intervals cover the exact value.

# %%
import numpy as np

from firedispatch import build_cost_table, closest_first_policy, evaluate_policy, make_instance
from firedispatch.erlang import erlang_tail, min_tail, sum_min_tail
from firedispatch.sim import simulate_replications

# %% [markdown]
# First the building blocks. A route with w edges takes an Erlang(w) time; the
# late probability of the faster of two trucks is a product of two tails when
# their routes are disjoint, and needs the shifted-minimum tail when they share
# the first part of the route.

# %%
t = 6.0
for w in (2, 4, 6, 8):
    print(w, erlang_tail(w, t), min_tail(w, w + 2, t), sum_min_tail(2, w, w + 2, t))

# %%
rng = np.random.default_rng(0)
y0 = rng.gamma(2, size=400_000)
y1 = rng.gamma(4, size=400_000)
y2 = rng.gamma(6, size=400_000)
print("Monte Carlo", np.mean(y0 + np.minimum(y1, y2) > t), "exact", sum_min_tail(2, 4, 6, t))

# %% [markdown]
# Now the whole system: 20 replications of one million calls each under CF.

# %%
inst = make_instance(d=4, station_count=3, rho=0.1, gamma=0.6, correlated=False, seed=0)
pol = closest_first_policy(inst)
exact = evaluate_policy(inst, build_cost_table(inst), pol).flar
results = simulate_replications(inst, pol, 1_000_000, seed=1, count=20)
hat = np.array([r.flar_hat for r in results])
print(f"exact {exact:.5f}, simulated mean {hat.mean():.5f} (sd {hat.std(ddof=1):.5f})")
print("covered:", sum(r.covers(exact) for r in results), "of", len(results))
