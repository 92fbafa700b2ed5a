# %% [markdown]
# # Link prices on a small network
#
# A four-node network with three routes between `s` and `t`.  We solve the
# utility maximization problem centrally, then let the asynchronous price
# loop find the same prices from arrivals alone.

# %%
import numpy as np

from amtm.baselines import solve_num
from amtm.engine import SimConfig, Simulation
from amtm.pricing import PriceUpdateConfig
from amtm.topology import Link, Network, build_pathset
from amtm.traffic import AlphaFair, Flow, TrafficClass, DELAY_TOLERANT

net = Network(["s", "u", "v", "t"], [
    Link("s", "u", 10.0, 1.0), Link("u", "t", 10.0, 1.0),
    Link("s", "v", 8.0, 2.0), Link("v", "t", 8.0, 2.0),
    Link("s", "t", 4.0, 5.0)])
ps = build_pathset(net, 3)
for p in ps.candidates("s", "t"):
    print(p, ps.paths[p].nodes)

# %% [markdown]
# ## Centralized optimum
# Two elastic flows with weights 3 and 1 may use every route.

# %%
heavy = TrafficClass("heavy", 100.0, DELAY_TOLERANT, (10.0, 600.0), 3.0, 0.5)
light = TrafficClass("light", 100.0, DELAY_TOLERANT, (10.0, 600.0), 1.0, 0.5)


def flow(i, w, arrival=0.0):
    cls = heavy if w == 3.0 else light
    routes = {p: 0.0 for p in ps.candidates("s", "t")}
    return Flow(i, cls, "s", "t", arrival, np.inf, AlphaFair(w, 0.5), routes)


sol = solve_num([flow(0, 3.0), flow(1, 1.0)], ps)
print("utility", round(sol.utility, 4))
print("prices ", np.round(sol.prices, 4))
print("rates  ", {j: round(sol.flow_rate(j), 3) for j in (0, 1)})

# %% [markdown]
# ## Same flows, priced asynchronously
# Each flow picks its cheapest route on arrival and meters its rate from the
# path price; the server nudges prices every 0.1 s from queue state only.
# A flow keeps its route for life, so arrivals are staggered to let later
# flows see the prices earlier ones created.

# %%
cfg = SimConfig(topology=ps, intensity=0.0, duration=120.0,
                pricing=PriceUpdateConfig(mu=0.02, n=1e-3, adaptive=False))
trace = [flow(i, w, 1.0 * i) for i, w in enumerate([3.0, 1.0] * 20)]
rep = Simulation(cfg, trace).run()
print("final prices", np.round(rep.prices[-1], 3))
print("final utility", round(float(rep.utility[-1]), 3))
print("max backlog  ", round(float(rep.link_backlog[-1].max()), 5), "Mbit")

# %%
sol = solve_num([flow(i, w) for i, w in enumerate([3.0, 1.0] * 20)], ps)
print("optimum for the same 40 flows:", round(sol.utility, 3))
