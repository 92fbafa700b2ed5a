# %% [markdown]
# # Three controllers on one replayed trace
#
# The bundled 25-node WAN at 20 arrivals per second.  One flow trace is
# replayed through the asynchronous price loop (`amtm`), a periodic
# per-flow optimizer (`centralized`) and a periodic per-group allocator
# (`semi-centralized`).  The optimum of the flows present is sampled once a
# second as the reference.

# %%
import numpy as np

from amtm import cli, metrics
from amtm.engine import SimConfig

cfg = SimConfig(intensity=20.0, warmup=10.0, duration=30.0, preload=True, seed=1)
point = cli.compare_point(cfg, oracle_every=1.0)

# %%
print(f"{'scheme':18} {'utility':>9} {'util.':>6} {'flows':>7} {'msgs/round':>10}")
for scheme, r in point.reports.items():
    _, util = metrics.link_utilization(r)
    print(f"{scheme:18} {r.utility[point.sample_ticks].mean():9.1f} {util:6.3f} "
          f"{r.active_flows[point.sample_ticks].mean():7.0f} {r.round_messages.mean():10.0f}")
print(f"{'optimum':18} {point.optimum.mean():9.1f}        {point.flows.mean():7.0f}")

# %% [markdown]
# Per TE period.  `centralized` here is the sampled optimum and its dual
# bound; the realized periodic run is listed separately because its flows
# start late and therefore stay longer.

# %%
for row in point.period_table():
    print(row["period"], {k: round(row[k], 1) for k in
                          ("centralized", "amtm", "semi_centralized", "centralized_realized")})

# %% [markdown]
# Delay: delay-sensitive traffic under the price loop versus the wait for
# the next period boundary under the centralized scheme.

# %%
ds = metrics.queueing_delay_stats(point.reports["amtm"], delay_sensitive_only=True)
wait = metrics.admission_wait(point.reports["centralized"])
print("amtm delay-sensitive queueing delay: mean %.4f s, p99 %.4f s" % (ds["mean"], ds["p99"]))
print("centralized admission wait:          mean %.3f s" % np.mean(wait))
