"""Hierarchical allreduce across two device kinds.

Four ranks, two of each kind, each contribute a vector. Members of a kind
reduce to their leader, the two leaders exchange through host memory, and
the result is broadcast back. Every rank ends with the same bytes.
"""

import numpy as np

from heterocomm import group as G
from heterocomm.device import DeviceDescriptor
from heterocomm.launch import run_world

kinds = ["sim-gpu", "sim-gpu", "sim-mlu", "sim-mlu"]
devices = [DeviceDescriptor(rank, kind) for rank, kind in enumerate(kinds)]
gen = np.random.default_rng(7)
contributions = [gen.standard_normal(8) for _ in devices]


def worker(ctx):
    total = G.hetero_allreduce(ctx, contributions[ctx.rank])
    # broadcast from a non-leader of the second group
    echoed = G.hetero_broadcast(ctx, total * 2, root=3)
    return total, echoed, ctx.stats


results = run_world(devices, worker)

expected = np.sum(contributions, axis=0)
print("kind of each rank:", kinds)
print("allreduce result  :", np.round(results[0][0], 4))
print("numpy sum         :", np.round(expected, 4))
print("identical on all ranks:", len({r[0].tobytes() for r in results}) == 1)
for rank, (_, _, stats) in enumerate(results):
    print(f"rank {rank}: host copies {stats.host_copies}, inter-group links {stats.inter_links}")
