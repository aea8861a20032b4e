"""Cost of the hybrid dispatch layer when there is nothing to bridge.

Two devices of the same kind form one group, so the hybrid path has no
leader exchange to do. Its time should match calling the intra-kind
collective directly.
"""

from heterocomm.experiment import compare_scenarios, preset

direct, hybrid = preset("overhead", epochs=2)
result = compare_scenarios([direct, hybrid], repeats=3)
pair = result["comparisons"][0]
for run in result["runs"]:
    print(f"{run['scenario']:>20}: mean wall {run['wall_seconds']:.3f}s")
print(f"overhead: {pair['overhead_percent']:+.2f}%")
