"""Equal versus speed-proportional batch split on a fast/slow pair.

The slow device takes twice as long per sample. With an equal split the fast
one idles half of every step; the adaptive split measures both devices first
and hands the fast one roughly two thirds of the batch.
"""

from heterocomm.experiment import compare_scenarios, preset

equal, adaptive, fixed = preset("load-adaptive", epochs=2)
result = compare_scenarios([equal, adaptive, fixed])

for run in result["runs"]:
    sizes = run["report"]["allocation"]
    print(f"{run['scenario']:>24}: batch split {sizes}, "
          f"wall {run['wall_seconds']:.3f}s, modeled {run['modeled_seconds']:.3f}s, "
          f"final loss {run['final_loss']:.5f}")
for pair in result["comparisons"]:
    print(f"{pair['candidate']} vs {pair['baseline']}: "
          f"speedup {pair['speedup_wall']:.2f}x wall, {pair['speedup_modeled']:.2f}x modeled")
