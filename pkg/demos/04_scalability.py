"""Adding slower devices still shortens an epoch.

One fast device, then fast plus slow, then two of each. The modeled epoch
time is printed for each world along with the final training loss, which
stays the same because the global batch and its order never change.
"""

from heterocomm.experiment import preset, run_experiment

for cfg in preset("scalability", epochs=1):
    report = run_experiment(cfg)
    epoch = report.ranks[0].epoch_modeled[0]
    speeds = "+".join(f"{d.speed_factor:g}" for d in cfg.devices)
    print(f"{speeds:>16}: modeled epoch {epoch * 1e3:7.2f} ms, "
          f"split {report.allocation}, loss {report.final_loss:.6f}")
