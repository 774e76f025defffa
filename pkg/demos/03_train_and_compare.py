"""
A short training run and a density sweep against the baselines
===============================================================

The full desk preset (50k steps) takes a few minutes; pass a step count
on the command line to change the length of this run.
"""

import sys
import tempfile

from gcq import evaluate, make_policy, preset_config, run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 6000
config = preset_config("desk", {"schedule.warmup_steps": min(1000, steps // 2),
                                "schedule.total_steps": steps})
print(f"training {steps} steps, config digest {config.digest()[:12]}")

out = tempfile.mkdtemp(prefix="gcq_demo_")
result = run_training(config, out)
last = result.records[-1]
print(f"{len(result.records)} episodes, last episode reward {last['reward_total']:.1f}, "
      f"checkpoint {result.final_checkpoint}")

# greedy evaluation at three HDV densities; every policy sees the same traffic draws
inflows = (0.1, 0.3, 0.5)
for name in (str(result.final_checkpoint), "rule_based", "random"):
    policy, _ = make_policy(name, config)
    report = evaluate(policy, config, inflows, episodes=5)
    for c in report.cells:
        print(f"{c.policy:>10} inflow={c.hdv_inflow:.1f} mean={c.mean:8.1f} "
              f"collisions/episode={c.collision_rate:.2f}")
