"""
Traffic on a three-lane corridor and the graph a CAV fleet sees
===============================================================

"""

# a simulated corridor: 500 m, three lanes, off-ramps at 200 m and 400 m
import numpy as np
from gcq import Flows, RoadSpec, SimState, observe, step
from gcq.observation import normalize_adjacency

road = RoadSpec()
state = SimState.new(seed=2)

# no lane commands for CAVs: they keep their lane and only follow the car ahead
for _ in range(80):
    events = step(state, {}, Flows(hdv=0.3), road)

print(f"t={state.time_step} steps, {len(state.vehicles)} vehicles on the road")
for v in sorted(state.vehicles.values(), key=lambda v: v.position)[:8]:
    print(f"  id={v.id:3d} {v.kind.name:3s} lane={v.lane} x={v.position:6.1f} m v={v.speed:5.2f} m/s")

# the observation: CAVs plus every HDV within 30 m of some CAV, padded to 40 slots
obs = observe(state, road, n_max=40)
print(f"\n{obs.n_real} visible nodes, {int(obs.M.sum())} of them controllable CAVs")
print("feature rows (speed/14, position/500, lane one-hot, intention one-hot):")
print(np.round(obs.X[:min(obs.n_real, 5)], 3))

# wiring: CAV-CAV complete, CAV to the HDVs it senses, HDVs sensed by the same CAV
n = obs.n_real
print("\nadjacency of the visible nodes:")
print(obs.A[:n, :n].astype(int))

# the graph convolution mixes each node with its neighbours through D^-1/2 (A+I) D^-1/2
A_norm = normalize_adjacency(obs.A)
print("\nrow sums of the normalized operator (first visible nodes):",
      np.round(A_norm[:min(n, 6)].sum(axis=1), 3))
