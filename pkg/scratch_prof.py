import time
import warnings
import numpy as np
from scratch_opt import random_instance
from airfeel.optimizer import (
    SolverOptions, optimize_allocation, refit_consistent_batches,
    _polish_batches, _reduced_objective, solve_batch_sizes, _alternate,
    _initial_points,
)

warnings.simplefilter("ignore")
rng = np.random.default_rng(7)
cfg, devices = random_instance(rng)
opts = SolverOptions()

t0 = time.time()
b, obj = refit_consistent_batches(cfg, devices, [d.max_sense_power/2 for d in devices],
                                  [d.max_frequency/2 for d in devices], 1e-4)
print("refit:", time.time()-t0, "s, obj", obj)

t0 = time.time()
b2, obj2 = _polish_batches(cfg, devices, b)
print("polish:", time.time()-t0, "s, obj", obj2)

t0 = time.time()
o, _ = _reduced_objective(cfg, devices, b)
print("one reduced eval:", (time.time()-t0)*1000, "ms")

t0 = time.time()
run = _alternate(cfg, devices, np.array([d.max_sense_power/2 for d in devices]),
                 np.array([d.max_frequency/2 for d in devices]), 1e-4, opts)
print("one alternate run:", time.time()-t0, "s, iters:", len(run["trace"]), "obj", run["objective"])

t0 = time.time()
res = optimize_allocation(cfg, devices, opts, np.random.default_rng(0))
print("full optimize:", time.time()-t0, "s, obj", res.objective, "trace", len(res.trace))
