import time, warnings, numpy as np
from scratch_opt import random_instance
from airfeel.optimizer import GridSpec, SolverOptions, grid_oracle, optimize_allocation
warnings.simplefilter("ignore")
rng = np.random.default_rng(7)
for trial in range(8):
    cfg, devices = random_instance(rng)
    res = optimize_allocation(cfg, devices, SolverOptions(), np.random.default_rng(trial))
    for rounds, ppa in ((6, 8), (10, 8)):
        t0 = time.time()
        grid = GridSpec.from_caps(cfg, devices, points_per_axis=ppa, refine_rounds=rounds)
        _, obj_g = grid_oracle(cfg, devices, grid)
        print(f"[{trial}] rounds={rounds} ppa={ppa}: oracle={obj_g:.6g} alg={res.objective:.6g} "
              f"oracle/alg={obj_g/res.objective:.4f} t={time.time()-t0:.2f}s")
