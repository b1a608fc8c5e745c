"""Scratch validation: optimizer vs grid oracle on random K=2 instances."""
import time
import warnings

import numpy as np

from airfeel.core import DeviceConfig, SystemConfig
from airfeel.optimizer import (
    GridSpec, SolverOptions, check_feasibility, grid_oracle,
    optimize_allocation, round_batches, allocation_report,
    solve_batch_sizes, solve_resources,
)


def random_instance(rng, k=2):
    cfg = SystemConfig(
        num_devices=k,
        grad_dim=1000,
        num_subcarriers=100,
        sense_sample_time=0.5,
        symbol_time=0.02,
        cycles_per_sample=2.5e7,
        latency_budget=float(rng.uniform(20, 40)),
        sense_noise_var=float(rng.uniform(0.001, 0.01)),
        channel_noise_var=float(rng.uniform(1e-5, 1e-3)),
        grad_var_bound=1.0,
        hessian_bound=1.0,
        smoothness=1.0,
        total_rounds=200,
    )
    devices = [
        DeviceConfig(
            channel_power_gain=float(rng.uniform(0.5, 2.0) * 1e-3),
            energy_budget=float(rng.uniform(2.0, 10.0)),
            cpu_constant=float(rng.uniform(0.2, 1.0) * 1e-26),
            max_frequency=float(rng.uniform(0.4, 2.0) * 1e9),
            max_sense_power=float(rng.uniform(0.6, 3.0) * 1e-2),
            clutter_var=float(rng.uniform(0.0, 1.0)),
        )
        for _ in range(k)
    ]
    return cfg, devices


def main():
    rng = np.random.default_rng(7)
    opts = SolverOptions()
    ratios = []
    for trial in range(8):
        cfg, devices = random_instance(rng)
        t0 = time.time()
        try:
            res = optimize_allocation(cfg, devices, opts, np.random.default_rng(trial))
        except Exception as exc:
            print(f"[{trial}] optimize failed: {exc}")
            continue
        t1 = time.time()
        grid = GridSpec.from_caps(cfg, devices, points_per_axis=8, refine_rounds=2)
        alloc_g, obj_g = grid_oracle(cfg, devices, grid)
        t2 = time.time()
        ratio = res.objective / obj_g
        ratios.append(ratio)
        rep = allocation_report(cfg, devices, res.alloc_continuous)
        print(f"[{trial}] alg={res.objective:.6g} oracle={obj_g:.6g} "
              f"ratio={ratio:.4f} trace={len(res.trace)} "
              f"b={np.round(res.alloc_continuous.batch_sizes, 2)} "
              f"kkt3={res.batch_residuals.get('max'):.2e} "
              f"kkt4={res.resource_residuals.get('max'):.2e} "
              f"t_alg={t1-t0:.2f}s t_grid={t2-t1:.2f}s")
        print(f"     lat_slack={np.round(rep['latency_slack'], 4)} "
              f"en_slack={np.round(rep['energy_slack'], 4)} "
              f"trace={['%.5g' % v for v in res.trace]}")
    print("worst ratio:", max(ratios) if ratios else None)


if __name__ == "__main__":
    warnings.simplefilter("always")
    main()
