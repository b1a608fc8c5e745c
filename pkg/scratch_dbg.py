import warnings, numpy as np
from scratch_opt import random_instance
from airfeel.optimizer import (SolverOptions, optimize_allocation, _structural_resources,
                               solve_resources, _alternate, _initial_points)
warnings.simplefilter("ignore")

rng = np.random.default_rng(7)
insts = [random_instance(rng) for _ in range(8)]
cfg, devices = insts[1]  # trial 1 
opts = SolverOptions(max_iters=2000)

# reproduce: run alternation from each start, catch failing solve_resources input
from airfeel.core import ConvergenceError
rng2 = np.random.default_rng(1)
for i, (p0, f0, eta0) in enumerate(_initial_points(cfg, devices, opts, rng2)):
    try:
        run = _alternate(cfg, devices, p0, f0, eta0, opts, do_polish=True)
        print(i, "ok", run["objective"] if run else None)
    except ConvergenceError as e:
        print(i, "FAIL", e)
        break

# find failing (fractions, batches) by instrumenting
import airfeel.optimizer as op
orig = op.solve_resources
captured = []
def wrapper(cfg, devices, fractions, batch_sizes, opts=SolverOptions(), warm_duals=None):
    res = orig(cfg, devices, fractions, batch_sizes, opts, warm_duals)
    if not res.converged:
        captured.append((np.array(fractions), np.array(batch_sizes), res))
    return res
op.solve_resources = wrapper
try:
    run = _alternate(cfg, devices, p0, f0, eta0, opts, do_polish=True)
except ConvergenceError:
    pass
op.solve_resources = orig
if captured:
    fr, bs, res = captured[0]
    print("failing fractions:", fr, "batches:", bs)
    print("residuals:", res.residuals)
    print("eta:", res.eta, "powers:", res.sense_powers)
    power, freqs, eta, psi = _structural_resources(cfg, devices, fr, bs)
    print("structural eta:", eta, "psi:", psi, "power:", power)
    _, e_budget, omega, f_max, p_max = op._arrays(devices)
    geo = op._resource_geometry(cfg, devices, fr, bs)
    freqs2, comp, budgets, sens_coeff, v, obj_coeff, p_floor, eta_hi = geo
    print("eta_hi:", eta_hi, "eta/eta_hi:", eta/eta_hi)
    print("energy at structural:", comp + power*sens_coeff + eta*v, "budget:", e_budget)
    print("stat_eta parts:", cfg.channel_noise_var/eta**2, float(np.sum(psi*v)))
    print("P at pmax?", power/p_max)
