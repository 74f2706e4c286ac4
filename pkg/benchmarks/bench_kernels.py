"""Hot kernels with numba against the same code run as plain Python/numpy.

Each backend runs in its own interpreter because the JIT switch
(OVERACT_DISABLE_JIT) is read at import time.

    python benchmarks/bench_kernels.py            # table
    python benchmarks/bench_kernels.py --json out.json
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np


def _cases():
    from overact import kernels
    from overact.control import ControllerConfig, OffsetMpc
    from overact.dynamics import ChassisGeometry, VehicleParams
    from overact.qp import solve_ocp

    p = VehicleParams()
    g = ChassisGeometry()
    G = np.ascontiguousarray(g.G)
    Gp = np.ascontiguousarray(g.G_plus)
    tp = p.tire_array()
    fz = p.normal_loads
    deltas = np.array([0.05, 0.04, -0.02, -0.03])
    omegas = np.array([10.2, 9.8, 10.1, 9.9])
    state = np.array([0.0, 0.0, 0.0, 1.0, 0.02, 0.1])
    fxy = np.array([15.0, 4.0, 14.0, 3.0, 13.0, 2.0, 12.0, 1.0])
    vxy = np.tile([1.0, 0.05], 4)
    a_dd = np.array([0.5, 0.2, 0.1])

    cfg = ControllerConfig()
    mpc = OffsetMpc(cfg)
    n = cfg.horizon
    vref = np.tile([1.0, 0.0, 0.2], (n + 1, 1))
    x0 = np.array([0.01, -0.02, 0.01, 0.0, 0.0, 0.0])
    prob = mpc.build(x0, np.zeros((n, 3)), vref)

    plan_x0 = np.array([0.0, 0.0, 0.0, 1.0, 0.0])
    plan_u = np.tile([0.2, 0.1], (20, 1))

    return {
        "tire_setpoints": lambda: kernels.tire_setpoints(fxy, vxy, fz, tp, p.eps_inv, deltas, np.pi / 2),
        "plant_rk4": lambda: kernels.plant_rk4(state, deltas, omegas, G, p.mass, p.yaw_inertia, fz, tp, 1e-3),
        "step_setpoints": lambda: kernels.step_setpoints(state[3:], a_dd, G, Gp, np.zeros(8), p.mass,
                                                         p.yaw_inertia, fz, tp, p.eps_inv, deltas, np.pi / 2,
                                                         1e-3, 8, 1e-9),
        "mpc_linearize": lambda: kernels.mpc_linearize(x0, np.zeros((n, 3)), vref, cfg.dt),
        "plan_rollout": lambda: kernels.plan_rollout(plan_x0, plan_u, 0.2, 20),
        "solve_ocp (N=100)": lambda: solve_ocp(prob, tol=cfg.mpc_tol, max_iter=cfg.mpc_max_iter),
    }


def worker():
    results = {}
    for name, fn in _cases().items():
        fn()  # compile / warm caches
        timer = timeit.Timer(fn)
        number, _ = timer.autorange()
        best = min(timer.repeat(repeat=3, number=number)) / number
        results[name] = best
    print(json.dumps(results))


def run_backend(disable_jit):
    env = dict(os.environ)
    env["OVERACT_DISABLE_JIT"] = "1" if disable_jit else "0"
    out = subprocess.run([sys.executable, __file__, "--worker"], env=env, capture_output=True, text=True,
                         check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    ap.add_argument("--json", help="also write the numbers to this file")
    args = ap.parse_args()
    if args.worker:
        worker()
        return
    jit = run_backend(False)
    py = run_backend(True)
    print(f"{'kernel':<20} {'numba [us]':>12} {'python [us]':>12} {'speedup':>9}")
    for name in jit:
        print(f"{name:<20} {jit[name] * 1e6:12.1f} {py[name] * 1e6:12.1f} {py[name] / jit[name]:9.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numba": jit, "python": py}, fh, indent=2)


if __name__ == "__main__":
    main()
