"""PGAS against PGBS on a fourth-order linear system with three states integrated out.

Only the first state component is sampled; the other three are handled by a
conditional Kalman filter, which makes the sampled model non-Markovian. Both
kernels run with truncation level p = 1 for the same number of iterations,
and their running posterior means are scored against the exact smoother.

    python demos/pgas_vs_pgbs.py [iterations]
"""

import sys

from pgas import ChainConfig, MarginalizedLgssm, TruncationConfig, rbps_system, run_chain
from pgas.experiments import running_rmse
from pgas.streams import stream


def main(R=1500):
    system = rbps_system()
    _, obs = system.simulate(100, stream(2013, 0))
    model = MarginalizedLgssm(system, dim_x=1)
    exact = model.smoothed_x_means(obs)
    print(f"T = 100, N = 5, R = {R}, p = 1")
    for kernel in ("pgas", "pgbs"):
        cfg = ChainConfig(N=5, R=R, burn_in=R // 10, kernel=kernel,
                          truncation=TruncationConfig.fixed(1), seed=1)
        store = run_chain(model, obs, cfg)
        rmse = running_rmse(store.trajectories, exact, cfg.burn_in)
        moved = store.diagnostics["update_rate"].mean()
        print(f"{kernel}: final running RMSE {rmse.final:.4f}, "
              f"average per-step update rate {moved:.2f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1500)
