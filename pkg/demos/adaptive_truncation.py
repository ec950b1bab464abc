"""How the backward-sampling law settles as more future factors are included.

A random 5th-order system with rank-one process noise is reduced to a
non-Markovian model on the noise-driven coordinate. For one particle system
at the middle time step we print the law over the N particles at each
truncation level, the TV distance between successive levels and the moving
average that the adaptive rule thresholds.

    python demos/adaptive_truncation.py
"""

import numpy as np

from pgas import TruncationConfig, linear_svd_model, random_stable_system, run_csmc_as
from pgas.kernels import initial_state
from pgas.truncation import adaptive_backward_dist
from pgas.streams import stream


def main(order=5, outputs=2, T=200, N=5, levels=15):
    rng = stream(150, order, 0)
    system = random_stable_system(order, outputs, rng)
    _, obs = system.simulate(T, rng)
    model = linear_svd_model(system)
    ref = initial_state(model, obs, N, rng).trajectory
    hist = run_csmc_as(model, obs, N, ref, rng, keep_carries=True)
    t = T // 2
    _, _, trace = adaptive_backward_dist(model, hist.carries[t], hist.log_weights[t], ref[t + 1:],
                                         obs, t, gamma_forget=0.1, tau=0.0, p_max=levels,
                                         keep_trace=True)
    stop = next((p for p, e in enumerate(trace.ewma, 1) if e < 1e-2), None)
    np.set_printoptions(precision=3, suppress=True)
    print(f"order {order}, t = {t}: law over particles by truncation level")
    for p, probs in enumerate(trace.probabilities):
        tail = "" if p == 0 else f"  eps {trace.eps[p - 1]:.4f}  ewma {trace.ewma[p - 1]:.4f}"
        flag = "  <- adaptive rule stops here" if p == stop else ""
        print(f"p={p:2d} {probs}{tail}{flag}")
    cfg = TruncationConfig.adaptive()
    print(f"defaults: gamma_forget = {cfg.gamma_forget}, tau = {cfg.tau}")


if __name__ == "__main__":
    main()
