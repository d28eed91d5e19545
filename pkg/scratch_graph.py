import sys
import numpy as np
from concurrent.futures import ProcessPoolExecutor

import bayesinvert as bi
from bayesinvert.cli import mae
from bayesinvert.models import threshold_adjacency

SPEC = bi.experiment_spec("graph")


def one(args):
    seed, t0, d0, dmin = args
    rng = bi.RngStream(seed)
    data = bi.generate_synthetic(SPEC, rng)
    model = SPEC.model_factory()
    gen = rng.child("init").generator()
    mu1 = 4.0 * gen.standard_normal(4)
    d = max(abs(1.0 + 4.0 * gen.standard_normal()), 1e-3)
    sigma0 = bi.spd_from_matrix(d * np.eye(10), "escalate")
    cfg = bi.AtaisConfig(n=5000, t=10, t0=t0, mu1=mu1, lam1=6 * np.eye(4),
                         delta0=d0, a=0.1, delta_min=dmin)
    out = bi.run_atais(cfg, model, data, SPEC.prior, rng=rng.child("s"), sigma0=sigma0)
    p_hat = out.sigma_ml.inverse()
    rec = threshold_adjacency(0.5 * (p_hat + p_hat.T), 0.3)
    hit = bool(np.array_equal(rec, SPEC.adjacency_true))
    return hit, mae(out.theta_map, SPEC.theta_true, "theta")


if __name__ == "__main__":
    t0, d0, dmin, n = int(sys.argv[1]), float(sys.argv[2]), float(sys.argv[3]), int(sys.argv[4])
    with ProcessPoolExecutor(max_workers=2) as pool:
        res = list(pool.map(one, [(500 + i, t0, d0, dmin) for i in range(n)]))
    hits = [r[0] for r in res]
    mts = np.array([r[1] for r in res])
    print(f"t0={t0} d0={d0} dmin={dmin}: recovery={np.mean(hits):.2f} "
          f"mae_theta={mts.mean():.4f} fails(>0.05)={np.sum(mts > 0.05)}/{n}")
