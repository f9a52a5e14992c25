import numpy as np

from pairvc.fit import FitConfig, fit_composite_tau
from pairvc.simulate import SimScenario, gen_clean, contaminate_icm

ACCEPT = FitConfig()
omega = 1e6
for attempt in range(8):
    scn = SimScenario(n=60, eps=0.20, mechanism="icm", seed=454 + attempt)
    rng = np.random.default_rng([454, attempt])
    clean = gen_clean(scn, rng)
    bad = contaminate_icm(clean, scn, omega, rng)
    hit = bad.y != clean.y
    worst = 0
    for j in range(scn.p - 1):
        for l in range(j + 1, scn.p):
            worst = max(worst, int((hit[:, j] | hit[:, l]).sum()))
    line = f"attempt {attempt}: worst pair count {worst} / {scn.n}"
    if worst >= ACCEPT.rho.b * scn.n:
        print(line + "  -> skip", flush=True)
        continue
    r = fit_composite_tau(bad, scn.model_spec(), ACCEPT)
    truth = scn.truth()
    print(line + f"  bnorm {np.linalg.norm(r.beta):.3f}"
          f" (bound {10 * np.linalg.norm(truth.beta):.1f})"
          f" eta {r.eta:.4f}", flush=True)
