import numpy as np

from pairvc.fit import FitConfig, fit_classical_S, fit_composite_tau
from pairvc.model import Parameters
from pairvc.simulate import SimScenario, contaminate, fit_gaussian_ml, gen_clean

ACCEPT = FitConfig().calibrated()
scn = SimScenario(eps=0.10, mechanism="icm", leverage=1.0, seed=202)
spec = scn.model_spec()
truth = scn.truth()
S0i = np.linalg.inv(scn.true_sigma())
tr = np.trace(S0i)

print("est        omega rep  loss_robust  loss_mlstart  d_rob   d_ml   pick")
for est, omegas in ((fit_classical_S, (10.0, 12.0, 14.0, 16.0)),
                    (fit_composite_tau, (8.0, 10.0, 12.0))):
    for omega in omegas:
        for rep in range(4):
            rng = np.random.default_rng([202, int(omega), rep])
            ds = contaminate(gen_clean(scn, rng), scn, omega, rng)
            ml = fit_gaussian_ml(ds, spec)
            ra = est(ds, spec, ACCEPT)
            rb = est(ds, spec, ACCEPT,
                     start=Parameters(beta=ml.beta, gamma=ml.gamma,
                                      eta=ml.eta))
            da = tr * float((ra.beta - truth.beta) @ (ra.beta - truth.beta))
            db = tr * float((rb.beta - truth.beta) @ (rb.beta - truth.beta))
            pick = "robust" if ra.loss <= rb.loss else "ML"
            print(f"{est.__name__:26s} {omega:4.1f} {rep}  "
                  f"{ra.loss:11.5f}  {rb.loss:11.5f} {da:7.2f} {db:7.2f}  "
                  f"{pick}", flush=True)
