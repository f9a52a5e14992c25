import numpy as np

from pairvc.fit import FitConfig, fit_classical_S, fit_composite_tau
from pairvc.simulate import SimScenario, contaminate, gen_clean

ACCEPT = FitConfig().calibrated()
scn = SimScenario(eps=0.10, mechanism="icm", leverage=1.0, seed=202)
spec = scn.model_spec()
truth = scn.truth()
S0 = scn.true_sigma()
Si = np.linalg.inv(S0)
tr, ones = np.trace(Si), float(np.sum(Si))
print(f"trace(S0inv) {tr:.4f}  1'S0inv1 {ones:.4f}")
Atrue = np.diag([ones] + [tr] * scn.k)

for est, omegas, nrep in ((fit_composite_tau, (10.0,), 6),
                          (fit_classical_S, (12.0, 14.0, 16.0), 10)):
    for omega in omegas:
        dverb, dtrue = [], []
        for rep in range(nrep):
            rng = np.random.default_rng([202, int(omega), rep])
            ds = contaminate(gen_clean(scn, rng), scn, omega, rng)
            r = est(ds, spec, ACCEPT)
            d = r.beta - truth.beta
            dverb.append(tr * float(d @ d))
            dtrue.append(float(d @ Atrue @ d))
            if rep < 3:
                print(f"{est.__name__} w={omega:4.1f} rep{rep} "
                      f"dbeta={np.array2string(d, precision=2)}")
        print(f"{est.__name__} w={omega:4.1f} msmd verbatimA "
              f"{np.mean(dverb):8.2f}  trueA {np.mean(dtrue):8.2f}",
              flush=True)
