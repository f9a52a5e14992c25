import time

import numpy as np

from pairvc.fit import FitConfig, fit_composite_tau
from pairvc.model import Parameters
from pairvc.objective import PairWorkspace, loss_tau
from pairvc.simulate import (SimScenario, contaminate, gen_clean, msmd_weight,
                             fit_gaussian_ml)

ACCEPT = FitConfig().calibrated()
scn = SimScenario(eps=0.10, mechanism="icm", leverage=1.0, seed=202)
spec = scn.model_spec()
truth = scn.truth()
A = msmd_weight(scn.true_sigma(), len(truth.beta))

print("rep  omega  dist_init  dist_truth  loss_init    loss_truth   pick")
for omega in (8.0, 10.0, 12.0):
    for rep in range(8):
        rng = np.random.default_rng([202, int(omega), rep])
        ds = contaminate(gen_clean(scn, rng), scn, omega, rng)
        ws = PairWorkspace(ds, spec)
        t0 = time.time()
        fi = fit_composite_tau(ds, spec, ACCEPT)
        ft = fit_composite_tau(ds, spec, ACCEPT,
                               start=Parameters(beta=truth.beta,
                                                gamma=truth.gamma,
                                                eta=truth.eta))
        di = float((fi.beta - truth.beta) @ A @ (fi.beta - truth.beta))
        dt = float((ft.beta - truth.beta) @ A @ (ft.beta - truth.beta))
        li = loss_tau(ws, fi.beta, fi.gamma, ACCEPT.rho)
        lt = loss_tau(ws, ft.beta, ft.gamma, ACCEPT.rho)
        pick = "init" if li <= lt else "TRUTH"
        print(f"{rep:3d}  {omega:5.1f}  {di:9.3f}  {dt:10.3f}  "
              f"{li:11.5f}  {lt:11.5f}  {pick}  {time.time()-t0:.1f}s",
              flush=True)
