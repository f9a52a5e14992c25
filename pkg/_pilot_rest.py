import json
import time

import numpy as np

from pairvc.fit import FitConfig, fit_composite_tau
from pairvc.inference import sandwich_cov
from pairvc.model import Dataset
from pairvc.simulate import (SimScenario, contaminate_ccm, contaminate_icm,
                             gen_clean, run_study)

ACCEPT = FitConfig().calibrated()
out = {}

# C2 pilot: icm eps=0.10 lev 1, coarse grid, few reps.
t0 = time.time()
scn = SimScenario(eps=0.10, mechanism="icm", leverage=1.0, seed=202)
st = run_study(scn, reps=4, omega_grid=tuple(float(w) for w in range(0, 17, 2)),
               estimators=("composite-tau", "classical-s"), cfg=ACCEPT)
out["c2"] = {
    "seconds": round(time.time() - t0, 1),
    "tau_msmd_curve": [round(v, 3) for v in st.msmd["composite-tau"]],
    "cls_msmd_curve": [round(v, 3) for v in st.msmd["classical-s"]],
    "tau_mkld_curve": [round(v, 3) for v in st.mkld["composite-tau"]],
    "cls_mkld_curve": [round(v, 3) for v in st.mkld["classical-s"]],
    "max": {"tau_msmd": st.max_msmd("composite-tau"),
            "cls_msmd": st.max_msmd("classical-s"),
            "tau_mkld": st.max_mkld("composite-tau"),
            "cls_mkld": st.max_mkld("classical-s")},
}
print("c2", json.dumps(out["c2"]), flush=True)

# C3 pilot: ccm eps=0.10 lev 20.
t0 = time.time()
scn = SimScenario(eps=0.10, mechanism="ccm", leverage=20.0, seed=303)
st = run_study(scn, reps=4, omega_grid=tuple(float(w) for w in range(0, 17, 2)),
               estimators=("composite-tau", "classical-s"), cfg=ACCEPT)
out["c3"] = {
    "seconds": round(time.time() - t0, 1),
    "tau_msmd_curve": [round(v, 3) for v in st.msmd["composite-tau"]],
    "cls_msmd_curve": [round(v, 3) for v in st.msmd["classical-s"]],
    "max": {"tau_msmd": st.max_msmd("composite-tau"),
            "cls_msmd": st.max_msmd("classical-s")},
}
print("c3", json.dumps(out["c3"]), flush=True)


def replace_rows(ds, scn, frac, omega, rng):
    nbad = int(round(ds.n * frac))
    y = ds.y.copy()
    x = ds.x.copy()
    beta0 = np.asarray(scn.beta)
    L = np.linalg.cholesky(scn.true_sigma())
    for i in rng.choice(ds.n, size=nbad, replace=False):
        x[i, :, 1:] = rng.normal(scn.leverage, 0.005, size=(ds.p, scn.k))
        y[i] = x[i] @ beta0 + omega + L @ rng.standard_normal(ds.p)
    return Dataset(y=y, x=x)


# C4 pilot: one rep per case at n=60, omega 1e6.
t0 = time.time()
res4 = {}
scn = SimScenario(n=60, eps=0.40, mechanism="ccm", seed=404)
spec = scn.model_spec()
rng = np.random.default_rng([404, 0])
clean = gen_clean(scn, rng)
r = fit_composite_tau(contaminate_ccm(clean, scn, 1e6, rng), spec, ACCEPT)
res4["rows40"] = {"bnorm": float(np.linalg.norm(r.beta)), "eta": float(r.eta)}
scn20 = SimScenario(n=60, eps=0.20, mechanism="icm", seed=404)
r = fit_composite_tau(contaminate_icm(clean, scn20, 1e6, rng), spec, ACCEPT)
res4["cells20"] = {"bnorm": float(np.linalg.norm(r.beta)), "eta": float(r.eta)}
r = fit_composite_tau(replace_rows(clean, scn, 0.60, 1e6, rng), spec, ACCEPT)
res4["rows60"] = {"bnorm": float(np.linalg.norm(r.beta)), "eta": float(r.eta)}
res4["seconds"] = round(time.time() - t0, 1)
res4["bnorm0"] = float(np.linalg.norm(scn.truth().beta))
out["c4"] = res4
print("c4", json.dumps(res4), flush=True)

# C9 pilot: single fits at the three sizes with sigma_error = 4.
res9 = {}
for n in (100, 400, 1600):
    scn = SimScenario(n=n, sigma_error=4.0, seed=909)
    spec = scn.model_spec()
    truth = scn.truth()
    rng = np.random.default_rng([909, n, 0])
    ds = gen_clean(scn, rng)
    t0 = time.time()
    r = fit_composite_tau(ds, spec, ACCEPT)
    res9[str(n)] = {
        "seconds": round(time.time() - t0, 2),
        "beta_err": float(np.linalg.norm(r.beta - truth.beta)),
        "gamma_err": float(np.linalg.norm(r.gamma - truth.gamma)),
        "eta": float(r.eta),
    }
    print("c9", n, json.dumps(res9[str(n)]), flush=True)
out["c9"] = res9

# C10 pilot: fit plus sandwich timing and a coverage sanity check.
t0 = time.time()
scn = SimScenario(eps=0.0, seed=1010)
spec = scn.model_spec()
truth = scn.truth()
hits = total = fails = 0
for rep in range(5):
    rng = np.random.default_rng([1010, rep])
    ds = gen_clean(scn, rng)
    r = fit_composite_tau(ds, spec, ACCEPT)
    try:
        inf = sandwich_cov(ds, spec, r, ACCEPT.rho)
    except (ValueError, np.linalg.LinAlgError):
        fails += 1
        continue
    se = inf.se[:spec.k]
    lo = r.beta - 1.959963984540054 * se
    hi = r.beta + 1.959963984540054 * se
    hits += int(np.sum((lo <= truth.beta) & (truth.beta <= hi)))
    total += spec.k
out["c10"] = {"seconds": round(time.time() - t0, 1), "hits": hits,
              "total": total, "fails": fails}
print("c10", json.dumps(out["c10"]), flush=True)

with open("/root/pkg/_pilot_rest.json", "w") as f:
    json.dump(out, f, indent=1)
print("done", flush=True)
