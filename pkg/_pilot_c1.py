import json
import time

from pairvc.fit import FitConfig
from pairvc.simulate import SimScenario, run_study

out = {}
for name, cfg in (("calibrated", FitConfig().calibrated()),
                  ("defaults", FitConfig())):
    t0 = time.time()
    scn = SimScenario(eps=0.0, seed=101)
    st = run_study(scn, reps=200, omega_grid=(0.0,),
                   estimators=("gaussian-ml", "composite-tau", "classical-s"),
                   cfg=cfg)
    out[name] = {
        "seconds": round(time.time() - t0, 1),
        "eff_tau": st.efficiency("composite-tau"),
        "eff_s": st.efficiency("classical-s"),
        "msmd": {e: float(st.msmd[e][0]) for e in st.estimators},
        "mkld": {e: float(st.mkld[e][0]) for e in st.estimators},
    }
    print(name, json.dumps(out[name]), flush=True)

with open("/root/pkg/_pilot_c1.json", "w") as f:
    json.dump(out, f, indent=1)
