import json
import time

from pairvc.fit import FitConfig
from pairvc.simulate import SimScenario, run_study

t0 = time.time()
scn = SimScenario(eps=0.10, mechanism="icm", leverage=1.0, seed=202)
st = run_study(scn, reps=4, omega_grid=tuple(float(w) for w in range(0, 17, 2)),
               estimators=("composite-tau", "classical-s"), cfg=FitConfig())
out = {
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
print(json.dumps(out, indent=1), flush=True)
