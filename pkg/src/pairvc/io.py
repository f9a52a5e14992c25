"""Reading datasets and writing results in JSON or CSV form."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .fit import FitResult
from .inference import InferenceResult
from .model import (Dataset, ModelSpec, build_crossed_design,
                    build_random_coeff_design)


def parse_structures(text: str, p: int) -> list[np.ndarray]:
    """Parse a structure shorthand.

    'crossed:F,G,H' builds the two way crossed design with replicates,
    'randcoef:t1,...' builds random intercept and slope structures on a
    time grid. Anything else is read as a JSON file of stacked matrices.
    """
    if text.startswith("crossed:"):
        dims = tuple(int(v) for v in text.split(":", 1)[1].split(","))
        if len(dims) != 3:
            raise ValueError("crossed takes three comma separated sizes")
        out = build_crossed_design(*dims)
    elif text.startswith("randcoef:"):
        times = np.array([float(v) for v in text.split(":", 1)[1].split(",")])
        out = build_random_coeff_design(times)
    else:
        raw = json.loads(Path(text).read_text())
        out = [np.asarray(m, dtype=float) for m in raw]
    for m in out:
        if m.shape != (p, p):
            raise ValueError(f"structure shape {m.shape} does not match p={p}")
    return list(out)


def load_json_dataset(path: str | Path,
                      structure: str | None = None) -> tuple[Dataset, ModelSpec]:
    doc = json.loads(Path(path).read_text())
    p, k = int(doc["p"]), int(doc["k"])
    units = doc["units"]
    y = np.empty((len(units), p))
    x = np.empty((len(units), p, k))
    for i, u in enumerate(units):
        ya = np.asarray(u["y"], dtype=float)
        xa = np.asarray(u["x"], dtype=float)
        if ya.shape != (p,) or xa.shape != (p, k):
            raise ValueError(
                f"unit {i}: y shape {ya.shape} and x shape {xa.shape} "
                f"do not match p={p}, k={k}")
        y[i] = ya
        x[i] = xa
    text = structure or doc.get("V", doc.get("structures"))
    if text is None:
        raise ValueError("no structures given in file or flag")
    if isinstance(text, str):
        structures = parse_structures(text, p)
    else:
        structures = [np.asarray(m, dtype=float) for m in text]
    spec = ModelSpec(p=p, k=k, structures=tuple(structures))
    return Dataset(y=y, x=x), spec


def load_csv_dataset(path: str | Path,
                     structure: str) -> tuple[Dataset, ModelSpec]:
    """Long format: columns unit, coord, y, x1..xk; coords 0 based."""
    rows = list(csv.DictReader(open(path, newline="")))
    if not rows:
        raise ValueError("empty dataset file")
    missing = {"unit", "coord", "y"} - set(rows[0])
    if missing:
        raise ValueError("missing column " + ", ".join(sorted(missing)))
    xcols = sorted((c for c in rows[0] if c.startswith("x")),
                   key=lambda c: int(c[1:]))
    if not xcols:
        raise ValueError("missing column x1")
    units = sorted({int(r["unit"]) for r in rows})
    coords = sorted({int(r["coord"]) for r in rows})
    n, p, k = len(units), len(coords), len(xcols)
    uidx = {u: i for i, u in enumerate(units)}
    y = np.full((n, p), np.nan)
    x = np.full((n, p, k), np.nan)
    for r in rows:
        i, j = uidx[int(r["unit"])], int(r["coord"])
        y[i, j] = float(r["y"])
        x[i, j] = [float(r[c]) for c in xcols]
    if np.isnan(y).any() or np.isnan(x).any():
        raise ValueError("incomplete long format: every unit needs all coords")
    spec = ModelSpec(p=p, k=k, structures=tuple(parse_structures(structure, p)))
    return Dataset(y=y, x=x), spec


def load_dataset(path: str | Path, fmt: str | None = None,
                 structure: str | None = None) -> tuple[Dataset, ModelSpec]:
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "json")
    if fmt == "csv":
        if structure is None:
            raise ValueError("csv input needs --structure")
        return load_csv_dataset(path, structure)
    return load_json_dataset(path, structure)


def dataset_to_json(ds: Dataset, spec: ModelSpec) -> dict:
    return {
        "p": spec.p,
        "k": spec.k,
        "V": [m.tolist() for m in spec.structures],
        "units": [{"y": ds.y[i].tolist(), "x": ds.x[i].tolist()}
                  for i in range(ds.n)],
    }


def result_to_dict(fit: FitResult,
                   inference: InferenceResult | None = None) -> dict:
    out = {
        "estimator": fit.estimator,
        "beta": fit.beta.tolist(),
        "gamma": fit.gamma.tolist(),
        "eta": fit.eta,
        "loss": fit.loss,
        "converged": bool(fit.converged),
        "iterations": fit.iterations,
        "eta_degenerate": bool(fit.eta_degenerate),
        "message": fit.message,
        "inference": None,
    }
    if inference is not None:
        out["inference"] = {
            "names": list(inference.names),
            "estimate": inference.estimate.tolist(),
            "se": inference.se.tolist(),
            "z": inference.z.tolist(),
            "p_value": inference.p_value.tolist(),
            "cov": inference.cov.tolist(),
        }
    return out


def write_result(doc: dict, path: str | Path | None, fmt: str = "json"):
    """Write a result document; path None means stdout."""
    if fmt == "json":
        text = json.dumps(doc, indent=2)
        if path is None:
            print(text)
        else:
            Path(path).write_text(text + "\n")
        return
    rows = _flatten_rows(doc)
    if path is None:
        import sys
        w = csv.writer(sys.stdout)
        w.writerow(["name", "value"])
        w.writerows(rows)
    else:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "value"])
            w.writerows(rows)


def _flatten_rows(doc, prefix=""):
    rows = []
    if isinstance(doc, dict):
        for key, val in doc.items():
            rows.extend(_flatten_rows(val, f"{prefix}{key}."))
    elif isinstance(doc, (list, tuple)):
        for i, val in enumerate(doc):
            rows.extend(_flatten_rows(val, f"{prefix}{i}."))
    else:
        rows.append([prefix[:-1], doc])
    return rows
