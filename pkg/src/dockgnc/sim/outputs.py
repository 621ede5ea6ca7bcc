"""Run artifacts: CSV/JSON writers with stable column orders.

Floats are written with ``repr`` so identical runs produce byte-identical
files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .loop import RunMetrics

_XYZ = "xyz"

TRAJECTORY_COLUMNS = (
    ["t", "agent"] + [f"rho_{c}" for c in _XYZ] + [f"rho_dot_{c}" for c in _XYZ]
    + [f"q_r_{i}" for i in range(1, 5)]
    + [f"u_ref_{c}" for c in _XYZ] + [f"u_{c}" for c in _XYZ] + ["infeasible", "docked"]
)
ESTIMATE_COLUMNS = (
    ["t", "agent"] + [f"rho_hat_{c}" for c in _XYZ] + [f"rho_dot_hat_{c}" for c in _XYZ]
    + [f"var_{i}" for i in range(6)] + [f"q_hat_{i}" for i in range(1, 5)]
    + ["e_t", "e_q", "e_p"]
)
BARRIER_COLUMNS = ["t", "agent", "h1", "h2", "h3", "h4", "h5", "h_min"]
LAB_COLUMNS = (["t", "agent"] + [f"q_{i}" for i in range(1, 7)]
               + [f"p_{c}_mm" for c in _XYZ] + ["condition"])
MEASUREMENT_COLUMNS = (["agent", "camera", "t_meas", "t_arrival"] + [f"t_{c}" for c in _XYZ]
                       + [f"q_{i}" for i in range(1, 5)])


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _finite_or_none(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def write_run_outputs(metrics: RunMetrics, out_dir, config: dict | None = None) -> dict:
    """Write trajectory/estimates/barriers (plus lab and measurement logs) and summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj, est, bar, lab = [], [], [], []
    for k, t in enumerate(metrics.t):
        for i, a in enumerate(metrics.agents):
            if k >= len(a.rho):
                continue
            traj.append([t, i, *a.rho[k], *a.rho_dot[k], *a.q_true[k], *a.u_ref[k], *a.u[k],
                         a.infeasible[k], a.docked_flags[k]])
            est.append([t, i, *a.rho_hat[k], *a.rho_dot_hat[k], *a.var[k], *a.q_hat[k],
                        a.e_t[k], a.e_q[k], a.e_p[k]])
            b = np.asarray(a.barriers[k], dtype=float)
            h_min = float(np.nanmin(b)) if not np.all(np.isnan(b)) else float("nan")
            bar.append([t, i, *b, h_min])
            if a.lab:
                lab.append([t, i, *a.lab[k]])
    _write(out / "trajectory.csv", TRAJECTORY_COLUMNS, traj)
    _write(out / "estimates.csv", ESTIMATE_COLUMNS, est)
    _write(out / "barriers.csv", BARRIER_COLUMNS, bar)
    if lab:
        _write(out / "lab.csv", LAB_COLUMNS, lab)
    rows = []
    for i, a in enumerate(metrics.agents):
        for cam, m in a.measurements:
            rows.append([i, cam, m.t_meas, m.t_arrival, *m.t, *m.q])
    _write(out / "measurements.csv", MEASUREMENT_COLUMNS, rows)
    summary = run_summary(metrics)
    if config is not None:
        summary["config"] = config
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run_summary(metrics: RunMetrics) -> dict:
    agents = []
    for i, a in enumerate(metrics.agents):
        E = metrics.batch_means(i)
        agents.append({
            "docked": bool(a.docked),
            "dock_time": _finite_or_none(a.dock_time),
            "final_rho": [float(x) for x in a.rho[-1]] if a.rho else None,
            "final_rho_dot": [float(x) for x in a.rho_dot[-1]] if a.rho_dot else None,
            "E_t": _finite_or_none(E[0]),
            "E_q": _finite_or_none(E[1]),
            "E_p": _finite_or_none(E[2]),
            "n_measurements": int(a.n_measurements),
            "n_dropped": int(a.n_dropped),
            "n_infeasible": int(sum(a.infeasible)),
        })
    return {
        "status": metrics.status,
        "error": metrics.error,
        "seed": int(metrics.seed),
        "n_steps": metrics.n_steps,
        "min_barrier": _finite_or_none(metrics.min_barrier()) if metrics.agents else None,
        "all_docked": metrics.all_docked() if metrics.agents else False,
        "agents": agents,
    }


# ------------------------------------------------------------------ readers

def read_csv_columns(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {h: np.array([float(r[j]) for r in body]) for j, h in enumerate(header)}
    return cols


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def dock_ratio_series(episodes: list[dict], block: int = 10) -> list[dict]:
    """Fraction of docked episodes in consecutive blocks of ``block`` episodes."""
    out = []
    for start in range(0, len(episodes) - block + 1, block):
        chunk = episodes[start:start + block]
        out.append({"episode_end": start + block,
                    "dock_ratio": sum(bool(e["docked"]) for e in chunk) / block})
    return out


def estimate_means(path) -> dict[int, dict]:
    """E_t, E_q, E_p per agent from estimates.csv."""
    cols = read_csv_columns(path)
    res = {}
    for i in np.unique(cols["agent"]).astype(int):
        sel = cols["agent"] == i
        res[int(i)] = {k: float(np.mean(cols[f"e_{k[-1]}"][sel])) for k in ("E_t", "E_q", "E_p")}
    return res
