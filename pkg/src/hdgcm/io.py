"""File formats: long-format CSV datasets, fit artifacts, and ground truth.

All numeric text is written with ``repr(float(x))`` (shortest round-trip
form, locale-independent), so every emitted file reloads to the exact same
IEEE-754 values.  The structured artifacts are JSON with a ``schema`` field:
``params.json`` for a fit (both covariance parameterizations, masks, the
rank table, the standardization record) and ``truth.json`` for a simulated
dataset's generating parameters.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .curves import CurveTable
from .errors import ParseError
from .model import (
    FactorCovariance,
    FixedEffects,
    LongitudinalDataset,
    ModelParams,
    ScaledCorrelation,
    Standardization,
    Subject,
)
from .pipeline import FitResult
from .simulate import GroundTruth, SimMetrics

__all__ = [
    "load_long_csv",
    "write_long_csv",
    "save_fit",
    "LoadedFit",
    "load_fit",
    "write_trace_csv",
    "write_curves_csv",
    "write_metrics_csv",
    "save_truth",
    "load_truth",
]

PARAMS_SCHEMA = "hdgcm-fit/1"
TRUTH_SCHEMA = "hdgcm-truth/1"


def _fmt(x) -> str:
    return repr(float(x))


# =========================================================================
# long CSV datasets
# =========================================================================

def _header_names(p1: int, p2: int, r: int) -> List[str]:
    return (
        ["subject", "time"]
        + [f"u_{k + 1}" for k in range(p1)]
        + [f"w_{k + 1}" for k in range(p2)]
        + [f"y_{j + 1}" for j in range(r)]
    )


def _parse_header(fields: List[str]) -> Tuple[int, int, int]:
    """Infer (p', p'', r) from the header, enforcing the column layout."""
    names = [f.strip() for f in fields]
    if len(names) < 3 or names[0] != "subject" or names[1] != "time":
        raise ParseError("line 1: header must start with 'subject,time'")
    counts = {"u": 0, "w": 0, "y": 0}
    order = ["u", "w", "y"]
    stage = 0
    for pos, name in enumerate(names[2:], start=3):
        parts = name.split("_")
        prefix = parts[0]
        if prefix not in counts or len(parts) != 2:
            raise ParseError(f"line 1: unexpected column name {name!r} (position {pos})")
        while stage < len(order) and order[stage] != prefix:
            stage += 1
        if stage >= len(order):
            raise ParseError(f"line 1: column {name!r} out of order (position {pos})")
        counts[prefix] += 1
        if parts[1] != str(counts[prefix]):
            raise ParseError(
                f"line 1: expected column {prefix}_{counts[prefix]}, got {name!r}"
            )
    if counts["y"] == 0:
        raise ParseError("line 1: at least one response column y_1 is required")
    return counts["u"], counts["w"], counts["y"]


def load_long_csv(path) -> LongitudinalDataset:
    """Read a long-format dataset: one row per (subject, visit).

    Subjects keep their order of first appearance; each subject's visits are
    sorted by time.  Raises ParseError (with the 1-based line number) on a
    ragged row, a non-numeric field, a duplicate (subject, time) pair, or a
    time-invariant covariate that varies within a subject.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("line 1: empty file") from None
        p1, p2, r = _parse_header(header)
        width = 2 + p1 + p2 + r
        names = _header_names(p1, p2, r)

        order: List[str] = []
        rows: Dict[str, List[Tuple[float, np.ndarray]]] = {}
        seen: set = set()
        for ln, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) != width:
                raise ParseError(
                    f"line {ln}: expected {width} fields, got {len(fields)}"
                )
            sid = fields[0]
            values = np.empty(width - 1)
            for k, cell in enumerate(fields[1:], start=1):
                try:
                    values[k - 1] = float(cell)
                except ValueError:
                    raise ParseError(
                        f"line {ln}: non-numeric value {cell!r} in column {names[k]}"
                    ) from None
            t = values[0]
            if (sid, t) in seen:
                raise ParseError(f"line {ln}: duplicate (subject, time) = ({sid}, {t})")
            seen.add((sid, t))
            if sid not in rows:
                rows[sid] = []
                order.append(sid)
            rows[sid].append((t, values[1:]))

    if not order:
        raise ParseError("line 2: no data rows")
    subjects = []
    for sid in order:
        visits = sorted(rows[sid], key=lambda item: item[0])
        times = np.array([t for t, _ in visits])
        mat = np.array([v for _, v in visits])
        u_block = mat[:, :p1]
        if p1 and not np.all(u_block == u_block[0]):
            raise ParseError(
                f"subject {sid}: time-invariant covariate varies across visits"
            )
        subjects.append(
            Subject(
                id=sid,
                times=times,
                u=u_block[0] if p1 else np.zeros(0),
                w=mat[:, p1 : p1 + p2],
                y=mat[:, p1 + p2 :],
            )
        )
    return LongitudinalDataset(subjects=tuple(subjects), standardization=None)


def write_long_csv(path, data: LongitudinalDataset) -> None:
    """Inverse of load_long_csv; values round-trip exactly."""
    first = data.subjects[0]
    p1, p2, r = first.u.shape[0], first.w.shape[1], first.y.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_header_names(p1, p2, r))
        for s in data.subjects:
            for t in range(s.n_visits):
                writer.writerow(
                    [s.id, _fmt(s.times[t])]
                    + [_fmt(v) for v in s.u]
                    + [_fmt(v) for v in s.w[t]]
                    + [_fmt(v) for v in s.y[t]]
                )


# =========================================================================
# fit artifacts
# =========================================================================

def _std_to_json(std: Optional[Standardization]):
    if std is None:
        return None
    return {
        "g_offset": std.g_offset,
        "g_scale": std.g_scale,
        "u_offset": std.u_offset.tolist(),
        "u_scale": std.u_scale.tolist(),
        "w_offset": std.w_offset.tolist(),
        "w_scale": std.w_scale.tolist(),
    }


def _std_from_json(obj) -> Optional[Standardization]:
    if obj is None:
        return None
    return Standardization(
        g_offset=float(obj["g_offset"]),
        g_scale=float(obj["g_scale"]),
        u_offset=np.array(obj["u_offset"], dtype=float),
        u_scale=np.array(obj["u_scale"], dtype=float),
        w_offset=np.array(obj["w_offset"], dtype=float),
        w_scale=np.array(obj["w_scale"], dtype=float),
    )


def _config_to_json(config) -> Optional[dict]:
    if config is None:
        return None
    out = {}
    for key, value in vars(config).items():
        if isinstance(value, np.ndarray):
            out[key] = value.tolist()
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def save_fit(out_dir, result: FitResult, extra_config: Optional[dict] = None) -> None:
    """Write params.json and trace.csv for a fit."""
    os.makedirs(out_dir, exist_ok=True)
    cov = result.params.cov
    if not isinstance(cov, ScaledCorrelation):
        raise TypeError("save_fit expects scaled-correlation parameters")
    config = _config_to_json(result.config)
    if extra_config:
        config = dict(config or {})
        config.update(extra_config)
    payload = {
        "schema": PARAMS_SCHEMA,
        "converged": bool(result.converged),
        "n_iter": int(result.n_iter),
        "loglik": float(result.loglik),
        "K_hat": int(result.K_hat),
        "lambda_d": float(result.lambda_d),
        "lambda_B": float(result.lambda_B),
        "p_time_invariant": int(result.params.fixed.p_time_invariant),
        "p_time_varying": int(result.params.fixed.p_time_varying),
        "B": result.params.fixed.B.tolist(),
        "sigma": result.params.sigma.tolist(),
        "P": cov.P.tolist(),
        "d": cov.d.tolist(),
        "Q": result.factor.Q.tolist(),
        "delta": result.factor.delta.tolist(),
        "mask_fixed": np.asarray(result.mask_fixed, dtype=bool).tolist(),
        "mask_random": np.asarray(result.mask_random, dtype=bool).tolist(),
        "bic_table": [
            {
                "K": int(rep.candidate),
                "loglik": rep.loglik,
                "df": int(rep.df),
                "bic": rep.bic,
                "selected": bool(rep.selected),
            }
            for rep in result.bic_reports
        ],
        "standardization": _std_to_json(result.standardization),
        "config": config,
        "timing": {k: float(v) for k, v in result.timing.items()},
    }
    with open(os.path.join(out_dir, "params.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
    write_trace_csv(os.path.join(out_dir, "trace.csv"), result.history)


@dataclass
class LoadedFit:
    """The subset of a saved fit needed by predict / eval."""

    params: ModelParams                 # scaled-correlation covariance
    factor: FactorCovariance
    mask_fixed: np.ndarray
    mask_random: np.ndarray
    K_hat: int
    lambda_d: float
    lambda_B: float
    converged: bool
    loglik: float
    standardization: Optional[Standardization]
    bic_table: List[dict]


def load_fit(path) -> LoadedFit:
    """Read params.json (a directory containing it also works)."""
    if os.path.isdir(path):
        path = os.path.join(path, "params.json")
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("schema") != PARAMS_SCHEMA:
        raise ParseError(f"{path}: unsupported schema {obj.get('schema')!r}")
    p1 = int(obj["p_time_invariant"])
    p2 = int(obj["p_time_varying"])
    B = np.array(obj["B"], dtype=float)
    d = np.array(obj["d"], dtype=float)
    P = np.array(obj["P"], dtype=float).reshape(d.shape[0], -1)
    params = ModelParams(
        fixed=FixedEffects(B=B, p_time_invariant=p1, p_time_varying=p2),
        sigma=np.array(obj["sigma"], dtype=float),
        cov=ScaledCorrelation(P=P, d=d),
    )
    delta = np.array(obj["delta"], dtype=float)
    Q = np.array(obj["Q"], dtype=float).reshape(delta.shape[0], -1)
    return LoadedFit(
        params=params,
        factor=FactorCovariance(Q=Q, delta=delta),
        mask_fixed=np.array(obj["mask_fixed"], dtype=bool),
        mask_random=np.array(obj["mask_random"], dtype=bool),
        K_hat=int(obj["K_hat"]),
        lambda_d=float(obj["lambda_d"]),
        lambda_B=float(obj["lambda_B"]),
        converged=bool(obj["converged"]),
        loglik=float(obj["loglik"]),
        standardization=_std_from_json(obj["standardization"]),
        bic_table=list(obj["bic_table"]),
    )


def write_trace_csv(path, history: Sequence[Tuple[float, float, float, float]]) -> None:
    """Per-outer-iteration record: log-likelihood at the E-step, the max
    relative parameter change applied, and the penalty levels in force."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loglik", "rel_change", "lambda_d", "lambda_B"])
        for it, row in enumerate(history, start=1):
            writer.writerow([it] + [_fmt(v) for v in row])


def write_curves_csv(path, table: CurveTable) -> None:
    """Plot-ready long table: level, label, outcome, intercept, slope."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "label", "outcome", "intercept", "slope"])
        for j in range(table.r):
            writer.writerow(
                ["population", "", f"y_{j + 1}",
                 _fmt(table.pop_intercept[j]), _fmt(table.pop_slope[j])]
            )
        for k in range(table.group_intercept.shape[0]):
            for j in range(table.r):
                writer.writerow(
                    ["group", f"u_{k + 1}", f"y_{j + 1}",
                     _fmt(table.group_intercept[k, j]), _fmt(table.group_slope[k, j])]
                )
        for i, sid in enumerate(table.subject_ids):
            for j in range(table.r):
                writer.writerow(
                    ["individual", sid, f"y_{j + 1}",
                     _fmt(table.indiv_intercept[i, j]), _fmt(table.indiv_slope[i, j])]
                )


def write_metrics_csv(path, metrics: SimMetrics) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["err_B", _fmt(metrics.err_B)])
        writer.writerow(["err_G", _fmt(metrics.err_G)])
        writer.writerow(["tpr_fixed", _fmt(metrics.tpr_fixed)])
        writer.writerow(["fpr_fixed", _fmt(metrics.fpr_fixed)])
        writer.writerow(["tpr_random", _fmt(metrics.tpr_random)])
        writer.writerow(["fpr_random", _fmt(metrics.fpr_random)])
        writer.writerow(["K_hat", str(int(metrics.K_hat))])
        writer.writerow(["K_correct", str(int(metrics.K_correct))])


# =========================================================================
# ground-truth sidecar
# =========================================================================

def save_truth(path, truth: GroundTruth) -> None:
    payload = {
        "schema": TRUTH_SCHEMA,
        "K_star": int(truth.K_star),
        "p_time_invariant": int(truth.B_true.p_time_invariant),
        "p_time_varying": int(truth.B_true.p_time_varying),
        "B_true": truth.B_true.B.tolist(),
        "G_true": truth.G_true.tolist(),
        "Q_true": truth.Q_true.tolist(),
        "delta_true": truth.delta_true.tolist(),
        "sigma_true": truth.sigma_true.tolist(),
        "mask_mu1": truth.mask_mu1.astype(bool).tolist(),
        "mask_alpha1": truth.mask_alpha1.astype(bool).tolist(),
        "mask_random": truth.mask_random.astype(bool).tolist(),
        "outcome_types": truth.outcome_types.astype(int).tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_truth(path) -> GroundTruth:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("schema") != TRUTH_SCHEMA:
        raise ParseError(f"{path}: unsupported schema {obj.get('schema')!r}")
    delta = np.array(obj["delta_true"], dtype=float)
    return GroundTruth(
        B_true=FixedEffects(
            B=np.array(obj["B_true"], dtype=float),
            p_time_invariant=int(obj["p_time_invariant"]),
            p_time_varying=int(obj["p_time_varying"]),
        ),
        G_true=np.array(obj["G_true"], dtype=float),
        Q_true=np.array(obj["Q_true"], dtype=float).reshape(delta.shape[0], -1),
        delta_true=delta,
        sigma_true=np.array(obj["sigma_true"], dtype=float),
        mask_mu1=np.array(obj["mask_mu1"], dtype=bool),
        mask_alpha1=np.array(obj["mask_alpha1"], dtype=bool),
        mask_random=np.array(obj["mask_random"], dtype=bool),
        outcome_types=np.array(obj["outcome_types"], dtype=int),
        K_star=int(obj["K_star"]),
    )
