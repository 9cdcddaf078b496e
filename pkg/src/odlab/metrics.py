"""Evaluation measures and divergences."""

from __future__ import annotations

import numpy as np

EPS = 1e-12


def rmsn(est, truth) -> float:
    """Root mean square error normalized by total demand of the true slice."""
    est = np.asarray(est, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if est.shape != truth.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {truth.shape}")
    total = truth.sum()
    if not total > 0:
        raise ValueError("true slice has zero total demand")
    return float(np.sqrt(truth.size * np.sum((truth - est) ** 2)) / total)


def rho(est, truth) -> float:
    """Pearson correlation of the flattened slices."""
    est = np.asarray(est, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if est.shape != truth.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {truth.shape}")
    a, b = truth - truth.mean(), est - est.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        raise ValueError("undefined correlation")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def _check_pair(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch {p.shape} vs {q.shape}")
    return p, q


def kl(p, q, eps: float = EPS) -> float:
    p, q = _check_pair(p, q)
    return float(np.sum(p * np.log((p + eps) / (q + eps))))


def jsd(p, q, eps: float = EPS) -> float:
    p, q = _check_pair(p, q)
    m = 0.5 * (p + q)
    return 0.5 * kl(p, m, eps) + 0.5 * kl(q, m, eps)


def summary(est: np.ndarray, truth: np.ndarray) -> dict:
    """Per-interval RMSN and rho plus their averages."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {truth.shape}")
    r = [rmsn(est[t], truth[t]) for t in range(len(truth))]
    c = [rho(est[t], truth[t]) for t in range(len(truth))]
    return {"rmsn": r, "rho": c, "rmsn_avg": float(np.mean(r)), "rho_avg": float(np.mean(c))}


def format_table(rows: dict[str, dict], digits: int = 4) -> str:
    """Aligned text table: one RMSN block and one rho block, one row per method."""
    if not rows:
        return ""
    n = len(next(iter(rows.values()))["rmsn"])
    head = ["method"] + [f"t{t}" for t in range(n)] + ["average"]
    lines = []
    for metric in ("rmsn", "rho"):
        body = [[name] + [f"{v:.{digits}f}" for v in s[metric]] + [f"{s[metric + '_avg']:.{digits}f}"]
                for name, s in rows.items()]
        widths = [max(len(r[c]) for r in [head] + body) for c in range(len(head))]
        lines.append(metric.upper() if metric == "rmsn" else "rho")
        lines.append("  ".join(h.ljust(w) for h, w in zip(head, widths)))
        lines.extend("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body)
        lines.append("")
    return "\n".join(lines)
