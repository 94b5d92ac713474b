"""Static-sequence probe: latent feature traces over a replicated frame.

A trained cell is fed one frame repeated N times. The trace of h_t over those
steps shows a warm-up transient followed by a fixed point; pairs of static
sequences that differ only in their mode of variation settle at different
fixed points, and the distance between them measures how much of the mode
leaks into the features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cells import forward_sequence
from .fileio import atomic_write

DEFAULT_EPSILON = 1e-4


class ProbeError(ValueError):
    pass


@dataclass
class ProbeTrace:
    features: np.ndarray                 # (N, D_h), row t-1 holds h_t
    variant: str
    sample_id: Optional[int] = None
    tau: Optional[int] = None
    hat_features: Optional[np.ndarray] = None

    @property
    def n(self):
        return self.features.shape[0]


@dataclass
class ProbeReport:
    convergence_time: Optional[int]      # 1-based step, None if never converged
    converged_value: np.ndarray
    epsilon: float

    @property
    def converged(self):
        return self.convergence_time is not None


def _cell(params):
    return getattr(params, "cell", params)


def trace_features(params, static_seq, sample_id=None, tau=None, record_hat=False):
    """Record h_t for every step of a static sequence.

    ``params`` is a cell or a classifier. Mode variational cells receive the
    replicated frame as their static input as well. With ``record_hat`` the
    static-path features are kept in ``hat_features``.
    """
    cell = _cell(params)
    seq = np.asarray(static_seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ProbeError(f"static sequence must be a non-empty (N, D_x) array, got shape {seq.shape}")
    if not np.array_equal(seq, np.broadcast_to(seq[0], seq.shape)):
        raise ProbeError("probe input is not static: frames differ")
    static = None if cell.variant == "lstm" else seq[0]
    _, caches = forward_sequence(cell, seq, static)
    feats = np.stack([k.h for k in caches])
    hat = None
    if record_hat:
        if cell.variant == "lstm":
            raise ProbeError("plain LSTM has no static-path features")
        hat = np.stack([k.h_hat for k in caches])
    return ProbeTrace(feats, cell.variant, sample_id, tau, hat)


def convergence_report(trace, epsilon=DEFAULT_EPSILON):
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    rows = trace.features if isinstance(trace, ProbeTrace) else np.asarray(trace, dtype=np.float64)
    conv = None
    if rows.shape[0] >= 2:
        steps = np.abs(np.diff(rows, axis=0)).max(axis=1)
        hit = np.flatnonzero(steps < epsilon)
        if hit.size:
            conv = int(hit[0]) + 2
    return ProbeReport(conv, rows[-1].copy(), epsilon)


def pair_divergence(report_a, report_b):
    """Euclidean distance between the fixed points of two converged traces."""
    for name, r in (("first", report_a), ("second", report_b)):
        if not r.converged:
            raise ProbeError(f"{name} trace did not converge (epsilon={r.epsilon})")
    a, b = report_a.converged_value, report_b.converged_value
    if a.shape != b.shape:
        raise ProbeError(f"feature dims differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def trace_csv(trace, first_k):
    feats = trace.features if isinstance(trace, ProbeTrace) else np.asarray(trace)
    if not 1 <= first_k <= feats.shape[1]:
        raise ValueError(f"first_k={first_k} outside 1..{feats.shape[1]}")
    n = feats.shape[0]
    lines = ["dim," + ",".join(str(t) for t in range(1, n + 1))]
    for d in range(first_k):
        lines.append(str(d) + "," + ",".join(repr(float(v)) for v in feats[:, d]))
    return "\n".join(lines) + "\n"


_NEG = (33, 102, 172)    # value -1
_MID = (247, 247, 247)   # value 0
_POS = (178, 24, 43)     # value +1


def diverging_color(v):
    """Hex colour on a fixed blue-white-red scale over [-1, 1]."""
    v = min(1.0, max(-1.0, float(v)))
    end = _POS if v >= 0 else _NEG
    w = abs(v)
    rgb = tuple(int(round(m + (e - m) * w)) for m, e in zip(_MID, end))
    return "#%02x%02x%02x" % rgb


def heatmap_svg(panels, cell=14, title=None):
    """SVG of one heatmap per ``(label, matrix)`` panel; rows are dimensions, columns timesteps."""
    left, top, gap, bar_w = 60, 40 if title else 20, 40, 14
    heights = [m.shape[0] * cell for _, m in panels]
    widths = [m.shape[1] * cell for _, m in panels]
    plot_w = max(widths)
    width = left + plot_w + 30 + bar_w + 40
    height = top + sum(h + gap + 30 for h in heights) + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">']
    if title:
        out.append(f'<text x="{width // 2}" y="16" text-anchor="middle" font-size="12">{_esc(title)}</text>')
    y0 = top
    for (label, m), h in zip(panels, heights):
        rows, cols = m.shape
        out.append(f'<text x="{left}" y="{y0 - 6}">{_esc(label)}</text>')
        out.append(f'<g shape-rendering="crispEdges">')
        for r in range(rows):
            for c in range(cols):
                out.append(f'<rect x="{left + c * cell}" y="{y0 + r * cell}" width="{cell}" '
                           f'height="{cell}" fill="{diverging_color(m[r, c])}"/>')
        out.append("</g>")
        out.append(f'<rect x="{left}" y="{y0}" width="{cols * cell}" height="{h}" fill="none" stroke="#444"/>')
        for r in range(rows):
            out.append(f'<text x="{left - 4}" y="{y0 + r * cell + cell - 3}" text-anchor="end">{r}</text>')
        for c in range(0, cols, 5):
            out.append(f'<text x="{left + c * cell + cell // 2}" y="{y0 + h + 12}" '
                       f'text-anchor="middle">{c + 1}</text>')
        out.append(f'<text x="{left + cols * cell // 2}" y="{y0 + h + 25}" text-anchor="middle">time step</text>')
        out.append(f'<text x="14" y="{y0 + h // 2}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {y0 + h // 2})">feature dimension</text>')
        y0 += h + gap + 30
    # legend: colour bar over [-1, 1]
    bx, by, bh = left + plot_w + 30, top, 100
    steps = 20
    for s in range(steps):
        v = 1.0 - 2.0 * (s + 0.5) / steps
        out.append(f'<rect x="{bx}" y="{by + s * bh // steps}" width="{bar_w}" height="{bh // steps}" '
                   f'fill="{diverging_color(v)}"/>')
    out.append(f'<rect x="{bx}" y="{by}" width="{bar_w}" height="{bh}" fill="none" stroke="#444"/>')
    for v, yy in ((1, by), (0, by + bh // 2), (-1, by + bh)):
        out.append(f'<text x="{bx + bar_w + 4}" y="{yy + 3}">{v:+d}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text):
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def export_figure(traces, first_k, stem, labels=None, title=None):
    """Write ``<stem>.csv`` per trace (suffixed when several) and one ``<stem>.svg``.

    Returns the list of written paths.
    """
    if isinstance(traces, ProbeTrace):
        traces = [traces]
    if not traces:
        raise ValueError("no traces to export")
    labels = labels or [f"trace {i}" for i in range(len(traces))]
    stem = str(stem)
    written = []
    panels = []
    for idx, (tr, label) in enumerate(zip(traces, labels)):
        if not 1 <= first_k <= tr.features.shape[1]:
            raise ValueError(f"first_k={first_k} outside 1..{tr.features.shape[1]}")
        path = f"{stem}.csv" if len(traces) == 1 else f"{stem}_{idx}.csv"
        atomic_write(path, trace_csv(tr, first_k))
        written.append(path)
        panels.append((label, tr.features[:, :first_k].T))
    atomic_write(f"{stem}.svg", heatmap_svg(panels, title=title))
    written.append(f"{stem}.svg")
    return written
