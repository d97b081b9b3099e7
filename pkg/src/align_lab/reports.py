"""CSV and SVG emission for training traces. All writes are atomic."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .network import TrainTrace  # noqa: E402

LOG_SPAN_DECADES = 3.0


def atomic_write(path, data) -> Path:
    path = Path(path)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def trace_header(depth: int) -> list[str]:
    cols = ["step", "loss"]
    cols += [f"align_{i}_{i + 1}" for i in range(1, depth)]
    cols += [f"invU_{i}" for i in range(1, depth + 1)]
    cols += [f"invV_{i}" for i in range(1, depth + 1)]
    return cols


def trace_rows(trace: TrainTrace) -> list[list]:
    rows = []
    for t in range(len(trace.steps)):
        adj = trace.adjacent[t] if trace.adjacent else [float("nan")] * (trace.depth - 1)
        iu = trace.inv_u[t] if trace.inv_u else [float("nan")] * trace.depth
        iv = trace.inv_v[t] if trace.inv_v else [float("nan")] * trace.depth
        rows.append([trace.steps[t], trace.losses[t], *adj, *iu, *iv])
    return rows


def _fmt(v) -> str:
    # repr of a Python float round-trips exactly
    return str(v) if isinstance(v, int) else repr(float(v))


def emit_csv(trace: TrainTrace, path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trace_header(trace.depth))
    for row in trace_rows(trace):
        w.writerow([_fmt(v) for v in row])
    return atomic_write(path, buf.getvalue())


def read_csv(path) -> tuple[list[str], list[list[float]]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    return header, rows


def emit_metrics(metrics: Mapping, path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for key, value in metrics.items():
        w.writerow([key, _fmt(value) if isinstance(value, (int, float)) and not isinstance(value, bool) else value])
    return atomic_write(path, buf.getvalue())


def use_log_scale(values: Sequence[float]) -> bool:
    vals = [v for v in values if v == v]
    if not vals or min(vals) <= 0:
        return False
    return max(vals) / min(vals) > 10 ** LOG_SPAN_DECADES


def emit_svg(series: Mapping[str, tuple], path, title: str = "", xlabel: str = "step",
             ylabel: str = "") -> Path:
    """One line per named ``(x, y)`` series; log-y when all y are positive and span > 3 decades."""
    all_y = [float(v) for _, ys in series.values() for v in ys]
    with plt.rc_context({"svg.hashsalt": "align-lab", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, (xs, ys) in series.items():
            ax.plot(list(xs), list(ys), label=name, linewidth=1.2)
        if use_log_scale(all_y):
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend(fontsize="small")
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return atomic_write(path, buf.getvalue())


def emit_trace_svgs(trace: TrainTrace, out_dir, prefix: str = "") -> list[Path]:
    out_dir = Path(out_dir)
    files = [emit_svg({"loss": (trace.steps, trace.losses)}, out_dir / f"{prefix}loss.svg",
                      title="training loss", ylabel="loss")]
    if trace.adjacent and trace.depth > 1:
        series = {f"align_{i + 1}_{i + 2}": (trace.steps, [row[i] for row in trace.adjacent])
                  for i in range(trace.depth - 1)}
        files.append(emit_svg(series, out_dir / f"{prefix}alignment.svg",
                              title="adjacent alignment", ylabel="score"))
    if trace.inv_u:
        series = {}
        for i in range(trace.depth):
            series[f"invU_{i + 1}"] = (trace.steps, [row[i] for row in trace.inv_u])
            series[f"invV_{i + 1}"] = (trace.steps, [row[i] for row in trace.inv_v])
        files.append(emit_svg(series, out_dir / f"{prefix}invariance.svg",
                              title="invariance from initialization", ylabel="score"))
    return files
