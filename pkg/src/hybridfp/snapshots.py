"""Plain-text exchange formats: density snapshots, trajectory tables, manifests.

Snapshot files carry one header line

    # t=<time> shape=<n1,...,nk> sheets=<s> box=<l1:u1,...> periodic=<i,...> source=<tag>

followed by comma-separated value rows: one line per last-axis row, outer
axes (sheets outermost) in row-major order.  These formats are the only
coupling surface for external tooling; keep them stable.
"""

from __future__ import annotations

import configparser
import datetime
import io
from pathlib import Path
from typing import List, Optional

import numpy as np

from .core import DomainBox
from .flow import HybridTrajectory
from .transfer import DensityField, GridSpec

__all__ = [
    "write_snapshot",
    "read_snapshot",
    "write_trajectory",
    "write_events",
    "write_manifest",
    "read_manifest",
]


def _fmt_box(box: DomainBox) -> str:
    return ",".join(f"{lo:.17g}:{hi:.17g}" for lo, hi in zip(box.lower, box.upper))


def write_snapshot(path, field: DensityField, source: str = "solver",
                   model: str = "") -> None:
    grid = field.grid
    header = (f"# t={field.t:.17g}"
              f" shape={','.join(str(n) for n in grid.shape)}"
              f" sheets={grid.sheet_count}"
              f" box={_fmt_box(grid.box)}"
              f" periodic={','.join(str(i) for i in sorted(grid.box.periodic_axes))}"
              f" source={source}")
    if model:
        header += f" model={model}"
    vals = field.values_sheeted
    rows = vals.reshape(-1, grid.shape[-1])
    buf = io.StringIO()
    buf.write(header + "\n")
    for row in rows:
        buf.write(",".join(f"{v:.17g}" for v in row) + "\n")
    Path(path).write_text(buf.getvalue())


def read_snapshot(path) -> DensityField:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing snapshot header")
    meta = {}
    for tok in text[0][1:].split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            meta[k] = v
    t = float(meta["t"])
    shape = tuple(int(n) for n in meta["shape"].split(","))
    sheets = int(meta.get("sheets", "1"))
    lo, hi = [], []
    for pair in meta["box"].split(","):
        a, b = pair.split(":")
        lo.append(float(a))
        hi.append(float(b))
    periodic = [int(i) for i in meta.get("periodic", "").split(",") if i != ""]
    box = DomainBox.make(lo, hi, periodic)
    grid = GridSpec(box=box, shape=shape, sheet_count=sheets)
    rows = [np.fromstring(line, sep=",") for line in text[1:] if line.strip()]
    vals = np.asarray(rows, dtype=float)
    expect_rows = sheets * int(np.prod(shape[:-1]))
    if vals.shape != (expect_rows, shape[-1]):
        raise ValueError(f"{path}: data shape {vals.shape} does not match header")
    full = vals.reshape((sheets,) + shape)
    out = DensityField(grid=grid, t=t,
                       values=full[0] if sheets == 1 else full)
    out.mass = out.compute_mass()
    return out


def write_trajectory(path, traj: HybridTrajectory) -> None:
    """Sample table: one row `t,x1,...,xn` per sample."""
    n = traj.states.shape[1]
    buf = io.StringIO()
    buf.write("t," + ",".join(f"x{i+1}" for i in range(n)) + "\n")
    for t, x in zip(traj.times, traj.states):
        buf.write(f"{t:.17g}," + ",".join(f"{v:.17g}" for v in x) + "\n")
    Path(path).write_text(buf.getvalue())


def write_events(path, traj: HybridTrajectory) -> None:
    """Event table: one row `t,x_pre...,x_post...` per impact."""
    n = traj.states.shape[1]
    buf = io.StringIO()
    buf.write("t," + ",".join(f"pre{i+1}" for i in range(n)) + ","
              + ",".join(f"post{i+1}" for i in range(n)) + "\n")
    for e in traj.events:
        buf.write(f"{e.t:.17g},"
                  + ",".join(f"{v:.17g}" for v in e.x_pre) + ","
                  + ",".join(f"{v:.17g}" for v in e.x_post) + "\n")
    Path(path).write_text(buf.getvalue())


def write_manifest(path, model: str, config_sections: dict,
                   snapshots: Optional[List[str]] = None,
                   trajectories: Optional[List[str]] = None,
                   extra: Optional[dict] = None) -> None:
    """Run manifest: model id, file lists, and the fully resolved config.

    The config sections are echoed verbatim, so a manifest can be fed back
    as the config of a new run.  The creation timestamp lives in its own key
    and is the only non-reproducible field.
    """
    cp = configparser.ConfigParser()
    cp["manifest"] = {"model": model}
    if snapshots:
        cp["manifest"]["snapshots"] = ",".join(snapshots)
    if trajectories:
        cp["manifest"]["trajectories"] = ",".join(trajectories)
    for k, v in (extra or {}).items():
        cp["manifest"][k] = str(v)
    cp["manifest"]["created"] = datetime.datetime.now().isoformat()
    for section, kv in config_sections.items():
        cp[section] = {k: str(v) for k, v in kv.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def read_manifest(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    return cp
