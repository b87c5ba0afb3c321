"""Render simulation output files as figures.

Consumes only the documented plain-text formats (snapshot CSV, trajectory
CSV, run manifest); there is no in-process coupling to the solver package.
Three plot kinds:

* heatmap_series -- one PNG per density snapshot, shared color scale across
  the series, axes from the box header, sheets summed for display, and the
  actual min/max of each file annotated.
* trajectory     -- state components against time for one trajectory table.
* qc_fan         -- the first state component against time for a bundle of
  trajectory tables (the impact-detection fan).

Repeated renders of the same inputs are pixel-identical.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = ["PlotJob", "Snapshot", "read_snapshot_file", "read_trajectory_file",
           "read_manifest", "render", "main"]

KINDS = ("heatmap_series", "trajectory", "qc_fan")


@dataclass
class Snapshot:
    t: float
    shape: tuple
    sheets: int
    lower: np.ndarray
    upper: np.ndarray
    values: np.ndarray  # (sheets, *shape)

    def display_values(self) -> np.ndarray:
        return self.values.sum(axis=0)


@dataclass
class PlotJob:
    manifest_path: Path
    kind: str
    out: Path
    cmap: str = "viridis"
    vmin: float | None = None
    vmax: float | None = None

    def __post_init__(self):
        self.manifest_path = Path(self.manifest_path)
        self.out = Path(self.out)
        if self.kind not in KINDS:
            raise ValueError(f"unknown plot kind {self.kind!r}")
        if not self.manifest_path.exists():
            raise FileNotFoundError(str(self.manifest_path))


def read_snapshot_file(path) -> Snapshot:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing snapshot header")
    meta = {}
    for token in lines[0][1:].split():
        if "=" in token:
            key, val = token.split("=", 1)
            meta[key] = val
    try:
        t = float(meta["t"])
        shape = tuple(int(v) for v in meta["shape"].split(","))
        sheets = int(meta.get("sheets", "1"))
        lower, upper = [], []
        for pair in meta["box"].split(","):
            a, b = pair.split(":")
            lower.append(float(a))
            upper.append(float(b))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed header: {exc}")
    rows = []
    for ln, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        rows.append(np.fromstring(line, sep=","))
    data = np.asarray(rows)
    expect = (sheets * int(np.prod(shape[:-1])), shape[-1])
    if data.shape != expect:
        raise ValueError(f"{path}: data shape {data.shape}, header implies {expect}")
    return Snapshot(t=t, shape=shape, sheets=sheets,
                    lower=np.asarray(lower), upper=np.asarray(upper),
                    values=data.reshape((sheets,) + shape))


def read_trajectory_file(path) -> tuple:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("t,"):
        raise ValueError(f"{path}: missing trajectory header")
    names = lines[0].split(",")
    data = np.asarray([np.fromstring(line, sep=",") for line in lines[1:]
                       if line.strip()])
    if data.ndim != 2 or data.shape[1] != len(names):
        raise ValueError(f"{path}: ragged trajectory table")
    return names[1:], data[:, 0], data[:, 1:]


def read_manifest(path) -> dict:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ValueError(f"{path}: cannot parse manifest: {exc}")
    if "manifest" not in cp:
        raise ValueError(f"{path}: no [manifest] section")
    base = Path(path).parent
    out = {"model": cp["manifest"].get("model", "?"), "snapshots": [],
           "trajectories": []}
    for key in ("snapshots", "trajectories"):
        raw = cp["manifest"].get(key, "")
        out[key] = [base / name for name in raw.split(",") if name]
    return out


def _render_heatmaps(job: PlotJob, manifest: dict) -> list:
    snaps = [read_snapshot_file(p) for p in manifest["snapshots"]]
    if not snaps:
        raise ValueError("manifest lists no snapshots")
    if len({s.shape for s in snaps}) != 1:
        raise ValueError("snapshot shapes differ within the series")
    fields = [s.display_values() for s in snaps]
    vmin = job.vmin if job.vmin is not None else min(f.min() for f in fields)
    vmax = job.vmax if job.vmax is not None else max(f.max() for f in fields)
    job.out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (snap, f) in enumerate(zip(snaps, fields)):
        fig, ax = plt.subplots(figsize=(5.2, 4.4), dpi=130)
        extent = (snap.lower[0], snap.upper[0], snap.lower[1], snap.upper[1])
        # values are indexed [axis0, axis1]; show axis0 horizontally
        ax.imshow(f.T, origin="lower", extent=extent, aspect="auto",
                  cmap=job.cmap, vmin=vmin, vmax=vmax)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        ax.set_title(f"{manifest['model']}  t = {snap.t:g}")
        ax.text(0.02, 0.97, f"min={f.min():.6g} max={f.max():.6g}",
                transform=ax.transAxes, va="top", fontsize=7, color="white")
        path = job.out / f"heatmap_{i:04d}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def _render_trajectory(job: PlotJob, manifest: dict) -> list:
    if not manifest["trajectories"]:
        raise ValueError("manifest lists no trajectories")
    names, t, states = read_trajectory_file(manifest["trajectories"][0])
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=130)
    for i, name in enumerate(names):
        ax.plot(t, states[:, i], lw=1.0, label=name)
    ax.set_xlabel("t")
    ax.legend(loc="best", fontsize=8)
    ax.set_title(manifest["model"])
    job.out.parent.mkdir(parents=True, exist_ok=True)
    path = job.out if job.out.suffix else job.out.with_suffix(".png")
    fig.savefig(path)
    plt.close(fig)
    return [path]


def _render_qc_fan(job: PlotJob, manifest: dict) -> list:
    if not manifest["trajectories"]:
        raise ValueError("manifest lists no trajectories")
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=130)
    for tpath in manifest["trajectories"]:
        _, t, states = read_trajectory_file(tpath)
        ax.plot(t, states[:, 0], lw=0.7, color="tab:blue", alpha=0.6)
    ax.axhline(0.0, color="red", lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel("q")
    ax.set_title(f"{manifest['model']}: {len(manifest['trajectories'])} trajectories")
    job.out.parent.mkdir(parents=True, exist_ok=True)
    path = job.out if job.out.suffix else job.out.with_suffix(".png")
    fig.savefig(path)
    plt.close(fig)
    return [path]


def render(job: PlotJob) -> list:
    """Render one plot job; returns the list of written image paths."""
    manifest = read_manifest(job.manifest_path)
    if job.kind == "heatmap_series":
        return _render_heatmaps(job, manifest)
    if job.kind == "trajectory":
        return _render_trajectory(job, manifest)
    return _render_qc_fan(job, manifest)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hybridviz", description="Render hybridfp output files")
    parser.add_argument("manifest", help="run manifest file")
    parser.add_argument("--kind", choices=KINDS, required=True)
    parser.add_argument("--out", required=True,
                        help="output image (or directory for series)")
    parser.add_argument("--cmap", default="viridis")
    parser.add_argument("--vmin", type=float, default=None)
    parser.add_argument("--vmax", type=float, default=None)
    args = parser.parse_args(argv)
    try:
        job = PlotJob(manifest_path=args.manifest, kind=args.kind,
                      out=args.out, cmap=args.cmap, vmin=args.vmin,
                      vmax=args.vmax)
        written = render(job)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"hybridviz: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
