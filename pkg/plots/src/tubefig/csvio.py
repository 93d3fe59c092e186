"""Schema-checked readers for the controller's CSV output files.

The files are the only interface to the controller package: a trajectory
log, a feasibility grid, and tube polygons. Leading ``#`` comment lines
(the config hash) are skipped; every reader validates the exact header it
expects and raises ``SchemaError`` naming the offending column.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class SchemaError(ValueError):
    """CSV does not match the expected schema; message names the column."""


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise SchemaError(f"{path}: file holds no header row")
    return rows[0], rows[1:]


def _expect(path, header: list[str], expected: list[str]) -> None:
    for pos, name in enumerate(expected):
        if pos >= len(header) or header[pos] != name:
            found = header[pos] if pos < len(header) else "<missing>"
            raise SchemaError(f"{path}: expected column '{name}' at position {pos}, "
                              f"found '{found}'")
    if len(header) > len(expected):
        raise SchemaError(f"{path}: unexpected trailing column '{header[len(expected)]}'")


@dataclass
class Trajectory:
    k: np.ndarray
    x: np.ndarray        # (steps, n)
    u: np.ndarray        # (steps, m)
    w: np.ndarray        # (steps, n)
    lam: np.ndarray      # (steps, M)
    objective: np.ndarray
    solve_time_ms: np.ndarray
    mem_event: list[str]

    @property
    def event_steps(self) -> list[int]:
        return [int(k) for k, ev in zip(self.k, self.mem_event) if ev != "none"]


def load_trajectory(path) -> Trajectory:
    header, rows = _read_rows(path)
    if not rows:
        raise SchemaError(f"{path}: trajectory file holds no data rows")

    def prefixed(prefix, start):
        names = []
        i = start
        while i < len(header) and header[i].startswith(prefix) \
                and header[i][len(prefix):].isdigit():
            names.append(header[i])
            i += 1
        return names, i

    if not header or header[0] != "k":
        raise SchemaError(f"{path}: expected column 'k' at position 0, "
                          f"found '{header[0] if header else '<missing>'}'")
    xs, i = prefixed("x", 1)
    if not xs:
        raise SchemaError(f"{path}: expected column 'x1' at position 1")
    us, i = prefixed("u", i)
    if not us:
        raise SchemaError(f"{path}: expected column 'u1' after the state columns")
    ws, i = prefixed("w", i)
    if len(ws) != len(xs):
        raise SchemaError(f"{path}: expected {len(xs)} disturbance columns 'w*', got {len(ws)}")
    lams = []
    while i < len(header) and header[i].startswith("lambda_"):
        lams.append(header[i])
        i += 1
    if not lams:
        raise SchemaError(f"{path}: expected column 'lambda_0' after the disturbance columns")
    tail = ["objective", "solve_time_ms", "mem_event"]
    for name in tail:
        if i >= len(header) or header[i] != name:
            found = header[i] if i < len(header) else "<missing>"
            raise SchemaError(f"{path}: expected column '{name}' at position {i}, "
                              f"found '{found}'")
        i += 1
    if i != len(header):
        raise SchemaError(f"{path}: unexpected trailing column '{header[i]}'")

    n, m, M = len(xs), len(us), len(lams)
    num = np.array([[float(v) for v in row[:-1]] for row in rows])
    return Trajectory(
        k=num[:, 0],
        x=num[:, 1:1 + n],
        u=num[:, 1 + n:1 + n + m],
        w=num[:, 1 + n + m:1 + 2 * n + m],
        lam=num[:, 1 + 2 * n + m:1 + 2 * n + m + M],
        objective=num[:, -2],
        solve_time_ms=num[:, -1],
        mem_event=[r[-1] for r in rows],
    )


@dataclass
class RoaTable:
    points: np.ndarray              # (cells, n)
    variant: list[str]
    status: list[str]

    def feasible_points(self, variant: str) -> np.ndarray:
        pts = [p for p, v, s in zip(self.points, self.variant, self.status)
               if v == variant and s == "feasible"]
        return np.array(pts) if pts else np.zeros((0, self.points.shape[1]))


def load_roa(path) -> RoaTable:
    header, rows = _read_rows(path)
    if not rows:
        raise SchemaError(f"{path}: feasibility file holds no data rows")
    n = 0
    while n < len(header) and header[n] == f"x{n + 1}":
        n += 1
    if n == 0:
        raise SchemaError(f"{path}: expected column 'x1' at position 0, found '{header[0]}'")
    _expect(path, header, [f"x{i + 1}" for i in range(n)] + ["variant", "status"])
    points = np.array([[float(v) for v in r[:n]] for r in rows])
    return RoaTable(points=points,
                    variant=[r[n] for r in rows],
                    status=[r[n + 1] for r in rows])


def load_tubes(path) -> dict[int, dict[int, np.ndarray]]:
    """Polygons keyed by entry id then step index, vertices in file order."""
    header, rows = _read_rows(path)
    _expect(path, header, ["entry_id", "step_i", "vertex_index", "vx1", "vx2"])
    out: dict[int, dict[int, list]] = {}
    for r in rows:
        entry, step, vidx = int(r[0]), int(r[1]), int(r[2])
        out.setdefault(entry, {}).setdefault(step, []).append(
            (vidx, float(r[3]), float(r[4])))
    polys: dict[int, dict[int, np.ndarray]] = {}
    for entry, steps in out.items():
        polys[entry] = {}
        for step, verts in steps.items():
            verts.sort(key=lambda t: t[0])
            polys[entry][step] = np.array([[v[1], v[2]] for v in verts])
    return polys
