import numpy as np
import pytest


def write_trajectory(path, steps=12, M=3, events=("insert(2)", "replace(0)"),
                     event_steps=(5, 10)):
    lines = ["# config_hash=deadbeef",
             "k,x1,x2,u1,w1,w2,lambda_0,lambda_1,lambda_2,objective,solve_time_ms,mem_event"]
    rng = np.random.default_rng(0)
    lam = np.array([1.0, 0.0, 0.0])[:M]
    for k in range(steps):
        x = [-1.0 + 0.08 * k, -0.5 + 0.03 * k]
        u = [0.2 - 0.01 * k]
        w = rng.uniform(-0.1, 0.1, 2)
        ev = "none"
        if k in event_steps:
            ev = events[list(event_steps).index(k) % len(events)]
            lam = np.roll(lam, 1)
        row = ([str(k)] + [f"{v:.17g}" for v in x + u + list(w)]
               + [f"{v:.17g}" for v in lam]
               + [f"{3.0 - 0.1 * k:.17g}", "1.25", ev])
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_roa(path, spacing=0.5):
    xs = np.arange(-1.5, 0.5 + 1e-9, spacing)
    ys = np.arange(-1.5, 1.5 + 1e-9, spacing)
    lines = ["# config_hash=deadbeef", "x1,x2,variant,status"]
    for variant, radius in (("fixed_tube_baseline", 0.7),
                            ("primary_async", 1.0),
                            ("full_sltmpc", 1.2)):
        for x in xs:
            for y in ys:
                status = "feasible" if x * x + y * y <= radius ** 2 else "infeasible"
                lines.append(f"{x:.17g},{y:.17g},{variant},{status}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_tubes(path, entry_ids=(1, 5, 10)):
    lines = ["# config_hash=deadbeef", "entry_id,step_i,vertex_index,vx1,vx2"]
    for e in entry_ids:
        for step in range(3):
            r = 0.05 * (step + 1) * (1 + 0.1 * e)
            square = [(r, r), (-r, r), (-r, -r), (r, -r)]
            for vi, (vx, vy) in enumerate(square):
                lines.append(f"{e},{step},{vi},{vx:.17g},{vy:.17g}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture()
def csv_triplet(tmp_path):
    return (write_trajectory(tmp_path / "trajectory.csv"),
            write_roa(tmp_path / "roa.csv"),
            write_tubes(tmp_path / "tubes.csv"))
