"""Reports derived from a run's records.jsonl: topology bars, compression statistics, curves.

Every CSV is a pure function of the records file; plots are optional extras.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .arch import NetworkDescriptor

log = logging.getLogger(__name__)

REQUIRED = ("iter", "step", "skipped")
REQUIRED_DONE = ("reward", "acc_rl", "teacher", "student", "costs")


class RecordError(ValueError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


def load_records(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise RecordError(path, 0, "records file not found")
    records = []
    with path.open() as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(path, i, f"corrupt JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise RecordError(path, i, "record is not an object")
            need = REQUIRED + (() if rec.get("skipped") else REQUIRED_DONE)
            missing = [k for k in need if k not in rec]
            if missing:
                raise RecordError(path, i, f"missing keys {missing}")
            rec["_line"] = i
            records.append(rec)
    if not records:
        raise RecordError(path, 0, "no records")
    return records


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def select_best(records: list[dict]) -> dict | None:
    """The first record attaining the highest reward."""
    done = [r for r in records if not r["skipped"]]
    if not done:
        return None
    return max(done, key=lambda r: (r["reward"], -r["_line"]))


def topology_rows(rec: dict):
    student = NetworkDescriptor.from_dict(rec["student"])
    s_flops = rec["costs"]["per_stage_flops"]
    t_flops = rec["costs"]["teacher_per_stage_flops"]
    for i, st in enumerate(student.stages):
        yield [i + 1, st.depth, st.width, s_flops[i] / t_flops[i]]


def stats_rows(records: list[dict]):
    done = [r for r in records if not r["skipped"]]
    if not done:
        return []
    pairs = [(NetworkDescriptor.from_dict(r["teacher"]), NetworkDescriptor.from_dict(r["student"])) for r in done]
    n_stage = max(len(s.stages) for _, s in pairs)
    rows = []
    for i in range(n_stage):
        d = np.array([s.stages[i].depth / t.stages[i].depth for t, s in pairs if len(s.stages) > i])
        w = np.array([s.stages[i].width / t.stages[i].width for t, s in pairs if len(s.stages) > i])
        rows.append([str(i + 1), len(d), float(d.mean()), float(d.std()), float(w.mean()), float(w.std())])
    d = np.array([sum(x.depth for x in s.stages) / sum(x.depth for x in t.stages) for t, s in pairs])
    w = np.array([sum(x.width for x in s.stages) / sum(x.width for x in t.stages) for t, s in pairs])
    rows.append(["total", len(d), float(d.mean()), float(d.std()), float(w.mean()), float(w.std())])
    return rows


def curve_rows(records: list[dict]):
    for r in records:
        if r["skipped"]:
            yield [r["iter"], r["step"], None, None, True]
        else:
            yield [r["iter"], r["step"], r["reward"], r["acc_rl"], False]


def _plots(out: Path, records, best):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.info("matplotlib unavailable; skipping plots")
        return
    rows = [r for r in curve_rows(records) if not r[4]]
    if rows:
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(range(len(rows)), [r[2] for r in rows], label="reward")
        ax.plot(range(len(rows)), [r[3] for r in rows], label="robust acc")
        ax.set_xlabel("logged step")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "curve.png", dpi=100)
        plt.close(fig)
    if best is not None:
        topo = list(topology_rows(best))
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar([f"stage {r[0]}" for r in topo], [100 * r[3] for r in topo])
        ax.set_ylabel("remaining FLOPs (%)")
        fig.tight_layout()
        fig.savefig(out / "topology.png", dpi=100)
        plt.close(fig)


def write_report(run_dir: str | Path, out_dir: str | Path | None = None, plots: bool = True) -> Path:
    run_dir = Path(run_dir)
    records = load_records(run_dir / "records.jsonl")
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    best = select_best(records)
    _write(out / "topology.csv", ["stage", "depth", "width", "remaining_pct"],
           topology_rows(best) if best is not None else [])
    _write(out / "stats.csv", ["stage", "n", "depth_keep_mean", "depth_keep_std", "width_keep_mean",
                               "width_keep_std"], stats_rows(records))
    _write(out / "curve.csv", ["iteration", "step", "reward", "acc_rl", "skipped"], curve_rows(records))
    if plots:
        _plots(out, records, best)
    return out
