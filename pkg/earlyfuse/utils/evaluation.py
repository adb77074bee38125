"""Wall-clock bookkeeping for grid runs: which node ran which cell, and when."""

import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import pandas as pd


@dataclass
class CellTiming:
    cell_id: str
    kind: str
    node_id: str
    start: float
    end: Optional[float] = None
    status: str = "running"

    @property
    def seconds(self) -> float:
        return 0.0 if self.end is None else self.end - self.start

    def overlaps(self, other: "CellTiming") -> bool:
        if self.end is None or other.end is None:
            return False
        return other.start <= self.end and self.start <= other.end


class GridEvaluator:
    """Collects per-cell timings while a ``GridManager`` drains its queue."""

    def __init__(self):
        self.timings: Dict[str, CellTiming] = {}
        self.started: Optional[float] = None
        self.finished: Optional[float] = None

    def start_evaluation(self) -> None:
        self.started, self.finished = time.perf_counter(), None

    def end_evaluation(self) -> None:
        self.finished = time.perf_counter()

    def record_cell_start(self, cell_id: str, kind: str, node_id: str) -> None:
        self.timings[cell_id] = CellTiming(cell_id, kind, node_id, time.perf_counter())

    def record_cell_end(self, cell_id: str, status: str) -> None:
        timing = self.timings.get(cell_id)
        if timing is not None:
            timing.end, timing.status = time.perf_counter(), status

    def wall_time(self) -> float:
        if self.started is None or self.finished is None:
            return 0.0
        return self.finished - self.started

    def frame(self) -> pd.DataFrame:
        rows = [{**asdict(t), "seconds": t.seconds} for t in self.timings.values()]
        return pd.DataFrame(rows, columns=["cell_id", "kind", "node_id", "status", "seconds"])

    def get_parallel_execution_stats(self) -> Dict[str, List[str]]:
        """Cells whose run intervals overlapped, keyed by cell id."""
        overlapping = {}
        for cell_id, timing in self.timings.items():
            others = [o for o, other in self.timings.items() if o != cell_id and timing.overlaps(other)]
            if others:
                overlapping[cell_id] = others
        return overlapping

    def generate_execution_report(self) -> str:
        if not self.timings:
            return "No grid cells were timed."
        frame = self.frame()
        lines = [f"Grid finished {len(frame)} cells in {self.wall_time():.2f}s"]
        for _, row in frame.iterrows():
            lines.append(f"  {row['cell_id']} ({row['kind']}) on {row['node_id']}: {row['status']}, {row['seconds']:.2f}s")
        per_node = frame.groupby("node_id")["seconds"].agg(["count", "sum"])
        lines.append("Per node:")
        for node_id, row in per_node.iterrows():
            lines.append(f"  {node_id}: {int(row['count'])} cells, busy {row['sum']:.2f}s")
        overlapping = self.get_parallel_execution_stats()
        if overlapping:
            lines.append("Overlapping cells:")
            for cell_id, others in overlapping.items():
                lines.append(f"  {cell_id} overlapped {', '.join(others)}")
        return "\n".join(lines)
