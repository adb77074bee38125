"""GridNode module for running independent grid cells.

This module provides the GridCell message type and the GridNode class that
executes cells in-process. A node runs one cell at a time, so timing cells
never share a process with other work.
"""

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional

logger = logging.getLogger(__name__)

CellHandler = Callable[[Dict[str, Any]], Dict[str, Any]]


@dataclass
class GridCell:
    """One unit of work: a kind (``bench`` or ``ablation``) and its spec."""

    cell_id: str
    kind: str
    spec: Dict[str, Any] = field(default_factory=dict)


def _run_ablation(spec: Dict[str, Any]) -> Dict[str, Any]:
    from ..evaluation import AblationSpec, run_ablation_cell
    return run_ablation_cell(AblationSpec.from_dict(spec))


def _run_bench(spec: Dict[str, Any]) -> Dict[str, Any]:
    from ..benchmark import run_bench_cell
    return run_bench_cell(spec)


def default_handlers() -> Dict[str, CellHandler]:
    return {"ablation": _run_ablation, "bench": _run_bench}


class GridNode:
    """A class representing a single node that executes grid cells.

    Handles cell execution and status reporting for the GridManager. Each
    node executes at most one cell at a time.
    """

    def __init__(self, node_id: str, handlers: Optional[Dict[str, CellHandler]] = None):
        """Initialize a GridNode.

        Args:
            node_id: Unique identifier for this node
            handlers: Cell kinds this node can run, mapped to their entry points
        """
        self.node_id = node_id
        self.handlers = handlers if handlers is not None else default_handlers()
        self.current_cell: Optional[str] = None
        self.status = "idle"
        self.completed = 0
        self._lock = threading.Lock()

    def can_run(self, kind: str) -> bool:
        return kind in self.handlers

    def execute_cell(self, cell: GridCell) -> Dict[str, Any]:
        """Execute a cell on this node.

        Args:
            cell: The cell to execute

        Returns:
            Dictionary with ``status`` (success or error), ``result`` or
            ``error``, and ``duration``. Failures never raise.
        """
        start_time = time.time()
        if cell.kind not in self.handlers:
            return {
                'status': 'error',
                'error': f"Cell kind {cell.kind} not supported on node {self.node_id}",
                'duration': 0.0,
            }

        with self._lock:
            self.status = "busy"
            self.current_cell = cell.cell_id
            try:
                result = self.handlers[cell.kind](cell.spec)
                return {
                    'status': 'success',
                    'result': result,
                    'duration': time.time() - start_time,
                }
            except Exception as e:
                logger.debug(f"Cell {cell.cell_id} raised", exc_info=True)
                return {
                    'status': 'error',
                    'error': f"{type(e).__name__}: {e}",
                    'duration': time.time() - start_time,
                }
            finally:
                self.completed += 1
                self.current_cell = None
                self.status = "idle"

    def get_status(self) -> Dict[str, Any]:
        """Get the current status of this node.

        Returns:
            Dictionary containing node status information
        """
        return {
            "node_id": self.node_id,
            "status": self.status,
            "current_cell": self.current_cell,
            "completed": self.completed,
            "cell_kinds": sorted(self.handlers),
        }
