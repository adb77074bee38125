"""GridManager module for coordinating grid-cell execution.

This module provides the GridManager class that hands queued cells to
registered nodes (in-process or remote), one worker thread per node, and
collects every outcome. A failing cell is recorded and the grid continues.
"""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional

from ..debug import DEBUG_DETAILED, generate_communication_report, get_debug_level
from ..utils.evaluation import GridEvaluator
from .node import GridCell

logger = logging.getLogger(__name__)


class GridManager:
    """A class for running independent grid cells across nodes.

    Each node runs one cell at a time; cells are taken from a shared queue in
    submission order, so a single node reproduces a sequential run.
    """

    def __init__(self, debug: bool = False):
        """Initialize a GridManager.

        Args:
            debug: Whether to log per-cell dispatch details
        """
        self.nodes: Dict[str, Any] = {}
        self.cell_queue: List[GridCell] = []
        self.cell_results: Dict[str, Dict[str, Any]] = {}
        self.debug = debug
        self.evaluator = GridEvaluator()
        self._lock = threading.Lock()

    def register_node(self, node: Any) -> None:
        """Register a node (``GridNode`` or ``RemoteGridNode``).

        Args:
            node: The node to register
        """
        self.nodes[node.node_id] = node
        logger.info(f"Registered node {node.node_id}")

    def add_cell(self, cell: GridCell) -> None:
        """Add a cell to the execution queue.

        Args:
            cell: The cell to add
        """
        if cell.cell_id in self.cell_results or any(c.cell_id == cell.cell_id for c in self.cell_queue):
            raise ValueError(f"Duplicate cell id {cell.cell_id}")
        if self.debug and get_debug_level() >= DEBUG_DETAILED:
            logger.info(f"Queued {cell.kind} cell {cell.cell_id}")
        self.cell_queue.append(cell)

    def _next_cell(self, node: Any) -> Optional[GridCell]:
        with self._lock:
            for i, cell in enumerate(self.cell_queue):
                if node.can_run(cell.kind):
                    return self.cell_queue.pop(i)
        return None

    def _record(self, cell: GridCell, node_id: str, outcome: Dict[str, Any]) -> None:
        outcome = {**outcome, "node_id": node_id}
        with self._lock:
            self.cell_results[cell.cell_id] = outcome
        self.evaluator.record_cell_end(cell.cell_id, outcome["status"])
        if outcome["status"] == "success":
            logger.info(f"Cell {cell.cell_id} completed successfully on {node_id} in {outcome['duration']:.3f}s")
        else:
            logger.warning(f"Cell {cell.cell_id} failed on {node_id}: {outcome.get('error')}")

    def _drain(self, node: Any) -> None:
        while True:
            cell = self._next_cell(node)
            if cell is None:
                return
            self.evaluator.record_cell_start(cell.cell_id, cell.kind, node.node_id)
            try:
                outcome = node.execute_cell(cell)
            except Exception as e:
                outcome = {"status": "error", "error": f"{type(e).__name__}: {e}", "duration": 0.0}
            self._record(cell, node.node_id, outcome)

    def execute_cells(self) -> Dict[str, Dict[str, Any]]:
        """Execute all queued cells across registered nodes.

        Returns:
            Dictionary mapping cell ids to outcome dicts (``status``,
            ``result`` or ``error``, ``duration``, ``node_id``)
        """
        if not self.nodes:
            raise RuntimeError("No nodes registered with the grid manager")
        start_time = time.time()
        logger.info(f"Starting execution of {len(self.cell_queue)} queued cells on {len(self.nodes)} nodes")
        self.evaluator.start_evaluation()

        nodes = list(self.nodes.values())
        with ThreadPoolExecutor(max_workers=len(nodes), thread_name_prefix="grid") as pool:
            for future in [pool.submit(self._drain, node) for node in nodes]:
                future.result()

        for cell in self.cell_queue:
            self._record(cell, "", {"status": "error", "error": f"No node can run {cell.kind} cells",
                                    "duration": 0.0})
        self.cell_queue.clear()
        self.evaluator.end_evaluation()
        if self.debug:
            logger.info(self.evaluator.generate_execution_report())
        if self.debug and get_debug_level() >= DEBUG_DETAILED:
            logger.info(generate_communication_report())
        logger.info(f"All cells completed in {time.time() - start_time:.3f}s")
        return dict(self.cell_results)

    def get_system_status(self) -> Dict[str, Any]:
        """Get the current status of the grid.

        Returns:
            Dictionary containing system status information
        """
        status = {
            "nodes": {node_id: node.get_status() for node_id, node in self.nodes.items()},
            "pending_cells": len(self.cell_queue),
            "completed_cells": len(self.cell_results),
            "failed_cells": sum(1 for r in self.cell_results.values() if r["status"] != "success"),
        }
        durations = [r["duration"] for r in self.cell_results.values() if r.get("duration")]
        if durations:
            status["average_cell_duration"] = sum(durations) / len(durations)
            status["max_cell_duration"] = max(durations)
            status["min_cell_duration"] = min(durations)
        return status
