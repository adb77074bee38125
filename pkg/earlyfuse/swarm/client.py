"""gRPC client for running grid cells on remote nodes.

RemoteGridNode exposes the same surface as GridNode (``node_id``,
``can_run``, ``execute_cell``, ``get_status``), so a GridManager can mix
local and remote nodes.
"""

import json
import logging
import time
from typing import Any, Dict, Iterable, Optional

import grpc

from ..debug import DEBUG_NONE, create_debug_channel, get_debug_level, log_node_connection
from ..proto import SERVICE_NAME, CellMessage, CellResult, NodeInfo, NodeStatus
from .node import GridCell
from .server import encode_result

logger = logging.getLogger(__name__)


class RemoteGridNode:
    """Client-side handle to a GridNode served over gRPC."""

    def __init__(
        self,
        address: str,
        node_id: Optional[str] = None,
        debug: bool = False,
        kinds: Iterable[str] = ("ablation", "bench"),
        timeout: Optional[float] = None,
    ):
        """Open a channel to a remote GridNode.

        Args:
            address: The address of the remote node (e.g. 'localhost:50051')
            node_id: Optional identifier for the node
            debug: Whether to route calls through the debug interceptor
            kinds: Cell kinds the remote node accepts
            timeout: Per-call deadline in seconds, or None for no deadline
        """
        self.address = address
        self.node_id = node_id or f"remote-{address}"
        self.debug = debug
        self.kinds = frozenset(kinds)
        self.timeout = timeout

        if debug and get_debug_level() > DEBUG_NONE:
            self.channel = create_debug_channel(address)
        else:
            self.channel = grpc.insecure_channel(address)

        self._run_cell = self.channel.unary_unary(
            f"/{SERVICE_NAME}/RunCell",
            request_serializer=CellMessage.SerializeToString,
            response_deserializer=CellResult.FromString,
        )
        self._get_status = self.channel.unary_unary(
            f"/{SERVICE_NAME}/GetStatus",
            request_serializer=NodeInfo.SerializeToString,
            response_deserializer=NodeStatus.FromString,
        )
        log_node_connection(self.node_id, address, True)

    def can_run(self, kind: str) -> bool:
        return kind in self.kinds

    def execute_cell(self, cell: GridCell) -> Dict[str, Any]:
        """Execute a cell on the remote node.

        Transport failures are reported as an ``error`` outcome, like any other
        cell failure.
        """
        request = CellMessage(cell_id=cell.cell_id, kind=cell.kind, spec_json=encode_result(cell.spec))
        if self.debug:
            logger.info(f"Executing cell {cell.cell_id} on node {self.node_id} at {self.address}")

        start_time = time.time()
        try:
            response = self._run_cell(request, timeout=self.timeout)
        except grpc.RpcError as e:
            return {
                'status': 'error',
                'error': f"RPC to {self.address} failed: {e.code().name}: {e.details()}",
                'duration': time.time() - start_time,
            }

        if response.status != 'success':
            return {'status': response.status or 'error', 'error': response.error, 'duration': response.duration}
        return {
            'status': 'success',
            'result': json.loads(response.result_json) if response.result_json else None,
            'duration': response.duration,
        }

    def get_status(self) -> Dict[str, Any]:
        try:
            response = self._get_status(NodeInfo(node_id=self.node_id), timeout=self.timeout)
        except grpc.RpcError as e:
            return {"node_id": self.node_id, "status": "unreachable", "error": str(e.code().name)}
        return {
            "node_id": response.node_id,
            "status": response.status,
            "current_cell": response.current_cell or None,
            "completed": response.completed,
            "address": self.address,
        }

    def close(self) -> None:
        """Close the gRPC channel."""
        log_node_connection(self.node_id, self.address, False)
        self.channel.close()
