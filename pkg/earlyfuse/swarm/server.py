"""GridNode gRPC server for running cells on behalf of a remote manager.

The service is registered through a generic handler built from the runtime
message classes in ``earlyfuse.proto``, so no generated stubs are needed.
"""

import json
import logging
from concurrent import futures
from typing import Any, Tuple

import grpc
import numpy as np

from ..debug import log_node_connection
from ..proto import SERVICE_NAME, CellMessage, CellResult, NodeInfo, NodeStatus
from .node import GridCell, GridNode

logger = logging.getLogger(__name__)


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def encode_result(value: Any) -> str:
    return json.dumps(value, sort_keys=True, default=_jsonable)


class GridNodeServicer:
    """gRPC service implementation for GridNode.

    Handles incoming RunCell and GetStatus calls.
    """

    def __init__(self, node: GridNode, debug: bool = False):
        self.node = node
        self.debug = debug

    def RunCell(self, request, context):
        """Run one cell and return its outcome as a CellResult."""
        if self.debug:
            logger.info(f"Received {request.kind} cell {request.cell_id} from {context.peer()}")
        try:
            spec = json.loads(request.spec_json or "{}")
        except json.JSONDecodeError as e:
            return CellResult(cell_id=request.cell_id, status="error", node_id=self.node.node_id,
                              error=f"Malformed cell spec: {e}")

        outcome = self.node.execute_cell(GridCell(request.cell_id, request.kind, spec))
        response = CellResult(
            cell_id=request.cell_id,
            status=outcome["status"],
            error=outcome.get("error", ""),
            duration=outcome["duration"],
            node_id=self.node.node_id,
        )
        if outcome["status"] == "success":
            try:
                response.result_json = encode_result(outcome["result"])
            except (TypeError, ValueError) as e:
                response.status = "error"
                response.error = f"Unserializable cell result: {e}"

        if self.debug:
            logger.info(f"Cell {request.cell_id} {response.status} in {response.duration:.3f}s")
        return response

    def GetStatus(self, request, context):
        status = self.node.get_status()
        return NodeStatus(
            node_id=status["node_id"],
            status=status["status"],
            current_cell=status["current_cell"] or "",
            completed=status["completed"],
        )


def add_servicer_to_server(servicer: GridNodeServicer, server: grpc.Server) -> None:
    handlers = {
        "RunCell": grpc.unary_unary_rpc_method_handler(
            servicer.RunCell,
            request_deserializer=CellMessage.FromString,
            response_serializer=CellResult.SerializeToString,
        ),
        "GetStatus": grpc.unary_unary_rpc_method_handler(
            servicer.GetStatus,
            request_deserializer=NodeInfo.FromString,
            response_serializer=NodeStatus.SerializeToString,
        ),
    }
    server.add_generic_rpc_handlers((grpc.method_handlers_generic_handler(SERVICE_NAME, handlers),))


def start_server(node: GridNode, port: int = 50051, debug: bool = False) -> Tuple[grpc.Server, int]:
    """Start the gRPC server for a GridNode without blocking.

    Args:
        node: The GridNode instance to serve
        port: Port number to listen on; 0 picks a free port
        debug: Whether to log each call

    Returns:
        The started server and the port it is bound to
    """
    # GridNode serializes cells; the second worker answers GetStatus while one runs.
    server = grpc.server(futures.ThreadPoolExecutor(max_workers=2))
    add_servicer_to_server(GridNodeServicer(node, debug=debug), server)

    bound_port = server.add_insecure_port(f'[::]:{port}')
    server.start()
    logger.info(f"gRPC server for node {node.node_id} started on port {bound_port}")
    log_node_connection(node.node_id, f'[::]:{bound_port}', True)
    return server, bound_port


def serve(node: GridNode, port: int = 50051, debug: bool = False) -> None:
    """Serve a GridNode until the process is terminated."""
    server, bound_port = start_server(node, port, debug)
    try:
        server.wait_for_termination()
    finally:
        log_node_connection(node.node_id, f'[::]:{bound_port}', False)
