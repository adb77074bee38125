"""Debug levels and RPC bookkeeping for earlyfuse.

The debug level decides how chatty the package logger is and whether grid
nodes record every RPC they make or serve. Library modules only ever log
through ``logging.getLogger(__name__)``; this module is the one place that
configures handlers, and only when asked to via :func:`set_debug_level`.
"""

import logging
import time
from dataclasses import asdict, dataclass
from typing import Any, Dict, List

import grpc
import pandas as pd

logger = logging.getLogger("earlyfuse")

# Debug levels
DEBUG_NONE = 0      # Errors only
DEBUG_BASIC = 1     # Run boundaries, checkpoints, cell outcomes
DEBUG_DETAILED = 2  # Per-step losses, per-cell timings, RPC calls
DEBUG_VERBOSE = 3   # Everything, including RPC payload sizes

# level -> (root handler level, package logger level)
_LOG_LEVELS = {
    DEBUG_NONE: (logging.ERROR, logging.ERROR),
    DEBUG_BASIC: (logging.INFO, logging.WARNING),
    DEBUG_DETAILED: (logging.INFO, logging.INFO),
    DEBUG_VERBOSE: (logging.DEBUG, logging.DEBUG),
}

_debug_level = DEBUG_NONE


@dataclass
class RpcRecord:
    method: str
    timestamp: float
    duration: float
    request_size: int
    response_size: int


@dataclass
class NodeLink:
    address: str
    connected: bool
    last_updated: float


_rpc_calls: List[RpcRecord] = []
_node_links: Dict[str, NodeLink] = {}


def set_debug_level(level: int) -> None:
    """Set the debug level and configure logging to match.

    Args:
        level: Debug level (0-3); out-of-range values are clamped
    """
    global _debug_level
    _debug_level = min(max(level, DEBUG_NONE), DEBUG_VERBOSE)
    root_level, package_level = _LOG_LEVELS[_debug_level]
    logging.basicConfig(level=root_level)
    logger.setLevel(package_level)
    logger.info(f"Debug level set to {_debug_level}")


def get_debug_level() -> int:
    return _debug_level


def _payload_size(message: Any) -> int:
    byte_size = getattr(message, "ByteSize", None)
    return byte_size() if callable(byte_size) else len(str(message))


def log_rpc_call(method: str, request: Any, response: Any, duration: float) -> None:
    """Record one RPC call for later inspection."""
    record = RpcRecord(method, time.time(), duration, _payload_size(request), _payload_size(response))
    if _debug_level >= DEBUG_DETAILED:
        logger.info(f"RPC call: {method} (took {duration:.3f}s)")
    if _debug_level >= DEBUG_VERBOSE:
        logger.debug(f"{method}: request {record.request_size} bytes, response {record.response_size} bytes")
    _rpc_calls.append(record)


def log_node_connection(node_id: str, address: str, connected: bool) -> None:
    """Record a grid node attaching to, or leaving, a manager or server."""
    if _debug_level >= DEBUG_BASIC:
        logger.info(f"Node {node_id} {'connected' if connected else 'disconnected'} at {address}")
    _node_links[node_id] = NodeLink(address, connected, time.time())


class DebugInterceptor(grpc.UnaryUnaryClientInterceptor):
    """Client interceptor that times and records every unary call."""

    def intercept_unary_unary(self, continuation, client_call_details, request):
        method = client_call_details.method
        if isinstance(method, bytes):
            method = method.decode("utf-8")
        start_time = time.time()
        outcome = continuation(client_call_details, request)
        log_rpc_call(method, request, outcome.result(), time.time() - start_time)
        return outcome


def create_debug_channel(address: str) -> grpc.Channel:
    """Insecure channel to ``address`` whose calls land in the RPC history."""
    return grpc.intercept_channel(grpc.insecure_channel(address), DebugInterceptor())


def generate_communication_report() -> str:
    """Node links and per-method RPC timings as plain text."""
    lines = [f"Grid RPC report: {len(_node_links)} nodes, {len(_rpc_calls)} calls"]
    for node_id, link in sorted(_node_links.items()):
        lines.append(f"  node {node_id} @ {link.address}: {'up' if link.connected else 'down'}")
    if _rpc_calls:
        calls = pd.DataFrame([asdict(record) for record in _rpc_calls])
        summary = calls.groupby("method")["duration"].agg(["count", "mean", "sum"])
        for method, row in summary.iterrows():
            lines.append(f"  {method}: {int(row['count'])} calls, mean {row['mean']:.3f}s, total {row['sum']:.3f}s")
    return "\n".join(lines)
