"""Grid execution for earlyfuse.

Independent ablation and benchmark cells are queued on a GridManager and run
on in-process GridNodes or on remote nodes reached over gRPC.
"""

from .client import RemoteGridNode
from .manager import GridManager
from .node import GridCell, GridNode
from .server import GridNodeServicer, serve, start_server

__all__ = ['GridCell', 'GridNode', 'GridManager', 'GridNodeServicer', 'RemoteGridNode', 'serve', 'start_server']
