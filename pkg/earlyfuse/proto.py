"""Protocol Buffers messages for checkpoints and grid-cell RPCs.

The schema is declared in Python and registered in a private descriptor pool
when the module is imported, so no ``protoc`` step is needed. Equivalent
``.proto`` source::

    syntax = "proto3";
    package earlyfuse;

    message TensorRecord    { string name = 1; repeated int64 shape = 2; bytes data = 3; }
    message OptimizerRecord { int64 step = 1; repeated TensorRecord m = 2; repeated TensorRecord v = 3; }
    message Checkpoint {
        uint32 format_version = 1; int64 step = 2; string config_json = 3;
        repeated TensorRecord params = 4; OptimizerRecord optimizer = 5; string rng_state_json = 6;
    }
    message CellMessage { string cell_id = 1; string kind = 2; string spec_json = 3; }
    message CellResult {
        string cell_id = 1; string status = 2; string result_json = 3;
        string error = 4; double duration = 5; string node_id = 6;
    }
    message NodeInfo   { string node_id = 1; string status = 2; }
    message NodeStatus { string node_id = 1; string status = 2; string current_cell = 3; int64 completed = 4; }

    service GridNodeService {
        rpc RunCell (CellMessage) returns (CellResult);
        rpc GetStatus (NodeInfo) returns (NodeStatus);
    }
"""

from google.protobuf import descriptor_pb2, descriptor_pool, message_factory

PACKAGE = "earlyfuse"
SERVICE_NAME = f"{PACKAGE}.GridNodeService"

_F = descriptor_pb2.FieldDescriptorProto

_SCHEMA = {
    "TensorRecord": [
        ("name", 1, _F.TYPE_STRING, False, None),
        ("shape", 2, _F.TYPE_INT64, True, None),
        ("data", 3, _F.TYPE_BYTES, False, None),
    ],
    "OptimizerRecord": [
        ("step", 1, _F.TYPE_INT64, False, None),
        ("m", 2, _F.TYPE_MESSAGE, True, "TensorRecord"),
        ("v", 3, _F.TYPE_MESSAGE, True, "TensorRecord"),
    ],
    "Checkpoint": [
        ("format_version", 1, _F.TYPE_UINT32, False, None),
        ("step", 2, _F.TYPE_INT64, False, None),
        ("config_json", 3, _F.TYPE_STRING, False, None),
        ("params", 4, _F.TYPE_MESSAGE, True, "TensorRecord"),
        ("optimizer", 5, _F.TYPE_MESSAGE, False, "OptimizerRecord"),
        ("rng_state_json", 6, _F.TYPE_STRING, False, None),
    ],
    "CellMessage": [
        ("cell_id", 1, _F.TYPE_STRING, False, None),
        ("kind", 2, _F.TYPE_STRING, False, None),
        ("spec_json", 3, _F.TYPE_STRING, False, None),
    ],
    "CellResult": [
        ("cell_id", 1, _F.TYPE_STRING, False, None),
        ("status", 2, _F.TYPE_STRING, False, None),
        ("result_json", 3, _F.TYPE_STRING, False, None),
        ("error", 4, _F.TYPE_STRING, False, None),
        ("duration", 5, _F.TYPE_DOUBLE, False, None),
        ("node_id", 6, _F.TYPE_STRING, False, None),
    ],
    "NodeInfo": [
        ("node_id", 1, _F.TYPE_STRING, False, None),
        ("status", 2, _F.TYPE_STRING, False, None),
    ],
    "NodeStatus": [
        ("node_id", 1, _F.TYPE_STRING, False, None),
        ("status", 2, _F.TYPE_STRING, False, None),
        ("current_cell", 3, _F.TYPE_STRING, False, None),
        ("completed", 4, _F.TYPE_INT64, False, None),
    ],
}


def _build_file() -> descriptor_pb2.FileDescriptorProto:
    file_proto = descriptor_pb2.FileDescriptorProto(name="earlyfuse/grid.proto", package=PACKAGE, syntax="proto3")
    for message_name, fields in _SCHEMA.items():
        message = file_proto.message_type.add(name=message_name)
        for name, number, field_type, repeated, type_name in fields:
            field = message.field.add(
                name=name,
                number=number,
                type=field_type,
                label=_F.LABEL_REPEATED if repeated else _F.LABEL_OPTIONAL,
            )
            if type_name:
                field.type_name = f".{PACKAGE}.{type_name}"
    service = file_proto.service.add(name="GridNodeService")
    service.method.add(name="RunCell", input_type=f".{PACKAGE}.CellMessage", output_type=f".{PACKAGE}.CellResult")
    service.method.add(name="GetStatus", input_type=f".{PACKAGE}.NodeInfo", output_type=f".{PACKAGE}.NodeStatus")
    return file_proto


_pool = descriptor_pool.DescriptorPool()
_pool.AddSerializedFile(_build_file().SerializeToString())


def _message_class(name: str):
    return message_factory.GetMessageClass(_pool.FindMessageTypeByName(f"{PACKAGE}.{name}"))


TensorRecord = _message_class("TensorRecord")
OptimizerRecord = _message_class("OptimizerRecord")
Checkpoint = _message_class("Checkpoint")
CellMessage = _message_class("CellMessage")
CellResult = _message_class("CellResult")
NodeInfo = _message_class("NodeInfo")
NodeStatus = _message_class("NodeStatus")
