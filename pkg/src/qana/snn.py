"""Spiking-network spec: the deployable artifact produced by conversion.

A spec is an ordered list of nodes wired by input indices (-1 is the encoded
network input). Integer datapath nodes (conv_if, add_pool_if, dense_if) carry
int8 weights, int32 per-step bias charges, and int32 per-channel thresholds;
gain nodes (gain_eca, gain_se) carry float64 gate parameters evaluated from
accumulated counts at window end; flatten is an index remap.

The on-disk container is little-endian throughout and versioned; loads are
strict (bad magic, version, truncation, or trailing bytes all fail loudly).
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SnnFileError

MAGIC = b"QSNN"
VERSION = 1

NODE_KINDS = ("conv_if", "add_pool_if", "gain_eca", "gain_se", "flatten", "dense_if")

_DTYPE_TAGS = {0: "<i1", 1: "<i4", 2: "<f8"}
_TAG_FOR = {np.dtype(np.int8): 0, np.dtype(np.int32): 1, np.dtype(np.float64): 2}


@dataclass
class SnnNode:
    kind: str
    name: str
    inputs: list
    arrays: dict = field(default_factory=dict)
    ints: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)


@dataclass
class SpikingNetworkSpec:
    input_shape: tuple
    num_classes: int
    logit_offset: float
    nodes: list
    mapping: dict  # source layer name -> (node id, role)
    output_node: int

    def node_named(self, name):
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)


# ====== binary container ======

def _w_str(out, s):
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise SnnFileError(f"string too long to serialize ({len(b)} bytes)")
    out.append(struct.pack("<H", len(b)))
    out.append(b)


def _w_array(out, name, arr):
    arr = np.asarray(arr)
    if arr.dtype not in _TAG_FOR:
        raise SnnFileError(f"array {name!r} has unsupported dtype {arr.dtype}")
    _w_str(out, name)
    tag = _TAG_FOR[arr.dtype]
    out.append(struct.pack("<BB", tag, arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr).astype(_DTYPE_TAGS[tag]).tobytes())


def save_snn(path, spec: SpikingNetworkSpec):
    out = [MAGIC, struct.pack("<I", VERSION)]
    out.append(struct.pack("<B", len(spec.input_shape)))
    out.append(struct.pack(f"<{len(spec.input_shape)}I", *spec.input_shape))
    out.append(struct.pack("<IdI i", spec.num_classes, spec.logit_offset,
                           len(spec.nodes), spec.output_node))
    for node in spec.nodes:
        if node.kind not in NODE_KINDS:
            raise SnnFileError(f"cannot serialize unknown node kind {node.kind!r}")
        _w_str(out, node.kind)
        _w_str(out, node.name)
        out.append(struct.pack("<H", len(node.inputs)))
        out.append(struct.pack(f"<{len(node.inputs)}i", *node.inputs))
        out.append(struct.pack("<H", len(node.arrays)))
        for aname in sorted(node.arrays):
            _w_array(out, aname, node.arrays[aname])
        out.append(struct.pack("<H", len(node.ints)))
        for iname in sorted(node.ints):
            _w_str(out, iname)
            out.append(struct.pack("<q", int(node.ints[iname])))
        out.append(struct.pack("<H", len(node.scalars)))
        for sname in sorted(node.scalars):
            _w_str(out, sname)
            out.append(struct.pack("<d", float(node.scalars[sname])))
    out.append(struct.pack("<I", len(spec.mapping)))
    for layer in sorted(spec.mapping):
        node_id, role = spec.mapping[layer]
        _w_str(out, layer)
        out.append(struct.pack("<i", node_id))
        _w_str(out, role)
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise SnnFileError(f"{self.path}: truncated (needed {n} bytes at "
                               f"offset {self.pos}, have {len(self.buf) - self.pos})")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def array(self):
        name = self.string()
        tag, ndim = self.unpack("<BB")
        if tag not in _DTYPE_TAGS:
            raise SnnFileError(f"{self.path}: unknown array dtype tag {tag}")
        shape = self.unpack(f"<{ndim}I")
        dt = np.dtype(_DTYPE_TAGS[tag])
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = self.take(count * dt.itemsize)
        arr = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        return name, arr

    def done(self):
        if self.pos != len(self.buf):
            raise SnnFileError(f"{self.path}: {len(self.buf) - self.pos} trailing "
                               "bytes after the last record")


def load_snn(path) -> SpikingNetworkSpec:
    path = Path(path)
    if not path.exists():
        raise SnnFileError(f"spec file missing: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise SnnFileError(f"{path}: bad magic, not a spiking-network spec")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise SnnFileError(f"{path}: unsupported spec version {version} "
                           f"(this build reads {VERSION})")
    (in_ndim,) = r.unpack("<B")
    input_shape = r.unpack(f"<{in_ndim}I")
    num_classes, logit_offset, n_nodes, output_node = r.unpack("<IdI i")
    nodes = []
    for _ in range(n_nodes):
        kind = r.string()
        if kind not in NODE_KINDS:
            raise SnnFileError(f"{path}: unknown node kind {kind!r}")
        name = r.string()
        (n_in,) = r.unpack("<H")
        inputs = list(r.unpack(f"<{n_in}i"))
        arrays = {}
        (n_arr,) = r.unpack("<H")
        for _ in range(n_arr):
            aname, arr = r.array()
            arrays[aname] = arr
        ints = {}
        (n_int,) = r.unpack("<H")
        for _ in range(n_int):
            iname = r.string()
            (val,) = r.unpack("<q")
            ints[iname] = val
        scalars = {}
        (n_sc,) = r.unpack("<H")
        for _ in range(n_sc):
            sname = r.string()
            (val,) = r.unpack("<d")
            scalars[sname] = val
        nodes.append(SnnNode(kind, name, inputs, arrays, ints, scalars))
    (n_map,) = r.unpack("<I")
    mapping = {}
    for _ in range(n_map):
        layer = r.string()
        (nid,) = r.unpack("<i")
        role = r.string()
        mapping[layer] = (nid, role)
    r.done()
    if not (0 <= output_node < len(nodes)):
        raise SnnFileError(f"{path}: output node {output_node} out of range")
    return SpikingNetworkSpec(tuple(input_shape), num_classes, logit_offset,
                              nodes, mapping, output_node)
