"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SPHG" | u32 version
    u32 len | meta JSON (network config, stage cursor, RNG state, history ...)
    u32 len | topology table
    u32 len | parameter index (name, shape) in blob order
    float32 blobs, one per indexed parameter
    u64 adam step | u32 count | (u32 param index, m blob, v blob) * count

The topology table holds one record per layer: id u16, kind u8, number of
kernels u8, committed candidate u8 (255 = undecided), C_in u32, C_out u32,
then (k u8, dilation u8) per kernel. It is validated against the graph
rebuilt from the meta config and against the parameter index before any
blob is read.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagicError, CheckpointError, ShapeTableError,
                     TruncatedCheckpointError, VersionMismatchError)
from .network import CONV_KINDS, NetworkConfig, build_network
from .optim import Adam
from .select import ConvKernel
from . import tensor as T

MAGIC = b"SPHG"
VERSION = 1
KINDS = ("input", "stem", "conv-block", "pool", "upsample", "skip-add", "merge", "head", "remap")
UNDECIDED = 255


@dataclass
class CheckpointState:
    net: object
    optimizer: Adam = None
    meta: dict = field(default_factory=dict)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def unpack(self, fmt, what):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def _topology_bytes(net):
    out = bytearray()
    out += struct.pack("<I", len(net.layers))
    for layer in net.layers:
        ks = layer.kernels
        committed = UNDECIDED
        if layer.module is not None and layer.module.is_committed:
            committed = layer.module.committed
        out += struct.pack("<HBBBII", layer.id, KINDS.index(layer.kind), len(ks), committed,
                           layer.c_in, layer.c_out)
        for k in ks:
            out += struct.pack("<BB", k.k, k.dilation)
    return bytes(out)


def _param_order(net):
    return list(net.parameters().items())


def serialize_checkpoint(state):
    net = state.net
    meta = dict(state.meta)
    meta["network"] = dict(net.config.__dict__, dilations=list(net.config.dilations))
    meta["alpha_history"] = {
        str(l.id): [l.module.alpha_sum.tolist(), l.module.alpha_count]
        for l in net.sp_layers() if not l.module.is_committed
    }
    if state.optimizer is not None:
        st = state.optimizer.state
        meta["adam"] = {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    topo_b = _topology_bytes(net)
    params = _param_order(net)
    index = bytearray(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode("utf-8")
        index += struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.ndim)
        index += struct.pack(f"<{p.ndim}I", *p.shape)

    out = bytearray(MAGIC + struct.pack("<I", VERSION))
    for section in (meta_b, topo_b, bytes(index)):
        out += struct.pack("<I", len(section)) + section
    for _, p in params:
        out += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    if state.optimizer is None:
        out += struct.pack("<QI", 0, 0)
    else:
        st = state.optimizer.state
        names = [n for n, _ in params]
        entries = [(names.index(n), n) for n in names if n in st.m]
        out += struct.pack("<QI", st.step, len(entries))
        for i, n in entries:
            out += struct.pack("<I", i)
            out += np.ascontiguousarray(st.m[n], dtype="<f4").tobytes()
            out += np.ascontiguousarray(st.v[n], dtype="<f4").tobytes()
    return bytes(out)


def _parse_topology(raw):
    r = _Reader(raw)
    try:
        (n,) = r.unpack("I", "layer count")
        rows = []
        for _ in range(n):
            lid, kind, nk, committed, c_in, c_out = r.unpack("HBBBII", "layer record")
            if kind >= len(KINDS):
                raise ShapeTableError(f"layer {lid}: unknown kind code {kind}")
            kernels = [r.unpack("BB", "kernel record") for _ in range(nk)]
            rows.append((lid, KINDS[kind], committed, c_in, c_out, kernels))
        if r.pos != len(raw):
            raise ShapeTableError("trailing bytes in topology table")
    except TruncatedCheckpointError as exc:
        raise ShapeTableError(f"malformed topology table: {exc}") from None
    return rows


def _kernel_names(layer, committed, n):
    if layer.kind == "conv-block":
        if committed != UNDECIDED:
            return [f"L{layer.id}.c{committed}"]
        return [f"L{layer.id}.c{i}" for i in range(n)]
    return [f"L{layer.id}"]


def deserialize_checkpoint(buf):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("not an SPHG checkpoint")
    (version,) = r.unpack("I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    sections = []
    for what in ("meta", "topology", "parameter index"):
        (n,) = r.unpack("I", f"{what} length")
        sections.append(r.take(n, what))
    try:
        meta = json.loads(sections[0].decode("utf-8"))
        ncfg = NetworkConfig(**dict(meta["network"], dilations=tuple(meta["network"]["dilations"])))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt meta section: {exc}") from None
    rows = _parse_topology(sections[1])

    idx = _Reader(sections[2])
    try:
        (count,) = idx.unpack("I", "parameter count")
        declared = []
        for _ in range(count):
            (ln,) = idx.unpack("H", "name length")
            name = idx.take(ln, "name").decode("utf-8")
            (nd,) = idx.unpack("B", "ndim")
            declared.append((name, tuple(idx.unpack(f"{nd}I", "shape"))))
    except (TruncatedCheckpointError, UnicodeDecodeError) as exc:
        raise ShapeTableError(f"malformed parameter index: {exc}") from None

    net = _rebuild(ncfg, rows, declared, meta)

    params = dict(net.parameters())
    for name, shape in declared:
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * n, f"blob {name}"), dtype="<f4").reshape(shape)
        params[name].data = data.astype(np.float32)
    step, n_opt = r.unpack("QI", "optimizer header")
    opt = None
    if "adam" in meta:
        opt = Adam(**meta["adam"])
        opt.state.step = step
    names = [n for n, _ in declared]
    for _ in range(n_opt):
        (i,) = r.unpack("I", "optimizer entry")
        if i >= len(declared):
            raise ShapeTableError(f"optimizer entry refers to parameter {i} of {len(declared)}")
        name, shape = declared[i]
        n = int(np.prod(shape)) if shape else 1
        m = np.frombuffer(r.take(4 * n, f"adam m {name}"), dtype="<f4").reshape(shape)
        v = np.frombuffer(r.take(4 * n, f"adam v {name}"), dtype="<f4").reshape(shape)
        if opt is not None:
            opt.state.m[names[i]] = m.astype(np.float32)
            opt.state.v[names[i]] = v.astype(np.float32)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after checkpoint")
    for key in ("network", "alpha_history", "adam"):
        meta.pop(key, None)
    return CheckpointState(net, opt, meta)


def layer_shapes_differ(expected, declared):
    """Names whose presence or shape differs between two name -> shape maps."""
    got = dict(declared)
    if len(got) != len(declared):
        return ["duplicate parameter names"]
    return sorted(n for n in set(expected) | set(got) if expected.get(n) != got.get(n))


def _rebuild(ncfg, rows, declared, meta):
    """Rebuild the graph from config, then reshape it to the topology table."""
    net = build_network(ncfg, rng=np.random.default_rng(0))
    if len(rows) != len(net.layers):
        raise ShapeTableError(f"topology has {len(rows)} layers, config implies {len(net.layers)}")
    expected = {}
    specs = []
    for (lid, kind, committed, c_in, c_out, kernels), layer in zip(rows, net.layers):
        if lid != layer.id or kind != layer.kind:
            raise ShapeTableError(f"layer {layer.id}: table says {lid}/{kind}, graph has {layer.kind}")
        if kind != "conv-block" and committed != UNDECIDED:
            raise ShapeTableError(f"layer {lid} ({kind}) cannot carry a selection index")
        if kind == "conv-block" and committed != UNDECIDED and committed >= len(layer.module.candidates):
            raise ShapeTableError(f"layer {lid}: selection index {committed} out of range")
        if kind not in CONV_KINDS:
            if kernels:
                raise ShapeTableError(f"layer {lid} ({kind}) cannot own kernels")
            continue
        if not kernels:
            raise ShapeTableError(f"layer {lid} ({kind}) has no kernels")
        names = _kernel_names(layer, committed, len(kernels))
        if len(names) != len(kernels):
            raise ShapeTableError(f"layer {lid}: committed layer lists {len(kernels)} kernels")
        allowed = [(kk.k, kk.dilation) for kk in layer.kernels]
        if kind == "conv-block" and committed != UNDECIDED:
            allowed = [allowed[committed]]
        if [tuple(kd) for kd in kernels] != allowed:
            raise ShapeTableError(f"layer {lid}: kernels {kernels} do not match the configured {allowed}")
        built = layer.kernels[0]
        if not (1 <= c_out <= built.c_out and 1 <= c_in <= built.c_in):
            raise ShapeTableError(f"layer {lid}: {c_in}->{c_out} channels exceed the configured "
                                  f"{built.c_in}->{built.c_out}")
        for nm, (k, dil) in zip(names, kernels):
            if k % 2 == 0 or dil < 1:
                raise ShapeTableError(f"layer {lid}: invalid kernel k={k} dilation={dil}")
            expected[nm + ".w"] = (c_out, c_in, k, k)
            expected[nm + ".b"] = (c_out,)
        if kind == "conv-block" and committed == UNDECIDED:
            expected.update({pn: p.shape for pn, p in layer.module.cen_parameters().items()})
        specs.append((layer, committed, names, kernels, c_in, c_out))
    if layer_shapes_differ(expected, declared):
        raise ShapeTableError(f"parameter index disagrees with topology: {layer_shapes_differ(expected, declared)}")
    for layer, committed, names, kernels, c_in, c_out in specs:
        lid = layer.id
        new = []
        for nm, (k, dil) in zip(names, kernels):
            w = T.parameter(np.zeros((c_out, c_in, k, k), np.float32), nm + ".w")
            b = T.parameter(np.zeros(c_out, np.float32), nm + ".b")
            new.append(ConvKernel(w, b, dil))
        if layer.kind == "conv-block":
            mod = layer.module
            if committed == UNDECIDED:
                if len(new) != len(mod.candidates):
                    raise ShapeTableError(f"layer {lid}: {len(new)} candidates, config implies "
                                          f"{len(mod.candidates)}")
                mod.candidates = new
                hist = meta.get("alpha_history", {}).get(str(lid))
                if hist is not None:
                    mod.alpha_sum = np.asarray(hist[0], dtype=float)
                    mod.alpha_count = int(hist[1])
            else:
                mod.candidates = new
                mod.committed = committed
                mod.cen = None
        else:
            layer.kernel = new[0]
    try:
        net.refresh_channels()
    except Exception as exc:
        raise ShapeTableError(f"inconsistent channel counts: {exc}") from None
    for (lid, kind, committed, c_in, c_out, _), layer in zip(rows, net.layers):
        if (layer.c_in, layer.c_out) != (c_in, c_out):
            raise ShapeTableError(f"layer {lid}: table {c_in}->{c_out}, kernels {layer.c_in}->{layer.c_out}")
    return net


def save_checkpoint(path, state):
    data = serialize_checkpoint(state)
    with open(path, "wb") as f:
        f.write(data)
    return data


def load_checkpoint(path):
    from pathlib import Path
    from .errors import MissingInputError

    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"checkpoint not found: {p}")
    return deserialize_checkpoint(p.read_bytes())
