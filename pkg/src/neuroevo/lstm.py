"""Masked-gate LSTM cells, the three network architectures, serialization.

Two cell kinds exist. An M1 cell maps an n-vector to an n-vector and its
four gates each hold an n x n input matrix and an n x n recurrent matrix,
all eight masked by the same binary mesh. An M2 cell reduces an n-vector
to a scalar; its four n x 1 input matrices are masked by the mesh's hidden
flags and its 1 x 1 recurrence is always present.

Every gate, including the cell input g, uses the sigmoid activation:

    q_t = sigmoid(w_q . x_t + u_q . a_{t-1} + bias_q)   for q in g, i, f, o
    c_t = f_t * c_{t-1} + i_t * g_t
    a_t = o_t * sigmoid(c_t)
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    DimensionMismatch,
    TruncatedFile,
    VersionMismatch,
)

GATES = ("g", "i", "f", "o")
ARCHS = ("I", "II", "III")
ARCH_DEFAULT_T = {"I": 10, "II": 10, "III": 20}
ARCH_M1_LEVELS = {"I": 1, "II": 1, "III": 2}
ARCH_HAS_COMBINER = {"I": True, "II": False, "III": True}
DEFAULT_N_INPUTS = 16  # 15 parameter lines + constant bias line

_MAGIC = b"NEAC"
_VERSION = 1
_ARCH_IDS = {"I": 1, "II": 2, "III": 3}
_ARCH_FROM_ID = {v: k for k, v in _ARCH_IDS.items()}


def sigmoid(alpha):
    """Logistic function 1/(1 + e^-alpha); elementwise on arrays."""
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-alpha))


# --- mesh ---

@dataclass(eq=False)
class Mesh:
    """Binary connectivity: input line flags, n x n gate matrix, hidden flags.

    m1[i, j] = 1 keeps the connection from line i to hidden node j in every
    M1 gate matrix; m2[j] = 1 keeps hidden node j's line into the M2 cell.
    An edge implies both endpoint flags.
    """

    input_mask: np.ndarray
    m1: np.ndarray
    m2: np.ndarray

    def __post_init__(self):
        self.input_mask = np.ascontiguousarray(self.input_mask, dtype=np.uint8)
        self.m1 = np.ascontiguousarray(self.m1, dtype=np.uint8)
        self.m2 = np.ascontiguousarray(self.m2, dtype=np.uint8)

    @classmethod
    def full(cls, n: int = DEFAULT_N_INPUTS) -> "Mesh":
        return cls(np.ones(n, np.uint8), np.ones((n, n), np.uint8), np.ones(n, np.uint8))

    @classmethod
    def empty(cls, n: int = DEFAULT_N_INPUTS) -> "Mesh":
        return cls(np.zeros(n, np.uint8), np.zeros((n, n), np.uint8), np.zeros(n, np.uint8))

    @classmethod
    def from_m1(cls, m1) -> "Mesh":
        """Derive endpoint flags from an edge matrix."""
        m1 = np.asarray(m1, dtype=np.uint8)
        return cls(m1.any(axis=1).astype(np.uint8), m1, m1.any(axis=0).astype(np.uint8))

    @property
    def n(self) -> int:
        return self.input_mask.shape[0]

    @property
    def m1_count(self) -> int:
        return int(self.m1.sum())

    @property
    def m2_count(self) -> int:
        return int(self.m2.sum())

    def copy(self) -> "Mesh":
        return Mesh(self.input_mask.copy(), self.m1.copy(), self.m2.copy())

    def validate(self) -> None:
        n = self.n
        if self.m1.shape != (n, n) or self.m2.shape != (n,):
            raise DimensionMismatch(f"mesh shapes {self.input_mask.shape}/{self.m1.shape}/{self.m2.shape}")
        for arr in (self.input_mask, self.m1, self.m2):
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("mesh flags must be binary")
        rows = self.m1.any(axis=1)
        cols = self.m1.any(axis=0)
        if (rows & ~self.input_mask.astype(bool)).any():
            raise ValueError("m1 edge from an unmarked input line")
        if (cols & ~self.m2.astype(bool)).any():
            raise ValueError("m1 edge into an unmarked hidden node")

    def __eq__(self, other):
        return (
            isinstance(other, Mesh)
            and np.array_equal(self.input_mask, other.input_mask)
            and np.array_equal(self.m1, other.m1)
            and np.array_equal(self.m2, other.m2)
        )


def pack_bits(bits) -> bytes:
    """Pack a binary vector LSB-first into bytes, padded to a byte boundary."""
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def unpack_bits(data: bytes, n_bits: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits.size < n_bits:
        raise TruncatedFile(f"bitmap holds {bits.size} bits, need {n_bits}")
    return bits[:n_bits].astype(np.uint8)


def mesh_to_bytes(mesh: Mesh) -> bytes:
    return pack_bits(mesh.input_mask) + pack_bits(mesh.m1.ravel()) + pack_bits(mesh.m2)


def mesh_bytes_len(n: int) -> int:
    return (n + 7) // 8 + (n * n + 7) // 8 + (n + 7) // 8


def mesh_from_bytes(data: bytes, n: int) -> Mesh:
    k = (n + 7) // 8
    kk = (n * n + 7) // 8
    if len(data) < 2 * k + kk:
        raise TruncatedFile(f"mesh payload {len(data)} bytes, need {2 * k + kk}")
    input_mask = unpack_bits(data[:k], n)
    m1 = unpack_bits(data[k:k + kk], n * n).reshape(n, n)
    m2 = unpack_bits(data[k + kk:2 * k + kk], n)
    return Mesh(input_mask, m1, m2)


# --- cells ---

@dataclass
class GateWeights:
    w: np.ndarray     # (in_dim, out_dim)
    u: np.ndarray     # (rec_dim, out_dim)
    bias: np.ndarray  # (out_dim,)


@dataclass
class LstmCell:
    """One per-time-step cell; ``kind`` is "m1" (n -> n) or "m2" (n -> 1)."""

    kind: str
    gates: dict = field(default_factory=dict)

    @property
    def in_dim(self) -> int:
        return self.gates["g"].w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.gates["g"].w.shape[1]


@dataclass
class CellState:
    """Activations retained for backpropagation; ``s`` is sigmoid(c)."""

    a: np.ndarray
    c: np.ndarray
    g: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    s: np.ndarray


def _new_cell(kind: str, n: int, rng) -> LstmCell:
    out_dim = n if kind == "m1" else 1
    rec_dim = n if kind == "m1" else 1
    gates = {}
    for q in GATES:
        gates[q] = GateWeights(
            w=rng.uniform(-0.1, 0.1, (n, out_dim)),
            u=rng.uniform(-0.1, 0.1, (rec_dim, out_dim)),
            bias=rng.uniform(-0.1, 0.1, out_dim),
        )
    return LstmCell(kind=kind, gates=gates)


def effective_weights(cell: LstmCell, gate: str, mesh: Mesh | None):
    """The (w, u) pair actually used: masked entries are exact zeros."""
    gw = cell.gates[gate]
    if mesh is None:
        return gw.w, gw.u
    if cell.kind == "m1":
        keep = mesh.m1.astype(bool)
        return np.where(keep, gw.w, 0.0), np.where(keep, gw.u, 0.0)
    keep = mesh.m2.astype(bool)[:, None]
    return np.where(keep, gw.w, 0.0), gw.u


def cell_forward(cell: LstmCell, x_t, a_prev, c_prev, mesh: Mesh | None = None) -> CellState:
    """One time step. Inputs may be (in_dim,) vectors or (B, in_dim) batches."""
    x_t = np.asarray(x_t, dtype=np.float64)
    a_prev = np.asarray(a_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if x_t.shape[-1] != cell.in_dim:
        raise DimensionMismatch(f"x_t has {x_t.shape[-1]} entries, cell takes {cell.in_dim}")
    if a_prev.shape[-1] != cell.out_dim or c_prev.shape[-1] != cell.out_dim:
        raise DimensionMismatch(f"state width {a_prev.shape[-1]}/{c_prev.shape[-1]}, cell emits {cell.out_dim}")
    if mesh is not None and mesh.n != cell.in_dim:
        raise DimensionMismatch(f"mesh width {mesh.n} vs cell input {cell.in_dim}")
    acts = {}
    for q in GATES:
        w, u = effective_weights(cell, q, mesh)
        acts[q] = sigmoid(x_t @ w + a_prev @ u + cell.gates[q].bias)
    c = acts["f"] * c_prev + acts["i"] * acts["g"]
    s = sigmoid(c)
    a = acts["o"] * s
    return CellState(a=a, c=c, g=acts["g"], i=acts["i"], f=acts["f"], o=acts["o"], s=s)


# --- networks ---

@dataclass
class Network:
    """A stack of per-time-step cell columns plus an optional combiner.

    ``m1_levels[l][t]`` is the M1 cell of level l at step t; ``m2_cells[t]``
    the reducing cell at step t. Arch II has no combiner and averages the T
    scalar outputs; I and III dot them with a (T,) weight vector. Weights are
    not shared across time steps.
    """

    arch: str
    T: int
    horizon: int
    mesh: Mesh
    m1_levels: list
    m2_cells: list
    combiner: np.ndarray | None
    init_seed: int | None = None

    @property
    def n_inputs(self) -> int:
        return self.mesh.n


def build_network(arch: str, mesh: Mesh, horizon: int, seed: int, T: int | None = None) -> Network:
    """Initialize a network, weights uniform in [-0.1, 0.1] from the seed.

    The draw order is fixed and independent of the mesh, so two builds with
    the same seed differ only in which entries are masked.
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    T = ARCH_DEFAULT_T[arch] if T is None else T
    n = mesh.n
    rng = np.random.default_rng(seed)
    m1_levels = [[_new_cell("m1", n, rng) for _ in range(T)] for _ in range(ARCH_M1_LEVELS[arch])]
    m2_cells = [_new_cell("m2", n, rng) for _ in range(T)]
    combiner = rng.uniform(-0.1, 0.1, T) if ARCH_HAS_COMBINER[arch] else None
    net = Network(
        arch=arch, T=T, horizon=horizon, mesh=mesh,
        m1_levels=m1_levels, m2_cells=m2_cells, combiner=combiner, init_seed=seed,
    )
    _apply_mask(net)
    return net


def _apply_mask(net: Network) -> None:
    """Zero the stored values of masked entries; forward masks at use anyway."""
    keep_m1 = net.mesh.m1.astype(bool)
    keep_m2 = net.mesh.m2.astype(bool)[:, None]
    for level in net.m1_levels:
        for cell in level:
            for q in GATES:
                cell.gates[q].w *= keep_m1
                cell.gates[q].u *= keep_m1
    for cell in net.m2_cells:
        for q in GATES:
            cell.gates[q].w *= keep_m2


def forward_batch(net: Network, X, want_caches: bool = False):
    """Predictions for a batch of windows X with shape (B, T, n_inputs).

    With ``want_caches`` the per-step states needed for backpropagation are
    returned alongside: level inputs, per-level state lists, and the (B, T)
    matrix of M2 outputs.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] != net.T or X.shape[2] != net.n_inputs:
        raise DimensionMismatch(f"window batch {X.shape}, need (B, {net.T}, {net.n_inputs})")
    B = X.shape[0]
    n = net.n_inputs
    level_inputs = [X]
    m1_states = []
    for level in net.m1_levels:
        inp = level_inputs[-1]
        a = np.zeros((B, n))
        c = np.zeros((B, n))
        states = []
        for t in range(net.T):
            st = cell_forward(level[t], inp[:, t, :], a, c, net.mesh)
            a, c = st.a, st.c
            states.append(st)
        m1_states.append(states)
        level_inputs.append(np.stack([st.a for st in states], axis=1))
    inp = level_inputs[-1]
    a = np.zeros((B, 1))
    c = np.zeros((B, 1))
    m2_states = []
    for t in range(net.T):
        st = cell_forward(net.m2_cells[t], inp[:, t, :], a, c, net.mesh)
        a, c = st.a, st.c
        m2_states.append(st)
    m2_outs = np.concatenate([st.a for st in m2_states], axis=1)  # (B, T)
    if net.combiner is not None:
        preds = m2_outs @ net.combiner
    else:
        preds = m2_outs.mean(axis=1)
    if not want_caches:
        return preds
    return preds, {"level_inputs": level_inputs, "m1_states": m1_states,
                   "m2_states": m2_states, "m2_outs": m2_outs}


def network_forward(net: Network, X) -> float:
    """Scalar prediction for one (T, n_inputs) window."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"window shape {X.shape}, need ({net.T}, {net.n_inputs})")
    return float(forward_batch(net, X[None])[0])


def count_weights(arch: str, mesh: Mesh, T: int | None = None) -> int:
    """Unmasked connection count, per-time-step weights, biases excluded.

    Per step, each M1 level keeps 8 * m1_count entries (four input and four
    recurrent matrices under the same mask), the M2 cell 4 * m2_count + 4
    (four masked input columns plus the four scalar recurrences), and the
    combiner contributes one weight per step when present. With a full
    16-line mesh this gives 21,170 (I), 21,160 (II), 83,300 (III).
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    T = ARCH_DEFAULT_T[arch] if T is None else T
    per_step = ARCH_M1_LEVELS[arch] * 8 * mesh.m1_count + 4 * mesh.m2_count + 4
    total = T * per_step
    if ARCH_HAS_COMBINER[arch]:
        total += T
    return total


# --- serialization ---

def _iter_weight_arrays(net: Network):
    """Fixed layer order: M1 levels (t, then gate g/i/f/o, then w/u/bias),
    M2 cells likewise, combiner last."""
    for level in net.m1_levels:
        for cell in level:
            for q in GATES:
                gw = cell.gates[q]
                yield gw.w
                yield gw.u
                yield gw.bias
    for cell in net.m2_cells:
        for q in GATES:
            gw = cell.gates[q]
            yield gw.w
            yield gw.u
            yield gw.bias
    if net.combiner is not None:
        yield net.combiner


def _header(arch: str, T: int, H: int, n: int) -> bytes:
    return _MAGIC + struct.pack("<HBHHH", _VERSION, _ARCH_IDS[arch], T, H, n)


_HEADER_LEN = 4 + 2 + 1 + 2 + 2 + 2


def _parse_header(data: bytes):
    if len(data) < _HEADER_LEN + 4:
        raise TruncatedFile(f"{len(data)} bytes is too short for a header")
    if data[:4] != _MAGIC:
        raise BadMagic(f"expected {_MAGIC!r}, found {data[:4]!r}")
    version, arch_id, T, H, n = struct.unpack("<HBHHH", data[4:_HEADER_LEN])
    if version != _VERSION:
        raise VersionMismatch(f"format version {version}, supported {_VERSION}")
    if arch_id not in _ARCH_FROM_ID:
        raise VersionMismatch(f"unknown architecture id {arch_id}")
    return _ARCH_FROM_ID[arch_id], T, H, n


def _check_crc(data: bytes) -> bytes:
    body, stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != stored:
        raise ChecksumMismatch("stored CRC-32 does not match body")
    return body


def _n_model_floats(arch: str, T: int, n: int) -> int:
    per_m1_cell = 4 * (2 * n * n + n)
    per_m2_cell = 4 * (n + 2)
    total = ARCH_M1_LEVELS[arch] * T * per_m1_cell + T * per_m2_cell
    if ARCH_HAS_COMBINER[arch]:
        total += T
    return total


def serialize_network(net: Network) -> bytes:
    parts = [_header(net.arch, net.T, net.horizon, net.n_inputs), mesh_to_bytes(net.mesh)]
    for arr in _iter_weight_arrays(net):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize_network(data: bytes) -> Network:
    arch, T, H, n = _parse_header(data)
    off = _HEADER_LEN + mesh_bytes_len(n)
    need = off + 8 * _n_model_floats(arch, T, n) + 4
    if len(data) != need:
        raise TruncatedFile(f"model file is {len(data)} bytes, header declares {need}")
    body = _check_crc(data)
    mesh = mesh_from_bytes(body[_HEADER_LEN:], n)
    skeleton = build_network(arch, Mesh.full(n), H, seed=0, T=T)
    skeleton.mesh = mesh
    skeleton.init_seed = None
    flat = np.frombuffer(body[off:], dtype="<f8")
    pos = 0
    for arr in _iter_weight_arrays(skeleton):
        arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return skeleton


def serialize_mesh(mesh: Mesh, arch: str, T: int, H: int) -> bytes:
    body = _header(arch, T, H, mesh.n) + mesh_to_bytes(mesh)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize_mesh(data: bytes):
    arch, T, H, n = _parse_header(data)
    body = _check_crc(data)
    if len(body) != _HEADER_LEN + mesh_bytes_len(n):
        raise TruncatedFile("mesh file has unexpected trailing data")
    mesh = mesh_from_bytes(body[_HEADER_LEN:], n)
    return mesh, arch, T, H
