"""Per-node memory over the event stream and fixed-size batch slicing.

Every node carries a running memory vector summarizing its past events.  An
event's feature row for downstream layers is the concatenation
``[projected message, own memory, partner memory]``; batches of B events
become small graphs (one row per distinct node, adjacency from this batch's
edges only) whose node features are encoded against the memory as of the
batch start, after which the events update memory one by one in stream
order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .eventstream import EventLog
from .spectral_attention import SpectralEncoding

_ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True)
class EncodedEvent:
    """A stream event after spectral projection, in the global id space.

    ``dst`` is None for a node event (no partner); ``idx`` is the event's
    position in the stream.
    """

    src: int
    dst: int
    t: float
    msg: np.ndarray
    state_label: int
    idx: int


@dataclass
class EncodedStream:
    """Array form of the projected event stream (global node ids)."""

    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray
    msg: np.ndarray
    state_label: np.ndarray
    n_nodes: int

    @property
    def n(self) -> int:
        return self.src.shape[0]

    @property
    def d_msg(self) -> int:
        return self.msg.shape[1]

    def event(self, i: int) -> EncodedEvent:
        return EncodedEvent(
            src=int(self.src[i]),
            dst=int(self.dst[i]),
            t=float(self.t[i]),
            msg=self.msg[i].copy(),
            state_label=int(self.state_label[i]),
            idx=i,
        )


def encode_log(log: EventLog, encoding) -> EncodedStream:
    """Pair a log with its projected features, moving dst ids to the global
    space (src ids stay, items are offset by n_src)."""
    if isinstance(encoding, SpectralEncoding):
        msg = encoding.xt
    else:
        msg = np.ascontiguousarray(encoding, dtype=np.float64)
    if msg.shape[0] != log.n:
        raise ValueError(f"{msg.shape[0]} projected rows for {log.n} events")
    return EncodedStream(
        src=log.src.copy(),
        dst=log.dst_global.copy(),
        t=log.t.copy(),
        msg=np.ascontiguousarray(msg, dtype=np.float64),
        state_label=log.state_label.astype(np.int64),
        n_nodes=log.n_nodes,
    )


@dataclass
class MemoryState:
    """Per-node memory with the bookkeeping needed for training.

    Unobserved nodes hold a zero vector and a last_update of -inf.  last_z
    records the most recent input fed to the update function per node (used
    to re-express memory as a function of current parameters during
    training); has_z marks nodes that have been updated at least once.
    """

    mem: np.ndarray
    last_update: np.ndarray
    last_z: np.ndarray
    has_z: np.ndarray

    @classmethod
    def new(cls, n_nodes: int, d_mem: int, d_msg: int) -> "MemoryState":
        return cls(
            mem=np.zeros((n_nodes, d_mem)),
            last_update=np.full(n_nodes, -np.inf),
            last_z=np.zeros((n_nodes, d_mem + d_msg)),
            has_z=np.zeros(n_nodes, dtype=np.uint8),
        )

    @property
    def n_nodes(self) -> int:
        return self.mem.shape[0]

    @property
    def d_mem(self) -> int:
        return self.mem.shape[1]

    def copy(self) -> "MemoryState":
        return MemoryState(
            mem=self.mem.copy(),
            last_update=self.last_update.copy(),
            last_z=self.last_z.copy(),
            has_z=self.has_z.copy(),
        )


@dataclass
class MessageFn:
    """One-hidden-layer MLP mapping concat(memory, message) to new memory.

    Stored in matrix-times-column convention: hidden = act(w1 @ z + b1),
    out = w2 @ hidden + b2.  The hidden activation is tanh by default;
    "identity" makes the map affine (useful for exactness checks).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite parameter {name}")
            setattr(self, name, arr)
        hidden, d_in = self.w1.shape
        d_out, hidden2 = self.w2.shape
        if self.b1.shape != (hidden,) or self.b2.shape != (d_out,) or hidden2 != hidden:
            raise ValueError("message-function parameter shapes do not chain")

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "MessageFn":
        return MessageFn(self.w1.copy(), self.b1.copy(), self.w2.copy(),
                         self.b2.copy(), self.activation)


def init_message_fn(d_msg: int, d_mem: int, hidden: int, seed: int = 0,
                    activation: str = "tanh") -> MessageFn:
    """Glorot-uniform initialization of the memory-update MLP."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d_in = d_mem + d_msg
    lim1 = np.sqrt(6.0 / (d_in + hidden))
    lim2 = np.sqrt(6.0 / (hidden + d_mem))
    return MessageFn(
        w1=rng.uniform(-lim1, lim1, size=(hidden, d_in)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-lim2, lim2, size=(d_mem, hidden)),
        b2=np.zeros(d_mem),
        activation=activation,
    )


def message_forward(f: MessageFn, z: np.ndarray) -> np.ndarray:
    """Apply the update MLP to one z row or a stack of them."""
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    pre = z2 @ f.w1.T + f.b1
    hidden = np.tanh(pre) if f.activation == "tanh" else pre
    out = hidden @ f.w2.T + f.b2
    return out[0] if single else out


def encode_event(e: EncodedEvent, state: MemoryState) -> np.ndarray:
    """Feature row [msg, own memory, partner memory] for an event.

    For a node event (dst is None) the partner slot is zero-padded, so the
    row width is always d_msg + 2*d_mem.
    """
    if e.msg.ndim != 1:
        raise ValueError("event message must be a vector")
    own = state.mem[e.src]
    partner = np.zeros(state.d_mem) if e.dst is None else state.mem[e.dst]
    return np.concatenate([e.msg, own, partner])


def update_memory(state: MemoryState, e: EncodedEvent, f: MessageFn) -> MemoryState:
    """Apply one event's memory update in place (and return the state).

    Both endpoint memories are read before either is written, then each is
    replaced by f(concat(own memory, message)).  A non-finite update is a
    divergence signal and raises.
    """
    if f.d_in != state.d_mem + e.msg.shape[0]:
        raise ValueError(
            f"update function expects width {f.d_in}, "
            f"got memory {state.d_mem} + message {e.msg.shape[0]}"
        )
    if f.d_out != state.d_mem:
        raise ValueError(f"update function emits width {f.d_out}, memory is {state.d_mem}")
    nodes = (e.src,) if e.dst is None else (e.src, e.dst)
    zs = [np.concatenate([state.mem[node], e.msg]) for node in nodes]
    for node, z in zip(nodes, zs):
        new = message_forward(f, z)
        if not np.isfinite(new).all():
            raise ValueError(f"non-finite memory update for node {node}")
        state.mem[node] = new
        state.last_z[node] = z
        state.has_z[node] = 1
        state.last_update[node] = e.t
    return state


def advance_memory(state: MemoryState, stream: EncodedStream,
                   start: int, stop: int, f: MessageFn) -> None:
    """Apply events [start, stop) to the state in stream order."""
    if start >= stop:
        return
    msgs = np.ascontiguousarray(stream.msg[start:stop])
    src = np.ascontiguousarray(stream.src[start:stop])
    dst = np.ascontiguousarray(stream.dst[start:stop])
    if f.activation == "tanh":
        _kernels.memory_replay(msgs, src, dst, state.mem, state.last_z,
                               state.has_z, f.w1, f.b1, f.w2, f.b2)
    else:
        for i in range(start, stop):
            update_memory(state, stream.event(i), f)
        return
    touched = np.unique(np.concatenate([src, dst]))
    if not np.isfinite(state.mem[touched]).all():
        raise ValueError("non-finite memory update (training divergence)")
    t_slice = stream.t[start:stop]
    np.maximum.at(state.last_update, src, t_slice)
    np.maximum.at(state.last_update, dst, t_slice)


@dataclass
class BatchGraph:
    """One memory-window slice of the stream.

    node_ids maps local row index to global node id; adjacency is the
    binary, symmetric, zero-diagonal graph of this batch's edges over local
    ids; h0 stacks [msg, own mem, partner mem] rows, one per distinct node,
    taken at the node's first in-batch event against batch-start memory.
    anchor_event/anchor_is_src record which event (batch-local index) and
    which side produced each node's row.
    """

    node_ids: np.ndarray
    adjacency: sp.csr_matrix
    h0: np.ndarray
    src_local: np.ndarray
    dst_local: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray
    msg: np.ndarray
    state_label: np.ndarray
    anchor_event: np.ndarray
    anchor_is_src: np.ndarray
    start: int
    stop: int

    @property
    def n_local(self) -> int:
        return self.node_ids.shape[0]

    @property
    def n_events(self) -> int:
        return self.src.shape[0]

    @property
    def link_labels(self) -> np.ndarray:
        return np.ones(self.n_events)


def make_batch(stream: EncodedStream, start: int, stop: int,
               state: MemoryState) -> BatchGraph:
    """Assemble the BatchGraph for events [start, stop) against the current
    (batch-start) memory.  Does not mutate the state."""
    if not 0 <= start < stop <= stream.n:
        raise ValueError(f"bad batch bounds [{start}, {stop}) for {stream.n} events")
    src = stream.src[start:stop]
    dst = stream.dst[start:stop]
    msg = stream.msg[start:stop]
    b = stop - start

    local = {}
    anchor_event = []
    anchor_is_src = []
    for j in range(b):
        for node, is_src in ((int(src[j]), True), (int(dst[j]), False)):
            if node not in local:
                local[node] = len(local)
                anchor_event.append(j)
                anchor_is_src.append(is_src)
    node_ids = np.fromiter(local.keys(), dtype=np.int64, count=len(local))
    anchor_event = np.asarray(anchor_event, dtype=np.int64)
    anchor_is_src = np.asarray(anchor_is_src, dtype=bool)
    src_local = np.fromiter((local[int(u)] for u in src), dtype=np.int64, count=b)
    dst_local = np.fromiter((local[int(v)] for v in dst), dtype=np.int64, count=b)

    n_local = node_ids.shape[0]
    partner_local = np.where(anchor_is_src, dst_local[anchor_event],
                             src_local[anchor_event])
    own_global = node_ids
    partner_global = node_ids[partner_local]
    h0 = np.concatenate(
        [msg[anchor_event], state.mem[own_global], state.mem[partner_global]],
        axis=1,
    )

    ones = np.ones(2 * b)
    rows = np.concatenate([src_local, dst_local])
    cols = np.concatenate([dst_local, src_local])
    adjacency = sp.csr_matrix((ones, (rows, cols)), shape=(n_local, n_local))
    adjacency.data[:] = 1.0
    adjacency.setdiag(0)
    adjacency.eliminate_zeros()

    return BatchGraph(
        node_ids=node_ids,
        adjacency=adjacency,
        h0=np.ascontiguousarray(h0),
        src_local=src_local,
        dst_local=dst_local,
        src=src.copy(),
        dst=dst.copy(),
        t=stream.t[start:stop].copy(),
        msg=np.ascontiguousarray(msg),
        state_label=stream.state_label[start:stop].copy(),
        anchor_event=anchor_event,
        anchor_is_src=anchor_is_src,
        start=start,
        stop=stop,
    )


def batch_bounds(n: int, batch_size: int) -> list:
    """[start, stop) bounds for consecutive batches; the last may be short."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    return [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def build_batches(stream: EncodedStream, batch_size: int, state: MemoryState,
                  f: MessageFn) -> list:
    """Slice the stream into BatchGraphs, flowing memory between batches.

    Each batch's rows are encoded against memory as of its start; the
    batch's events then update the state event-by-event before the next
    batch is assembled.  The caller's state is mutated.
    """
    batches = []
    for start, stop in batch_bounds(stream.n, batch_size):
        batches.append(make_batch(stream, start, stop, state))
        advance_memory(state, stream, start, stop, f)
    return batches
