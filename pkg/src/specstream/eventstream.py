"""Parsing, validation, and chronological partitioning of temporal
interaction logs.

The wire format is the bipartite interaction CSV used by the public JODIE
datasets: a header line, then rows ``user_id,item_id,timestamp,state_label,
f_1,...,f_d`` (UTF-8, LF or CRLF).  Users and items live in disjoint id
spaces; after parsing, ids are densely remapped per side and an item's
global id is ``n_src + item_id`` so the whole bipartite graph shares one id
space.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# Seed-derivation domain for sampling unseen nodes in inductive splits (see
# README "Randomness" for the full fan-out table).
_UNSEEN_DOMAIN = 6


class ParseError(ValueError):
    """CSV contract violation, carrying the 1-based file row number."""

    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"{message} at row {row}")


@dataclass(frozen=True)
class Event:
    """One timestamped interaction with edge features."""

    src: int
    dst: int
    t: float
    features: np.ndarray
    state_label: int


@dataclass
class EventLog:
    """A chronologically ordered interaction stream in array form.

    src/dst are side-local dense ids; ``dst_global`` offsets items by n_src.
    Events are sorted by timestamp with ties keeping file order.
    """

    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray
    features: np.ndarray
    state_label: np.ndarray
    n_src: int
    n_dst: int
    unseen_nodes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.src = np.ascontiguousarray(self.src, dtype=np.int64)
        self.dst = np.ascontiguousarray(self.dst, dtype=np.int64)
        self.t = np.ascontiguousarray(self.t, dtype=np.float64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.state_label = np.ascontiguousarray(self.state_label, dtype=np.int8)
        validate_log(self)

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def n(self) -> int:
        return self.src.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.n_src + self.n_dst

    @property
    def dst_global(self) -> np.ndarray:
        return self.dst + self.n_src

    def event(self, i: int) -> Event:
        return Event(
            src=int(self.src[i]),
            dst=int(self.dst[i]),
            t=float(self.t[i]),
            features=self.features[i].copy(),
            state_label=int(self.state_label[i]),
        )

    @property
    def events(self) -> list:
        return [self.event(i) for i in range(self.n)]


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split fractions plus the inductive-evaluation knobs.

    When ``inductive`` is set, ``unseen_frac`` of all nodes (drawn from those
    appearing in the validation/test portions, seeded by ``seed``) are
    flagged unseen and every training event touching them is dropped.
    """

    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    inductive: bool = False
    unseen_frac: float = 0.10
    seed: int = 0

    def __post_init__(self):
        for name in ("train_frac", "val_frac", "test_frac"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {total}")
        if not 0.0 <= self.unseen_frac < 1.0:
            raise ValueError(f"unseen_frac must lie in [0, 1), got {self.unseen_frac}")


def validate_log(log: EventLog) -> None:
    n = log.src.shape[0]
    if n < 1:
        raise ValueError("an event log must contain at least one event")
    shapes = (log.dst.shape[0], log.t.shape[0], log.features.shape[0],
              log.state_label.shape[0])
    if any(s != n for s in shapes):
        raise ValueError(f"field lengths disagree: {(n,) + shapes}")
    if log.features.ndim != 2:
        raise ValueError("features must be a 2-D array")
    if np.any(np.diff(log.t) < 0):
        raise ValueError("events must be non-decreasing in t")
    if np.any(log.t < 0):
        raise ValueError("timestamps must be non-negative")
    if log.src.size and (log.src.min() < 0 or log.src.max() >= log.n_src):
        raise ValueError(f"src ids must lie in [0, {log.n_src})")
    if log.dst.size and (log.dst.min() < 0 or log.dst.max() >= log.n_dst):
        raise ValueError(f"dst ids must lie in [0, {log.n_dst})")
    if not np.isin(log.state_label, (0, 1)).all():
        raise ValueError("state labels must be 0 or 1")
    if not np.isfinite(log.features).all():
        raise ValueError("features must be finite")


def _dense_remap(ids: np.ndarray) -> tuple:
    """Remap arbitrary integer ids to 0..k-1 by order of first appearance."""
    seen = {}
    out = np.empty(ids.shape[0], dtype=np.int64)
    for i, raw in enumerate(ids):
        key = int(raw)
        if key not in seen:
            seen[key] = len(seen)
        out[i] = seen[key]
    return out, len(seen)


def parse_jodie_csv(path) -> EventLog:
    """Parse an interaction CSV into an EventLog.

    Ids are densely remapped per side by first appearance in timestamp
    order; rows are stably sorted by timestamp.  Contract violations raise
    ParseError with the offending 1-based file row number (the header is
    row 1).
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            raw_lines = fh.read().split("\n")
    except OSError as exc:
        raise ParseError(0, f"cannot read {path}: {exc.strerror}") from exc
    lines = [ln.rstrip("\r") for ln in raw_lines]
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(0, f"empty file {path}")
    if len(lines) < 2:
        raise ParseError(1, "no data rows after the header")

    src, dst, ts, labels, feats = [], [], [], [], []
    d = None
    for row_no, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) < 4:
            raise ParseError(row_no, f"expected at least 4 fields, got {len(fields)}")
        row_d = len(fields) - 4
        if d is None:
            d = row_d
        elif row_d != d:
            raise ParseError(row_no, "inconsistent feature dimension")
        try:
            u = int(fields[0])
            v = int(fields[1])
            t = float(fields[2])
            lab = float(fields[3])
            f = [float(x) for x in fields[4:]]
        except ValueError as exc:
            raise ParseError(row_no, f"non-numeric field ({exc})") from exc
        if t < 0:
            raise ParseError(row_no, f"negative timestamp {t}")
        if lab not in (0.0, 1.0):
            raise ParseError(row_no, f"state label must be 0 or 1, got {fields[3]}")
        src.append(u)
        dst.append(v)
        ts.append(t)
        labels.append(int(lab))
        feats.append(f)

    t_arr = np.asarray(ts, dtype=np.float64)
    order = np.argsort(t_arr, kind="stable")
    src_sorted = np.asarray(src, dtype=np.int64)[order]
    dst_sorted = np.asarray(dst, dtype=np.int64)[order]
    src_mapped, n_src = _dense_remap(src_sorted)
    dst_mapped, n_dst = _dense_remap(dst_sorted)
    if d == 0:
        features = np.zeros((len(ts), 0))
    else:
        features = np.asarray(feats, dtype=np.float64)[order]
    return EventLog(
        src=src_mapped,
        dst=dst_mapped,
        t=t_arr[order],
        features=features,
        state_label=np.asarray(labels, dtype=np.int8)[order],
        n_src=n_src,
        n_dst=n_dst,
    )


def to_csv(log: EventLog, path) -> None:
    """Serialize an EventLog back to the interaction CSV format.

    Reals are written with 17 significant digits so a parse round trip is
    bit-exact.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = ["user_id", "item_id", "timestamp", "state_label"]
        header += [f"f_{j + 1}" for j in range(log.d)]
        fh.write(",".join(header) + "\n")
        for i in range(log.n):
            row = [str(int(log.src[i])), str(int(log.dst[i])),
                   f"{log.t[i]:.17g}", str(int(log.state_label[i]))]
            row += [f"{x:.17g}" for x in log.features[i]]
            fh.write(",".join(row) + "\n")


def _take(log: EventLog, index) -> EventLog:
    return EventLog(
        src=log.src[index].copy(),
        dst=log.dst[index].copy(),
        t=log.t[index].copy(),
        features=log.features[index].copy(),
        state_label=log.state_label[index].copy(),
        n_src=log.n_src,
        n_dst=log.n_dst,
        unseen_nodes=log.unseen_nodes,
    )


def chronological_split(log: EventLog, spec: SplitSpec) -> tuple:
    """Partition a log into train/val/test by event index.

    Sizes are floor(N * train_frac) and floor(N * val_frac), with the
    remainder going to test.  In inductive mode a seeded sample of nodes
    appearing in val/test is flagged unseen on every returned log and
    training events touching those nodes are removed.
    """
    n = log.n
    n_train = int(n * spec.train_frac)
    n_val = int(n * spec.val_frac)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(
            f"split of {n} events into {n_train}/{n_val}/{n_test} leaves an empty part"
        )
    train = _take(log, slice(0, n_train))
    val = _take(log, slice(n_train, n_train + n_val))
    test = _take(log, slice(n_train + n_val, n))
    if not spec.inductive:
        return train, val, test

    later_nodes = np.union1d(
        np.union1d(val.src, val.dst_global),
        np.union1d(test.src, test.dst_global),
    )
    k = min(int(round(spec.unseen_frac * log.n_nodes)), later_nodes.shape[0])
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(_UNSEEN_DOMAIN,))
    ))
    unseen = frozenset(
        int(x) for x in rng.choice(later_nodes, size=k, replace=False)
    ) if k > 0 else frozenset()
    keep = np.array(
        [int(s) not in unseen and int(g) not in unseen
         for s, g in zip(train.src, train.dst_global)],
        dtype=bool,
    )
    if not keep.any():
        raise ValueError("inductive masking removed every training event")
    train = _take(train, keep)
    train = replace(train, unseen_nodes=unseen)
    val = replace(val, unseen_nodes=unseen)
    test = replace(test, unseen_nodes=unseen)
    return train, val, test
