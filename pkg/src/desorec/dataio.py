"""Interaction-log ingestion, filtering, windowing, and leave-one-out splits.

External ids are remapped to dense internal ids on load (first-appearance
order) and re-densified after filtering; the maps are kept for reporting.
Within a user, events are ordered by timestamp with ties broken by input
order, so every downstream structure is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, ParseError

MAX_HISTORY = 20
MIN_COUNT = 5

_DELIMS = {"tsv": "\t", "csv": ","}


@dataclass
class InteractionLog:
    """Filtered or raw event stream with dense ids.

    Events are stored column-wise; per user they appear in timeline order.
    ``user_ids``/``item_ids`` map internal id -> original external id.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_count: int
    item_count: int
    user_ids: list[int] = field(default_factory=list)
    item_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class Sample:
    sample_id: int
    user_id: int
    history: np.ndarray
    y: int


@dataclass
class SplitSet:
    train: list[Sample]
    valid: list[Sample]
    test: list[Sample]

    def all_samples(self) -> list[Sample]:
        return self.train + self.valid + self.test


def _sort_events(users, items, timestamps):
    """Stable order: by user, then timestamp, then original position."""
    order = np.lexsort((np.arange(len(users)), timestamps, users))
    return users[order], items[order], timestamps[order]


def load_interactions(path, format: str = "tsv",
                      columns: tuple[int, int, int] = (0, 1, 2)) -> InteractionLog:
    """Parse one event per line; extra columns are ignored via ``columns``
    (indices of the user, item, and timestamp fields)."""
    if format not in _DELIMS:
        raise ValueError(f"unknown format {format!r}")
    delim = _DELIMS[format]
    ucol, icol, tcol = columns
    need = max(columns) + 1

    raw_users, raw_items, raw_ts = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(delim)
            if len(fields) < need:
                raise ParseError(
                    f"expected at least {need} fields, got {len(fields)}", lineno)
            try:
                raw_users.append(int(fields[ucol]))
                raw_items.append(int(fields[icol]))
                raw_ts.append(int(fields[tcol]))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    if not raw_users:
        raise EmptyDatasetError(f"no events in {path}")

    user_map: dict[int, int] = {}
    item_map: dict[int, int] = {}
    users = np.array([user_map.setdefault(u, len(user_map)) for u in raw_users],
                     dtype=np.int64)
    items = np.array([item_map.setdefault(i, len(item_map)) for i in raw_items],
                     dtype=np.int64)
    ts = np.array(raw_ts, dtype=np.int64)
    users, items, ts = _sort_events(users, items, ts)
    return InteractionLog(
        users=users, items=items, timestamps=ts,
        user_count=len(user_map), item_count=len(item_map),
        user_ids=list(user_map), item_ids=list(item_map),
    )


def filter_min_count(log: InteractionLog, min_count: int = MIN_COUNT) -> InteractionLog:
    """Iteratively drop users and items with fewer than min_count events
    until a fixed point, then re-densify ids."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    keep = np.ones(len(log), dtype=bool)
    while True:
        user_counts = np.bincount(log.users[keep], minlength=log.user_count)
        item_counts = np.bincount(log.items[keep], minlength=log.item_count)
        bad = keep & (
            (user_counts[log.users] < min_count) | (item_counts[log.items] < min_count)
        )
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise EmptyDatasetError("filtering removed every event")

    users, items, ts = log.users[keep], log.items[keep], log.timestamps[keep]
    old_users = np.unique(users)
    old_items = np.unique(items)
    user_remap = np.full(log.user_count, -1, dtype=np.int64)
    user_remap[old_users] = np.arange(len(old_users))
    item_remap = np.full(log.item_count, -1, dtype=np.int64)
    item_remap[old_items] = np.arange(len(old_items))
    return InteractionLog(
        users=user_remap[users], items=item_remap[items], timestamps=ts,
        user_count=len(old_users), item_count=len(old_items),
        user_ids=[log.user_ids[u] for u in old_users] if log.user_ids else [],
        item_ids=[log.item_ids[i] for i in old_items] if log.item_ids else [],
    )


def build_samples(log: InteractionLog, max_len: int = MAX_HISTORY) -> list[Sample]:
    """Next-item samples per user: target i_t with the up-to-max_len items
    before it as history, for every t >= 2."""
    samples: list[Sample] = []
    boundaries = np.flatnonzero(np.diff(log.users)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(log)]))
    for start, end in zip(starts, ends):
        timeline = log.items[start:end]
        user = int(log.users[start])
        if len(timeline) < 2:
            continue
        for t in range(1, len(timeline)):
            history = timeline[max(0, t - max_len):t].copy()
            samples.append(Sample(sample_id=len(samples), user_id=user,
                                  history=history, y=int(timeline[t])))
    return samples


def split_leave_one_out(samples: list[Sample]) -> SplitSet:
    """Last sample per user -> test, second-to-last -> valid, rest -> train."""
    by_user: dict[int, list[Sample]] = {}
    for s in samples:
        by_user.setdefault(s.user_id, []).append(s)
    train, valid, test = [], [], []
    for user in sorted(by_user):
        rows = by_user[user]
        test.append(rows[-1])
        if len(rows) >= 2:
            valid.append(rows[-2])
        train.extend(rows[:-2])
    return SplitSet(train=train, valid=valid, test=test)


def synth_generate(n_users: int, n_items: int, n_clusters: int,
                   events_per_user: int, noise: float, seed: int) -> InteractionLog:
    """Planted-cluster log: users are assigned round-robin to clusters and
    draw items from their cluster's contiguous item block, except with
    probability ``noise`` where the item is uniform over the catalog."""
    if n_users < 1 or n_items < 1 or n_clusters < 1:
        raise ValueError("sizes must be positive")
    if n_items % n_clusters != 0:
        raise ValueError("n_clusters must divide n_items evenly")
    if events_per_user < 5:
        raise ValueError("events_per_user must be >= 5")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must be a probability")

    rng = np.random.default_rng(seed)
    block = n_items // n_clusters
    users = np.repeat(np.arange(n_users, dtype=np.int64), events_per_user)
    ts = np.tile(np.arange(events_per_user, dtype=np.int64), n_users)

    cluster = users % n_clusters
    in_block = rng.integers(0, block, size=len(users)) + cluster * block
    anywhere = rng.integers(0, n_items, size=len(users))
    use_noise = rng.random(len(users)) < noise
    items = np.where(use_noise, anywhere, in_block).astype(np.int64)

    return InteractionLog(
        users=users, items=items, timestamps=ts,
        user_count=n_users, item_count=n_items,
        user_ids=list(range(n_users)), item_ids=list(range(n_items)),
    )


def write_events(log: InteractionLog, path, format: str = "tsv",
                 with_rating: bool = False) -> None:
    """Dump a log back to one-event-per-line text (external ids)."""
    delim = _DELIMS[format]
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, t in zip(log.users, log.items, log.timestamps):
            ext_u = log.user_ids[u] if log.user_ids else int(u)
            ext_i = log.item_ids[i] if log.item_ids else int(i)
            fields = [str(ext_u), str(ext_i)]
            if with_rating:
                fields.append("1")
            fields.append(str(int(t)))
            fh.write(delim.join(fields) + "\n")


SPLIT_FILES = {"train": "train.tsv", "valid": "valid.tsv", "test": "test.tsv"}
IDMAP_FILE = "idmap.tsv"


def save_splits(splits: SplitSet, log: InteractionLog, out_dir) -> list[str]:
    """Persist splits as ``sample_id \\t user_id \\t y \\t h1,h2,...`` plus an
    id-map sidecar carrying the dense-id tables and counts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, fname in SPLIT_FILES.items():
        with open(out / fname, "w", encoding="utf-8") as fh:
            for s in getattr(splits, name):
                hist = ",".join(str(int(h)) for h in s.history)
                fh.write(f"{s.sample_id}\t{s.user_id}\t{s.y}\t{hist}\n")
        written.append(fname)
    with open(out / IDMAP_FILE, "w", encoding="utf-8") as fh:
        fh.write(f"counts\t{log.user_count}\t{log.item_count}\n")
        for internal, external in enumerate(log.user_ids):
            fh.write(f"user\t{internal}\t{external}\n")
        for internal, external in enumerate(log.item_ids):
            fh.write(f"item\t{internal}\t{external}\n")
    written.append(IDMAP_FILE)
    return written


def load_splits(data_dir) -> tuple[SplitSet, int, int]:
    """Read back splits; returns (splits, user_count, item_count)."""
    data = Path(data_dir)
    idmap = data / IDMAP_FILE
    if not idmap.exists():
        raise FileNotFoundError(f"missing {idmap}")
    with open(idmap, "r", encoding="utf-8") as fh:
        first = fh.readline().strip().split("\t")
    if len(first) != 3 or first[0] != "counts":
        raise ParseError(f"bad id-map header in {idmap}", 1)
    user_count, item_count = int(first[1]), int(first[2])

    def read(fname):
        out = []
        with open(data / fname, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                fields = line.split("\t")
                if len(fields) != 4:
                    raise ParseError(f"expected 4 fields in {fname}", lineno)
                history = np.array(
                    [int(h) for h in fields[3].split(",") if h], dtype=np.int64)
                out.append(Sample(sample_id=int(fields[0]), user_id=int(fields[1]),
                                  history=history, y=int(fields[2])))
        return out

    splits = SplitSet(train=read(SPLIT_FILES["train"]),
                      valid=read(SPLIT_FILES["valid"]),
                      test=read(SPLIT_FILES["test"]))
    return splits, user_count, item_count
