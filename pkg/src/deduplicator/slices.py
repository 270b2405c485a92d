"""Partition of the hash-value space into server-owned slices.

A :class:`SliceTable` is an immutable snapshot. Every mutating operation
returns a new table with ``epoch + 1`` and, where cached results have to
follow the ownership change, a list of :class:`MigrationDirective`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from deduplicator import kernels
from deduplicator.errors import ConfigurationError, InputError, InvalidAdjustment

ServerId = str


@dataclass(frozen=True)
class Slice:
    lo: int
    hi: int  # inclusive
    server: ServerId

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "server": self.server}


@dataclass(frozen=True)
class MigrationDirective:
    lo: int
    hi: int
    source: ServerId
    target: ServerId

    @property
    def range(self) -> tuple[int, int]:
        return self.lo, self.hi

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "from": self.source, "to": self.target}


@dataclass(frozen=True)
class LoadSample:
    """Load observed for one server over one redistribution window.

    ``per_range`` maps a range-group id to ``(tasks, cpu, mem)``.
    """

    server: ServerId
    tasks: int
    per_range: Mapping[int, tuple[int, float, float]] = field(default_factory=dict)
    group_count: int = 64


@dataclass(frozen=True)
class SliceTable:
    bits: int
    slices: tuple[Slice, ...]
    servers: tuple[ServerId, ...]  # registration order; adaptive layout follows it
    epoch: int = 0
    _starts: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        starts = np.fromiter((s.lo for s in self.slices), dtype=np.uint64, count=len(self.slices))
        object.__setattr__(self, "_starts", starts)

    @property
    def space(self) -> int:
        return 1 << self.bits

    def lookup(self, bucket: int) -> ServerId:
        if not 0 <= bucket < (1 << self.bits):
            raise InputError(f"bucket {bucket} outside [0, 2^{self.bits})")
        if not self.slices:
            raise InputError("slice table is empty")
        return self.slices[kernels.find_slice(self._starts, bucket)].server

    def slice_index(self, bucket: int) -> int:
        if not 0 <= bucket < (1 << self.bits):
            raise InputError(f"bucket {bucket} outside [0, 2^{self.bits})")
        return kernels.find_slice(self._starts, bucket)

    def slices_of(self, server: ServerId) -> list[int]:
        return [i for i, s in enumerate(self.slices) if s.server == server]

    def owned(self, server: ServerId) -> int:
        return sum(s.size for s in self.slices if s.server == server)

    def validate(self) -> None:
        """Raise :class:`InvalidAdjustment` unless the slices tile ``[0, 2^b)`` exactly."""
        if not self.slices:
            if self.servers:
                raise InvalidAdjustment("servers registered but no slices")
            return
        expected = 0
        for s in self.slices:
            if s.lo != expected:
                raise InvalidAdjustment(f"gap or overlap at {expected}: slice starts at {s.lo}")
            if s.hi < s.lo:
                raise InvalidAdjustment(f"empty slice {s}")
            if s.server not in self.servers:
                raise InvalidAdjustment(f"slice {s} refers to unknown server")
            expected = s.hi + 1
        if expected != self.space:
            raise InvalidAdjustment(f"slices end at {expected - 1}, space ends at {self.space - 1}")

    def ownership(self) -> np.ndarray:
        """Owner index (into ``servers``) of every bucket. Only sensible for small ``bits``."""
        index = {s: i for i, s in enumerate(self.servers)}
        out = np.empty(self.space, dtype=np.int64)
        for s in self.slices:
            out[s.lo : s.hi + 1] = index[s.server]
        return out

    def to_json(self) -> dict:
        return {
            "bits": self.bits,
            "epoch": self.epoch,
            "servers": list(self.servers),
            "slices": [s.to_dict() for s in self.slices],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "SliceTable":
        slices = tuple(Slice(int(d["lo"]), int(d["hi"]), str(d["server"])) for d in doc["slices"])
        servers = doc.get("servers")
        if servers is None:
            servers = list(dict.fromkeys(s.server for s in slices))
        table = cls(int(doc["bits"]), slices, tuple(servers), int(doc.get("epoch", 0)))
        table.validate()
        return table

    def _next(self, slices: Iterable[Slice], servers: Sequence[ServerId] | None = None) -> "SliceTable":
        table = SliceTable(
            self.bits,
            tuple(slices),
            tuple(self.servers if servers is None else servers),
            self.epoch + 1,
        )
        table.validate()
        return table


def _check_bits(bits: int) -> None:
    if not isinstance(bits, int) or not 1 <= bits <= 32:
        raise ConfigurationError(f"bits must be in [1, 32], got {bits!r}")


def _layout(sizes: Sequence[int], servers: Sequence[ServerId], start: int = 0) -> list[Slice]:
    out = []
    lo = start
    for size, server in zip(sizes, servers):
        if size > 0:
            out.append(Slice(lo, lo + size - 1, server))
            lo += size
    return out


def equal_sizes(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + 1 if i < extra else base for i in range(n)]


def initial_equal(servers: Sequence[ServerId], bits: int) -> SliceTable:
    """Split ``[0, 2^b)`` into ``n`` contiguous slices; the first ``2^b mod n`` get one extra bucket."""
    _check_bits(bits)
    servers = list(servers)
    if len(set(servers)) != len(servers):
        raise ConfigurationError("duplicate server ids")
    n = len(servers)
    if n == 0:
        return SliceTable(bits, (), ())
    if n > (1 << bits):
        raise ConfigurationError(f"{n} servers cannot share a {bits}-bit space")
    table = SliceTable(bits, tuple(_layout(equal_sizes(1 << bits, n), servers)), tuple(servers))
    table.validate()
    return table


def ownership_diff(old: SliceTable, new: SliceTable) -> list[MigrationDirective]:
    """Directives covering exactly the buckets whose owner changed."""
    if old.bits != new.bits:
        raise InputError("tables use different hash lengths")
    if not old.slices or not new.slices:
        return []
    out: list[MigrationDirective] = []
    i = j = 0
    lo = 0
    space = old.space
    while lo < space:
        a, b = old.slices[i], new.slices[j]
        hi = min(a.hi, b.hi)
        if a.server != b.server:
            last = out[-1] if out else None
            if last and last.hi + 1 == lo and last.source == a.server and last.target == b.server:
                out[-1] = MigrationDirective(last.lo, hi, a.server, b.server)
            else:
                out.append(MigrationDirective(lo, hi, a.server, b.server))
        lo = hi + 1
        if a.hi < lo:
            i += 1
        if b.hi < lo:
            j += 1
    return out


def raw_adaptive_sizes(
    tasks: Sequence[float], bits: int, current: Sequence[float] | None = None
) -> list[float]:
    """Unclamped real-valued slice sizes from per-server task counts.

    Each server's base size (the equal share unless ``current`` is given) is
    shifted by the space-scaled gap between the mean share and its load share.
    """
    n = len(tasks)
    total = float(sum(tasks))
    space = float(1 << bits)
    base = [space / n] * n if current is None else [float(c) for c in current]
    if len(base) != n:
        raise InputError("current sizes and task counts differ in length")
    return [b + space * (1.0 / n - t / total) for b, t in zip(base, tasks)]


def _clamp_to_budget(raw: Sequence[float], budget: int, floor_size: int) -> list[float]:
    # fix sub-minimum entries at floor_size, rescale the rest into what remains
    sizes = list(raw)
    pinned = [False] * len(sizes)
    while True:
        changed = False
        free = [i for i in range(len(sizes)) if not pinned[i]]
        remaining = budget - floor_size * (len(sizes) - len(free))
        weight = sum(max(raw[i], 0.0) for i in free)
        for i in free:
            sizes[i] = remaining * max(raw[i], 0.0) / weight if weight > 0 else remaining / len(free)
        for i in free:
            if sizes[i] < floor_size:
                pinned[i] = True
                sizes[i] = float(floor_size)
                changed = True
        if not changed:
            return sizes


def _largest_remainder(sizes: Sequence[float], total: int) -> list[int]:
    floors = [math.floor(s) for s in sizes]
    short = total - sum(floors)
    order = sorted(range(len(sizes)), key=lambda i: (-(sizes[i] - floors[i]), i))
    for i in order[:short]:
        floors[i] += 1
    return floors


def adaptive_sizes(
    tasks: Sequence[int], bits: int, min_slice: int = 1, current: Sequence[int] | None = None
) -> list[int]:
    """Integer slice sizes summing to ``2^b``, each at least ``min_slice``."""
    n = len(tasks)
    space = 1 << bits
    if n * min_slice > space:
        raise ConfigurationError(f"{n} slices of at least {min_slice} do not fit in 2^{bits}")
    raw = raw_adaptive_sizes(tasks, bits, current)
    return _largest_remainder(_clamp_to_budget(raw, space, min_slice), space)


def _samples_by_server(table: SliceTable, samples: Iterable[LoadSample]) -> dict[ServerId, LoadSample]:
    return {s.server: s for s in samples if s.server in table.servers}


def adaptive_redistribute(
    table: SliceTable, samples: Sequence[LoadSample], min_slice: int = 1, incremental: bool = True
) -> tuple[SliceTable, list[MigrationDirective]]:
    """Resize every server's share in proportion to how far its load sits below the mean.

    With ``incremental`` the correction is applied to each server's current
    total ownership; otherwise it is applied to the equal share, which makes
    the result independent of the previous table. Servers are laid out
    contiguously in registration order. With zero total load the table is
    returned untouched.
    """
    by_server = _samples_by_server(table, samples)
    missing = [s for s in table.servers if s not in by_server]
    if missing:
        raise InputError(f"no load sample for {missing}")
    tasks = [by_server[s].tasks for s in table.servers]
    if any(t < 0 for t in tasks):
        raise InputError("negative task count")
    if not table.servers or sum(tasks) == 0:
        return table, []
    current = None
    if incremental:
        current = [sum(table.slices[i].size for i in table.slices_of(s)) for s in table.servers]
    sizes = adaptive_sizes(tasks, table.bits, min_slice, current)
    new = table._next(_layout(sizes, table.servers))
    return new, ownership_diff(table, new)


def _pick_slice(table: SliceTable, server: ServerId, at: int | None) -> int:
    owned = table.slices_of(server)
    if not owned:
        raise InvalidAdjustment(f"{server} owns no slice")
    if at is not None:
        idx = table.slice_index(at)
        if table.slices[idx].server != server:
            raise InvalidAdjustment(f"bucket {at} is not owned by {server}")
        return idx
    return max(owned, key=lambda i: (table.slices[i].size, -i))


def shrink_edges(
    table: SliceTable,
    overloaded: ServerId,
    left_amount: int,
    right_amount: int,
    min_slice: int = 1,
    at: int | None = None,
) -> tuple[SliceTable, list[MigrationDirective]]:
    """Hand the outer ``left_amount``/``right_amount`` buckets of a slice to its neighbours.

    ``at`` selects which slice when the server owns several (default: its largest).
    """
    if left_amount < 0 or right_amount < 0:
        raise InvalidAdjustment("amounts must be non-negative")
    idx = _pick_slice(table, overloaded, at)
    if left_amount == 0 and right_amount == 0:
        return table, []
    target = table.slices[idx]
    if left_amount + right_amount > target.size - min_slice:
        raise InvalidAdjustment(
            f"cannot move {left_amount}+{right_amount} out of a {target.size}-bucket slice"
        )
    if left_amount and idx == 0:
        raise InvalidAdjustment("no left neighbour")
    if right_amount and idx == len(table.slices) - 1:
        raise InvalidAdjustment("no right neighbour")
    slices = list(table.slices)
    if left_amount:
        prev = slices[idx - 1]
        slices[idx - 1] = Slice(prev.lo, prev.hi + left_amount, prev.server)
    if right_amount:
        nxt = slices[idx + 1]
        slices[idx + 1] = Slice(nxt.lo - right_amount, nxt.hi, nxt.server)
    slices[idx] = Slice(target.lo + left_amount, target.hi - right_amount, overloaded)
    new = table._next(slices)
    return new, ownership_diff(table, new)


def split_fine(
    table: SliceTable,
    overloaded: ServerId,
    subrange: tuple[int, int],
    target: ServerId,
    min_slice: int = 1,
) -> tuple[SliceTable, list[MigrationDirective]]:
    """Carve ``subrange`` out of one of ``overloaded``'s slices and give it to ``target``.

    Leftover fragments narrower than ``min_slice`` go along with the carved part.
    """
    lo, hi = subrange
    if target == overloaded:
        raise InvalidAdjustment("target must differ from the overloaded server")
    if target not in table.servers:
        raise InvalidAdjustment(f"unknown target {target}")
    if not 0 <= lo <= hi < table.space:
        raise InvalidAdjustment(f"subrange {subrange} outside the space")
    idx = table.slice_index(lo)
    host = table.slices[idx]
    if hi > host.hi:
        raise InvalidAdjustment(f"subrange {subrange} spans several slices")
    if host.server != overloaded:
        raise InvalidAdjustment(f"subrange {subrange} is not owned by {overloaded}")
    if lo - host.lo < min_slice:
        lo = host.lo
    if host.hi - hi < min_slice:
        hi = host.hi
    pieces = [
        Slice(host.lo, lo - 1, overloaded),
        Slice(lo, hi, target),
        Slice(hi + 1, host.hi, overloaded),
    ]
    slices = list(table.slices[:idx]) + [p for p in pieces if p.hi >= p.lo] + list(table.slices[idx + 1 :])
    new = table._next(slices)
    return new, ownership_diff(table, new)


def _overlay(slices: Sequence[Slice], lo: int, hi: int, server: ServerId) -> list[Slice]:
    out = []
    for s in slices:
        if s.hi < lo or s.lo > hi:
            out.append(s)
            continue
        if s.lo < lo:
            out.append(Slice(s.lo, lo - 1, s.server))
        if s.lo <= lo <= s.hi:
            out.append(Slice(lo, hi, server))
        if s.hi > hi:
            out.append(Slice(hi + 1, s.hi, s.server))
    return out


def reassign(table: SliceTable, subrange: tuple[int, int], server: ServerId) -> tuple[SliceTable, list[MigrationDirective]]:
    """Give an arbitrary contiguous range to ``server`` (used for undoing a split)."""
    lo, hi = subrange
    if server not in table.servers:
        raise InvalidAdjustment(f"unknown server {server}")
    if not 0 <= lo <= hi < table.space:
        raise InvalidAdjustment(f"range {subrange} outside the space")
    slices = _overlay(table.slices, lo, hi, server)
    new = table._next(slices)
    return new, ownership_diff(table, new)


def _coalesce(slices: Iterable[Slice]) -> list[Slice]:
    merged: list[Slice] = []
    for s in slices:
        if merged and merged[-1].server == s.server:
            merged[-1] = Slice(merged[-1].lo, s.hi, s.server)
        else:
            merged.append(s)
    return merged


def merge_adjacent(table: SliceTable) -> SliceTable:
    """Coalesce neighbouring slices that share a server; a no-op returns ``table`` itself."""
    merged = _coalesce(table.slices)
    if len(merged) == len(table.slices):
        return table
    return table._next(merged)


def range_load(sample: LoadSample | None, lo: int, hi: int, bits: int) -> float:
    """Tasks attributed to ``[lo, hi]``; groups that straddle the range count pro rata."""
    if sample is None or not sample.per_range:
        return 0.0
    groups = sample.group_count
    width = (1 << bits) / groups
    total = 0.0
    first = int(lo * groups >> bits)
    last = int(hi * groups >> bits)
    for g in range(first, last + 1):
        tasks = sample.per_range.get(g)
        if not tasks:
            continue
        g_lo = g * width
        g_hi = (g + 1) * width
        overlap = min(g_hi, hi + 1) - max(g_lo, lo)
        if overlap > 0:
            total += tasks[0] * overlap / width
    return total


def add_server(
    table: SliceTable,
    samples: Sequence[LoadSample],
    new_server: ServerId,
    min_slice: int = 1,
    extend_adjacent: bool = False,
) -> tuple[SliceTable, list[MigrationDirective]]:
    """Give ``new_server`` the busier half of the most loaded server's slice.

    With ``extend_adjacent`` (or when the donor slice is too small to halve)
    the new slice also takes the adjoining half of the neighbouring slice.
    """
    if new_server in table.servers:
        raise InputError(f"{new_server} is already registered")
    if not table.servers:
        only = SliceTable(table.bits, (Slice(0, table.space - 1, new_server),), (new_server,), table.epoch + 1)
        return only, []
    by_server = _samples_by_server(table, samples)
    load = {s: (by_server[s].tasks if s in by_server else 0) for s in table.servers}
    order = {s: i for i, s in enumerate(table.servers)}
    holders = [s for s in table.servers if table.slices_of(s)]
    donor = min(holders, key=lambda s: (-load[s], order[s]))
    donor_sample = by_server.get(donor)
    idx = max(
        table.slices_of(donor),
        key=lambda i: (
            range_load(donor_sample, table.slices[i].lo, table.slices[i].hi, table.bits),
            table.slices[i].size,
            -i,
        ),
    )
    servers = list(table.servers) + [new_server]
    slices = list(table.slices)
    host = slices[idx]

    if host.size < 2 * min_slice:
        # donor cannot be halved: take the adjoining half of its larger neighbour instead
        prev_size = slices[idx - 1].size if idx > 0 else -1
        next_size = slices[idx + 1].size if idx + 1 < len(slices) else -1
        upper = next_size >= prev_size
        lo = hi = None
        extend = True
    else:
        half = host.size // 2
        lower_r = (host.lo, host.lo + half - 1)
        upper_r = (host.lo + half, host.hi)
        upper = range_load(donor_sample, *upper_r, table.bits) >= range_load(
            donor_sample, *lower_r, table.bits
        )
        lo, hi = upper_r if upper else lower_r
        extend = extend_adjacent

    if extend:
        nb_idx = idx + 1 if upper else idx - 1
        taken = None
        if 0 <= nb_idx < len(slices):
            nb = slices[nb_idx]
            take = min(nb.size // 2, nb.size - min_slice)
            if take > 0:
                taken = (nb.lo, nb.lo + take - 1) if upper else (nb.hi - take + 1, nb.hi)
        if taken is None:
            if lo is None:
                raise InvalidAdjustment("no room to create a slice for the new server")
        elif lo is None:
            lo, hi = taken
        elif upper:
            hi = taken[1]
        else:
            lo = taken[0]

    out = _overlay(slices, lo, hi, new_server)
    new = table._next(out, servers)
    return new, ownership_diff(table, new)


def remove_server(
    table: SliceTable, failed: ServerId, samples: Sequence[LoadSample] = ()
) -> SliceTable:
    """Split each of ``failed``'s slices between its neighbours, more to the less loaded one."""
    if failed not in table.servers:
        raise InputError(f"{failed} is not registered")
    if len(table.servers) == 1:
        raise ConfigurationError("cannot remove the last server")
    by_server = _samples_by_server(table, samples)
    load = {s: (by_server[s].tasks if s in by_server else 0) for s in table.servers}
    servers = [s for s in table.servers if s != failed]

    slices = _coalesce(table.slices)
    out: list[Slice] = []
    for i, s in enumerate(slices):
        if s.server != failed:
            out.append(s)
            continue
        left = slices[i - 1].server if i > 0 else None
        right = slices[i + 1].server if i + 1 < len(slices) else None
        if left is None and right is None:
            out.append(Slice(s.lo, s.hi, servers[0]))
            continue
        if left is None or right is None or left == right:
            out.append(Slice(s.lo, s.hi, left or right))
            continue
        t_left, t_right = load[left], load[right]
        if t_left + t_right == 0:
            to_left = s.size / 2
        else:
            to_left = s.size * t_right / (t_left + t_right)
        n_left = math.floor(to_left)
        n_right = math.floor(s.size - to_left)
        spare = s.size - n_left - n_right
        if t_left <= t_right:
            n_left += spare
        else:
            n_right += spare
        if n_left:
            out.append(Slice(s.lo, s.lo + n_left - 1, left))
        if n_right:
            out.append(Slice(s.hi - n_right + 1, s.hi, right))
    new = SliceTable(table.bits, tuple(_coalesce(out)), tuple(servers), table.epoch + 1)
    new.validate()
    return new
