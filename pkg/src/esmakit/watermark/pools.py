"""Per-enterprise message pools of L-bit watermark codes.

Each enterprise owns a pool of distinct binary messages; pools of different
enterprises are disjoint by construction (one global draw without
replacement). Encoding uses only the pool's active subset, mimicking the
limited visibility an outside attacker has, while verification accepts any
message of the full pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..rng import generator as make_rng


@dataclass
class MessagePool:
    """One enterprise's messages, shape (n_p, L) with 0/1 entries.

    ``active`` indexes the subset actually used for encoding.
    """

    enterprise_id: int
    messages: np.ndarray
    active: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        self.messages = np.asarray(self.messages, dtype=np.uint8)
        if self.messages.ndim != 2:
            raise ValueError("messages must be a (n_p, L) array")
        if not np.isin(self.messages, (0, 1)).all():
            raise ValueError("messages must be binary")
        if len(np.unique(self.messages, axis=0)) != len(self.messages):
            raise ValueError("pool messages must be distinct")
        if self.active is None:
            self.active = np.arange(len(self.messages))
        # the active subset is a set; keep it in canonical sorted order
        self.active = np.sort(np.asarray(self.active, dtype=np.int64))
        if len(self.active) and (self.active[0] < 0 or self.active[-1] >= len(self.messages)):
            raise ValueError("active indices out of range")

    @property
    def length(self) -> int:
        return int(self.messages.shape[1])

    @property
    def size(self) -> int:
        return int(self.messages.shape[0])

    def active_messages(self) -> np.ndarray:
        return self.messages[self.active]

    def contains(self, message: np.ndarray) -> bool:
        message = np.asarray(message, dtype=np.uint8)
        return bool((self.messages == message[None, :]).all(axis=1).any())


def _ints_to_bits(values: np.ndarray, length: int) -> np.ndarray:
    bits = np.zeros((len(values), length), dtype=np.uint8)
    for j in range(length):
        bits[:, length - 1 - j] = (values >> j) & 1
    return bits


def build_message_pools(
    n_enterprises: int,
    n_p: int,
    length: int,
    seed: int,
    n_active: int | None = None,
) -> list[MessagePool]:
    """Sample globally disjoint pools of distinct L-bit messages.

    ``n_active`` defaults to 4 when n_p is 8 (the limited-visibility setup)
    and to the full pool otherwise. Raises when the message space cannot
    hold ``n_enterprises * n_p`` distinct codes.
    """
    if not 5 <= length <= 64:
        raise ValueError(f"message length must be in [5, 64], got {length}")
    total = n_enterprises * n_p
    capacity = 2**length
    if total > capacity:
        raise ValueError(
            f"need {total} distinct messages but only 2^{length} = {capacity} exist"
        )
    if n_active is None:
        n_active = 4 if n_p == 8 else n_p
    if n_active > n_p:
        raise ValueError("active subset cannot exceed the pool size")

    rng = make_rng(seed, "message-pools")
    if capacity <= 2**22:
        draw = rng.choice(capacity, size=total, replace=False).astype(np.uint64)
    else:
        # sparse space: rejection-sample fresh codes, insertion-ordered
        seen: set[int] = set()
        picked: list[int] = []
        while len(picked) < total:
            for v in rng.integers(0, 2**length - 1, size=total, dtype=np.uint64, endpoint=True):
                value = int(v)
                if value not in seen:
                    seen.add(value)
                    picked.append(value)
                    if len(picked) == total:
                        break
        draw = np.asarray(picked, dtype=np.uint64)
    bits = _ints_to_bits(draw, length)

    pools = []
    for i in range(n_enterprises):
        messages = bits[i * n_p : (i + 1) * n_p]
        active = rng.choice(n_p, size=n_active, replace=False) if n_active < n_p else None
        pools.append(MessagePool(enterprise_id=i, messages=messages, active=active))
    return pools


def save_pools(pools: list[MessagePool], path: str | Path) -> None:
    """Text serialization: an enterprise header then one bitstring per line.

    Active rows are suffixed with ``*``.
    """
    lines = []
    for pool in pools:
        lines.append(f"# enterprise {pool.enterprise_id}")
        active = set(pool.active.tolist())
        for row_idx, row in enumerate(pool.messages):
            mark = " *" if row_idx in active else ""
            lines.append("".join(str(int(b)) for b in row) + mark)
    Path(path).write_text("\n".join(lines) + "\n")


def load_pools(path: str | Path) -> list[MessagePool]:
    pools: list[MessagePool] = []
    current_id = None
    rows: list[list[int]] = []
    active: list[int] = []

    def flush():
        if current_id is not None:
            pools.append(
                MessagePool(
                    enterprise_id=current_id,
                    messages=np.asarray(rows, dtype=np.uint8),
                    active=np.asarray(active, dtype=np.int64),
                )
            )

    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            flush()
            current_id = int(line.split()[-1])
            rows, active = [], []
        else:
            starred = line.endswith("*")
            bits = line.rstrip("* ").strip()
            if starred:
                active.append(len(rows))
            rows.append([int(c) for c in bits])
    flush()
    return pools
