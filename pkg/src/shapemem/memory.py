"""Key-value-age memory of complete shapes.

Each slot pairs a unit-norm feature key with a complete point cloud and an
age counter. Updates either refresh the best-matching slot (geometrically
close ground truth: key moves toward the query, value stays) or overwrite
the oldest slot with the new shape. Queries are read-only; updates apply
during training only, since values come from the training set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import l2_normalize_np
from .errors import ContractError, DomainError, FormatError, StateError
from .geometry import as_cloud, chamfer_l2

BANK_MAGIC = b"PPCM"
BANK_VERSION = 1


@dataclass
class MemorySlot:
    key: np.ndarray      # unit feature vector
    value: np.ndarray    # complete point cloud (N, 3)
    age: int


@dataclass(frozen=True)
class UpdateOutcome:
    """positive: the matched slot's key was refreshed (value untouched);
    otherwise the returned slot was overwritten with the new shape."""

    positive: bool
    slot: int


@dataclass(frozen=True)
class QueryResult:
    values: list        # point clouds, best match first
    similarities: np.ndarray
    indices: np.ndarray


class MemoryBank:
    def __init__(self, capacity: int, delta: float, top_k: int):
        if capacity < 1:
            raise ContractError("memory capacity must be >= 1")
        if delta <= 0:
            raise ContractError("chamfer threshold delta must be positive")
        if top_k < 1:
            raise ContractError("retrieval count must be >= 1")
        self.capacity = capacity
        self.delta = delta
        self.top_k = top_k
        self.slots: list[MemorySlot] = []

    def __len__(self):
        return len(self.slots)

    def _keys_matrix(self) -> np.ndarray:
        return np.stack([s.key for s in self.slots])

    def _similarities(self, feature: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(feature)
        if norm == 0.0:
            raise DomainError("query feature is the zero vector")
        return self._keys_matrix() @ (feature / norm)

    def seed(self, pairs) -> None:
        """Fill the bank with (complete cloud, feature) pairs.

        Keys are normalized features; ages count down with insertion order so
        the first pair is the oldest and the last has age 0.
        """
        pairs = list(pairs)
        if len(self.slots) + len(pairs) > self.capacity:
            raise ContractError(
                f"seeding {len(pairs)} pairs exceeds capacity {self.capacity}"
            )
        n = len(pairs)
        for i, (value, feature) in enumerate(pairs):
            value = as_cloud(value, "seed value")
            key = l2_normalize_np(np.asarray(feature, dtype=np.float64))
            self.slots.append(MemorySlot(key=key, value=value.copy(), age=n - 1 - i))

    def query(self, feature) -> QueryResult:
        """Values of the top_k keys most cosine-similar to `feature`."""
        if not self.slots:
            raise StateError("query on an empty memory bank")
        if self.top_k > len(self.slots):
            raise ContractError(
                f"retrieval count {self.top_k} exceeds {len(self.slots)} slots"
            )
        feature = np.asarray(feature, dtype=np.float64)
        sims = self._similarities(feature)
        # stable sort: ties resolve toward the lowest slot index
        order = np.argsort(-sims, kind="stable")[: self.top_k]
        return QueryResult(
            values=[self.slots[i].value for i in order],
            similarities=sims[order],
            indices=order,
        )

    def update(self, feature, ground_truth) -> UpdateOutcome:
        """Apply one training-time write.

        The best-matching slot (by cosine of keys) is a positive match when
        its value is within chamfer_l2 `delta` of the ground truth: its key
        becomes normalize(feature + key) and its age resets. Otherwise the
        oldest slot is overwritten with (normalize(feature), ground truth).
        Every other slot ages by one either way.
        """
        if not self.slots:
            raise StateError("update on an empty memory bank")
        feature = np.asarray(feature, dtype=np.float64)
        ground_truth = as_cloud(ground_truth, "ground truth")
        sims = self._similarities(feature)
        best = int(np.argmax(sims))
        if chamfer_l2(ground_truth, self.slots[best].value) < self.delta:
            target, positive = best, True
            self.slots[best].key = l2_normalize_np(feature + self.slots[best].key)
        else:
            ages = np.array([s.age for s in self.slots])
            target, positive = int(np.argmax(ages)), False
            self.slots[target] = MemorySlot(
                key=l2_normalize_np(feature), value=ground_truth.copy(), age=0
            )
        for i, slot in enumerate(self.slots):
            slot.age = 0 if i == target else slot.age + 1
        return UpdateOutcome(positive=positive, slot=target)

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(BANK_MAGIC)
            fh.write(struct.pack("<H", BANK_VERSION))
            fh.write(struct.pack("<I", self.capacity))
            fh.write(struct.pack("<I", len(self.slots)))
            for slot in self.slots:
                fh.write(struct.pack("<I", len(slot.key)))
                fh.write(slot.key.astype("<f8").tobytes())
                fh.write(struct.pack("<I", len(slot.value)))
                fh.write(slot.value.astype("<f4").tobytes())
                fh.write(struct.pack("<I", slot.age))

    @classmethod
    def load(cls, path, top_k: int | None = None, delta: float | None = None) -> "MemoryBank":
        """Read a bank; values come back at their stored f32 precision.

        delta and top_k are runtime policy, not persisted state; defaults
        match the package defaults and can be overridden per load.
        """
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise StateError(f"cannot read bank file {path}: {exc}") from None
        if len(blob) < 14:
            raise FormatError(f"{path}: file too short for a bank header")
        if blob[:4] != BANK_MAGIC:
            raise FormatError(f"{path}: bad magic {blob[:4]!r}")
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != BANK_VERSION:
            raise FormatError(f"{path}: unsupported bank version {version}")
        (capacity,) = struct.unpack_from("<I", blob, 6)
        (count,) = struct.unpack_from("<I", blob, 10)
        bank = cls(capacity=capacity, delta=delta if delta is not None else 0.0015,
                   top_k=top_k if top_k is not None else 3)
        off = 14
        try:
            for _ in range(count):
                (key_len,) = struct.unpack_from("<I", blob, off)
                off += 4
                key = np.frombuffer(blob, dtype="<f8", count=key_len, offset=off).copy()
                if key.size != key_len:
                    raise struct.error
                off += 8 * key_len
                (n_points,) = struct.unpack_from("<I", blob, off)
                off += 4
                value = np.frombuffer(blob, dtype="<f4", count=3 * n_points, offset=off)
                if value.size != 3 * n_points:
                    raise struct.error
                value = value.astype(np.float64).reshape(n_points, 3)
                off += 12 * n_points
                (age,) = struct.unpack_from("<I", blob, off)
                off += 4
                if n_points == 0:
                    raise FormatError(f"{path}: slot with empty value cloud")
                if abs(np.linalg.norm(key) - 1.0) > 1e-9:
                    raise FormatError(f"{path}: slot key is not unit norm")
                bank.slots.append(MemorySlot(key=key, value=value, age=int(age)))
        except (struct.error, ValueError):
            raise FormatError(f"{path}: truncated slot record at byte {off}") from None
        if count != len(bank.slots):
            raise FormatError(f"{path}: slot count mismatch")
        return bank
