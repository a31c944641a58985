"""Bundle algebra, valuation profiles and the four valuation distributions.

Bundles are bitmasks: bit ``j`` set means item ``j`` is in the bundle, so a
bidder's valuation is a length ``2**m`` vector indexed by mask. Tables are
stored bidder-major, ``values[i, mask]``.

Random streams
--------------
A batch of ``count`` profiles drawn with ``seed`` is cut into chunks of
``CHUNK_SIZE`` profiles. Chunk ``k`` draws from its own generator,
``PCG64(SeedSequence(seed, spawn_key=(setting_index, k)))``, so any chunk can
be regenerated (or drawn on another worker) without touching the others.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAX_ITEMS = 16
CHUNK_SIZE = 4096
SETTINGS = ("A", "B", "C", "D")
ADDITIVE_SETTINGS = ("A", "B", "C")


@dataclass(frozen=True)
class AuctionSize:
    n_bidders: int
    n_items: int
    max_items: int = field(default=MAX_ITEMS, compare=False, repr=False)

    def __post_init__(self):
        if int(self.n_bidders) < 1:
            raise ValueError(f"need at least one bidder, got {self.n_bidders}")
        if not 1 <= int(self.n_items) <= self.max_items:
            raise ValueError(
                f"n_items must be in [1, {self.max_items}], got {self.n_items}")

    @property
    def n_bundles(self) -> int:
        return 1 << self.n_items

    @property
    def full_mask(self) -> int:
        return self.n_bundles - 1

    def __str__(self):
        return f"{self.n_bidders}x{self.n_items}"


def check_setting(setting: str) -> str:
    setting = str(setting).upper()
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    return setting


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def enumerate_subsets(mask: int) -> list[int]:
    """All submasks of ``mask``, from ``mask`` itself down to 0."""
    if mask < 0:
        raise ValueError("mask must be non-negative")
    out = []
    sub = mask
    while True:
        out.append(sub)
        if sub == 0:
            return out
        sub = (sub - 1) & mask


def bundle_sizes(n_items: int) -> np.ndarray:
    """Popcount of every mask in ``0 .. 2**n_items - 1``."""
    sizes = np.zeros(1 << n_items, dtype=np.int64)
    for j in range(n_items):
        sizes[1 << j:1 << (j + 1)] = sizes[:1 << j] + 1
    return sizes


def expand_additive(item_values: np.ndarray) -> np.ndarray:
    """Expand per-item values ``(..., m)`` into bundle tables ``(..., 2**m)``.

    ``table[S] = table[S without its highest item] + v[highest item]``, i.e. the
    sum runs over the items of ``S`` in ascending order, so
    ``sum(v[j] for j in sorted(S))`` reproduces each entry bit for bit.
    """
    item_values = np.asarray(item_values, dtype=np.float64)
    m = item_values.shape[-1]
    table = np.zeros(item_values.shape[:-1] + (1 << m,), dtype=np.float64)
    for j in range(m):
        lo, hi = 1 << j, 1 << (j + 1)
        table[..., lo:hi] = table[..., :lo] + item_values[..., j:j + 1]
    return table


@dataclass(frozen=True)
class ValuationProfile:
    """Values of every bundle for every bidder, shape ``(n, 2**m)``."""

    size: AuctionSize
    values: np.ndarray
    additive: bool = False

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != (self.size.n_bidders, self.size.n_bundles):
            raise ValueError(
                f"value table has shape {values.shape}, expected "
                f"{(self.size.n_bidders, self.size.n_bundles)}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("valuations must be finite and non-negative")
        if np.any(values[:, 0] != 0.0):
            raise ValueError("the empty bundle must be worth 0 to every bidder")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_item_values(cls, item_values) -> "ValuationProfile":
        item_values = np.asarray(item_values, dtype=np.float64)
        n, m = item_values.shape
        return cls(AuctionSize(n, m), expand_additive(item_values), additive=True)

    @property
    def item_values(self) -> np.ndarray:
        """Singleton values ``v_i({j})``, shape ``(n, m)``."""
        return self.values[:, [1 << j for j in range(self.size.n_items)]]

    def bundle_value(self, bidder: int, mask: int) -> float:
        return bundle_value(self, bidder, mask)


def bundle_value(profile: ValuationProfile, bidder: int, mask: int) -> float:
    n, k = profile.values.shape
    if not 0 <= bidder < n:
        raise IndexError(f"bidder {bidder} out of range for {n} bidders")
    if not 0 <= mask < k:
        raise IndexError(f"bundle mask {mask} out of range for {k} bundles")
    return float(profile.values[bidder, mask])


@dataclass(frozen=True)
class ValuationBatch:
    """Profiles sharing one auction size, stored as a ``(count, n, 2**m)`` array."""

    values: np.ndarray
    setting_id: str
    seed: int
    additive: bool = False

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] == 0:
            raise ValueError("a batch needs shape (count, n, 2**m) with count >= 1")
        k = values.shape[2]
        if k & (k - 1):
            raise ValueError(f"bundle axis has length {k}, not a power of two")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> AuctionSize:
        return AuctionSize(self.values.shape[1], self.values.shape[2].bit_length() - 1)

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, index: int) -> ValuationProfile:
        return ValuationProfile(self.size, self.values[index], additive=self.additive)

    def __iter__(self) -> Iterator[ValuationProfile]:
        for index in range(len(self)):
            yield self[index]

    @property
    def profiles(self) -> list[ValuationProfile]:
        return list(self)

    @classmethod
    def from_profiles(cls, profiles: Sequence[ValuationProfile], setting_id="A", seed=0):
        if not profiles:
            raise ValueError("empty batch")
        sizes = {p.size for p in profiles}
        if len(sizes) != 1:
            raise ValueError(f"profiles disagree on auction size: {sizes}")
        return cls(np.stack([p.values for p in profiles]), setting_id, seed,
                   additive=all(p.additive for p in profiles))

    def item_values(self) -> np.ndarray:
        """Singleton values, shape ``(count, n, m)``."""
        m = self.size.n_items
        return self.values[:, :, [1 << j for j in range(m)]]


def _draw_items(setting: str, count: int, size: AuctionSize, rng: np.random.Generator):
    n, m = size.n_bidders, size.n_items
    bidder = np.arange(1, n + 1, dtype=np.float64)[None, :, None]
    if setting == "A":
        return rng.uniform(0.0, 1.0, size=(count, n, m))
    if setting == "B":
        return rng.uniform(0.0, 1.0, size=(count, n, m)) * bidder
    if setting == "C":
        # Lognormal(0, 1/i^2) with 1/i^2 read as the variance of log v.
        return np.exp(rng.standard_normal(size=(count, n, m)) / bidder)
    return rng.uniform(1.0, 2.0, size=(count, n, m))


def _draw_tables(setting: str, count: int, size: AuctionSize, rng: np.random.Generator):
    items = _draw_items(setting, count, size, rng)
    table = expand_additive(items)
    if setting == "D":
        half = bundle_sizes(size.n_items).astype(np.float64) / 2.0
        noise = rng.uniform(-1.0, 1.0, size=table.shape) * half
        noise[..., 0] = 0.0
        # noise >= -|S|/2 and items >= |S|, so the sum is >= |S|/2 >= 0
        table = table + noise
    return table


def sample_profile(setting: str, size: AuctionSize, rng: np.random.Generator) -> ValuationProfile:
    setting = check_setting(setting)
    table = _draw_tables(setting, 1, size, rng)[0]
    return ValuationProfile(size, table, additive=setting in ADDITIVE_SETTINGS)


def chunk_rng(setting: str, seed: int, chunk: int) -> np.random.Generator:
    key = (SETTINGS.index(check_setting(setting)), int(chunk))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def iter_batch_chunks(setting: str, size: AuctionSize, count: int, seed: int,
                      chunk_size: int = CHUNK_SIZE) -> Iterator[np.ndarray]:
    """Yield the value tables of ``sample_batch(...)`` chunk by chunk.

    ``chunk_size`` must be a multiple of ``CHUNK_SIZE`` (or ``count`` must fit
    in one chunk) for the output to match ``sample_batch`` exactly.
    """
    setting = check_setting(setting)
    if count < 1:
        raise ValueError("count must be >= 1")
    if chunk_size % CHUNK_SIZE:
        raise ValueError(f"chunk_size must be a multiple of {CHUNK_SIZE}")
    done = 0
    block = []
    for k in range(-(-count // CHUNK_SIZE)):
        take = min(CHUNK_SIZE, count - done)
        block.append(_draw_tables(setting, take, size, chunk_rng(setting, seed, k)))
        done += take
        if sum(len(b) for b in block) >= chunk_size or done == count:
            yield np.concatenate(block) if len(block) > 1 else block[0]
            block = []


def sample_batch(setting: str, size: AuctionSize, count: int, seed: int) -> ValuationBatch:
    setting = check_setting(setting)
    if count < 1:
        raise ValueError("count must be >= 1")
    tables = np.concatenate(list(iter_batch_chunks(setting, size, count, seed,
                                                   chunk_size=CHUNK_SIZE)))
    return ValuationBatch(tables, setting, int(seed), additive=setting in ADDITIVE_SETTINGS)


_MAGIC = b"VVCABATCH1\n"


def save_batch(batch: ValuationBatch, path) -> None:
    """Write a JSON header line followed by little-endian float64 tables."""
    size = batch.size
    header = {"setting_id": batch.setting_id, "n": size.n_bidders, "m": size.n_items,
              "count": len(batch), "seed": int(batch.seed), "additive": batch.additive}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(batch.values.astype("<f8").tobytes(order="C"))


def load_batch(path) -> ValuationBatch:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a batch file")
    rest = raw[len(_MAGIC):]
    line, _, body = rest.partition(b"\n")
    header = json.loads(line)
    shape = (header["count"], header["n"], 1 << header["m"])
    values = np.frombuffer(body, dtype="<f8").reshape(shape)
    return ValuationBatch(values.astype(np.float64), header["setting_id"], header["seed"],
                          additive=header["additive"])
