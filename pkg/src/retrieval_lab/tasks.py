"""Minimal retrieval task: chains of random vectors, interleaved and encoded.

An example holds ``N`` chains ``x_0 -> x_1 -> ... -> x_D``.  The input
sequence lists, step by step, the pairs ``(x_{k-1}, x_k)`` of every chain
(shuffled across chains inside a step), followed by the ``N`` query tokens
``x_0`` in shuffled order.  Each token vector is concatenated with a rotary
positional code, so a row is ``2K`` wide.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .container import read_container, write_container

PAIR_FIRST = 0
PAIR_SECOND = 1
QUERY = 2
KIND_NAMES = ("PairFirst", "PairSecond", "Query")

# independent RNG streams derived from one run seed
STREAM_TRAIN = 0
STREAM_VAL = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_PROBE = 4


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for a sub-stream; independent of the order streams are used."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *keys]))


@dataclass(frozen=True)
class TaskConfig:
    N: int = 4
    D: int = 3
    K: int = 4
    ic: bool = True
    rotary_base: float = 10000.0
    seed: int = 0
    pair_order: str = "ascending"  # or "descending"
    position_index: str = "token"  # or "pair"

    def __post_init__(self):
        if self.N < 1 or self.D < 1:
            raise ValueError(f"need N >= 1 and D >= 1, got N={self.N}, D={self.D}")
        if self.K < 2 or self.K % 2:
            raise ValueError(f"K must be even and >= 2, got {self.K}")
        if self.rotary_base <= 0:
            raise ValueError("rotary_base must be positive")
        if self.pair_order not in ("ascending", "descending"):
            raise ValueError(f"unknown pair_order {self.pair_order!r}")
        if self.position_index not in ("token", "pair"):
            raise ValueError(f"unknown position_index {self.position_index!r}")

    @property
    def seq_len(self) -> int:
        return self.N * (2 * self.D + 1)

    @property
    def input_dim(self) -> int:
        return 2 * self.K

    @property
    def target_dim(self) -> int:
        return self.D * self.K if self.ic else self.K

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TaskConfig:
        return cls(**d)


@dataclass(frozen=True)
class Role:
    kind: str  # PairFirst | PairSecond | Query
    chain: int
    step: int | None = None

    def __str__(self) -> str:
        if self.kind == "Query":
            return f"Query(c{self.chain})"
        return f"{self.kind}(c{self.chain},{self.step})"


@dataclass
class ChainInstance:
    embeddings: np.ndarray  # (N, D+1, K)
    pair_order: np.ndarray  # (D, N): chains listed in step k+1's block
    query_order: np.ndarray  # (N,)


@dataclass
class EncodedExample:
    inputs: np.ndarray  # (L, 2K)
    targets: np.ndarray  # (N, T)
    roles: list[Role]

    @property
    def chains(self) -> np.ndarray:
        return np.array([r.chain for r in self.roles])


@dataclass
class Batch:
    """A stack of encoded examples sharing one :class:`TaskConfig`.

    ``kinds`` and ``steps`` describe the layout (identical for every example);
    ``chains`` records which chain occupies each position per example.
    """

    config: TaskConfig
    inputs: np.ndarray  # (B, L, 2K)
    targets: np.ndarray  # (B, N, T)
    chains: np.ndarray  # (B, L)
    kinds: np.ndarray = field(repr=False)  # (L,)
    steps: np.ndarray = field(repr=False)  # (L,), 0 for queries

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, i: int) -> EncodedExample:
        roles = [
            Role(KIND_NAMES[k], int(c), None if k == QUERY else int(s))
            for k, c, s in zip(self.kinds, self.chains[i], self.steps)
        ]
        return EncodedExample(self.inputs[i], self.targets[i], roles)

    def __iter__(self) -> Iterator[EncodedExample]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.config, self.inputs[idx], self.targets[idx], self.chains[idx], self.kinds, self.steps)


def rotary_encoding(position, K: int, base: float = 10000.0) -> np.ndarray:
    """``(cos p*theta_j, sin p*theta_j)`` pairs with ``theta_j = base**(-2j/K)``.

    ``position`` may be an int or an integer array; the code is appended
    along a new last axis.
    """
    if K % 2:
        raise ValueError(f"rotary encoding needs an even dimension, got K={K}")
    theta = base ** (-2.0 * np.arange(K // 2) / K)
    ang = np.multiply.outer(np.asarray(position, dtype=np.float64), theta)
    out = np.empty(ang.shape[:-1] + (K,), dtype=np.float64)
    out[..., 0::2] = np.cos(ang)
    out[..., 1::2] = np.sin(ang)
    return out


def layout(config: TaskConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Static role layout: per-position kind, step, and slot within its block."""
    N, D = config.N, config.D
    L = config.seq_len
    kinds = np.empty(L, dtype=np.int64)
    steps = np.zeros(L, dtype=np.int64)
    slots = np.empty(L, dtype=np.int64)
    order = range(1, D + 1) if config.pair_order == "ascending" else range(D, 0, -1)
    pos = 0
    for k in order:
        for s in range(N):
            kinds[pos], steps[pos], slots[pos] = PAIR_FIRST, k, s
            kinds[pos + 1], steps[pos + 1], slots[pos + 1] = PAIR_SECOND, k, s
            pos += 2
    for i in range(N):
        kinds[pos], slots[pos] = QUERY, i
        pos += 1
    return kinds, steps, slots


def position_codes(config: TaskConfig) -> np.ndarray:
    L = config.seq_len
    if config.position_index == "token":
        idx = np.arange(L)
    else:
        npairs = config.N * config.D
        idx = np.concatenate([np.arange(2 * npairs) // 2, npairs + np.arange(config.N)])
    return rotary_encoding(idx, config.K, config.rotary_base)


def _sample(config: TaskConfig, rng: np.random.Generator, n: int):
    N, D, K = config.N, config.D, config.K
    emb = rng.standard_normal((n, N, D + 1, K), dtype=np.float32)
    pair_order = rng.permuted(np.broadcast_to(np.arange(N), (n, D, N)), axis=-1)
    query_order = rng.permuted(np.broadcast_to(np.arange(N), (n, N)), axis=-1)
    return emb, pair_order, query_order


def gen_instance(config: TaskConfig, rng: np.random.Generator) -> ChainInstance:
    emb, po, qo = _sample(config, rng, 1)
    return ChainInstance(emb[0], po[0], qo[0])


def _encode(config: TaskConfig, emb: np.ndarray, pair_order: np.ndarray, query_order: np.ndarray) -> Batch:
    n = emb.shape[0]
    N, D, K = config.N, config.D, config.K
    kinds, steps, slots = layout(config)
    L = config.seq_len
    rows = np.arange(n)[:, None]

    chains = np.empty((n, L), dtype=np.int64)
    sym = np.empty(L, dtype=np.int64)  # chain-position index of the token
    pair = kinds != QUERY
    chains[:, pair] = pair_order[:, steps[pair] - 1, slots[pair]]
    chains[:, ~pair] = query_order[:, slots[~pair]]
    sym[kinds == PAIR_FIRST] = steps[kinds == PAIR_FIRST] - 1
    sym[kinds == PAIR_SECOND] = steps[kinds == PAIR_SECOND]
    sym[kinds == QUERY] = 0

    tokens = emb[rows, chains, sym[None, :]]  # (n, L, K)
    pe = np.broadcast_to(position_codes(config).astype(np.float32), (n, L, K))
    inputs = np.concatenate([tokens, pe], axis=-1)

    if config.ic:
        targets = emb[rows, query_order, 1:].reshape(n, N, D * K)
    else:
        targets = emb[rows, query_order, D]
    return Batch(config, inputs, np.ascontiguousarray(targets), chains, kinds, steps)


def encode_instance(instance: ChainInstance, config: TaskConfig) -> EncodedExample:
    b = _encode(config, instance.embeddings[None], instance.pair_order[None], instance.query_order[None])
    return b[0]


def gen_batch(config: TaskConfig, rng: np.random.Generator, batch_size: int) -> Batch:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return _encode(config, *_sample(config, rng, batch_size))


def gen_example(config: TaskConfig, seed: int, index: int) -> EncodedExample:
    """Example ``index`` of the stream for ``seed``; safe to call in any order."""
    return encode_instance(gen_instance(config, derive_rng(seed, 1000, index)), config)


def stack_examples(config: TaskConfig, examples: list[EncodedExample]) -> Batch:
    kinds, steps, _ = layout(config)
    return Batch(
        config,
        np.stack([e.inputs for e in examples]),
        np.stack([e.targets for e in examples]),
        np.stack([e.chains for e in examples]),
        kinds,
        steps,
    )


def validation_set(config: TaskConfig, seed: int, size: int) -> Batch:
    return gen_batch(config, derive_rng(seed, STREAM_VAL), size)


# -- on-disk datasets --------------------------------------------------------------


def save_dataset(path: str | Path, batch: Batch, seed: int | None = None) -> int:
    header = {"task": batch.config.to_dict(), "size": len(batch), "seed": seed, "role_kinds": list(KIND_NAMES)}
    arrays = {
        "inputs": batch.inputs.astype(np.float32),
        "targets": batch.targets.astype(np.float32),
        "chains": batch.chains.astype(np.int32),
        "kinds": batch.kinds.astype(np.int32),
        "steps": batch.steps.astype(np.int32),
    }
    return write_container(path, "dataset", header, arrays)


def load_dataset(path: str | Path) -> Batch:
    header, arrays = read_container(path, kind="dataset")
    config = TaskConfig.from_dict(header["task"])
    return Batch(
        config,
        arrays["inputs"],
        arrays["targets"],
        arrays["chains"].astype(np.int64),
        arrays["kinds"].astype(np.int64),
        arrays["steps"].astype(np.int64),
    )
