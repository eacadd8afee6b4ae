"""Sequence-sharded evaluation of the linear attention block.

The mixing state of the block is S = phi_k(X)^T V (d'' x d) plus the
normalizer z = sum_j phi_k(X_j) (d''), both plain sums over tokens. A
sequence split across workers therefore needs exactly one constant-size
exchange: each worker ships its partial (S, z), the partials are summed,
and every worker finishes its own tokens locally. The payload never grows
with token count, unlike softmax attention whose workers must exchange all
keys and values.

The exchange is simulated in-process; shards are logical slices. Merging
sums partials in ascending shard_index order so the result is a
deterministic function of the partition, not of completion order.

Wire format ("LMS1"), little-endian, 24-byte header:

    magic        4 bytes  b"LMS1"
    d''          u32
    d            u32
    shard_index  u32
    token_count  u64
    s            d''*d float64, row-major
    z            d''  float64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    ConfigError,
    DegenerateFeatureError,
    EmptyShardError,
    FormatError,
    ShapeError,
)
from .linattn import (
    DENOM_GUARD,
    LinearAttentionBlockParams,
    _finish_mix_cached,
    featuremap_forward,
)
from .numerics import as_matrix, token_tree_colsum, token_tree_matmul

MAGIC = b"LMS1"
HEADER_BYTES = 24
_HEADER = struct.Struct("<4sIIIQ")


@dataclass
class ShardSummary:
    """One worker's contribution to the global mixing state."""

    s: np.ndarray            # (d'', d) partial phi_k^T V
    z: np.ndarray            # (d'',)   partial sum of phi_k rows
    token_count: int
    shard_index: int

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.s.ndim != 2 or self.z.shape != (self.s.shape[0],):
            raise ShapeError(f"summary shapes inconsistent: s {self.s.shape}, "
                             f"z {self.z.shape}")
        if self.token_count < 0 or self.shard_index < 0:
            raise ConfigError("token_count and shard_index must be non-negative")

    @property
    def payload_bytes(self) -> int:
        return payload_size(self.s.shape[1], self.s.shape[0])


def payload_size(d: int, d_feat: int) -> int:
    """Bytes on the wire for one summary: 8*(d''*d + d'') + 24. A function
    of the model dimensions only, never of token count."""
    if d < 1 or d_feat < 1:
        raise ConfigError(f"dims must be >= 1, got d={d}, d''={d_feat}")
    return 8 * (d_feat * d + d_feat) + HEADER_BYTES


def encode_summary(summary: ShardSummary) -> bytes:
    d_feat, d = summary.s.shape
    header = _HEADER.pack(MAGIC, d_feat, d, summary.shard_index, summary.token_count)
    return header + summary.s.astype("<f8").tobytes() + summary.z.astype("<f8").tobytes()


def decode_summary(blob: bytes) -> ShardSummary:
    if len(blob) < HEADER_BYTES:
        raise FormatError(f"blob of {len(blob)} bytes is shorter than the header")
    magic, d_feat, d, shard_index, token_count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError("bad magic, not an LMS1 summary")
    if len(blob) != payload_size(d, d_feat):
        raise FormatError(f"expected {payload_size(d, d_feat)} bytes for "
                          f"d''={d_feat}, d={d}, got {len(blob)}")
    body = np.frombuffer(blob, dtype="<f8", offset=HEADER_BYTES)
    s = body[:d_feat * d].reshape(d_feat, d).astype(np.float64)
    z = body[d_feat * d:].astype(np.float64)
    return ShardSummary(s=s, z=z, token_count=token_count, shard_index=shard_index)


def _require_single_head(p: LinearAttentionBlockParams):
    # one summary matrix per exchange; multi-head would need per-head
    # payloads and is out of scope for the sharded evaluator
    if p.heads != 1:
        raise ConfigError(f"sharded evaluation supports heads=1, got {p.heads}")


def partial_aggregate(x_shard, p: LinearAttentionBlockParams,
                      shard_index: int = 0) -> ShardSummary:
    """This worker's partial state: s = phi_k(x)^T (x W_V), z = sum phi_k."""
    p.validate()
    _require_single_head(p)
    x_shard = as_matrix(x_shard, "x_shard")
    if x_shard.shape[0] == 0:
        raise EmptyShardError("cannot aggregate a shard with zero tokens")
    if x_shard.shape[1] != p.d_model:
        raise ShapeError(f"shard width {x_shard.shape[1]} does not match "
                         f"block width {p.d_model}")
    phi_k = featuremap_forward(x_shard, p.key_maps[0])
    v = x_shard @ p.w_v
    return ShardSummary(s=token_tree_matmul(phi_k, v), z=token_tree_colsum(phi_k),
                        token_count=x_shard.shape[0], shard_index=shard_index)


def merge_summaries(summaries: list[ShardSummary]) -> ShardSummary:
    """Sum partials in ascending shard_index order (canonical, so the result
    is bit-stable under permutation of the input list)."""
    if not summaries:
        raise ConfigError("merge_summaries needs at least one summary")
    ordered = sorted(summaries, key=lambda s: s.shard_index)
    first = ordered[0]
    s = first.s.copy()
    z = first.z.copy()
    tokens = first.token_count
    for nxt in ordered[1:]:
        if nxt.s.shape != s.shape:
            raise ShapeError(f"summary dims disagree: {nxt.s.shape} vs {s.shape}")
        s += nxt.s
        z += nxt.z
        tokens += nxt.token_count
    return ShardSummary(s=s, z=z, token_count=tokens, shard_index=first.shard_index)


def sharded_block_forward(shards: list[np.ndarray],
                          p: LinearAttentionBlockParams) -> np.ndarray:
    """Evaluate the block over a sequence partitioned into ordered shards.

    Every shard aggregates locally, the summaries merge once, and each shard
    finishes its own rows against the merged state. Output matches the
    unsharded block (identical for one shard; within accumulation-order
    rounding otherwise).
    """
    if not shards:
        raise ConfigError("need at least one shard")
    p.validate()
    _require_single_head(p)
    summaries = [partial_aggregate(sh, p, shard_index=i)
                 for i, sh in enumerate(shards)]
    merged = merge_summaries(summaries)
    outputs = []
    for sh in shards:
        x = as_matrix(sh, "x_shard")
        phi_q = featuremap_forward(x, p.query_maps[0])
        if p.normalized:
            den = phi_q @ merged.z
            if np.any(den <= DENOM_GUARD):
                raise DegenerateFeatureError(
                    f"normalization denominator collapsed to {float(den.min()):.3e}")
            y_mix = (phi_q @ merged.s) / den[:, None]
        else:
            y_mix = phi_q @ merged.s
        out, _ = _finish_mix_cached(y_mix, x, p)
        outputs.append(out)
    return np.vstack(outputs)
