"""Trace-driven timing model of a bitserial systolic accelerator for hash
encoding field models.

Three stages are modeled and summed (no overlap):

  encoding  - coarse hash levels go through a shared direct-mapped grid
              cache (hit: 1 cycle; miss: fixed DRAM latency plus the line
              transfer). Fine-level lookups always hit their subgrid buffer
              and cost 1 cycle.
  prefetch  - entering a subgrid (a fixed-size run of visited pixels)
              preloads that tile's touched fine-level entries; the cost is
              the transfer time of those bytes.
  mlp       - output-stationary P x P systolic GEMM with bit-serial MACs:
              each output tile drains in K + 2P - 2 beats, and every beat
              takes max(activation bits, weight bits) cycles.

Table entries shrink with their level's bit width (entry bytes =
ceil(features * bits / 8)), which is how hash bit widths reach the cache
and DRAM behavior. Level regions are statically allocated at their maximum
(8-bit) size so one level's bit width never shifts another level's layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .policy import QuantPolicy
from .trace import AccessTrace


class SimulationError(RuntimeError):
    """Raised when a trace cannot be simulated under the given policy."""


@lru_cache(maxsize=None)
def _bandwidth_fraction(bytes_per_cycle: float) -> Fraction:
    return Fraction(str(bytes_per_cycle))


@dataclass(frozen=True)
class HwConfig:
    clock_ghz: float = 1.0
    systolic_dim: int = 16
    grid_cache_bytes: int = 32768
    cache_line_bytes: int = 64
    coarse_level_split: int | None = None  # None: level_count // 2
    dram_fixed_latency_cycles: int = 100
    dram_bytes_per_cycle: float = 25.6
    subgrid_pixels: int = 1024  # 32 x 32 tile
    overlap_stages: bool = False  # sensitivity switch: total = max of stages

    def __post_init__(self):
        if self.systolic_dim < 1:
            raise ValueError("systolic_dim must be >= 1")
        if self.grid_cache_bytes % self.cache_line_bytes != 0:
            raise ValueError("grid_cache_bytes must be divisible by cache_line_bytes")
        if self.dram_bytes_per_cycle <= 0 or self.subgrid_pixels < 1:
            raise ValueError("invalid memory configuration")

    @property
    def num_lines(self) -> int:
        return self.grid_cache_bytes // self.cache_line_bytes

    def ceil_transfer_cycles(self, num_bytes: int) -> int:
        """Exact ceil(bytes / dram_bytes_per_cycle) using the decimal value
        of the bandwidth, immune to binary float rounding."""
        frac = _bandwidth_fraction(self.dram_bytes_per_cycle)
        return -((-num_bytes * frac.denominator) // frac.numerator)

    @property
    def miss_cycles(self) -> int:
        return self.dram_fixed_latency_cycles + self.ceil_transfer_cycles(self.cache_line_bytes)

    def resolve_split(self, level_count: int) -> int:
        return self.coarse_level_split if self.coarse_level_split is not None else level_count // 2


@dataclass(frozen=True)
class SimReport:
    total_cycles: int
    encoding_cycles: int
    mlp_cycles: int
    subgrid_prefetch_cycles: int
    dram_bytes: int
    cache_hits: int
    cache_misses: int
    cycles_per_ray: float

    def to_dict(self) -> dict:
        return {
            "total_cycles": self.total_cycles,
            "encoding_cycles": self.encoding_cycles,
            "mlp_cycles": self.mlp_cycles,
            "subgrid_prefetch_cycles": self.subgrid_prefetch_cycles,
            "dram_bytes": self.dram_bytes,
            "cache_hits": self.cache_hits,
            "cache_misses": self.cache_misses,
            "cycles_per_ray": self.cycles_per_ray,
        }


def entry_bytes(features_per_level: int, bits: int) -> int:
    return (features_per_level * bits + 7) // 8


def gemm_cycles(m: int, k: int, n: int, b_act: int, b_w: int, p: int) -> int:
    """Cycles for one M x K x N GEMM on a P x P bit-serial systolic array.

    The serialized operand rate is set by the wider of the two bit widths,
    so lowering only one operand buys nothing.
    """
    if min(m, k, n, b_act, b_w, p) < 1:
        raise ValueError("all gemm_cycles arguments must be >= 1")
    tiles = math.ceil(m / p) * math.ceil(n / p)
    return tiles * (k + 2 * p - 2) * max(b_act, b_w)


class GridCache:
    """Direct-mapped cache state: one stored tag per line slot."""

    def __init__(self, config: HwConfig):
        self.config = config
        self.tags = np.full(config.num_lines, -1, dtype=np.int64)


def cache_access(entry_address: int, cache: GridCache, config: HwConfig) -> bool:
    """Look up one byte address; returns True on hit. A miss installs the line."""
    if entry_address < 0:
        raise ValueError("address must be nonnegative")
    line = entry_address // config.cache_line_bytes
    slot = line % config.num_lines
    tag = line // config.num_lines
    hit = cache.tags[slot] == tag
    cache.tags[slot] = tag
    return bool(hit)


def level_base_lines(trace: AccessTrace, config: HwConfig) -> np.ndarray:
    """First cache-line index of each level's table region.

    Regions are sized for 8-bit entries and aligned to full lines, so bases
    do not depend on the policy under simulation.
    """
    line = config.cache_line_bytes
    bases = np.zeros(trace.level_count, dtype=np.int64)
    offset = 0
    for l in range(trace.level_count):
        bases[l] = offset // line
        region = int(trace.level_entry_counts[l]) * entry_bytes(trace.features_per_level, 8)
        offset += ((region + line - 1) // line) * line
    return bases


def _direct_mapped_counts(line_ids: np.ndarray, num_lines: int, warm_tags: np.ndarray):
    """Hits/misses of a direct-mapped cache over a line-id stream.

    Per-set behavior is independent in a direct-mapped cache, so a stable
    sort by set reduces hit detection to comparing same-set neighbors.
    Returns (hits, misses, final_tags).
    """
    n = len(line_ids)
    final = warm_tags.copy()
    if n == 0:
        return 0, 0, final
    sets = line_ids % num_lines
    tags = line_ids // num_lines
    order = np.argsort(sets, kind="stable")
    ss = sets[order]
    tt = tags[order]
    hit = np.zeros(n, dtype=bool)
    hit[1:] = (ss[1:] == ss[:-1]) & (tt[1:] == tt[:-1])
    first = np.ones(n, dtype=bool)
    first[1:] = ss[1:] != ss[:-1]
    fidx = np.flatnonzero(first)
    hit[fidx] = warm_tags[ss[fidx]] == tt[fidx]
    last = np.ones(n, dtype=bool)
    last[:-1] = ss[1:] != ss[:-1]
    lidx = np.flatnonzero(last)
    final[ss[lidx]] = tt[lidx]
    hits = int(np.count_nonzero(hit))
    return hits, n - hits, final


def _tile_ids(trace: AccessTrace, subgrid_pixels: int) -> np.ndarray:
    """Subgrid id per access record: consecutive runs of subgrid_pixels
    distinct visited pixels form one tile."""
    key = f"tiles:{subgrid_pixels}"
    cached = trace._cache.get(key)
    if cached is None:
        if trace.num_accesses == 0:
            cached = np.empty(0, dtype=np.int64)
        else:
            pix = trace.pixel_ids.astype(np.int64)
            new_pixel = np.ones(len(pix), dtype=np.int64)
            new_pixel[1:] = pix[1:] != pix[:-1]
            ordinal = np.cumsum(new_pixel) - 1
            cached = ordinal // subgrid_pixels
        trace._cache[key] = cached
    return cached


def _tile_touch_counts(trace: AccessTrace, subgrid_pixels: int) -> np.ndarray:
    """(n_tiles, level_count) matrix of distinct entries touched per tile."""
    key = f"touch:{subgrid_pixels}"
    cached = trace._cache.get(key)
    if cached is None:
        tiles = _tile_ids(trace, subgrid_pixels)
        levels = trace.level_count
        if trace.num_accesses == 0 or levels == 0:
            cached = np.zeros((0, max(levels, 1)), dtype=np.int64)[:, :levels]
        else:
            n_tiles = int(tiles.max()) + 1
            combo = (tiles * levels + trace.levels.astype(np.int64)) << 32
            combo |= trace.entry_indices.astype(np.int64)
            unique = np.unique(combo)
            tl = (unique >> 32).astype(np.int64)
            cached = np.bincount(tl, minlength=n_tiles * levels).reshape(n_tiles, levels)
        trace._cache[key] = cached
    return cached


def _coarse_view(trace: AccessTrace, split: int):
    key = f"coarse:{split}"
    cached = trace._cache.get(key)
    if cached is None:
        coarse = trace.levels < split
        cached = (trace.levels[coarse].astype(np.int64), trace.entry_indices[coarse].astype(np.int64))
        trace._cache[key] = cached
    return cached


def _entry_bytes_vector(trace: AccessTrace, hash_bits) -> np.ndarray:
    return np.asarray([entry_bytes(trace.features_per_level, b) for b in hash_bits[:trace.level_count]],
                      dtype=np.int64)


def encoding_stage(trace: AccessTrace, hash_bits, config: HwConfig, cache: GridCache | None = None):
    """Grid-cache simulation over coarse levels plus 1-cycle fine lookups.

    Returns (cycles, hits, misses). When a GridCache is passed, its state
    seeds the run and is updated in place (warm replay)."""
    split = config.resolve_split(trace.level_count)
    levels_c, entries_c = _coarse_view(trace, split)
    eb = _entry_bytes_vector(trace, hash_bits)
    bases = level_base_lines(trace, config)
    if len(levels_c):
        line_ids = bases[levels_c] + (entries_c * eb[levels_c]) // config.cache_line_bytes
    else:
        line_ids = np.empty(0, dtype=np.int64)
    warm = cache.tags if cache is not None else np.full(config.num_lines, -1, dtype=np.int64)
    hits, misses, final = _direct_mapped_counts(line_ids, config.num_lines, warm)
    if cache is not None:
        cache.tags = final
    fine_accesses = trace.num_accesses - len(levels_c)
    cycles = hits + misses * config.miss_cycles + fine_accesses
    return cycles, hits, misses


def prefetch_stage(trace: AccessTrace, hash_bits, config: HwConfig):
    """Subgrid-buffer preload cost: per tile, the transfer time of every
    touched fine-level entry at its policy entry size.

    Returns (cycles, bytes)."""
    split = config.resolve_split(trace.level_count)
    touched = _tile_touch_counts(trace, config.subgrid_pixels)
    if touched.shape[0] == 0 or split >= trace.level_count:
        return 0, 0
    eb = _entry_bytes_vector(trace, hash_bits)
    per_tile_bytes = touched[:, split:] @ eb[split:]
    cycles = sum(config.ceil_transfer_cycles(int(b)) for b in per_tile_bytes)
    return int(cycles), int(per_tile_bytes.sum())


def mlp_stage(trace: AccessTrace, mlp_bits, config: HwConfig) -> int:
    """Sum of bit-serial GEMM cycles over the trace's work descriptors."""
    total = 0
    p = config.systolic_dim
    for layer, m, k, n in zip(trace.gemm_layer_ids, trace.gemm_m, trace.gemm_k, trace.gemm_n):
        w_bits, a_bits = mlp_bits[int(layer)]
        total += gemm_cycles(int(m), int(k), int(n), a_bits, w_bits, p)
    return total


def simulate(trace: AccessTrace, policy: QuantPolicy, config: HwConfig,
             cache: GridCache | None = None) -> SimReport:
    """Full latency report for one policy over one trace.

    Runs cold unless a persistent GridCache is supplied. Deterministic:
    identical (trace, policy, config, cache state) gives identical reports.
    """
    if len(policy.hash_bits) < trace.level_count:
        raise SimulationError(
            f"policy resolves {len(policy.hash_bits)} hash levels, trace has {trace.level_count}")
    if len(policy.mlp_bits) < trace.num_layers:
        raise SimulationError(
            f"policy resolves {len(policy.mlp_bits)} MLP layers, trace references {trace.num_layers}")
    enc_cycles, hits, misses = encoding_stage(trace, policy.hash_bits, config, cache)
    pre_cycles, pre_bytes = prefetch_stage(trace, policy.hash_bits, config)
    mlp_cycles = mlp_stage(trace, policy.mlp_bits, config)
    stages = (enc_cycles, mlp_cycles, pre_cycles)
    total = max(stages) if config.overlap_stages else sum(stages)
    dram = misses * config.cache_line_bytes + pre_bytes
    per_ray = total / trace.pixel_count if trace.pixel_count else 0.0
    return SimReport(
        total_cycles=int(total),
        encoding_cycles=int(enc_cycles),
        mlp_cycles=int(mlp_cycles),
        subgrid_prefetch_cycles=int(pre_cycles),
        dram_bytes=int(dram),
        cache_hits=int(hits),
        cache_misses=int(misses),
        cycles_per_ray=float(per_ray),
    )


_baseline_memo: dict = {}


def uniform_policy_for(trace: AccessTrace, bits: int) -> QuantPolicy:
    return QuantPolicy(hash_bits=(bits,) * trace.level_count,
                       mlp_bits=((bits, bits),) * max(trace.num_layers, 1))


def baseline_cost(trace: AccessTrace, config: HwConfig) -> int:
    """Total cycles of the uniform 8-bit policy, memoized per (trace, config)."""
    key = (trace.fingerprint(), config)
    cached = _baseline_memo.get(key)
    if cached is None:
        cached = simulate(trace, uniform_policy_for(trace, 8), config).total_cycles
        _baseline_memo[key] = cached
    return cached
