"""Measurement: exact distributed shot sampling, the differentiable Gaussian approximation,
and all-Z expectations.

Exact sampling walks a binary tree over canonical basis-index bits (qubit 0 first): each
node splits its shot count between its two children with one binomial draw. The top
log2(world) levels are the rank groups, so the first draws give the multinomial group
totals and the rest are the within-group conditional draws. Node randomness is keyed by
(seed, level, chunk of prefixes) and subtree masses are summed pairwise from the leaves,
so counts do not depend on the world size.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch
from scipy import special, stats

import autodiff
from dist import (
    Communicator,
    LocalComm,
    all_gather_vec,
    exchange_sharded,
    rank_rng,
    reduce_for_shards,
    reduce_to_replica,
)
from statevec import QubitLayout, StateVector, relabel, ungroup

if TYPE_CHECKING:
    from autodiff import Tape

logger = logging.getLogger(__name__)

MODES = ("analytic", "exact", "approx")
NORMALIZATION_TOLERANCE = 1e-9
DEGENERATE_TOLERANCE = 1e-12
_CHUNK_BITS = 10


class SamplingError(ValueError):
    """Invalid shots/mode request or malformed probabilities."""


@dataclass(frozen=True)
class ProbShard:
    """Basis-state probabilities owned by one rank, in its physical local order."""

    p_local: torch.Tensor
    rank: int
    world: int
    layout: QubitLayout

    @property
    def offset(self) -> int:
        return self.rank * self.p_local.shape[-1]


@dataclass(frozen=True)
class ShotCounts:
    counts: torch.Tensor
    shots: int
    exact: bool = True
    offset: int = 0

    def to_csv(self, path: Path) -> Path:
        """Rows (batch_index, basis_index, count); zero cells are omitted."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        values = self.counts.detach().cpu().numpy()
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["batch_index", "basis_index", "count"])
            for b, i in zip(*np.nonzero(values)):
                value = values[b, i]
                writer.writerow(
                    [int(b), self.offset + int(i), int(value) if self.exact else repr(float(value))]
                )
        return path


@dataclass(frozen=True)
class GaussianFactor:
    d: torch.Tensor
    u: torch.Tensor
    v: torch.Tensor
    z: torch.Tensor | None = None

    def effective_factor(self) -> torch.Tensor:
        """S = (I - 2 v v^T) with its last column zeroed, so S S^T = I - u u^T."""
        k = self.u.shape[-1]
        eye = torch.eye(k, dtype=self.u.dtype)
        reflector = eye - 2 * self.v.unsqueeze(-1) * self.v.unsqueeze(-2)
        projector = eye.clone()
        projector[-1, -1] = 0.0
        return reflector @ projector


def probabilities(state: StateVector) -> ProbShard:
    flat = state.data.reshape(state.batch_size, -1, 2)
    p_local = flat[..., 0] ** 2 + flat[..., 1] ** 2
    return ProbShard(p_local, state.comm.rank, state.comm.world, state.layout)


def group_probs(shard: ProbShard, comm: Communicator) -> torch.Tensor:
    """(batch, world) group masses q_j, identical on every rank."""
    return all_gather_vec(comm, shard.p_local.detach().sum(dim=-1, keepdim=True))


def multinomial_pmf(x, n: int, p) -> float:
    """n! / prod(x_i!) * prod(p_i^x_i), evaluated in log space."""
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if x.shape != p.shape:
        raise SamplingError(f"Counts shape {x.shape} does not match probabilities {p.shape}")
    if np.any(x < 0) or int(round(x.sum())) != n:
        raise SamplingError(f"Counts must be non-negative and sum to n={n}, got {x.sum():g}")
    log_pmf = special.gammaln(n + 1) - special.gammaln(x + 1).sum() + special.xlogy(x, p).sum()
    return float(np.exp(log_pmf))


def _canonical_sampling_state(state: StateVector) -> StateVector:
    """Shard qubits 0..s-1 in rank-bit order and put local qubits in canonical order."""
    state = state.with_data(state.data.detach())
    shard_bits = len(state.layout.sharded)
    wanted = tuple(range(shard_bits))

    for qubit in wanted:
        if qubit in state.layout.sharded:
            continue
        donor = next(s for s in state.layout.sharded if s not in wanted)
        state = ungroup(state, [qubit])
        state = exchange_sharded(state, donor, qubit)

    for position in range(shard_bits):
        current = state.layout.sharded[position]
        if current == position:
            continue
        spare = min(q for q in state.layout.local_qubits)
        state = ungroup(state, [spare])
        state = exchange_sharded(state, current, spare)
        state = exchange_sharded(state, position, current)
        state = exchange_sharded(state, spare, position)

    local = tuple(range(shard_bits, state.num_qubits))
    return relabel(state, QubitLayout((local,), wanted))


def _pairwise_levels(leaves: np.ndarray) -> list[np.ndarray]:
    """levels[d] has shape (batch, 2**d); each entry is the sum of its two children."""
    levels = [leaves]
    while levels[-1].shape[-1] > 1:
        current = levels[-1]
        levels.append(current[:, 0::2] + current[:, 1::2])
    return levels[::-1]


def _level_uniforms(seed: int, level: int, start: int, count: int, batch: int) -> np.ndarray:
    chunk = 1 << min(level, _CHUNK_BITS)
    first, last = start // chunk, (start + count - 1) // chunk
    table = np.concatenate(
        [
            np.random.default_rng([seed, level, block]).random((batch, chunk))
            for block in range(first, last + 1)
        ],
        axis=1,
    )
    offset = start - first * chunk
    return table[:, offset : offset + count]


def _split(counts: np.ndarray, masses: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Binomial split of every node's count between its children (masses interleaved)."""
    m0, m1 = masses[:, 0::2], masses[:, 1::2]
    total = m0 + m1
    ratio = np.clip(np.divide(m0, total, out=np.zeros_like(m0), where=total > 0), 0.0, 1.0)
    with np.errstate(invalid="ignore"):
        draw = stats.binom.ppf(uniforms, counts, ratio)
    left = np.where(ratio >= 1.0, counts, np.where(ratio <= 0.0, 0, np.nan_to_num(draw)))
    left = np.clip(left, 0, counts).astype(np.int64)
    return np.stack((left, counts - left), axis=-1).reshape(counts.shape[0], -1)


def sample_exact(
    state: StateVector,
    n: int,
    seed: int,
    comm: Communicator | None = None,
    tape: "Tape | None" = None,
) -> ShotCounts:
    """Collective: global counts (batch x 2**q, canonical order) on every rank; sums to n."""
    if n <= 0:
        raise SamplingError(f"Exact sampling needs n >= 1 shots, got {n}")
    comm = comm or state.comm
    tape = tape or autodiff.active_tape()
    if tape is not None:
        tape.record_break("sample_exact")

    seed = int(comm.broadcast(int(seed), src=0))
    state = _canonical_sampling_state(state)
    shard = probabilities(state)
    p_local = shard.p_local.to(torch.float64).numpy()
    batch, local_size = p_local.shape
    shard_bits = len(state.layout.sharded)
    local_bits = local_size.bit_length() - 1

    local_levels = _pairwise_levels(p_local)
    group_mass = all_gather_vec(comm, torch.from_numpy(local_levels[0].copy()))
    top_levels = _pairwise_levels(group_mass.numpy())

    counts = np.full((batch, 1), n, dtype=np.int64)
    for level in range(shard_bits):
        uniforms = _level_uniforms(seed, level, 0, 1 << level, batch)
        counts = _split(counts, top_levels[level + 1], uniforms)
    counts = counts[:, comm.rank : comm.rank + 1]

    for depth in range(local_bits):
        level = shard_bits + depth
        start = comm.rank << depth
        uniforms = _level_uniforms(seed, level, start, 1 << depth, batch)
        counts = _split(counts, local_levels[depth + 1], uniforms)

    full = all_gather_vec(comm, torch.from_numpy(counts))
    logger.debug("sample_exact n=%d batch=%d world=%d", n, batch, comm.world)
    return ShotCounts(full, n, exact=True)


def _unit_root(p: torch.Tensor) -> torch.Tensor:
    tiny = torch.finfo(p.dtype).tiny
    return torch.where(p > 0, torch.sqrt(torch.clamp(p, min=tiny)), torch.zeros_like(p))


def gaussian_factor(p: torch.Tensor, z: torch.Tensor | None = None) -> GaussianFactor:
    """Factor pieces for one probability vector (or a batch of them) held on one rank."""
    p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
    total = p.sum(dim=-1)
    if bool((total - 1).abs().max() > NORMALIZATION_TOLERANCE) or bool((p < 0).any()):
        raise SamplingError(f"Probabilities must be non-negative and sum to 1, got sum {total}")
    u = _unit_root(p)
    direction = -u.clone()
    direction[..., -1] += 1.0
    norm = direction.norm(dim=-1, keepdim=True)
    degenerate = (1.0 - u[..., -1:]) < DEGENERATE_TOLERANCE
    v = torch.where(degenerate, torch.zeros_like(direction), direction / torch.where(degenerate, torch.ones_like(norm), norm))
    return GaussianFactor(d=u, u=u, v=v, z=z)


def sample_gaussian(
    p: torch.Tensor,
    n: int,
    rng: np.random.Generator | None = None,
    comm: Communicator | None = None,
    z: torch.Tensor | None = None,
) -> ShotCounts:
    """y = n p + sqrt(n) D S z, differentiable in p; never clipped or rounded.

    ``p`` is this rank's slice (batch x local); the global last basis state lives on
    the last rank. ``z`` is drawn from ``rng`` unless given; its global last entry is 0.
    """
    if n < 1:
        raise SamplingError(f"Gaussian approximation needs n >= 1 shots, got {n}")
    comm = comm or LocalComm()
    squeeze = p.dim() == 1
    if squeeze:
        p = p.unsqueeze(0)
    is_last = comm.rank == comm.world - 1

    if z is None:
        if rng is None:
            raise SamplingError("sample_gaussian needs either rng or z")
        z = torch.from_numpy(rng.standard_normal(tuple(p.shape)))
    z = z.to(p.dtype).reshape(p.shape).clone()
    if is_last:
        z[:, -1] = 0.0

    u = _unit_root(p)
    u_last = u[:, -1] if is_last else torch.zeros(p.shape[0], dtype=p.dtype)
    u_dot_z = reduce_for_shards((u * z).sum(dim=-1), comm)
    u_last = reduce_for_shards(u_last, comm)
    gap = 1.0 - u_last
    degenerate = gap < DEGENERATE_TOLERANCE
    coef = torch.where(degenerate, torch.zeros_like(gap), u_dot_z / torch.where(degenerate, torch.ones_like(gap), gap))

    e_last = torch.zeros_like(p)
    if is_last:
        e_last[:, -1] = 1.0
    sz = z + (e_last - u) * coef.unsqueeze(-1)
    y = n * p + (n**0.5) * u * sz
    if squeeze:
        y = y.squeeze(0)
    return ShotCounts(y, n, exact=False, offset=comm.rank * p.shape[-1])


def _z_from_weights(
    weights: torch.Tensor, local_qubits: tuple[int, ...], sharded: tuple[int, ...], rank: int
) -> torch.Tensor:
    """Per-qubit Σ_b (-1)^{b_i} w_b over this rank's weights, canonical qubit order."""
    batch = weights.shape[0]
    local_bits = len(local_qubits)
    columns: dict[int, torch.Tensor] = {}
    for position, qubit in enumerate(local_qubits):
        marginal = weights.reshape(batch, 1 << position, 2, 1 << (local_bits - position - 1)).sum(
            dim=(1, 3)
        )
        columns[qubit] = marginal[:, 0] - marginal[:, 1]
    total = weights.sum(dim=-1)
    for index, qubit in enumerate(sharded):
        bit = (rank >> (len(sharded) - 1 - index)) & 1
        columns[qubit] = total if bit == 0 else -total
    return torch.stack([columns[q] for q in range(len(local_qubits) + len(sharded))], dim=-1)


def z_from_counts(counts: ShotCounts, num_qubits: int) -> torch.Tensor:
    """Z expectations from global canonical-order counts (empirical frequencies)."""
    frequencies = counts.counts.to(torch.float64) / counts.shots
    return _z_from_weights(frequencies, tuple(range(num_qubits)), (), 0)


def resolve_mode(shots: int, mode: str | None, training: bool) -> str:
    """Unset modes follow the shot count: analytic at 0, otherwise exact (approx when training)."""
    if shots < 0:
        raise SamplingError(f"shots must be >= 0, got {shots}")
    if mode is None:
        mode = "analytic" if shots == 0 else ("approx" if training else "exact")
    if mode not in MODES:
        raise SamplingError(f"Unknown measurement mode '{mode}' (valid: {', '.join(MODES)})")
    if mode == "analytic" and shots > 0:
        raise SamplingError("Analytic measurement takes shots=0")
    if mode != "analytic" and shots < 1:
        raise SamplingError(f"Mode '{mode}' needs shots >= 1")
    return mode


def measure_allZ(
    state: StateVector,
    shots: int = 0,
    mode: str | None = None,
    seed: int = 0,
    training: bool = False,
    tape: "Tape | None" = None,
    z: torch.Tensor | None = None,
) -> torch.Tensor:
    """(batch x q) Z expectations, identical on every rank.

    shots=0 selects analytic; with shots the default is approx when training, else exact.
    """
    mode = resolve_mode(shots, mode, training)
    comm = state.comm
    layout = state.layout

    if mode == "exact":
        counts = sample_exact(state, shots, seed, comm, tape=tape)
        return z_from_counts(counts, state.num_qubits).to(state.data.dtype)

    p_local = probabilities(state).p_local
    if mode == "approx":
        rng = rank_rng(comm, seed) if z is None else None
        draw = sample_gaussian(p_local, shots, rng=rng, comm=comm, z=z)
        weights = draw.counts / shots
    else:
        weights = p_local
    local = _z_from_weights(weights, layout.local_qubits, layout.sharded, comm.rank)
    return reduce_to_replica(local, comm)
