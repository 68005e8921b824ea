"""Per-rank drivers for run, train and profile, plus their output records."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import torch

import config
from autodiff import AdamState, NoGradientPathError, Tape, adam_step, execute, gradients
from circuit import CircuitError, CircuitProgram, CircuitSpec, ladder_training_spec
from dist import CommMetrics, Communicator, read_metrics
from sampling import ShotCounts, measure_allZ, resolve_mode, sample_exact, z_from_counts
from statevec import init_state, log2_world, to_dense, torch_dtype, write_dense_dump

logger = logging.getLogger(__name__)


class MemoryBudgetError(RuntimeError):
    """A profile point would not fit the configured single-machine budget."""


@dataclass
class StepMetrics:
    rank: int
    step: int
    walltime_s: float
    a2a_s: float
    a2a_bytes: int
    peak_bytes: int
    loss: float | None = None

    def to_json(self, **extra: Any) -> str:
        return json.dumps({**asdict(self), **extra})


@dataclass
class RunReport:
    rank: int
    world: int
    seed: int
    steps: list[StepMetrics] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)
    expectations: torch.Tensor | None = None
    counts: ShotCounts | None = None


def _step_metrics(
    comm: Communicator, step: int, start: float, before: CommMetrics, loss: float | None
) -> StepMetrics:
    after = read_metrics(comm)
    return StepMetrics(
        rank=comm.rank,
        step=step,
        walltime_s=time.perf_counter() - start,
        a2a_s=after.all_to_all_seconds - before.all_to_all_seconds,
        a2a_bytes=after.all_to_all_bytes - before.all_to_all_bytes,
        peak_bytes=after.peak_local_bytes,
        loss=loss,
    )


def run_circuit(
    comm: Communicator,
    spec: CircuitSpec,
    seed: int,
    shots: int | None = None,
    mode: str | None = None,
    precision: str | None = None,
    rank_cap: int | None = None,
    dump_path: Path | None = None,
) -> RunReport:
    """Forward pass plus measurement; no tape."""
    shots = spec.measurement.shots if shots is None else shots
    # the document's analytic default gives way to shots from the command line
    if mode is None and not (spec.measurement.mode == "analytic" and shots):
        mode = spec.measurement.mode
    mode = resolve_mode(shots, mode, training=False)
    start = time.perf_counter()
    before = read_metrics(comm)

    program = CircuitProgram(spec)
    state = init_state(spec.num_qubits, spec.batch, comm, precision, rank_cap)
    with torch.no_grad():
        state = program(state, program.initial_inputs(seed), program.thetas)
        counts = None
        if mode == "exact":
            counts = sample_exact(state, shots, seed, comm)
            expectations = z_from_counts(counts, spec.num_qubits)
        else:
            expectations = measure_allZ(state, shots, mode, seed=seed)
        if dump_path is not None:
            dense = to_dense(state)
            if comm.rank == 0:
                write_dense_dump(dump_path, dense)

    report = RunReport(comm.rank, comm.world, seed, expectations=expectations, counts=counts)
    report.steps.append(_step_metrics(comm, 0, start, before, None))
    logger.info(
        "run rank=%d/%d q=%d modo=%s shots=%d en %.3fs",
        comm.rank, comm.world, spec.num_qubits, mode, shots, report.steps[-1].walltime_s,
    )
    return report


def _loss_step(
    comm: Communicator,
    program: CircuitProgram,
    inputs: torch.Tensor,
    thetas: torch.Tensor,
    shots: int,
    mode: str,
    seed: int,
    precision: str | None,
    rank_cap: int | None,
    invertible: bool,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """One forward-backward pass; returns (loss, d_inputs, expectations)."""
    spec = program.spec
    features = inputs.detach().clone().requires_grad_(True)
    tape = Tape(invertible=invertible)
    initial = init_state(spec.num_qubits, spec.batch, comm, precision, rank_cap)
    state = execute(initial, program, features, thetas, tape)
    expectations = measure_allZ(state, shots, mode, seed=seed, training=True, tape=tape)
    loss = expectations.abs().sum()
    (grad,) = gradients(loss, [features], tape)
    if grad is None:
        raise NoGradientPathError("Loss does not depend on the encoder inputs")
    return loss.detach(), grad, expectations.detach()


def _training_mode(spec: CircuitSpec, shots: int | None, mode: str | None) -> tuple[int, str]:
    shots = spec.measurement.shots if shots is None else shots
    if mode is None and not (spec.measurement.mode == "analytic" and shots):
        mode = spec.measurement.mode
    if mode == "exact":
        raise NoGradientPathError(
            "Exact sampling is not differentiable; train with analytic or approx measurement"
        )
    return shots, resolve_mode(shots, mode, training=True)


def train_circuit(
    comm: Communicator,
    spec: CircuitSpec,
    iters: int,
    seed: int,
    lr: float | None = None,
    shots: int | None = None,
    mode: str | None = None,
    precision: str | None = None,
    rank_cap: int | None = None,
    invertible: bool | None = None,
) -> RunReport:
    """Adam on the encoder inputs; the loss is Σ|⟨Z⟩| over batch and qubits."""
    shots, mode = _training_mode(spec, shots, mode)
    if spec.features == 0 or not any(op.input_idx is not None for op in spec.ops):
        raise CircuitError("training optimizes encoder inputs, but the circuit binds none")
    if iters < 0:
        raise ValueError(f"iters must be >= 0, got {iters}")
    invertible = config.QSIM_INVERTIBLE if invertible is None else invertible

    program = CircuitProgram(spec)
    dtype = torch_dtype(precision or config.QSIM_PRECISION)
    inputs = program.initial_inputs(seed).to(dtype)
    thetas = program.thetas.to(dtype)
    adam = AdamState(lr=lr or config.ADAM_LR)
    report = RunReport(comm.rank, comm.world, seed)

    for step in range(max(iters, 1)):
        start = time.perf_counter()
        before = read_metrics(comm)
        loss, grad, expectations = _loss_step(
            comm, program, inputs, thetas, shots, mode, seed + step,
            precision, rank_cap, invertible,
        )
        if iters > 0:
            (inputs,) = adam_step([inputs], [grad], adam)
        value = float(loss)
        report.loss_trace.append(value)
        report.steps.append(_step_metrics(comm, step, start, before, value))
        report.expectations = expectations
        logger.info("train rank=%d paso=%d loss=%.10g", comm.rank, step, value)
    return report


def memory_estimate_bytes(num_qubits: int, batch: int, precision: str | None = None) -> int:
    """Full state, gradient and one recomputed input, all at (re, im) width."""
    itemsize = torch.empty((), dtype=torch_dtype(precision or config.QSIM_PRECISION)).element_size()
    return (1 << num_qubits) * 2 * itemsize * batch * 3


def preflight(
    num_qubits: int,
    batch: int,
    precision: str | None = None,
    budget_gb: float | None = None,
    max_qubits: int | None = None,
) -> int:
    budget_gb = config.QSIM_MEMORY_BUDGET_GB if budget_gb is None else budget_gb
    max_qubits = config.QSIM_PROFILE_MAX_QUBITS if max_qubits is None else max_qubits
    estimate = memory_estimate_bytes(num_qubits, batch, precision)
    if estimate > budget_gb * 1024**3:
        raise MemoryBudgetError(
            f"q={num_qubits} batch={batch} needs ~{estimate / 1024**3:.2f} GB "
            f"({estimate} bytes), budget is {budget_gb:g} GB"
        )
    if num_qubits > max_qubits:
        raise MemoryBudgetError(
            f"q={num_qubits} exceeds the desk-scale limit of {max_qubits} qubits "
            f"(estimate {estimate / 1024**3:.2f} GB)"
        )
    return estimate


def sweep_points(
    mode: str, qubits_min: int, qubits_max: int, ranks: list[int]
) -> list[tuple[int, int]]:
    """(qubits, world) grid: strong keeps q fixed per world, weak adds a qubit per doubling."""
    if qubits_min > qubits_max:
        raise ValueError(f"qubits-min {qubits_min} > qubits-max {qubits_max}")
    for world in ranks:
        log2_world(world)
    if mode == "strong":
        return [(q, world) for q in range(qubits_min, qubits_max + 1) for world in ranks]
    if mode == "weak":
        base = min(ranks)
        return [
            (q + log2_world(world) - log2_world(base), world)
            for q in range(qubits_min, qubits_max + 1)
            for world in sorted(ranks)
        ]
    raise ValueError(f"Unknown sweep mode '{mode}' (valid: strong, weak)")


def profile_point(
    comm: Communicator,
    num_qubits: int,
    batch: int,
    depth: int,
    seed: int,
    precision: str | None = None,
    rank_cap: int | None = None,
    invertible: bool | None = None,
) -> tuple[StepMetrics, torch.Tensor]:
    """One warmup step, then one measured forward-backward step of the ladder circuit."""
    invertible = config.QSIM_INVERTIBLE if invertible is None else invertible
    spec = ladder_training_spec(num_qubits, batch, depth, seed)
    program = CircuitProgram(spec)
    dtype = torch_dtype(precision or config.QSIM_PRECISION)
    inputs = program.initial_inputs(seed).to(dtype)
    thetas = program.thetas.to(dtype)

    _loss_step(comm, program, inputs, thetas, 0, "analytic", seed, precision, rank_cap, invertible)
    before = read_metrics(comm)
    start = time.perf_counter()
    loss, _, expectations = _loss_step(
        comm, program, inputs, thetas, 0, "analytic", seed, precision, rank_cap, invertible
    )
    metrics = _step_metrics(comm, 1, start, before, float(loss))
    logger.info(
        "profile rank=%d/%d q=%d: %.3fs (a2a %.3fs, %d bytes)",
        comm.rank, comm.world, num_qubits, metrics.walltime_s, metrics.a2a_s, metrics.a2a_bytes,
    )
    return metrics, expectations


def write_measurements_csv(path: Path, expectations: torch.Tensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = expectations.detach().to(torch.float64).cpu().tolist()
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch_index", "qubit", "expectation"])
        for b, row in enumerate(values):
            for qubit, value in enumerate(row):
                writer.writerow([b, qubit, f"{value:.17g}"])
    return path


def write_loss_trace(path: Path, loss_trace: list[float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for step, value in enumerate(loss_trace):
            writer.writerow([step, f"{value:.17g}"])
    return path


def write_metrics_jsonl(path: Path, steps: list[StepMetrics], **extra: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        for step in steps:
            fh.write(step.to_json(**extra) + "\n")
    return path
