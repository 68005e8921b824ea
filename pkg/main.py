"""CLI orquestador: run, train y profile sobre el simulador distribuido."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Callable

import torch
from jinja2 import Environment, FileSystemLoader

import config
import state
from autodiff import NoGradientPathError, ReplayDivergenceError, TapeError
from circuit import CircuitError, CircuitSpec, load_circuit
from dist import CommError, Communicator, ShardRoleError, comm_from_env, run_ranks
from gates import GateArityError, GateParameterError, GateRegistrationError, UnknownGateError
from sampling import SamplingError
from statevec import LayoutError, NotUnitaryError
from training import (
    MemoryBudgetError,
    RunReport,
    StepMetrics,
    preflight,
    profile_point,
    run_circuit,
    sweep_points,
    train_circuit,
    write_loss_trace,
    write_measurements_csv,
    write_metrics_jsonl,
)

logger = logging.getLogger(__name__)

EXPECTED_ERRORS = (
    CircuitError,
    CommError,
    LayoutError,
    NotUnitaryError,
    SamplingError,
    ShardRoleError,
    NoGradientPathError,
    ReplayDivergenceError,
    TapeError,
    MemoryBudgetError,
    GateRegistrationError,
    UnknownGateError,
    GateArityError,
    GateParameterError,
    FileNotFoundError,
    ValueError,
)


def _launch(ranks: int, fn: Callable[[Communicator], Any]) -> list[Any]:
    """fn on every rank: this process only under a launcher, else the in-process harness."""
    comm = comm_from_env()
    if comm is None:
        return run_ranks(ranks, fn, timeout=config.QSIM_COLLECTIVE_TIMEOUT)
    if ranks != comm.world:
        logger.warning(
            "--ranks=%d ignorado: el lanzador define WORLD_SIZE=%d", ranks, comm.world
        )
    try:
        return [fn(comm)]
    finally:
        comm.close()


def _metrics_path(out: Path, rank: int) -> Path:
    return out / f"metrics.rank{rank}.jsonl"


def _write_rank_outputs(report: RunReport, out: Path, loss_trace: bool) -> None:
    metrics = _metrics_path(out, report.rank)
    metrics.unlink(missing_ok=True)
    write_metrics_jsonl(metrics, report.steps)
    if report.rank != 0:
        return
    if report.expectations is not None:
        write_measurements_csv(out / "measurements.csv", report.expectations)
    if report.counts is not None:
        report.counts.to_csv(out / "counts.csv")
    if loss_trace:
        write_loss_trace(out / "loss_trace.csv", report.loss_trace)


def _load(path: str, seed: int, ansatz_init: str | None = None) -> CircuitSpec:
    circuit_path = Path(path)
    if not circuit_path.exists() and (config.CIRCUITS_DIR / path).exists():
        circuit_path = config.CIRCUITS_DIR / path
    return load_circuit(circuit_path, seed=seed, ansatz_init=ansatz_init)


def cmd_run(args: argparse.Namespace) -> list[RunReport]:
    spec = _load(args.circuit, args.seed)
    out = Path(args.out)
    logger.info(
        "run: %s (q=%d, %d ops) en %d rango(s)", args.circuit, spec.num_qubits, len(spec.ops), args.ranks
    )

    def on_rank(comm: Communicator) -> RunReport:
        report = run_circuit(
            comm,
            spec,
            args.seed,
            shots=args.shots,
            mode=args.measure_mode,
            precision=args.precision,
            rank_cap=args.rank_cap,
            dump_path=Path(args.dump) if args.dump else None,
        )
        _write_rank_outputs(report, out, loss_trace=False)
        return report

    reports = _launch(args.ranks, on_rank)
    logger.info("Resultados escritos en %s", out)
    return reports


def cmd_train(args: argparse.Namespace) -> list[RunReport]:
    spec = _load(args.circuit, args.seed, args.ansatz_init)
    if args.batch and args.batch != spec.batch:
        if spec.inputs is not None:
            logger.warning(
                "--batch=%d descarta las entradas del documento (batch=%d)", args.batch, spec.batch
            )
        spec = dataclasses.replace(spec, batch=args.batch, inputs=None)
    out = Path(args.out)
    logger.info(
        "train: %s (q=%d, batch=%d, %d iteraciones) en %d rango(s)",
        args.circuit, spec.num_qubits, spec.batch, args.iters, args.ranks,
    )

    def on_rank(comm: Communicator) -> RunReport:
        report = train_circuit(
            comm,
            spec,
            args.iters,
            args.seed,
            lr=args.lr,
            shots=args.shots,
            mode=args.measure_mode,
            precision=args.precision,
            rank_cap=args.rank_cap,
            invertible=False if args.no_invertible else None,
        )
        _write_rank_outputs(report, out, loss_trace=True)
        return report

    reports = _launch(args.ranks, on_rank)
    trace = reports[0].loss_trace
    logger.info("Loss inicial=%.10g final=%.10g", trace[0], trace[-1])
    return reports


def _profile_records(comm: Communicator, metrics: StepMetrics) -> list[dict]:
    """Every rank's step metrics, available on every rank."""
    local = torch.tensor(
        [metrics.walltime_s, metrics.a2a_s, metrics.a2a_bytes, metrics.peak_bytes],
        dtype=torch.float64,
    )
    records = []
    for rank, values in enumerate(comm.all_gather(local)):
        walltime_s, a2a_s, a2a_bytes, peak_bytes = values.tolist()
        records.append(
            dataclasses.asdict(
                StepMetrics(
                    rank=rank,
                    step=metrics.step,
                    walltime_s=walltime_s,
                    a2a_s=a2a_s,
                    a2a_bytes=int(a2a_bytes),
                    peak_bytes=int(peak_bytes),
                    loss=metrics.loss,
                )
            )
        )
    return records


def _summary_row(qubits: int, world: int, records: list[dict]) -> dict:
    return {
        "qubits": qubits,
        "world": world,
        "walltime_s": max(r["walltime_s"] for r in records),
        "a2a_s": max(r["a2a_s"] for r in records),
        "a2a_bytes": sum(r["a2a_bytes"] for r in records),
        "peak_bytes": max(r["peak_bytes"] for r in records),
        "loss": records[0]["loss"],
    }


def cmd_profile(args: argparse.Namespace) -> list[dict]:
    precision = args.precision or config.QSIM_PRECISION
    batch = args.batch or config.QSIM_PROFILE_BATCH
    depth = args.depth or config.QSIM_PROFILE_DEPTH
    points = sweep_points(args.mode, args.qubits_min, args.qubits_max, args.ranks)

    is_root = True
    launched = comm_from_env()
    if launched is not None:
        world, is_root = launched.world, launched.rank == 0
        launched.close()
        dropped = [p for p in points if p[1] != world]
        if dropped:
            logger.warning(
                "Bajo el lanzador solo se miden puntos con world=%d; se omiten %d", world, len(dropped)
            )
        points = [p for p in points if p[1] == world]

    for qubits, _ in points:
        preflight(qubits, batch, precision)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jsonl = out / f"profile_{args.mode}.jsonl"
    if is_root:
        jsonl.unlink(missing_ok=True)
    rows: list[dict] = []

    for qubits, world in points:
        key = dict(
            mode=args.mode, qubits=qubits, world=world, batch=batch,
            depth=depth, seed=args.seed, precision=precision,
        )
        records = state.get_profile_point(**key) if args.resume else None
        if records is not None:
            logger.info("Punto ya medido, se reutiliza: q=%d world=%d", qubits, world)
        else:

            def on_rank(comm: Communicator) -> list[dict]:
                metrics, _ = profile_point(
                    comm, qubits, batch, depth, args.seed, precision, args.rank_cap,
                    invertible=False if args.no_invertible else None,
                )
                return _profile_records(comm, metrics)

            records = _launch(world, on_rank)[0]
            if is_root:
                state.save_profile_point(**key, records=records)

        rows.append(_summary_row(qubits, world, records))
        if not is_root:
            continue
        steps = [StepMetrics(**record) for record in records]
        write_metrics_jsonl(
            jsonl, steps, qubits=qubits, world=world, mode=args.mode, batch=batch, depth=depth
        )

    if not is_root:
        return rows
    env = Environment(loader=FileSystemLoader(config.TEMPLATES_DIR))
    summary = env.get_template("profile_summary.md.j2").render(
        mode=args.mode, batch=batch, depth=depth, precision=precision, seed=args.seed, rows=rows
    )
    (out / f"profile_{args.mode}.md").write_text(summary, encoding="utf-8")
    logger.info("Perfil %s: %d puntos escritos en %s", args.mode, len(rows), jsonl)
    return rows


def _rank_list(value: str) -> list[int]:
    try:
        ranks = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid rank list '{value}'") from None
    if not ranks:
        raise argparse.ArgumentTypeError("rank list is empty")
    return ranks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Distributed differentiable statevector simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=config.QSIM_SEED)
        p.add_argument("--precision", choices=config.VALID_PRECISIONS, default=None)
        p.add_argument("--rank-cap", type=int, default=None, help="Max tensor rank per shard")
        p.add_argument("--out", default=str(config.OUTPUT_DIR), help="Output directory")

    run = sub.add_parser("run", help="Execute a circuit and measure all-Z")
    run.add_argument("circuit", help="YAML circuit document")
    run.add_argument("--ranks", type=int, default=config.QSIM_RANKS)
    run.add_argument("--shots", type=int, default=None)
    run.add_argument("--measure-mode", choices=config.VALID_MEASURE_MODES, default=None)
    run.add_argument("--dump", default="", help="Write the dense final state (SVEC format)")
    common(run)
    run.set_defaults(handler=cmd_run)

    train = sub.add_parser("train", help="Optimize encoder inputs with Adam")
    train.add_argument("circuit", help="YAML circuit document")
    train.add_argument("--iters", type=int, default=10)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--batch", type=int, default=0, help="Override the document batch size")
    train.add_argument("--ranks", type=int, default=config.QSIM_RANKS)
    train.add_argument("--shots", type=int, default=None)
    train.add_argument("--measure-mode", choices=("analytic", "approx", "exact"), default=None)
    train.add_argument("--ansatz-init", choices=config.VALID_ANSATZ_INITS, default=None)
    train.add_argument("--no-invertible", action="store_true", help="Store activations instead")
    common(train)
    train.set_defaults(handler=cmd_train)

    profile = sub.add_parser("profile", help="Strong/weak scaling sweep of the ladder circuit")
    profile.add_argument("--qubits-min", type=int, required=True)
    profile.add_argument("--qubits-max", type=int, required=True)
    profile.add_argument("--ranks", type=_rank_list, default=[1, 2, 4], help="e.g. 1,2,4")
    profile.add_argument("--mode", choices=("strong", "weak"), default="strong")
    profile.add_argument("--batch", type=int, default=0)
    profile.add_argument("--depth", type=int, default=0)
    profile.add_argument("--resume", action="store_true", help="Skip points stored in SQLite")
    profile.add_argument("--no-invertible", action="store_true")
    common(profile)
    profile.set_defaults(handler=cmd_profile)
    return parser


def main(argv: list[str] | None = None) -> int:
    config.setup_logging()
    config.validate()
    args = build_parser().parse_args(argv)
    logger.info("Iniciando qsim %s", args.command)

    try:
        args.handler(args)
    except EXPECTED_ERRORS as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 2
    except Exception:
        logger.exception("Error fatal en %s", args.command)
        return 1
    logger.info("Comando %s finalizado.", args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
