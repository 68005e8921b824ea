"""Circuit document loading, validation and expansion (encoder, ops, ladder ansatz)."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import yaml

import config
from gates import REGISTRY, GateRegistry, UnknownGateError, apply_gate
from statevec import StateVector

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = (
    "num_qubits",
    "batch",
    "features",
    "inputs",
    "encoder",
    "ops",
    "ansatz",
    "measurement",
)
_ANGLE_RE = re.compile(r"^\s*(-?)\s*(\d*\.?\d*)\s*\*?\s*pi\s*(?:/\s*(\d+\.?\d*))?\s*$")


class CircuitError(ValueError):
    """Invalid circuit document; carries the 1-based line and the offending field."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.message = message
        self.line = line
        self.field = field
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field:
            prefix += f"{field}: "
        super().__init__(prefix + message)


@dataclass(frozen=True)
class OpSpec:
    gate: str
    wires: tuple[int, ...]
    theta: float | None = None
    input_idx: int | None = None


@dataclass(frozen=True)
class MeasurementSpec:
    mode: str = "analytic"
    shots: int = 0


@dataclass(frozen=True)
class CircuitSpec:
    num_qubits: int
    batch: int = 1
    features: int = 0
    ops: tuple[OpSpec, ...] = ()
    measurement: MeasurementSpec = field(default_factory=MeasurementSpec)
    inputs: tuple[tuple[float, ...], ...] | None = None

    @property
    def num_params(self) -> int:
        return sum(1 for op in self.ops if op.theta is not None)


def _line_index(node: yaml.Node, path: tuple = (), index: dict | None = None) -> dict:
    """Map every key path (strings and list positions) to its 1-based source line."""
    index = {} if index is None else index
    index[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            key = key_node.value
            _line_index(value_node, path + (key,), index)
            index[path + (key,)] = key_node.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for position, item in enumerate(node.value):
            _line_index(item, path + (position,), index)
    return index


def _field_name(path: tuple) -> str:
    name = ""
    for part in path:
        name += f"[{part}]" if isinstance(part, int) else (f".{part}" if name else str(part))
    return name


class _Reader:
    def __init__(self, lines: dict):
        self.lines = lines

    def error(self, path: tuple, message: str) -> CircuitError:
        probe = path
        while probe and probe not in self.lines:
            probe = probe[:-1]
        return CircuitError(message, self.lines.get(probe), _field_name(path) or None)

    def integer(self, value: Any, path: tuple, minimum: int) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(path, f"expected an integer, got {value!r}")
        if value < minimum:
            raise self.error(path, f"must be >= {minimum}, got {value}")
        return value

    def angle(self, value: Any, path: tuple) -> float:
        if isinstance(value, bool):
            raise self.error(path, f"expected an angle, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            match = _ANGLE_RE.match(value)
            if match:
                sign, factor, divisor = match.groups()
                number = float(factor) if factor not in ("", ".") else 1.0
                number *= math.pi / (float(divisor) if divisor else 1.0)
                return -number if sign else number
        raise self.error(path, f"expected a number or an expression like 'pi/3', got {value!r}")

    def wires(self, value: Any, path: tuple, num_qubits: int) -> tuple[int, ...]:
        items = [value] if isinstance(value, int) and not isinstance(value, bool) else value
        if not isinstance(items, list) or not items:
            raise self.error(path, f"expected a non-empty wire list, got {value!r}")
        wires = tuple(self.integer(w, path + (i,), 0) for i, w in enumerate(items))
        for i, wire in enumerate(wires):
            if wire >= num_qubits:
                raise self.error(
                    path + (i,), f"wire {wire} out of range for {num_qubits} qubits"
                )
        if len(set(wires)) != len(wires):
            raise self.error(path, f"duplicate wires {list(wires)}")
        return wires

    def input_index(self, value: Any, path: tuple, features: int) -> int:
        if isinstance(value, list):
            if len(value) != 1:
                raise self.error(path, "expected exactly one feature index")
            value = value[0]
            path = path + (0,)
        index = self.integer(value, path, 0)
        if index >= features:
            raise self.error(path, f"input_idx {index} out of range for {features} features")
        return index


def _normalize_op(
    raw: Any,
    path: tuple,
    reader: _Reader,
    num_qubits: int,
    features: int,
    registry: GateRegistry,
    gate_key: str = "gate",
) -> OpSpec:
    if not isinstance(raw, dict):
        raise reader.error(path, "each op must be a mapping")
    unknown = set(raw) - {gate_key, "wires", "theta", "input_idx"}
    if unknown:
        raise reader.error(path + (sorted(unknown)[0],), "unknown key")
    name = raw.get(gate_key)
    if not isinstance(name, str) or not name.strip():
        raise reader.error(path + (gate_key,), "missing gate name")
    name = name.strip().lower()
    try:
        definition = registry.get(name)
    except UnknownGateError as exc:
        raise reader.error(path + (gate_key,), str(exc)) from None

    wires = reader.wires(raw.get("wires"), path + ("wires",), num_qubits)
    if len(wires) != definition.arity:
        raise reader.error(
            path + ("wires",),
            f"gate '{name}' takes {definition.arity} wire(s), got {len(wires)}",
        )
    has_theta = "theta" in raw
    has_input = "input_idx" in raw
    if definition.parameterized:
        if has_theta == has_input:
            raise reader.error(path, f"gate '{name}' needs exactly one of theta or input_idx")
    elif has_theta or has_input:
        raise reader.error(path, f"gate '{name}' takes no parameter")
    theta = reader.angle(raw["theta"], path + ("theta",)) if has_theta else None
    input_idx = (
        reader.input_index(raw["input_idx"], path + ("input_idx",), features) if has_input else None
    )
    return OpSpec(name, wires, theta, input_idx)


def build_encoder(
    func_list: Sequence[dict],
    inputs: int | torch.Tensor,
    num_qubits: int | None = None,
    registry: GateRegistry | None = None,
) -> list[OpSpec]:
    """One gate per entry, θ bound to the given input feature column."""
    width = inputs if isinstance(inputs, int) else int(inputs.shape[-1])
    if num_qubits is None:
        wires = []
        for entry in func_list:
            raw = entry.get("wires", 0) if isinstance(entry, dict) else 0
            wires.extend(raw if isinstance(raw, list) else [raw])
        num_qubits = max((w for w in wires if isinstance(w, int)), default=0) + 1
    return _encoder_ops(func_list, _Reader({}), num_qubits, width, registry or REGISTRY)


def _encoder_ops(
    func_list: Any, reader: _Reader, num_qubits: int, width: int, registry: GateRegistry
) -> list[OpSpec]:
    if not isinstance(func_list, list):
        raise reader.error(("encoder",), "expected a list")
    ops = []
    for position, entry in enumerate(func_list):
        path = ("encoder", position)
        if not isinstance(entry, dict) or "input_idx" not in entry:
            raise reader.error(path, "encoder entries need func, wires and input_idx")
        ops.append(_normalize_op(entry, path, reader, num_qubits, width, registry, gate_key="func"))
    return ops


def build_ladder_ansatz(num_qubits: int, depth: int, thetas: Sequence[float]) -> list[OpSpec]:
    """``depth`` times: CX(i, (i+1) mod q) for every i, then RY(θ) on every qubit."""
    if num_qubits < 2:
        raise CircuitError("ladder ansatz needs at least 2 qubits", field="ansatz")
    if depth < 0:
        raise CircuitError(f"depth must be >= 0, got {depth}", field="ansatz.depth")
    thetas = [float(t) for t in thetas]
    if len(thetas) != depth * num_qubits:
        raise CircuitError(
            f"expected {depth * num_qubits} thetas (depth {depth} x {num_qubits} qubits), "
            f"got {len(thetas)}",
            field="ansatz.thetas",
        )
    ops: list[OpSpec] = []
    for layer in range(depth):
        ops.extend(OpSpec("cx", (i, (i + 1) % num_qubits)) for i in range(num_qubits))
        ops.extend(
            OpSpec("ry", (i,), theta=thetas[layer * num_qubits + i]) for i in range(num_qubits)
        )
    return ops


def initial_ansatz_thetas(count: int, seed: int, ansatz_init: str | None = None) -> list[float]:
    ansatz_init = ansatz_init or config.QSIM_ANSATZ_INIT
    if ansatz_init == "zeros":
        return [0.0] * count
    if ansatz_init != "uniform":
        raise CircuitError(f"unknown ansatz init '{ansatz_init}' (valid: uniform, zeros)")
    rng = np.random.default_rng([int(seed), 1])
    return rng.uniform(0.0, math.pi, size=count).tolist()


def parse_circuit(
    text: str,
    seed: int | None = None,
    ansatz_init: str | None = None,
    registry: GateRegistry | None = None,
) -> CircuitSpec:
    """Validate a YAML circuit document and expand encoder, ops and ansatz (in that order)."""
    registry = registry or REGISTRY
    seed = config.QSIM_SEED if seed is None else seed
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        raise CircuitError(
            f"malformed document: {problem}", mark.line + 1 if mark else None
        ) from None
    if root is None or not isinstance(data, dict):
        raise CircuitError("document must be a mapping", 1)

    reader = _Reader(_line_index(root))
    unknown = [key for key in data if key not in TOP_LEVEL_KEYS]
    if unknown:
        raise reader.error((unknown[0],), "unknown key")
    if "num_qubits" not in data:
        raise CircuitError("num_qubits is required", 1, "num_qubits")

    num_qubits = reader.integer(data["num_qubits"], ("num_qubits",), 1)
    batch = reader.integer(data.get("batch", 1), ("batch",), 1)
    features = reader.integer(data.get("features", 0), ("features",), 0)
    inputs = _normalize_inputs(data.get("inputs"), reader, batch, features)

    ops = _encoder_ops(data.get("encoder") or [], reader, num_qubits, features, registry)

    raw_ops = data.get("ops") or []
    if not isinstance(raw_ops, list):
        raise reader.error(("ops",), "expected a list")
    for position, entry in enumerate(raw_ops):
        ops.append(_normalize_op(entry, ("ops", position), reader, num_qubits, features, registry))

    ansatz = data.get("ansatz")
    if ansatz is not None:
        ops.extend(_expand_ansatz(ansatz, reader, num_qubits, seed, ansatz_init))

    measurement = _normalize_measurement(data.get("measurement") or {}, reader)
    spec = CircuitSpec(num_qubits, batch, features, tuple(ops), measurement, inputs)
    logger.debug("Circuito: %d qubits, %d ops, batch=%d", num_qubits, len(ops), batch)
    return spec


def _normalize_inputs(raw: Any, reader: _Reader, batch: int, features: int):
    if raw is None:
        return None
    if not isinstance(raw, list) or len(raw) != batch:
        raise reader.error(("inputs",), f"expected {batch} rows")
    rows = []
    for b, row in enumerate(raw):
        if not isinstance(row, list) or len(row) != features:
            raise reader.error(("inputs", b), f"expected {features} values")
        rows.append(tuple(reader.angle(v, ("inputs", b, i)) for i, v in enumerate(row)))
    return tuple(rows)


def _expand_ansatz(raw: Any, reader: _Reader, num_qubits: int, seed: int, ansatz_init):
    if not isinstance(raw, dict):
        raise reader.error(("ansatz",), "expected a mapping")
    kind = raw.get("kind", "ladder")
    if kind != "ladder":
        raise reader.error(("ansatz", "kind"), f"unknown ansatz '{kind}' (valid: ladder)")
    depth = reader.integer(raw.get("depth", 1), ("ansatz", "depth"), 0)
    if "thetas" in raw:
        values = raw["thetas"]
        if not isinstance(values, list):
            raise reader.error(("ansatz", "thetas"), "expected a list")
        thetas = [reader.angle(v, ("ansatz", "thetas", i)) for i, v in enumerate(values)]
    else:
        thetas = initial_ansatz_thetas(depth * num_qubits, seed, ansatz_init)
    try:
        return build_ladder_ansatz(num_qubits, depth, thetas)
    except CircuitError as exc:
        raise reader.error(("ansatz",), exc.message) from None


def _normalize_measurement(raw: Any, reader: _Reader) -> MeasurementSpec:
    if not isinstance(raw, dict):
        raise reader.error(("measurement",), "expected a mapping")
    mode = str(raw.get("mode", "analytic")).strip().lower()
    if mode not in config.VALID_MEASURE_MODES:
        raise reader.error(
            ("measurement", "mode"),
            f"unknown mode '{mode}' (valid: {', '.join(config.VALID_MEASURE_MODES)})",
        )
    shots = reader.integer(raw.get("shots", 0), ("measurement", "shots"), 0)
    return MeasurementSpec(mode, shots)


def emit_circuit(spec: CircuitSpec) -> str:
    """Normalized document: expanded ops only, floats written exactly."""
    doc: dict[str, Any] = {
        "num_qubits": spec.num_qubits,
        "batch": spec.batch,
        "features": spec.features,
    }
    if spec.inputs is not None:
        doc["inputs"] = [list(row) for row in spec.inputs]
    ops = []
    for op in spec.ops:
        entry: dict[str, Any] = {"gate": op.gate, "wires": list(op.wires)}
        if op.theta is not None:
            entry["theta"] = op.theta
        if op.input_idx is not None:
            entry["input_idx"] = op.input_idx
        ops.append(entry)
    doc["ops"] = ops
    doc["measurement"] = {"mode": spec.measurement.mode, "shots": spec.measurement.shots}
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


def load_circuit(path: Path, **kwargs) -> CircuitSpec:
    path = Path(path)
    if not path.exists():
        raise CircuitError(f"circuit file not found: {path}")
    return parse_circuit(path.read_text(encoding="utf-8"), **kwargs)


def ladder_training_spec(
    num_qubits: int,
    batch: int,
    depth: int,
    seed: int,
    ansatz_init: str | None = None,
    shots: int = 0,
    mode: str = "analytic",
) -> CircuitSpec:
    """RY encoder on every qubit (feature i -> wire i) followed by the ladder ansatz."""
    encoder = build_encoder(
        [{"func": "ry", "wires": [i], "input_idx": [i]} for i in range(num_qubits)],
        num_qubits,
        num_qubits,
    )
    ansatz = build_ladder_ansatz(
        num_qubits, depth, initial_ansatz_thetas(depth * num_qubits, seed, ansatz_init)
    )
    return CircuitSpec(
        num_qubits, batch, num_qubits, tuple(encoder + ansatz), MeasurementSpec(mode, shots)
    )


class CircuitProgram:
    """Callable (state, inputs, thetas) -> state that binds every op to its parameter slot."""

    def __init__(
        self,
        spec: CircuitSpec,
        registry: GateRegistry | None = None,
        restore_layout: bool = False,
    ):
        self.spec = spec
        self.registry = registry or REGISTRY
        self.restore_layout = restore_layout

    @property
    def thetas(self) -> torch.Tensor:
        return torch.tensor(
            [op.theta for op in self.spec.ops if op.theta is not None], dtype=torch.float64
        )

    def initial_inputs(self, seed: int) -> torch.Tensor:
        """Document inputs when given, else uniform [0, π/3) per feature from ``seed``."""
        if self.spec.inputs is not None:
            return torch.tensor(self.spec.inputs, dtype=torch.float64).reshape(
                self.spec.batch, self.spec.features
            )
        rng = np.random.default_rng([int(seed), 2])
        values = rng.random((self.spec.batch, self.spec.features)) * math.pi / 3
        return torch.from_numpy(values)

    def __call__(
        self, state: StateVector, inputs: torch.Tensor, thetas: torch.Tensor
    ) -> StateVector:
        position = 0
        for op in self.spec.ops:
            theta, slot = None, None
            if op.input_idx is not None:
                theta, slot = inputs[:, op.input_idx], ("input", op.input_idx)
            elif op.theta is not None:
                theta, slot = thetas[position], ("theta", position)
                position += 1
            state = apply_gate(
                state,
                op.gate,
                op.wires,
                theta,
                registry=self.registry,
                slot=slot,
                restore_layout=self.restore_layout,
            )
        return state
