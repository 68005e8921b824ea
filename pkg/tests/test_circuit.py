import math
import textwrap

import numpy as np
import pytest
import torch

import config
from circuit import (
    CircuitError,
    CircuitProgram,
    CircuitSpec,
    MeasurementSpec,
    OpSpec,
    build_encoder,
    build_ladder_ansatz,
    emit_circuit,
    ladder_training_spec,
    load_circuit,
    parse_circuit,
)
from conftest import dense_circuit
from dist import init_comm
from statevec import init_state, to_dense


def _doc(text: str) -> str:
    return textwrap.dedent(text).lstrip("\n")


def test_parse_two_op_document():
    spec = parse_circuit(
        _doc(
            """
            num_qubits: 3
            ops:
              - gate: h
                wires: [0]
              - gate: CX
                wires: [0, 1]
            """
        )
    )
    assert spec.num_qubits == 3 and spec.batch == 1
    assert spec.ops == (OpSpec("h", (0,)), OpSpec("cx", (0, 1)))
    assert spec.measurement == MeasurementSpec("analytic", 0)


def test_unknown_gate_reports_line_and_field():
    text = _doc(
        """
        num_qubits: 3
        ops:
          - gate: h
            wires: [0]
          - gate: foo
            wires: [1]
        """
    )
    with pytest.raises(CircuitError) as info:
        parse_circuit(text)
    assert info.value.line == 5
    assert info.value.field == "ops[1].gate"
    assert str(info.value).startswith("line 5: ops[1].gate: ")
    assert "foo" in str(info.value)


def test_wire_out_of_range():
    text = _doc(
        """
        num_qubits: 3
        ops:
          - gate: cx
            wires: [0, 3]
        """
    )
    with pytest.raises(CircuitError) as info:
        parse_circuit(text)
    assert info.value.line == 4
    assert info.value.field == "ops[0].wires[1]"


@pytest.mark.parametrize(
    "body",
    [
        "ops:\n  - gate: ry\n    wires: [0]\n    input_idx: 2\n",
        "ops:\n  - gate: ry\n    wires: [0]\n",
        "ops:\n  - gate: ry\n    wires: [0]\n    theta: 0.1\n    input_idx: 0\n",
        "ops:\n  - gate: h\n    wires: [0]\n    theta: 0.1\n",
        "ops:\n  - gate: cx\n    wires: [1]\n",
        "ops:\n  - gate: cx\n    wires: [1, 1]\n",
        "ops:\n  - gate: ry\n    wires: [0]\n    theta: tau\n",
        "colour: blue\n",
        "measurement:\n  mode: magic\n",
        "measurement:\n  shots: -3\n",
        "inputs:\n  - [0.1]\n",
    ],
)
def test_invalid_documents_rejected(body):
    with pytest.raises(CircuitError) as info:
        parse_circuit("num_qubits: 3\nfeatures: 2\n" + body)
    assert info.value.line is not None


def test_missing_num_qubits_and_malformed_yaml():
    with pytest.raises(CircuitError, match="num_qubits"):
        parse_circuit("ops: []\n")
    with pytest.raises(CircuitError) as info:
        parse_circuit("num_qubits: 3\nops: [\n")
    assert info.value.line is not None
    with pytest.raises(CircuitError):
        parse_circuit("- just\n- a list\n")


@pytest.mark.parametrize(
    "text, expected",
    [
        ("pi", math.pi),
        ("pi/3", math.pi / 3),
        ("-pi/2", -math.pi / 2),
        ("2*pi", 2 * math.pi),
        ("3pi/4", 3 * math.pi / 4),
        ("0.5", 0.5),
    ],
)
def test_angle_expressions(text, expected):
    spec = parse_circuit(f"num_qubits: 1\nops:\n  - gate: rz\n    wires: [0]\n    theta: {text}\n")
    assert spec.ops[0].theta == pytest.approx(expected, abs=1e-15)


def test_emit_then_parse_preserves_expanded_spec():
    rng = np.random.default_rng(8)
    spec = parse_circuit(
        _doc(
            """
            num_qubits: 4
            batch: 2
            features: 2
            inputs:
              - [0.1, pi/5]
              - [0.3, 0.7]
            encoder:
              - {func: rx, wires: [0], input_idx: [0]}
              - {func: ry, wires: 3, input_idx: 1}
            ops:
              - gate: t
                wires: [2]
            ansatz:
              kind: ladder
              depth: 2
            measurement:
              mode: approx
              shots: 500
            """
        ),
        seed=int(rng.integers(1000)),
    )
    assert len(spec.ops) == 2 + 1 + 2 * 8
    assert parse_circuit(emit_circuit(spec)) == spec


def test_encoder_with_zero_inputs_is_identity():
    ops = build_encoder(
        [{"func": name, "wires": [i], "input_idx": [i]} for i, name in enumerate(("rx", "ry", "rz"))],
        3,
    )
    assert [op.wires for op in ops] == [(0,), (1,), (2,)]
    program = CircuitProgram(CircuitSpec(3, 2, 3, tuple(ops)))
    state = init_state(3, 2, init_comm())
    out = program(state, torch.zeros(2, 3, dtype=torch.float64), program.thetas)
    torch.testing.assert_close(to_dense(out), to_dense(state), rtol=0, atol=1e-15)


def test_encoder_infers_qubits_from_tensor_width():
    inputs = torch.zeros(4, 2)
    ops = build_encoder([{"func": "ry", "wires": [1], "input_idx": [1]}], inputs)
    assert ops == [OpSpec("ry", (1,), input_idx=1)]
    with pytest.raises(CircuitError):
        build_encoder([{"func": "ry", "wires": [0], "input_idx": [2]}], inputs)


def test_ladder_shape():
    ops = build_ladder_ansatz(6, 3, [0.1] * 18)
    assert sum(op.gate == "cx" for op in ops) == 18
    assert sum(op.gate == "ry" for op in ops) == 18
    assert ops[5] == OpSpec("cx", (5, 0))
    assert ops[6] == OpSpec("ry", (0,), theta=0.1)
    with pytest.raises(CircuitError):
        build_ladder_ansatz(6, 3, [0.1] * 17)
    with pytest.raises(CircuitError):
        build_ladder_ansatz(1, 1, [0.1])


def test_zero_angle_ladder_is_cx_ring():
    ops = (OpSpec("h", (0,)), OpSpec("ry", (1,), theta=0.4)) + tuple(build_ladder_ansatz(3, 1, [0.0] * 3))
    program = CircuitProgram(CircuitSpec(3, 1, 0, ops))
    out = program(init_state(3, 1, init_comm()), torch.zeros(1, 0), program.thetas)
    expected = dense_circuit(
        [("h", (0,), None), ("ry", (1,), 0.4), ("cx", (0, 1), None), ("cx", (1, 2), None), ("cx", (2, 0), None)],
        3,
    )
    torch.testing.assert_close(to_dense(out), expected, rtol=0, atol=1e-12)


def test_ansatz_initialization():
    uniform = ladder_training_spec(4, 2, 2, seed=9)
    again = ladder_training_spec(4, 2, 2, seed=9)
    other = ladder_training_spec(4, 2, 2, seed=10)
    thetas = CircuitProgram(uniform).thetas
    assert torch.equal(thetas, CircuitProgram(again).thetas)
    assert not torch.equal(thetas, CircuitProgram(other).thetas)
    assert ((thetas >= 0) & (thetas < math.pi)).all()
    zeros = ladder_training_spec(4, 2, 2, seed=9, ansatz_init="zeros")
    assert CircuitProgram(zeros).thetas.abs().sum() == 0
    with pytest.raises(CircuitError):
        ladder_training_spec(4, 2, 2, seed=9, ansatz_init="normal")


def test_initial_inputs_from_document_or_seed():
    spec = parse_circuit("num_qubits: 2\nbatch: 2\nfeatures: 1\ninputs: [[0.25], [pi]]\n")
    torch.testing.assert_close(
        CircuitProgram(spec).initial_inputs(0), torch.tensor([[0.25], [math.pi]], dtype=torch.float64)
    )
    generated = CircuitProgram(ladder_training_spec(3, 4, 1, seed=0)).initial_inputs(5)
    assert generated.shape == (4, 3)
    assert ((generated >= 0) & (generated < math.pi / 3)).all()


def test_shipped_circuits_load():
    basic = load_circuit(config.CIRCUITS_DIR / "basic.yml")
    assert [op.gate for op in basic.ops] == ["z", "ry", "cx"]
    assert basic.ops[1].theta == pytest.approx(math.pi / 3)
    ladder = load_circuit(config.CIRCUITS_DIR / "ladder_train.yml", seed=1)
    assert (ladder.batch, ladder.features, len(ladder.ops)) == (16, 6, 6 + 36)
    assert ladder.num_params == 18


def test_load_missing_file(tmp_path):
    with pytest.raises(CircuitError, match="not found"):
        load_circuit(tmp_path / "absent.yml")
