import math

import numpy as np
import pytest
import torch

import config
from autodiff import (
    AdamState,
    NoGradientPathError,
    ReplayDivergenceError,
    Tape,
    TapeError,
    adam_step,
    backward,
    enable_invertible,
    execute,
    finite_diff_check,
    gradients,
    replay,
)
from circuit import CircuitProgram, CircuitSpec, OpSpec, ladder_training_spec
from dist import init_comm, run_ranks
from sampling import measure_allZ
from statevec import init_state, to_dense


def _random_spec(rng: np.random.Generator, q: int, depth: int, batch: int, features: int) -> CircuitSpec:
    ops = [OpSpec("ry", (i % q,), input_idx=i) for i in range(features)]
    for _ in range(depth):
        kind = rng.integers(0, 3)
        if kind == 0:
            wires = tuple(int(w) for w in rng.choice(q, size=2, replace=False))
            ops.append(OpSpec("cx", wires))
        elif kind == 1:
            name = str(rng.choice(["rx", "ry", "rz"]))
            ops.append(OpSpec(name, (int(rng.integers(q)),), theta=float(rng.uniform(-math.pi, math.pi))))
        else:
            name = str(rng.choice(["rx", "ry", "rz"]))
            ops.append(OpSpec(name, (int(rng.integers(q)),), input_idx=int(rng.integers(features))))
    return CircuitSpec(q, batch, features, tuple(ops))


def _inputs(rng, batch, features):
    return torch.from_numpy(rng.uniform(0.2, 1.2, size=(batch, features)))


def _expectations(comm, program, inputs, thetas, tape=None, **measure):
    spec = program.spec
    state = execute(init_state(spec.num_qubits, spec.batch, comm), program, inputs, thetas, tape)
    return measure_allZ(state, tape=tape, **measure)


@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    spec = _random_spec(rng, 4, 20, batch=2, features=3)
    program = CircuitProgram(spec)
    comm = init_comm()
    inputs = _inputs(rng, 2, 3).requires_grad_(True)
    thetas = program.thetas.clone().requires_grad_(True)
    assert torch.autograd.gradcheck(
        lambda x, t: _expectations(comm, program, x, t),
        (inputs, thetas),
        eps=1e-6,
        atol=1e-5,
    )


def test_finite_diff_check_on_single_rotation():
    comm = init_comm()
    program = CircuitProgram(CircuitSpec(2, 1, 0, (OpSpec("ry", (0,), theta=0.3),)))

    def loss_fn(thetas):
        return _expectations(comm, program, None, thetas)[0, 0]

    assert finite_diff_check(loss_fn, program.thetas) < 1e-5


def test_approx_measurement_gradient_with_fixed_noise():
    q, batch = 3, 2
    encoder = tuple(OpSpec("ry", (i,), input_idx=i) for i in range(q))
    ladder = tuple(OpSpec("cx", (i, (i + 1) % q)) for i in range(q))
    program = CircuitProgram(CircuitSpec(q, batch, q, encoder + ladder))
    rng = np.random.default_rng(5)
    z = torch.from_numpy(rng.standard_normal((batch, 1 << q)))
    inputs = torch.from_numpy(rng.uniform(0.5, 1.2, size=(batch, q))).requires_grad_(True)
    comm = init_comm()
    assert torch.autograd.gradcheck(
        lambda x: _expectations(comm, program, x, None, shots=1000, mode="approx", z=z),
        (inputs,),
        eps=1e-6,
        atol=1e-4,
    )


def _tape_gradients(invertible: bool, d_final_seed: int = 0):
    rng = np.random.default_rng(31)
    spec = _random_spec(rng, 5, 30, batch=2, features=4)
    program = CircuitProgram(spec)
    tape = Tape(invertible=invertible)
    state = execute(init_state(5, 2, init_comm()), program, _inputs(rng, 2, 4), program.thetas, tape)
    d_final = torch.from_numpy(np.random.default_rng(d_final_seed).standard_normal(tuple(state.data.shape)))
    trace: list[torch.Tensor] = []
    grads = backward(tape, d_final, num_params=spec.num_params, num_features=4, trace=trace)
    return tape, grads, trace


def test_invertible_matches_stored_mode():
    inv_tape, inv, inv_trace = _tape_gradients(True)
    st_tape, stored, st_trace = _tape_gradients(False)
    torch.testing.assert_close(inv.d_params, stored.d_params, rtol=0, atol=1e-9)
    torch.testing.assert_close(inv.d_input, stored.d_input, rtol=0, atol=1e-9)
    torch.testing.assert_close(inv.d_state, stored.d_state, rtol=0, atol=1e-9)
    assert len(inv_trace) == len(st_trace) == len(inv_tape.gate_nodes)
    for recomputed, kept in zip(inv_trace, st_trace):
        assert (recomputed - kept).abs().max() <= 1e-10


def test_invertible_mode_keeps_at_most_three_buffers():
    inv_tape, _, _ = _tape_gradients(True)
    st_tape, _, _ = _tape_gradients(False)
    assert inv_tape.stored_buffers == 0
    assert inv_tape.buffers.peak <= 3
    assert st_tape.stored_buffers == len(st_tape.gate_nodes)
    assert st_tape.buffers.peak > 3


def test_enable_invertible_rules():
    tape, _, _ = _tape_gradients(True)
    with pytest.raises(TapeError):
        enable_invertible(tape, False)
    stored, _, _ = _tape_gradients(False)
    enable_invertible(stored, True)
    assert stored.invertible and stored.stored_buffers == 0


def test_backward_needs_final_state_and_matching_shape():
    with pytest.raises(TapeError):
        backward(Tape(), torch.zeros(1))
    tape, _, _ = _tape_gradients(True)
    with pytest.raises(TapeError):
        backward(tape, torch.zeros(3))


def test_replay_divergence_detected():
    rng = np.random.default_rng(4)
    program = CircuitProgram(_random_spec(rng, 4, 10, batch=1, features=2))
    tape = Tape(invertible=True)
    state = execute(init_state(4, 1, init_comm()), program, _inputs(rng, 1, 2), program.thetas, tape)
    tape.final_state = state.with_data(state.data.detach() * 0.5)
    with pytest.raises(ReplayDivergenceError):
        backward(tape, torch.ones_like(state.data), num_params=program.spec.num_params, num_features=2)


def test_exact_sampling_has_no_gradient_path():
    rng = np.random.default_rng(6)
    program = CircuitProgram(_random_spec(rng, 3, 8, batch=1, features=2))
    inputs = _inputs(rng, 1, 2).requires_grad_(True)
    tape = Tape()
    z = _expectations(init_comm(), program, inputs, program.thetas, tape, shots=100, mode="exact")
    with pytest.raises(NoGradientPathError):
        gradients(z.sum(), [inputs], tape)
    with pytest.raises(NoGradientPathError):
        gradients(torch.tensor(1.0), [inputs])


@pytest.mark.parametrize("world", [1, 2])
def test_replay_reproduces_final_state(world):
    rng = np.random.default_rng(12)
    program = CircuitProgram(_random_spec(rng, 5, 25, batch=2, features=3))
    inputs = _inputs(rng, 2, 3)

    def fn(comm):
        tape = Tape(invertible=False)
        initial = init_state(5, 2, comm)
        final = execute(initial, program, inputs, program.thetas, tape)
        return to_dense(replay(tape, initial)), to_dense(final)

    for replayed, final in run_ranks(world, fn):
        torch.testing.assert_close(replayed, final.detach(), rtol=0, atol=1e-12)


@pytest.mark.parametrize("world", [2, 4])
def test_gradients_independent_of_world(world):
    rng = np.random.default_rng(world)
    program = CircuitProgram(_random_spec(rng, 6, 40, batch=2, features=4))
    inputs = _inputs(rng, 2, 4)

    def fn(comm):
        x = inputs.clone().requires_grad_(True)
        t = program.thetas.clone().requires_grad_(True)
        z = _expectations(comm, program, x, t)
        loss = (z * torch.linspace(-1.0, 1.0, z.numel(), dtype=z.dtype).reshape(z.shape)).sum()
        return gradients(loss, [x, t])

    (ref_x, ref_t) = run_ranks(1, fn)[0]
    for grad_x, grad_t in run_ranks(world, fn):
        torch.testing.assert_close(grad_x, ref_x, rtol=0, atol=1e-10)
        torch.testing.assert_close(grad_t, ref_t, rtol=0, atol=1e-10)


def test_mean_reduction_divides_theta_gradient_by_batch(monkeypatch):
    _, summed, _ = _tape_gradients(True)
    monkeypatch.setattr(config, "QSIM_GRAD_REDUCTION", "mean")
    _, averaged, _ = _tape_gradients(True)
    torch.testing.assert_close(averaged.d_params, summed.d_params / 2)
    torch.testing.assert_close(averaged.d_input, summed.d_input)


def test_training_loss_gradient_matches_finite_differences():
    spec = ladder_training_spec(4, 2, 2, seed=3)
    program = CircuitProgram(spec)
    comm = init_comm()

    def loss_fn(x):
        return _expectations(comm, program, x, program.thetas).abs().sum()

    assert finite_diff_check(loss_fn, program.initial_inputs(3)) < 1e-5


def test_adam_step_matches_hand_computation():
    adam = AdamState(lr=0.1)
    (updated,) = adam_step([torch.tensor([1.0], dtype=torch.float64)], [torch.tensor([0.5], dtype=torch.float64)], adam)
    assert adam.step == 1
    torch.testing.assert_close(updated, torch.tensor([0.9], dtype=torch.float64))
    kept = adam_step([torch.tensor([2.0])], [None], adam)
    assert kept[0].item() == 2.0
    with pytest.raises(ValueError):
        adam_step([torch.zeros(2)], [torch.zeros(3)], AdamState())
