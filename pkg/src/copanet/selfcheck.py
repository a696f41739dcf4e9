"""Fast invariant suite behind the `selfcheck` CLI command.

Each invariant is a small self-contained check built on an oracle that does
not share code with the path it validates: central finite differences for
gradients, independent recomputation for routing and composition, byte
round-trips for checkpoints. Everything runs on tiny tensors at 64-bit
precision in well under two minutes.
"""

import contextlib
import os
import tempfile

import numpy as np

from . import engine, models, training, units
from .errors import CoPaNetError


def finite_difference(loss_fn, arrays, step=1e-5):
    """Central-difference gradients of a scalar loss for each array.

    loss_fn takes no arguments and reads the arrays in place; each array is
    perturbed one element at a time.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn())
            flat[i] = orig - step
            fm = float(loss_fn())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-4):
    """max |a - n| / max(|a|, |n|, floor) over all elements.

    The floor keeps elements whose true gradient vanishes (dead ReLUs, max
    losers, batch-norm sum invariance) from amplifying finite-difference
    roundoff into a spurious relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


@contextlib.contextmanager
def _at_precision(bits):
    prev = engine.precision()
    engine.set_precision(bits)
    try:
        yield
    finally:
        engine.set_precision(prev)


def _check_conv_gradients():
    with _at_precision(64):
        rng = np.random.default_rng(11)
        x = engine.Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = engine.Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)

        def loss_fn():
            out = engine.conv2d(engine.Tensor(x.data), engine.Tensor(w.data), 1, 1)
            return engine.sum_all(engine.relu(out)).data

        loss = engine.sum_all(engine.relu(engine.conv2d(x, w, 1, 1)))
        loss.backward()
        num_x, num_w = finite_difference(loss_fn, [x.data, w.data])
        err = max(max_relative_error(x.grad, num_x), max_relative_error(w.grad, num_w))
        assert err < 1e-4, f"conv2d gradient error {err:.2e} >= 1e-4"


def _check_batchnorm_gradients():
    with _at_precision(64):
        rng = np.random.default_rng(12)
        x = engine.Tensor(rng.standard_normal((2, 2, 3, 3)) * 2 + 1, requires_grad=True)
        state = engine.BatchNormState(2)
        state.gamma.data = rng.standard_normal(2) + 1.5
        state.beta.data = rng.standard_normal(2)

        def loss_fn():
            out = engine.batchnorm2d(engine.Tensor(x.data), state, training=True)
            return engine.sum_all(engine.relu(out)).data

        loss = engine.sum_all(engine.relu(engine.batchnorm2d(x, state, training=True)))
        loss.backward()
        nums = finite_difference(loss_fn, [x.data, state.gamma.data, state.beta.data])
        err = max(max_relative_error(x.grad, nums[0]),
                  max_relative_error(state.gamma.grad, nums[1]),
                  max_relative_error(state.beta.grad, nums[2]))
        assert err < 1e-4, f"batchnorm2d gradient error {err:.2e} >= 1e-4"


def _check_softmax_gradients():
    with _at_precision(64):
        rng = np.random.default_rng(13)
        logits = engine.Tensor(rng.standard_normal((5, 7)), requires_grad=True)
        labels = rng.integers(0, 7, size=5)

        def loss_fn():
            return engine.softmax_cross_entropy(engine.Tensor(logits.data), labels).data

        loss = engine.softmax_cross_entropy(logits, labels)
        loss.backward()
        num, = finite_difference(loss_fn, [logits.data])
        err = max_relative_error(logits.grad, num)
        assert err < 1e-6, f"softmax_cross_entropy gradient error {err:.2e} >= 1e-6"


def _check_copa_stack_gradients():
    with _at_precision(64):
        rng = np.random.default_rng(14)
        spec = units.CoPaUnitSpec(2, units.PathwaySpec("bottleneck", 3, 2, 3))
        stack = [units.CoPaUnit(spec, f"u{i}") for i in range(2)]
        params = []
        for unit in stack:
            training.he_init(unit, rng)
            params.extend(unit.parameters().values())
        x = engine.Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)

        def run(inp):
            h = inp
            for unit in stack:
                h, _ = unit.forward(h, training=True)
            return engine.sum_all(engine.relu(h))

        loss = run(x)
        loss.backward()
        analytic = [p.grad.copy() for p in params] + [x.grad.copy()]
        nums = finite_difference(lambda: run(engine.Tensor(x.data)).data,
                                 [p.data for p in params] + [x.data])
        err = max(max_relative_error(a, n) for a, n in zip(analytic, nums))
        assert err < 1e-4, f"CoPa stack gradient error {err:.2e} >= 1e-4"


def _check_routing_conservation():
    with _at_precision(64):
        rng = np.random.default_rng(15)
        for trial in range(50):
            vals = rng.standard_normal((3, 3, 4))
            if trial % 5 == 0:
                vals[1] = vals[0]  # force ties; lowest index must win
            ins = [engine.Tensor(v, requires_grad=True) for v in vals]
            out, winners = engine.elementwise_max_k(ins, capture_routing=True)
            assert np.array_equal(out.data, vals.max(axis=0)), "max output mismatch"

            _, winners2 = engine.elementwise_max_k(
                [engine.Tensor(v, requires_grad=True) for v in vals], capture_routing=True)
            assert np.array_equal(winners, winners2), "routing not deterministic"
            if trial % 5 == 0:
                # input 1 duplicates input 0, so it can never be the winner
                assert not (winners == 1).any(), "tie must resolve to the lowest pathway index"

            engine.sum_all(out).backward()
            total = sum(t.grad for t in ins if t.grad is not None)
            assert np.array_equal(total, np.ones((3, 4))), "gradient not conserved"


def _check_k1_equivalence():
    with _at_precision(64):
        rng = np.random.default_rng(16)
        spec = units.CoPaUnitSpec(1, units.PathwaySpec("bottleneck", 4, 2, 4))
        unit = units.CoPaUnit(spec, "u0")
        training.he_init(unit, rng)
        x = engine.Tensor(rng.standard_normal((2, 4, 5, 5)), requires_grad=True)
        out, mask = unit.forward(x, training=True)
        assert mask is None, "K=1 unit must not produce a routing mask"
        # independent pre-activation residual recomputation
        ref = engine.add(x, unit.pathway_residual(x, 0, training=True))
        assert np.array_equal(out.data, ref.data), "K=1 unit differs from residual unit"


def _check_checkpoint_roundtrip():
    with _at_precision(64):
        rng = np.random.default_rng(17)
        config = models.NetworkConfig(depth=11, k=2, stage_widths=(4, 6, 8),
                                      mid_widths=(2, 3, 4), dropout_rate=0.0)
        model = models.build(config)
        training.he_init(model, rng)
        x = engine.Tensor(rng.standard_normal((2, 3, 32, 32)))
        with engine.no_grad():
            before = model.forward(x, training=False).data
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.ckpt")
            training.save_checkpoint(path, model)
            loaded, _ = training.load_checkpoint(path)
        with engine.no_grad():
            after = loaded.forward(x, training=False).data
        assert np.array_equal(before, after), "checkpoint round-trip changed eval outputs"


def _check_compose_winners():
    with _at_precision(64):
        rng = np.random.default_rng(18)
        spec = units.CoPaUnitSpec(2, units.PathwaySpec("bottleneck", 3, 2, 3))
        stack = [units.CoPaUnit(spec, f"u{i}") for i in range(3)]
        for unit in stack:
            training.he_init(unit, rng)
        x = engine.Tensor(rng.standard_normal((2, 3, 6, 6)))
        h, masks = x, []
        for unit in stack:
            h, mask = unit.forward(h, training=False, capture=True)
            masks.append(mask)
        composed = units.compose_winners(x, stack, masks)
        assert np.array_equal(h.data, composed.data), "winner composition not bit-exact"


INVARIANTS = (
    ("tensor_engine.gradient_oracle_conv2d", _check_conv_gradients),
    ("tensor_engine.gradient_oracle_batchnorm", _check_batchnorm_gradients),
    ("tensor_engine.gradient_oracle_softmax_ce", _check_softmax_gradients),
    ("tensor_engine.gradient_oracle_copa_stack", _check_copa_stack_gradients),
    ("tensor_engine.max_routing_conservation", _check_routing_conservation),
    ("copa_unit.k1_residual_equivalence", _check_k1_equivalence),
    ("copa_unit.compose_winners_exact", _check_compose_winners),
    ("trainer.checkpoint_round_trip", _check_checkpoint_roundtrip),
)


def run_selfcheck(fault=None, echo=print):
    """Run every registered invariant once; returns True when all pass."""
    if fault is not None:
        engine.enable_test_fault(fault)
    failures = []
    try:
        for name, check in INVARIANTS:
            try:
                check()
                echo(f"PASS {name}")
            except (AssertionError, CoPaNetError) as exc:
                failures.append(name)
                echo(f"FAIL {name}: {exc}")
    finally:
        engine.clear_test_faults()
    echo(f"{len(INVARIANTS) - len(failures)}/{len(INVARIANTS)} invariants passed")
    return not failures
