"""Finite-difference gradient checking shared by the tensor and acceptance tests."""
import numpy as np

from advleaf import tensor as T

from oracles import central_difference, rel_err


def grad_of(fn, *arrays):
    """Run ``fn`` on fresh leaf tensors inside a tape and return their grads."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = fn(*leaves)
    T.backward(tape, loss)
    return loss, [t.grad for t in leaves]


def check_fd(fn, arrays, which, coords=20, seed=0, h=1e-3, kink=None):
    """Compare analytic and central-difference grads of a float64 scalar fn."""
    with T.precision(np.float64):
        _, grads = grad_of(fn, *arrays)

        def value(a):
            args = list(arrays)
            args[which] = a
            return float(fn(*[T.Tensor(v) for v in args]).data)

        rng = np.random.default_rng(seed)
        base = arrays[which]
        checked = 0
        for idx in rng.permutation(base.size):
            if kink is not None and kink(base, idx):
                continue
            num = central_difference(value, base, idx, h)
            assert rel_err(grads[which].flat[idx], num) < 1e-3, (idx, grads[which].flat[idx], num)
            checked += 1
            if checked == coords:
                break
        assert checked == min(coords, base.size)
