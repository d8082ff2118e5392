"""Central finite-difference checks for every differentiable op (64-bit)."""

import numpy as np

from flowemg import tensor as T
from flowemg.model import adagn_modulate
from flowemg.tensor import Tensor

H = 1e-4


def _proj(out: Tensor, rng) -> Tensor:
    r = Tensor(rng.standard_normal(out.shape))
    return T.reduce_sum(T.mul(out, r))


def numeric_grad(f, arrays, i):
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + H
        up = f(arrays)
        x[idx] = old - H
        down = f(arrays)
        x[idx] = old
        g[idx] = (up - down) / (2 * H)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-10))


def _dims(rng, lo=1, hi=4, n=2):
    return [int(v) for v in rng.integers(lo, hi + 1, size=n)]


# each case builder returns (forward(list of Tensors) -> Tensor, list of arrays)
def case_add(rng):
    s = _dims(rng)
    return (lambda ts: T.add(*ts)), [rng.standard_normal(s), rng.standard_normal(s)]


def case_add_broadcast(rng):
    m, n = _dims(rng)
    return (lambda ts: T.add(*ts)), [rng.standard_normal((m, n)), rng.standard_normal(n)]


def case_sub(rng):
    s = _dims(rng, n=3)
    return (lambda ts: T.sub(*ts)), [rng.standard_normal(s), rng.standard_normal(s)]


def case_mul(rng):
    s = _dims(rng)
    return (lambda ts: T.mul(*ts)), [rng.standard_normal(s), rng.standard_normal(s)]


def case_div(rng):
    s = _dims(rng)
    den = rng.uniform(0.5, 2.0, s) * rng.choice([-1, 1], s)
    return (lambda ts: T.div(*ts)), [rng.standard_normal(s), den]


def case_neg(rng):
    return (lambda ts: T.neg(ts[0])), [rng.standard_normal(_dims(rng))]


def case_scale(rng):
    c = float(rng.uniform(-2, 2))
    return (lambda ts: T.scale(ts[0], c)), [rng.standard_normal(_dims(rng))]


def case_matmul(rng):
    m, k, n = _dims(rng, n=3)
    return (lambda ts: T.matmul(*ts)), [rng.standard_normal((m, k)), rng.standard_normal((k, n))]


def case_matmul_chain(rng):
    m, k, j, n = _dims(rng, n=4)
    return (lambda ts: T.matmul(T.matmul(ts[0], ts[1]), ts[2])), [
        rng.standard_normal((m, k)), rng.standard_normal((k, j)), rng.standard_normal((j, n))]


def case_linear(rng):
    n, i, o = _dims(rng, n=3)
    return (lambda ts: T.linear(*ts)), [rng.standard_normal((n, i)), rng.standard_normal((i, o)),
                                        rng.standard_normal(o)]


def case_conv1d(rng):
    cin, cout = _dims(rng, 1, 3)
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    L = int(rng.integers(max(k - 2 * pad, 1), 9))
    batched = bool(rng.integers(0, 2))
    xshape = (int(rng.integers(1, 3)), cin, L) if batched else (cin, L)
    return (lambda ts: T.conv1d(ts[0], ts[1], ts[2], stride=stride, pad=pad)), [
        rng.standard_normal(xshape), rng.standard_normal((cout, cin, k)), rng.standard_normal(cout)]


def case_group_norm(rng):
    groups = int(rng.integers(1, 3))
    C = groups * int(rng.integers(1, 3))
    L = int(rng.integers(2, 6))
    n = int(rng.integers(1, 3))
    return (lambda ts: T.group_norm(ts[0], groups, ts[1], ts[2], 1e-5)), [
        rng.standard_normal((n, C, L)), rng.standard_normal(C), rng.standard_normal(C)]


def case_chain(rng):
    """conv1d -> group_norm -> silu -> mse."""
    cin = int(rng.integers(1, 3))
    L = int(rng.integers(3, 7))
    target = rng.standard_normal((2, 2, L))

    def f(ts):
        h = T.conv1d(ts[0], ts[1], ts[2], stride=1, pad=1)
        h = T.silu(T.group_norm(h, 1, ts[3], ts[4]))
        return T.mse(h, target)

    return f, [rng.standard_normal((2, cin, L)), rng.standard_normal((2, cin, 3)),
               rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal(2)]


def case_silu(rng):
    return (lambda ts: T.activation(ts[0], "silu")), [3 * rng.standard_normal(_dims(rng))]


def case_identity(rng):
    return (lambda ts: T.activation(ts[0], "identity")), [rng.standard_normal(_dims(rng))]


def case_sigmoid(rng):
    return (lambda ts: T.sigmoid(ts[0])), [2 * rng.standard_normal(_dims(rng))]


def case_softmax_xent(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    targets = rng.integers(0, k, size=n)
    s = float(rng.choice([0.0, 0.05, 0.3]))
    return (lambda ts: T.softmax_xent(ts[0], targets, s)), [rng.standard_normal((n, k))]


def case_mse(rng):
    s = _dims(rng)
    return (lambda ts: T.mse(ts[0], ts[1])), [rng.standard_normal(s), rng.standard_normal(s)]


def case_reduce(rng):
    s = _dims(rng, n=3)
    axis = int(rng.integers(0, 3))
    return (lambda ts: T.reduce_mean(T.reduce_sum(ts[0], axis=axis), axis=0)), [rng.standard_normal(s)]


def case_reshape_concat(rng):
    a, b, c = _dims(rng, n=3)
    return (lambda ts: T.reshape(T.concat([ts[0], ts[1]], axis=1), (-1,))), [
        rng.standard_normal((a, b)), rng.standard_normal((a, c))]


def case_upsample(rng):
    s = _dims(rng, n=3)
    f = int(rng.integers(1, 4))
    return (lambda ts: T.upsample_nearest(ts[0], f)), [rng.standard_normal(s)]


def case_take_rows(rng):
    rows, d = _dims(rng, 2, 4)
    idx = rng.integers(0, rows, size=int(rng.integers(1, 6)))
    return (lambda ts: T.take_rows(ts[0], idx)), [rng.standard_normal((rows, d))]


def case_expand_time(rng):
    n, d = _dims(rng)
    L = int(rng.integers(1, 5))
    return (lambda ts: T.expand_time(ts[0], L)), [rng.standard_normal((n, d))]


def case_adagn(rng):
    n = int(rng.integers(1, 3))
    ch, L, E = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
    return (lambda ts: adagn_modulate(*ts)), [
        rng.standard_normal((n, ch, L)), rng.standard_normal((n, E)),
        rng.standard_normal((E, 2 * ch)), rng.standard_normal(2 * ch)]


CASES = {name[5:]: fn for name, fn in dict(globals()).items() if name.startswith("case_")}


def check_case(builder, seed: int) -> float:
    """Max relative error over all inputs of one random instance."""
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        fwd, arrays = builder(rng)
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        proj_seed = int(rng.integers(1 << 30))

        def scalar(ts):
            out = fwd(ts)
            return out if out.data.ndim == 0 else _proj(out, np.random.default_rng(proj_seed))

        def value(arrs):
            return scalar([Tensor(a) for a in arrs]).item()

        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with T.Tape() as tape:
            grads = T.backward(scalar(ts), tape)
        worst = 0.0
        for i, t in enumerate(ts):
            analytic = grads.get(t, np.zeros_like(t.data))
            worst = max(worst, rel_err(analytic, numeric_grad(value, arrays, i)))
    return worst
