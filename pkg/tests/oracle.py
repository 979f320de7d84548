"""Finite-difference oracle cases shared by the unit and acceptance suites.

Each case maps a seeded generator to ``(fn, inputs, tol)``: ``fn`` takes one
Tensor per input and returns a scalar Tensor, and every input's analytic
gradient is compared against central differences in float64.
"""
import numpy as np

from tdam import ops
from tdam.gradcheck import finite_diff_grad, max_relative_error
from tdam.tensor import Tensor, default_dtype

TOL = 1e-4
TOL_BN = 1e-3


def _project(out: Tensor, rng) -> Tensor:
    g = Tensor(rng.normal(size=out.shape))
    return ops.sum_all(ops.mul(out, g))


def _projected(op, rng, shapes, **kw):
    proj = [None]

    def fn(*ts):
        out = op(*ts, **kw)
        if proj[0] is None:
            proj[0] = rng.normal(size=out.shape)
        return ops.sum_all(ops.mul(out, Tensor(proj[0])))

    return fn, [rng.normal(size=s) for s in shapes]


def case_relu(rng):
    return (*_projected(ops.relu, rng, [(3, 4)]), TOL)


def case_sigmoid(rng):
    fn, xs = _projected(ops.sigmoid, rng, [(2, 3, 2, 2)])
    xs[0] *= 6  # both tails
    return fn, xs, TOL


def case_add_broadcast(rng):
    return (*_projected(ops.add, rng, [(2, 3, 4, 4), (1, 3, 1, 1)]), TOL)


def case_mul_broadcast(rng):
    return (*_projected(ops.mul, rng, [(2, 3, 4, 4), (2, 3, 1, 1)]), TOL)


def case_reshape(rng):
    return (*_projected(lambda t: ops.reshape(t, (4, 6)), rng, [(2, 3, 4)]), TOL)


def case_flatten(rng):
    return (*_projected(ops.flatten, rng, [(2, 3, 2, 2)]), TOL)


def case_concat(rng):
    return (*_projected(lambda a, b: ops.concat([a, b], axis=1), rng, [(2, 3), (2, 5)]), TOL)


def case_sum(rng):
    return (lambda t: ops.sum_all(t), [rng.normal(size=(3, 4))], TOL)


def case_select_rows(rng):
    choice = rng.integers(0, 3, size=4)
    return (*_projected(lambda a, b, c: ops.select_rows([a, b, c], choice), rng, [(4, 5)] * 3), TOL)


def _conv(k, s, p, bias):
    def case(rng):
        shapes = [(2, 3, 7, 7), (4, 3, k, k)] + ([(4,)] if bias else [])
        op = lambda x, w, *b: ops.conv2d(x, w, b[0] if b else None, stride=s, pad=p)
        return (*_projected(op, rng, shapes), TOL)

    return case


def case_pointwise_filter_batched(rng):
    return (*_projected(ops.pointwise_conv_filter, rng, [(2, 3), (2, 3, 4, 4)]), TOL)


def case_pointwise_filter_shared(rng):
    return (*_projected(ops.pointwise_conv_filter, rng, [(3,), (2, 3, 4, 4)]), TOL)


def case_global_avg(rng):
    return (*_projected(lambda t: ops.pool("global_avg", t), rng, [(2, 3, 4, 5)]), TOL)


def case_global_max(rng):
    return (*_projected(lambda t: ops.pool("global_max", t), rng, [(2, 3, 4, 5)]), TOL)


def case_channel_mean(rng):
    return (*_projected(ops.channel_mean, rng, [(2, 4, 3, 3)]), TOL)


def case_channel_max(rng):
    return (*_projected(ops.channel_max, rng, [(2, 4, 3, 3)]), TOL)


def case_max_pool(rng):
    return (*_projected(lambda t: ops.max_pool2d(t, 3, 2, 1), rng, [(2, 2, 7, 7)]), TOL)


def case_linear(rng):
    return (*_projected(ops.linear, rng, [(4, 5), (3, 5), (3,)]), TOL)


def _bn(training):
    def case(rng):
        rm, rv = rng.normal(size=3), rng.random(3) + 0.5

        def op(x, w, b):
            return ops.batchnorm(x, w, b, rm.copy(), rv.copy(), training)

        return (*_projected(op, rng, [(4, 3, 3, 3), (3,), (3,)]), TOL_BN)

    return case


def case_cross_entropy(rng):
    labels = rng.integers(0, 5, size=4)
    return (lambda t: ops.softmax_cross_entropy(t, labels), [rng.normal(size=(4, 5))], TOL)


def case_tensor_operators(rng):
    return (lambda a, b: ((a * b) - a + (-b)).sum(), [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))], TOL)


CASES = {
    "relu": case_relu,
    "sigmoid": case_sigmoid,
    "add": case_add_broadcast,
    "mul": case_mul_broadcast,
    "reshape": case_reshape,
    "flatten": case_flatten,
    "concat": case_concat,
    "sum": case_sum,
    "select_rows": case_select_rows,
    "conv3x3_s1_p1": _conv(3, 1, 1, False),
    "conv3x3_s2_p1_bias": _conv(3, 2, 1, True),
    "conv1x1_s1": _conv(1, 1, 0, False),
    "conv1x1_s2": _conv(1, 2, 0, False),
    "conv7x7_s2_p3": _conv(7, 2, 3, False),
    "pointwise_filter_batched": case_pointwise_filter_batched,
    "pointwise_filter_shared": case_pointwise_filter_shared,
    "global_avg_pool": case_global_avg,
    "global_max_pool": case_global_max,
    "channel_mean": case_channel_mean,
    "channel_max": case_channel_max,
    "max_pool2d": case_max_pool,
    "linear": case_linear,
    "batchnorm_train": _bn(True),
    "batchnorm_eval": _bn(False),
    "softmax_cross_entropy": case_cross_entropy,
    "tensor_operators": case_tensor_operators,
}


def check_case(name: str, seed: int) -> float:
    """Worst relative error over all inputs of one seeded trial."""
    rng = np.random.default_rng([seed, len(name)])
    with default_dtype(np.float64):
        fn, arrays, _ = CASES[name](rng)
        worst = 0.0
        for i in range(len(arrays)):
            ts = [Tensor(a.copy(), requires_grad=(j == i)) for j, a in enumerate(arrays)]
            fn(*ts).backward()
            analytic = ts[i].grad

            def partial(t, i=i):
                args = [Tensor(a.copy()) for a in arrays]
                args[i] = t
                return fn(*args)

            numeric = finite_diff_grad(partial, arrays[i])
            worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def case_tol(name: str) -> float:
    with default_dtype(np.float64):
        return CASES[name](np.random.default_rng(0))[2]


def td_block(seed: int, c: int = 4, steps: int = 2, m: int = 2, kind: str = "joint", variant: str = "chn_then_sp"):
    """A basic residual block with top-down attention, float64 weights."""
    from tdam.attention import TdamConfig
    from tdam.backbone import Block, BlockSpec

    with default_dtype(np.float64):
        td = TdamConfig(c, c, kind=kind, steps=steps, feedback_distance=m, reduction=2, variant=variant)
        blk = Block(BlockSpec("layer1.0", "basic", c, c, c, 1, td))
        blk.init_weights(seed)
        rng = np.random.default_rng(seed)
        # non-trivial affine BN parameters so every path carries gradient
        for _, p in blk.named_parameters():
            if p.role == "bn":
                p.data[...] = rng.uniform(0.5, 1.5, p.data.shape) if p.data.mean() == 1 else rng.normal(0, 0.2, p.data.shape)
    return blk


def check_td_block(seed: int, c: int = 4, steps: int = 2, m: int = 2) -> float:
    """Worst relative error over the input and every parameter of a TD block."""
    from tdam.gradcheck import finite_diff_param

    blk = td_block(seed, c, steps, m)
    rng = np.random.default_rng([seed, 99])
    with default_dtype(np.float64):
        x = rng.normal(size=(2, c, 5, 5))
        proj = Tensor(rng.normal(size=(2, c, 5, 5)))
        blk.train()

        def loss(t):
            return ops.sum_all(ops.mul(blk(t), proj))

        xt = Tensor(x.copy(), requires_grad=True)
        blk.zero_grad()
        loss(xt).backward()
        worst = max_relative_error(xt.grad, finite_diff_grad(loss, x))
        grads = {n: p.grad.copy() for n, p in blk.named_parameters()}
        for name, p in blk.named_parameters():
            numeric = finite_diff_param(lambda: loss(Tensor(x)), p)
            worst = max(worst, max_relative_error(grads[name], numeric))
    return worst
