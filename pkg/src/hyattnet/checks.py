"""Named gradient-check suite for the CLI and the acceptance tests.

Each unit check builds a scalar loss around one differentiable operation;
the end-to-end check drives the full combined loss of a small network and
samples a couple of dozen parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .gradcheck import (DEFAULT_STEP, DEFAULT_TOL, EXTENDED_STEP, EXTENDED_TOL,
                        check_gradients)
from .network import HyattNet, tiny_config
from .tensor import Tensor, default_dtype, get_default_dtype


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max_err={self.max_error:.3e} tol={self.tolerance:.0e}"


def _rand(rng, *shape, margin=0.0):
    data = rng.standard_normal(shape)
    if margin:
        data = data + margin * np.sign(data)
    return Tensor(data, requires_grad=True, dtype=get_default_dtype())


def _square_sum(y):
    return ops.sum_all(ops.mul(y, y))


def unit_check_cases(rng):
    """(name, loss_fn, params) triples covering every differentiable op."""
    cases = []

    a, b = _rand(rng, 3, 4), _rand(rng, 1, 4)
    cases.append(("add", lambda: _square_sum(ops.add(a, b)), [a, b]))
    c, d = _rand(rng, 2, 3, 4), _rand(rng, 4)
    cases.append(("mul", lambda: _square_sum(ops.mul(c, d)), [c, d]))
    e, f = _rand(rng, 5), _rand(rng, 5)
    cases.append(("sub", lambda: _square_sum(ops.sub(e, f)), [e, f]))
    g = _rand(rng, 4, 4, margin=0.05)
    cases.append(("relu", lambda: _square_sum(ops.relu(g)), [g]))
    h = _rand(rng, 3, 5)
    cases.append(("gelu", lambda: _square_sum(ops.gelu(h)), [h]))
    i = _rand(rng, 6)
    cases.append(("sigmoid", lambda: _square_sum(ops.sigmoid(i)), [i]))
    j, jv = _rand(rng, 3, 6), _rand(rng, 3, 6)
    cases.append(("softmax_lastdim", lambda: ops.sum_all(ops.mul(ops.softmax_lastdim(j), jv)), [j, jv]))
    k, l = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
    cases.append(("matmul", lambda: _square_sum(ops.matmul(k, l)), [k, l]))
    m, mw, mb = _rand(rng, 4, 6), _rand(rng, 3, 6), _rand(rng, 3)
    cases.append(("linear", lambda: _square_sum(ops.linear(m, mw, mb)), [m, mw, mb]))
    n, ng, nb = _rand(rng, 2, 5, 3, 3), _rand(rng, 5), _rand(rng, 5)
    cases.append(("layer_norm", lambda: ops.sum_all(ops.mul(ops.layer_norm(n, ng, nb, axis=1), n)), [n, ng, nb]))
    o, og, ob = _rand(rng, 3, 4, 2, 2), _rand(rng, 4), _rand(rng, 4)
    rm, rv = np.zeros(4), np.ones(4)
    cases.append((
        "batch_norm",
        lambda: ops.sum_all(ops.mul(ops.batch_norm(o, og, ob, rm.copy(), rv.copy(), True), o)),
        [o, og, ob],
    ))
    p, pw, pb = _rand(rng, 2, 3, 5, 5), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)
    cases.append(("conv2d", lambda: _square_sum(ops.conv2d(p, pw, pb, padding=1)), [p, pw, pb]))
    q, qw = _rand(rng, 1, 2, 7, 7), _rand(rng, 3, 2, 3, 3)
    cases.append((
        "conv2d_strided_dilated",
        lambda: _square_sum(ops.conv2d(q, qw, stride=2, padding=2, dilation=2)),
        [q, qw],
    ))
    r, rw = _rand(rng, 2, 4, 5, 5), _rand(rng, 4, 1, 3, 3)
    cases.append(("conv2d_depthwise", lambda: _square_sum(ops.conv2d(r, rw, padding=1, groups=4)), [r, rw]))
    s, sw, sb = _rand(rng, 2, 3, 4, 4), _rand(rng, 3, 2, 2, 2), _rand(rng, 2)
    cases.append(("transposed_conv2d", lambda: _square_sum(ops.transposed_conv2d(s, sw, sb, stride=2)), [s, sw, sb]))
    t = _rand(rng, 2, 3, 4, 4)
    cases.append(("pool_global_avg", lambda: _square_sum(ops.pool(t, "global_avg")), [t]))
    u = _rand(rng, 2, 3, 4, 4)
    u.data *= 3.0
    cases.append(("pool_global_max", lambda: _square_sum(ops.pool(u, "global_max")), [u]))
    v = _rand(rng, 2, 4, 3, 3)
    cases.append(("pool_spatial_avg", lambda: ops.sum_all(ops.mul(ops.pool(v, "spatial_channel_avg"), v)), [v]))
    w = _rand(rng, 2, 4, 3, 3)
    w.data *= 3.0
    cases.append(("pool_spatial_max", lambda: ops.sum_all(ops.mul(ops.pool(w, "spatial_channel_max"), w)), [w]))
    x = _rand(rng, 2, 3, 4, 5)
    cases.append(("bilinear_resize", lambda: _square_sum(ops.bilinear_resize(x, (7, 9))), [x]))
    y, z = _rand(rng, 2, 3, 2, 2), _rand(rng, 2, 2, 2, 2)
    cases.append(("concat", lambda: _square_sum(ops.concat([y, z], axis=1)), [y, z]))
    src = _rand(rng, 5, 3)
    idx = rng.integers(0, 5, size=(5, 2))
    cases.append(("gather_rows", lambda: _square_sum(ops.gather_rows(src, idx)), [src]))
    src2 = _rand(rng, 2, 4, 3)
    idx2 = rng.integers(0, 4, size=(2, 4, 2))
    cases.append(("gather_rows_batched", lambda: _square_sum(ops.gather_rows_batched(src2, idx2)), [src2]))
    aa = _rand(rng, 3, 4, 2)
    cases.append(("mean_all", lambda: ops.mul(ops.mean_all(ops.mul(aa, aa)), 3.0), [aa]))
    bb = _rand(rng, 3, 4, 2)
    cases.append(("mean_axis", lambda: _square_sum(ops.mean_axis(bb, 1)), [bb]))
    cc = _rand(rng, 2, 3)
    cases.append(("expand_spatial", lambda: _square_sum(ops.expand_spatial(cc, (2, 4))), [cc]))
    dd = _rand(rng, 2, 3, 4)
    cases.append((
        "reshape_transpose",
        lambda: _square_sum(ops.transpose(ops.reshape(dd, (2, 12)), (1, 0))),
        [dd],
    ))
    return cases


def run_unit_checks(extended: bool, seed: int = 0) -> list[CheckResult]:
    dtype = np.float64 if extended else np.float32
    step = EXTENDED_STEP if extended else DEFAULT_STEP
    tol = EXTENDED_TOL if extended else DEFAULT_TOL
    results = []
    with default_dtype(dtype):
        rng = np.random.default_rng(seed)
        for name, loss_fn, params in unit_check_cases(rng):
            err = check_gradients(loss_fn, params, step=step)
            results.append(CheckResult(name, err, tol))
    return results


def run_end_to_end_check(seed: int = 14, sampled_params: int = 24) -> CheckResult:
    """Finite-difference check of the full combined loss on the 64x64 tiny
    network, default precision, one random entry from each sampled tensor.

    The heatmap-head weights ship zero-initialized, which would zero the
    gradient of everything upstream; they are randomized here so the check
    exercises real gradient flow through the whole network.
    """
    cfg = tiny_config(seed=seed)
    net = HyattNet(cfg)
    rng = np.random.default_rng(seed + 1)
    for head_w in (net.head1.out_w, net.head2.out_w, net.ffcm.head_w):
        head_w.data = (0.1 * rng.standard_normal(head_w.shape)).astype(head_w.dtype)
    image = Tensor(rng.standard_normal((2, 1, 64, 64)) * 0.5)
    landmarks = rng.uniform(10, 54, size=(2, cfg.num_landmarks, 2))

    def loss_fn():
        stack = net.forward(image, training=True)
        return net.loss(stack, landmarks)

    params = net.parameters()
    pick = np.random.default_rng(seed + 2).choice(len(params), size=sampled_params,
                                                  replace=False)
    sampled = [params[i] for i in sorted(pick)]

    # the check is vacuous unless gradients actually reach the sampled tensors
    from .tensor import Tape, backward

    for p in sampled:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    live = sum(1 for p in sampled if p.grad is not None and np.abs(p.grad).max() > 0)
    if live < sampled_params // 2:
        raise RuntimeError(
            f"end-to-end check ill-posed: only {live}/{sampled_params} sampled "
            "tensors receive gradient"
        )
    for p in sampled:
        p.zero_grad()

    err = check_gradients(loss_fn, sampled, step=DEFAULT_STEP,
                          max_entries_per_param=1,
                          rng=np.random.default_rng(seed + 3))
    return CheckResult("end_to_end_toy_network", err, DEFAULT_TOL)
