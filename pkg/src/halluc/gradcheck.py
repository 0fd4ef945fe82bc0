"""Central finite-difference gradient checking for every differentiable op.

`run_operator_suite` is the check battery behind the `gradcheck` CLI command:
it covers each primitive plus the composed conditioner/generator networks on
tiny double-precision configurations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad, zero_grads


def numeric_gradient(f: Callable[[], float], t: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function w.r.t. every element of t."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            up = f()
            flat[i] = original - eps
            down = f()
            flat[i] = original
            gflat[i] = (up - down) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
                    eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and finite differences.

    `build_loss` must rebuild the scalar loss from scratch on every call (the
    tape is single-use).
    """
    zero_grads(params)
    loss = build_loss()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(lambda: build_loss().item(), p, eps)
        worst = max(worst, max_relative_error(analytic, numeric))
    zero_grads(params)
    return worst


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def run_operator_suite(rel_tol: float = 1e-4, eps: float = 1e-6, seed: int = 0) -> List[CheckResult]:
    """Finite-difference checks for all primitives and both hallucinator nets."""
    rng = np.random.default_rng(seed)
    results: List[CheckResult] = []

    def run(name: str, build_loss, params):
        err = check_gradients(build_loss, params, eps)
        results.append(CheckResult(name, err, err < rel_tol))

    a = _leaf(rng, 2, 3)
    b = _leaf(rng, 2, 3)
    run("add", lambda: ops.sum_all(ops.mul(ops.add(a, b), ops.add(a, b))), [a, b])
    run("sub", lambda: ops.sum_all(ops.mul(ops.sub(a, b), ops.sub(a, b))), [a, b])
    run("mul", lambda: ops.sum_all(ops.mul(a, b)), [a, b])
    run("scalar_ops", lambda: ops.sum_all(ops.add(ops.mul(a, 2.5), -1.25)), [a])

    m1 = _leaf(rng, 4, 5)
    m2 = _leaf(rng, 5, 2)
    run("matmul", lambda: ops.sum_all(ops.mul(ops.matmul(m1, m2), ops.matmul(m1, m2))), [m1, m2])

    # keep relu inputs away from the kink
    r = Tensor(rng.standard_normal((3, 4)) + 0.3 * np.sign(rng.standard_normal((3, 4))),
               requires_grad=True)
    r.data[np.abs(r.data) < 0.05] = 0.1
    run("relu", lambda: ops.sum_all(ops.mul(ops.relu(r), ops.relu(r))), [r])

    s = _leaf(rng, 6)
    run("sigmoid", lambda: ops.sum_all(ops.mul(ops.sigmoid(s), ops.sigmoid(s))), [s])

    sm = _leaf(rng, 5)
    smw = Tensor(rng.standard_normal(5), requires_grad=False)
    run("softmax", lambda: ops.sum_all(ops.mul(ops.softmax(sm), Tensor(smw.data))), [sm])

    g = _leaf(rng, 3, 4, 5)
    gw = rng.standard_normal(3)
    run("global_average_pool",
        lambda: ops.sum_all(ops.mul(ops.global_average_pool(g), Tensor(gw))), [g])

    ce = _leaf(rng, 5)
    run("softmax_cross_entropy", lambda: ops.softmax_cross_entropy(ce, 2), [ce])

    ceb = _leaf(rng, 4, 6)
    labels = np.array([0, 3, 5, 1])
    run("cross_entropy_mean", lambda: ops.cross_entropy_mean(ceb, labels), [ceb])

    kl_logits = _leaf(rng, 5)
    teacher = rng.random(5)
    teacher /= teacher.sum()
    run("kl_divergence",
        lambda: ops.kl_divergence(ops.softmax(kl_logits), Tensor(teacher)), [kl_logits])

    mx = _leaf(rng, 2, 3, 3)
    mt = rng.standard_normal((2, 3, 3))
    run("mse_to_target", lambda: ops.mse_to_target(mx, Tensor(mt)), [mx])

    c1 = _leaf(rng, 2, 4)
    c2 = _leaf(rng, 2, 3)
    run("concat", lambda: ops.sum_all(ops.mul(ops.concat([c1, c2], axis=1),
                                              ops.concat([c1, c2], axis=1))), [c1, c2])

    rs = _leaf(rng, 2, 6)
    run("reshape", lambda: ops.sum_all(ops.mul(ops.reshape(rs, (3, 4)),
                                               ops.reshape(rs, (3, 4)))), [rs])

    tl = _leaf(rng, 3, 2)
    tlw = rng.standard_normal((4, 3, 2))
    run("tile_leading", lambda: ops.sum_all(ops.mul(ops.tile_leading(tl, 4), Tensor(tlw))), [tl])

    rv = _leaf(rng, 4, 3)
    rvv = _leaf(rng, 3)
    run("add_rowvec", lambda: ops.sum_all(ops.mul(ops.add_rowvec(rv, rvv),
                                                  ops.add_rowvec(rv, rvv))), [rv, rvv])

    cx = _leaf(rng, 2, 5, 5, scale=0.5)
    cw = _leaf(rng, 3, 2, 3, 3, scale=0.5)
    cb = _leaf(rng, 3, scale=0.5)
    cwt = rng.standard_normal((3, 5, 5))
    run("conv2d_pad1",
        lambda: ops.sum_all(ops.mul(ops.conv2d(cx, cw, cb, 1, 1), Tensor(cwt))), [cx, cw, cb])
    cwt2 = rng.standard_normal((3, 2, 2))
    run("conv2d_stride2",
        lambda: ops.sum_all(ops.mul(ops.conv2d(cx, cw, cb, 2, 0), Tensor(cwt2))), [cx, cw, cb])

    tx = _leaf(rng, 3, 2, 2, scale=0.5)
    tw = _leaf(rng, 3, 2, 3, 3, scale=0.5)
    tb = _leaf(rng, 2, scale=0.5)
    twt = rng.standard_normal((2, 4, 4))
    run("conv2d_transpose",
        lambda: ops.sum_all(ops.mul(ops.conv2d_transpose(tx, tw, tb, 1), Tensor(twt))),
        [tx, tw, tb])
    twt2 = rng.standard_normal((2, 5, 5))
    run("conv2d_transpose_stride2",
        lambda: ops.sum_all(ops.mul(ops.conv2d_transpose(tx, tw, tb, 2), Tensor(twt2))),
        [tx, tw, tb])

    results.extend(run_network_suite(rel_tol=rel_tol, eps=eps, seed=seed + 1))
    return results


def run_network_suite(rel_tol: float = 1e-4, eps: float = 1e-6, seed: int = 1) -> List[CheckResult]:
    """End-to-end checks through tiny conditioner+generator stacks (both variants)
    and the episode training loss."""
    from . import models
    from .meta_training import episode_loss

    results: List[CheckResult] = []
    rng = np.random.default_rng(seed)

    def run(name: str, build_loss, params):
        err = check_gradients(build_loss, params, eps)
        results.append(CheckResult(name, err, err < rel_tol))

    tiny_shape = (2, 3, 3)
    tfh = models.build_tensor_hallucinator(tiny_shape, cond_dim=4, noise_dim=4, seed=seed)
    proto_t = Tensor(rng.random(tiny_shape))
    z_t = Tensor(rng.standard_normal((2, 4)))
    target_t = Tensor(rng.random((2,) + tiny_shape))

    def tfh_loss():
        s = tfh.condition(proto_t)
        gen = tfh.generate(z_t, s)
        return ops.mse_to_target(gen, target_t)

    run("tensor_hallucinator", tfh_loss, tfh.parameters())

    vfh = models.build_vector_hallucinator(3, cond_dim=4, noise_dim=2, hidden_dim=5, seed=seed)
    proto_v = Tensor(rng.random(3))
    z_v = Tensor(rng.standard_normal((2, 2)))
    target_v = Tensor(rng.random((2, 3)))

    def vfh_loss():
        s = vfh.condition(proto_v)
        gen = vfh.generate(z_v, s)
        return ops.mse_to_target(gen, target_v)

    run("vector_hallucinator", vfh_loss, vfh.parameters())

    # the full training objective: N=2 classes, K=2 shots, M=2 generated
    tfh2 = models.build_tensor_hallucinator(tiny_shape, cond_dim=4, noise_dim=4, seed=seed + 1)
    class_feats = [[Tensor(rng.random(tiny_shape)) for _ in range(2)] for _ in range(2)]
    noise = [rng.standard_normal((2, 4)) for _ in range(2)]

    def episode_objective():
        return episode_loss(tfh2, class_feats, 2, noise=noise)

    run("episode_loss", episode_objective, tfh2.parameters())
    return results
