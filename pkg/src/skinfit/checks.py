"""Finite-difference gradient checks over random instances.

Shared by ``skinfit gradcheck`` and the test suite.  Every check draws its
instance from the given generator and returns the max relative error
reported by ``grad_check``.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import grad_check
from .losses import batched_pair_loss, chamfer_pairs
from .regressor import Encoder, loopback_loss_t
from .rig import Skeleton, lbs_pose_batch, lbs_pose_t, normalize_weights
from .segnet import SegNet, seg_loss_t

FD_STEP = 1e-5
# central differences are only meaningful where the activation pattern is
# locally constant; instances closer than this to a relu or max-pool switch
# are redrawn
KINK_MARGIN = 1e-4
MAX_REDRAWS = 50


def _pool_gap(x: np.ndarray, out: np.ndarray) -> float:
    for axis in range(x.ndim):
        if x.shape[axis] >= 2 and x.shape[:axis] + x.shape[axis + 1:] == out.shape:
            top2 = -np.partition(-x, 1, axis=axis)
            first = np.take(top2, 0, axis=axis)
            if np.array_equal(first, out):
                return float((first - np.take(top2, 1, axis=axis)).min())
    return np.inf


def kink_margin(fn, point) -> float:
    """Distance of ``fn``'s relu inputs and max-pool gaps from a switch at ``point``."""
    tape = ad.Tape()
    tape.watch = []
    fn(tape.const(np.asarray(point, dtype=np.float64)))
    margin = np.inf
    for op, inputs, out in tape.watch:
        if op == "relu":
            margin = min(margin, float(np.abs(inputs[0]).min()))
        elif op == "max_pool":
            margin = min(margin, _pool_gap(inputs[0], out))
    return margin


def smooth_check(draw, rng: np.random.Generator, fd_step: float = FD_STEP) -> float:
    """grad_check on the first instance from ``draw(rng) -> (fn, point)`` away from kinks."""
    for _ in range(MAX_REDRAWS):
        fn, point = draw(rng)
        if kink_margin(fn, point) > KINK_MARGIN:
            return grad_check(fn, point, fd_step)
    raise RuntimeError("could not draw an instance away from activation switches")


def random_skeleton(rng: np.random.Generator, joints: int | None = None) -> Skeleton:
    j = int(joints or rng.integers(1, 5))
    parent = np.array([-1] + [int(rng.integers(0, i)) for i in range(1, j)])
    rest_rot = np.stack([ad.euler_matrix(rng.uniform(-0.5, 0.5, 3)) for _ in range(j)])
    rest_trans = rng.uniform(-0.3, 0.3, size=(j, 3))
    return Skeleton(parent, rest_rot, rest_trans, -np.ones((j, 3)), np.ones((j, 3)))


def lbs_chamfer_check(rng: np.random.Generator, fd_step: float = FD_STEP) -> float:
    """Chamfer(X, lbs(Θ, U)) w.r.t. Θ and U jointly, nearest pairs fixed at the base point."""
    skel = random_skeleton(rng)
    j = skel.joint_count
    m, n = int(rng.integers(4, 24)), int(rng.integers(4, 24))
    verts = rng.uniform(-0.5, 0.5, size=(m, 3))
    weights = normalize_weights(rng.random((m, j)) ** 3)
    theta = rng.uniform(-1.0, 1.0, size=(j, 3))
    x = rng.uniform(-0.6, 0.6, size=(n, 3))
    posed = lbs_pose_batch(theta[None], verts, weights, skel)[0]
    pairs = [chamfer_pairs(x, posed)]
    point = np.concatenate([theta.ravel(), verts.ravel()])

    def fn(p):
        th = p[: j * 3].reshape(1, j, 3)
        u = p[j * 3:].reshape(m, 3)
        return batched_pair_loss([x], lbs_pose_t(th, u, weights, skel).reshape(1, m, 3), pairs)

    return grad_check(fn, point, fd_step)


def _perturb_init(model, rng):
    # nonzero biases and a non-trivial head so every path carries gradient
    for k in model.params:
        if k.startswith("b"):
            model.params[k] = rng.normal(0.0, 0.1, model.params[k].shape)
    head = model.head
    model.params[head] = rng.normal(0.0, 0.3, model.params[head].shape)


def _draw_loopback(rng):
    joints = int(rng.integers(1, 4))
    enc = Encoder(joints, rng, widths=(6, 8), feature=8)
    _perturb_init(enc, rng)
    batch, n = 2, int(rng.integers(4, 10))
    clouds = rng.uniform(-0.7, 0.7, size=(batch, n, 3))
    theta = rng.uniform(-1.0, 1.0, size=(batch, joints, 3))
    trans = rng.uniform(-0.05, 0.05, size=(batch, 3))

    def fn(p):
        with enc.using(enc.unflatten(p)):
            return loopback_loss_t(enc, p.tape, clouds, theta, trans)

    return fn, enc.flat()


def _draw_seg_ce(rng):
    k = int(rng.integers(2, 5))
    net = SegNet(k, rng, widths=(6, 8), head=8)
    _perturb_init(net, rng)
    batch, n = 2, int(rng.integers(4, 10))
    clouds = rng.uniform(-0.7, 0.7, size=(batch, n, 3))
    labels = rng.integers(0, k, size=(batch, n))

    def fn(p):
        with net.using(net.unflatten(p)):
            return seg_loss_t(net, p.tape, clouds, labels)

    return fn, net.flat()


def loopback_check(rng: np.random.Generator, fd_step: float = FD_STEP) -> float:
    """Loop-back loss w.r.t. every encoder parameter."""
    return smooth_check(_draw_loopback, rng, fd_step)


def seg_ce_check(rng: np.random.Generator, fd_step: float = FD_STEP) -> float:
    """Mean cross-entropy w.r.t. every segmenter parameter."""
    return smooth_check(_draw_seg_ce, rng, fd_step)


# -- per-op checks ----------------------------------------------------------------------


def _op_checks(rng: np.random.Generator) -> dict:
    c = rng.normal(size=(3, 4))
    idx = rng.integers(0, 5, size=7)
    labels = rng.integers(0, 4, size=(2, 5))
    return {
        "add": (lambda x: ad.tsum(ad.square(ad.add(x, c))), rng.normal(size=(3, 4))),
        "sub": (lambda x: ad.tsum(ad.square(ad.sub(c, x))), rng.normal(size=(3, 4))),
        "mul": (lambda x: ad.tsum(ad.mul(ad.mul(x, c), x)), rng.normal(size=(3, 4))),
        "div": (lambda x: ad.tsum(ad.div(c, ad.add(ad.square(x), 1.0))), rng.normal(size=(3, 4))),
        "matmul": (lambda x: ad.tsum(ad.square(ad.matmul(x, c))), rng.normal(size=(2, 3))),
        "mean": (lambda x: ad.mean(ad.square(ad.mean(x, axis=0))), rng.normal(size=(3, 4))),
        "relu": (lambda x: ad.tsum(ad.mul(ad.relu(x), c)), rng.normal(size=(3, 4))),
        "max_pool": (lambda x: ad.tsum(ad.square(ad.max_pool(x, axis=0))), rng.normal(size=(5, 4))),
        "sqrt": (lambda x: ad.tsum(ad.sqrt(ad.add(ad.square(x), 0.5))), rng.normal(size=(3, 4))),
        "gather": (lambda x: ad.tsum(ad.square(ad.gather(x, idx))), rng.normal(size=(5, 3))),
        "concat": (lambda x: ad.tsum(ad.square(ad.concat([x, ad.mul(x, 2.0)], axis=0))), rng.normal(size=(2, 3))),
        "euler": (lambda x: ad.tsum(ad.mul(ad.euler_to_rotation(x), rng_const(x))), rng.normal(size=(4, 3))),
        "cross_entropy": (lambda x: ad.cross_entropy_with_logits(x, labels), rng.normal(size=(2, 5, 4))),
    }


def rng_const(x):
    return np.linspace(-1.0, 1.0, int(np.prod(x.shape)) * 3).reshape(x.shape + (3,))


def op_suite(rng: np.random.Generator, instances: int = 20, fd_step: float = FD_STEP) -> dict[str, float]:
    """Max relative error per op kind over ``instances`` random draws."""
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, (fn, point) in _op_checks(rng).items():
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, point, fd_step))
    return worst


COMPOSITE_CHECKS = {
    "lbs_chamfer": lbs_chamfer_check,
    "loopback": loopback_check,
    "seg_cross_entropy": seg_ce_check,
}
