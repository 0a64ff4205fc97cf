"""Point-cloud part segmentation trained on LBS-generated samples."""
from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor, log_softmax
from .nn import Model, canonical_order, he_init
from .rig import Rig, lbs_pose_batch, pose_within_limits
from .synth import face_areas, face_labels, interpolate


class SegNet(Model):
    """Shared per-point MLP, global max-pool, and a per-point head on
    concat(point feature, global feature)."""

    name = "segnet"
    head = "w3"

    def __init__(self, part_count: int, rng: np.random.Generator, widths=(64, 128), head: int = 128):
        super().__init__()
        self.part_count = part_count
        w0, w1 = widths
        self.params = {
            "w0": he_init(rng, 3, w0),
            "b0": np.zeros(w0),
            "w1": he_init(rng, w0, w1),
            "b1": np.zeros(w1),
            "w2": he_init(rng, 2 * w1, head),
            "b2": np.zeros(head),
            "w3": he_init(rng, head, part_count, gain=0.1),
            "b3": np.zeros(part_count),
        }

    def forward(self, tape: Tape | None, clouds) -> Tensor:
        """Logits (B, n, k) in the input point order."""
        clouds = np.asarray(clouds, dtype=np.float64)
        if clouds.ndim != 3 or clouds.shape[1] == 0:
            raise ValueError("segnet needs a (B, n>=1, 3) batch of clouds")
        batch, n = clouds.shape[:2]
        order = canonical_order(clouds)
        x = np.take_along_axis(clouds, order[..., None], axis=1)
        p = self.bind(tape)
        h = ad.relu(ad.add(ad.matmul(x, p["w0"]), p["b0"]))
        h = ad.relu(ad.add(ad.matmul(h, p["w1"]), p["b1"]))
        width = h.shape[-1]
        g = ad.max_pool(h, axis=1)
        # concat(h, g) @ w2 evaluated as h @ w2[:width] + g @ w2[width:]
        w_point = p["w2"][:width]
        w_glob = p["w2"][width:]
        gz = ad.reshape(ad.matmul(g, w_glob), (batch, 1, w_glob.shape[-1]))
        h = ad.relu(ad.add(ad.add(ad.matmul(h, w_point), gz), p["b2"]))
        logits = ad.add(ad.matmul(h, p["w3"]), p["b3"])
        inverse = np.argsort(order, axis=1)
        return logits[np.arange(batch)[:, None], inverse]


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def seg_infer(model: SegNet, points) -> tuple[np.ndarray, np.ndarray]:
    """Labels (n,) and class probabilities (n, k) for one cloud.

    Duplicate points are evaluated once, so copies get identical outputs.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("seg_infer needs at least one point")
    uniq, inverse = np.unique(points, axis=0, return_inverse=True)
    logits = model.forward(None, uniq[None]).value[0]
    if logits.shape[-1] != model.part_count:
        raise ValueError("model output does not match its part count")
    probs = softmax(logits)[inverse.reshape(-1)]
    return np.argmax(probs, axis=1), probs


def seg_infer_batch(model: SegNet, clouds) -> np.ndarray:
    """Labels (B, n) for an equally sized batch (no duplicate folding)."""
    return np.argmax(model.forward(None, clouds).value, axis=-1)


def seg_loss_t(model: SegNet, tape: Tape | None, clouds, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= model.part_count):
        raise ValueError(f"label out of range [0, {model.part_count})")
    return ad.cross_entropy_with_logits(model.forward(tape, clouds), labels)


def seg_train_step(model: SegNet, opt: Adam, clouds, labels) -> float:
    """One optimizer step on mean cross-entropy; returns the pre-step loss."""
    tape = Tape()
    loss = seg_loss_t(model, tape, clouds, labels)
    opt.step(model.params, model.grads_from(tape.backward(loss)))
    return float(loss.value)


class SurfaceSampler:
    """Area-weighted surface samples of posed templates with part labels."""

    def __init__(self, rig: Rig):
        self.rig = rig
        self.face_labels = face_labels(rig.labels, rig.faces)

    def sample(self, verts: np.ndarray, n: int, rng: np.random.Generator):
        """verts (B, m, 3) posed templates -> points (B, n, 3), labels (B, n)."""
        pts, labs = [], []
        faces = self.rig.faces
        for v in verts:
            p = face_areas(v, faces)
            fidx = rng.choice(len(faces), size=n, p=p / p.sum())
            r1, r2 = rng.random(n), rng.random(n)
            s = np.sqrt(r1)
            bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
            pts.append(interpolate(v, faces, fidx, bary))
            labs.append(self.face_labels[fidx])
        return np.stack(pts), np.stack(labs)


def make_self_supervision(rig: Rig, templates, theta, trans, n: int, rng: np.random.Generator,
                          sampler: SurfaceSampler | None = None):
    """Posed surface samples and their rig part labels.

    templates: (m, 3) shared or (B, m, 3) per example; poses outside the
    limits are clamped with a warning.
    """
    skel = rig.skeleton
    theta = np.asarray(theta, dtype=np.float64)
    if not all(pose_within_limits(t, skel) for t in theta):
        warnings.warn("self-supervision pose outside joint limits; clamping")
        theta = np.clip(theta, skel.limits_lo, skel.limits_hi)
    trans = np.clip(np.asarray(trans, dtype=np.float64), skel.trans_lo, skel.trans_hi)
    posed = lbs_pose_batch(theta, templates, rig.weights, skel, trans)
    sampler = sampler or SurfaceSampler(rig)
    return sampler.sample(posed, n, rng)
