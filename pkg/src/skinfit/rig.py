"""Kinematic hierarchy, forward kinematics and linear blend skinning."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .autodiff import Tensor, euler_matrix


class RigError(ValueError):
    """Invalid rig data; the message names the offending field."""


@dataclass
class Skeleton:
    parent: np.ndarray  # (J,), root has -1
    rest_rot: np.ndarray  # (J, 3, 3) rotation relative to parent
    rest_trans: np.ndarray  # (J, 3) translation relative to parent
    limits_lo: np.ndarray  # (J, 3) radians
    limits_hi: np.ndarray  # (J, 3)
    names: list[str] = field(default_factory=list)
    trans_lo: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans_hi: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.intp)
        self.rest_rot = np.asarray(self.rest_rot, dtype=np.float64)
        self.rest_trans = np.asarray(self.rest_trans, dtype=np.float64)
        self.limits_lo = np.asarray(self.limits_lo, dtype=np.float64)
        self.limits_hi = np.asarray(self.limits_hi, dtype=np.float64)
        self.trans_lo = np.asarray(self.trans_lo, dtype=np.float64)
        self.trans_hi = np.asarray(self.trans_hi, dtype=np.float64)
        if not self.names:
            self.names = [f"joint{j}" for j in range(self.joint_count)]
        self.order = _validate_tree(self.parent)
        j = self.joint_count
        for name, arr, shape in [
            ("rest_rot", self.rest_rot, (j, 3, 3)),
            ("rest_trans", self.rest_trans, (j, 3)),
            ("limits_lo", self.limits_lo, (j, 3)),
            ("limits_hi", self.limits_hi, (j, 3)),
        ]:
            if arr.shape != shape:
                raise RigError(f"{name}: expected shape {shape}, got {arr.shape}")
        bad = np.argwhere(self.limits_lo > self.limits_hi)
        if len(bad):
            jj, a = bad[0]
            raise RigError(f"joints[{jj}].limits: lo > hi on axis {a}")
        if np.any(self.trans_lo > self.trans_hi):
            raise RigError("root_translation_limits: lo > hi")
        self.rest_world = _rest_world(self)

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return int(self.order[0])


def _validate_tree(parent: np.ndarray) -> np.ndarray:
    n = len(parent)
    if n == 0:
        raise RigError("joints: skeleton needs at least one joint")
    roots = np.flatnonzero(parent < 0)
    if len(roots) != 1:
        raise RigError(f"joints: expected exactly one root, found {len(roots)}")
    if np.any(parent >= n):
        raise RigError(f"joints[{int(np.argmax(parent >= n))}].parent: index out of range")
    children = [[] for _ in range(n)]
    for j, p in enumerate(parent):
        if p >= 0:
            children[p].append(j)
    order, stack = [], [int(roots[0])]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        missing = sorted(set(range(n)) - set(order))
        raise RigError(f"joints[{missing[0]}].parent: joint is not reachable from the root (cycle)")
    return np.asarray(order, dtype=np.intp)


def _rest_world(skel: Skeleton) -> np.ndarray:
    return joint_transforms(np.zeros((skel.joint_count, 3)), skel)


@dataclass
class Rig:
    skeleton: Skeleton
    weights: np.ndarray  # (m, J)
    vertices: np.ndarray  # (m, 3)
    faces: np.ndarray  # (F, 3)
    merge_map: np.ndarray | None = None

    def __post_init__(self):
        self.weights = normalize_weights(self.weights)
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.intp).reshape(-1, 3)
        m, j = self.weights.shape
        if j != self.skeleton.joint_count:
            raise RigError(f"weights: {j} columns for {self.skeleton.joint_count} joints")
        if self.vertices.shape != (m, 3):
            raise RigError(f"template.vertices: expected ({m}, 3), got {self.vertices.shape}")
        if np.abs(self.vertices).max(initial=0.0) > 1.0:
            raise RigError("template.vertices: coordinates must lie in [-1, 1]^3")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= m:
                raise RigError("template.faces: vertex index out of range")
            f = self.faces
            degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degen.any():
                raise RigError(f"template.faces[{int(np.argmax(degen))}]: degenerate triangle")
        if self.merge_map is None:
            self.merge_map = np.arange(j)
        self.merge_map = np.asarray(self.merge_map, dtype=np.intp)
        if self.merge_map.shape != (j,):
            raise RigError(f"merge_map: needs one entry per joint ({j})")
        if self.merge_map.min() < 0:
            raise RigError("merge_map: part ids must be >= 0")
        self.labels = partition_labels(self.weights, self.merge_map)

    @property
    def part_count(self) -> int:
        return int(self.merge_map.max()) + 1

    @property
    def joint_count(self) -> int:
        return self.skeleton.joint_count


def normalize_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise RigError(f"weights: expected a 2-D matrix, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        row = int(np.argmax(np.any((w < 0) | ~np.isfinite(w), axis=1)))
        raise RigError(f"weights[{row}]: entries must be finite and nonnegative")
    s = w.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise RigError(f"weights[{int(np.argmax(s[:, 0] <= 0))}]: row sums to zero")
    return w / s


def _check_pose(pose, skel: Skeleton) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (skel.joint_count, 3):
        raise ValueError(f"pose: expected shape ({skel.joint_count}, 3), got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise ValueError("pose: non-finite angle")
    return pose


def joint_transforms(pose, skel: Skeleton, translation=None) -> np.ndarray:
    """World-space 4x4 joint frames, composed root to leaf.

    ``translation`` is the global root offset (zero by default).
    """
    pose = _check_pose(pose, skel)
    local_rot = skel.rest_rot @ euler_matrix(pose)
    world = np.zeros((skel.joint_count, 4, 4))
    world[:, 3, 3] = 1.0
    for j in skel.order:
        p = skel.parent[j]
        if p < 0:
            world[j, :3, :3] = local_rot[j]
            world[j, :3, 3] = skel.rest_trans[j]
            if translation is not None:
                world[j, :3, 3] += np.asarray(translation, dtype=np.float64)
        else:
            world[j, :3, :3] = world[p, :3, :3] @ local_rot[j]
            world[j, :3, 3] = world[p, :3, :3] @ skel.rest_trans[j] + world[p, :3, 3]
    return world


def skinning_transforms(pose, skel: Skeleton, translation=None) -> np.ndarray:
    """Per-joint rest-to-posed transforms G_j(pose) @ inv(G_j(0))."""
    world = joint_transforms(pose, skel, translation)
    rest = skel.rest_world
    inv = np.zeros_like(rest)
    r_t = np.swapaxes(rest[:, :3, :3], -1, -2)
    inv[:, :3, :3] = r_t
    inv[:, :3, 3] = -(r_t @ rest[:, :3, 3, None])[..., 0]
    inv[:, 3, 3] = 1.0
    return world @ inv


def lbs_pose(pose, verts, weights, skel: Skeleton, translation=None) -> np.ndarray:
    """Pose template vertices (m, 3) by blending the joint transforms."""
    verts = np.asarray(verts, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise ValueError(f"verts: expected (m, 3), got {verts.shape}")
    if weights.shape != (verts.shape[0], skel.joint_count):
        raise ValueError(
            f"weights shape {weights.shape} does not match {verts.shape[0]} vertices "
            f"x {skel.joint_count} joints"
        )
    a = skinning_transforms(pose, skel, translation)
    blend = (weights @ a[:, :3, :].reshape(skel.joint_count, 12)).reshape(-1, 3, 4)
    return (blend[:, :, :3] @ verts[:, :, None])[..., 0] + blend[:, :, 3]


def lbs_pose_batch(poses, verts, weights, skel: Skeleton, translations=None) -> np.ndarray:
    """Vectorised over a leading batch axis of poses; ``verts`` is (m,3) or (B,m,3)."""
    poses = np.asarray(poses, dtype=np.float64)
    verts = np.asarray(verts, dtype=np.float64)
    out = []
    for b in range(len(poses)):
        t = None if translations is None else translations[b]
        v = verts if verts.ndim == 2 else verts[b]
        out.append(lbs_pose(poses[b], v, weights, skel, t))
    return np.stack(out)


def joint_positions(pose, skel: Skeleton, translation=None) -> np.ndarray:
    return joint_transforms(pose, skel, translation)[:, :3, 3]


def lbs_pose_t(theta: Tensor, verts, weights, skel: Skeleton, translation=None) -> Tensor:
    """Differentiable LBS on the tape.

    theta: (B, J, 3) tensor; verts: (m, 3) or (B, m, 3) tensor/array;
    translation: optional (B, 3) root offset.
    """
    tape = ad._tape_of(theta, verts, translation)
    theta = ad._lift(theta, tape)
    batch, jc = theta.shape[0], skel.joint_count
    local = ad.euler_to_rotation(theta)  # (B, J, 3, 3)
    rot: list = [None] * jc
    pos: list = [None] * jc
    for j in skel.order:
        p = skel.parent[j]
        lr = ad.matmul(skel.rest_rot[j], local[:, j])
        if p < 0:
            rot[j] = lr
            t = np.broadcast_to(skel.rest_trans[j], (batch, 3))
            pos[j] = t if translation is None else ad.add(translation, t)
        else:
            rot[j] = ad.matmul(rot[p], lr)
            off = ad.matmul(rot[p], skel.rest_trans[j][:, None]).reshape(batch, 3)
            pos[j] = ad.add(off, pos[p])
    rot_w = ad.stack(rot, axis=1)  # (B, J, 3, 3)
    pos_w = ad.stack([ad._lift(x, tape) for x in pos], axis=1)  # (B, J, 3)
    rest = skel.rest_world
    a_rot = ad.matmul(rot_w, np.swapaxes(rest[:, :3, :3], -1, -2))
    a_t = ad.sub(pos_w, ad.matmul(a_rot, rest[:, :3, 3, None]).reshape(batch, jc, 3))
    m = weights.shape[0]
    blend_rot = ad.matmul(weights, a_rot.reshape(batch, jc, 9)).reshape(batch, m, 3, 3)
    blend_t = ad.matmul(weights, a_t)
    verts = ad._lift(verts, tape)
    u = verts.reshape(m, 1, 3) if verts.ndim == 2 else verts.reshape(batch, m, 1, 3)
    return ad.add(ad.tsum(ad.mul(blend_rot, u), axis=-1), blend_t)


def partition_labels(weights, merge_map=None) -> np.ndarray:
    """Part id of each vertex: merge_map[argmax_j w_ij], ties to the lowest joint."""
    weights = np.asarray(weights)
    j = weights.shape[1]
    merge_map = np.arange(j) if merge_map is None else np.asarray(merge_map, dtype=np.intp)
    if merge_map.shape != (j,):
        raise ValueError(f"merge_map needs {j} entries, got {merge_map.shape}")
    return merge_map[np.argmax(weights, axis=1)]


def clamp_pose(pose, skel: Skeleton) -> np.ndarray:
    return np.clip(np.asarray(pose, dtype=np.float64), skel.limits_lo, skel.limits_hi)


def clamp_translation(t, skel: Skeleton) -> np.ndarray:
    return np.clip(np.asarray(t, dtype=np.float64), skel.trans_lo, skel.trans_hi)


def pose_within_limits(pose, skel: Skeleton, tol: float = 1e-12) -> bool:
    pose = np.asarray(pose)
    return bool(np.all(pose >= skel.limits_lo - tol) and np.all(pose <= skel.limits_hi + tol))


# -- rig file -----------------------------------------------------------------


def _field(doc, key, where):
    if key not in doc:
        raise RigError(f"{where}{key}: missing field")
    return doc[key]


def rig_from_dict(doc: dict) -> Rig:
    joints = _field(doc, "joints", "")
    if not isinstance(joints, list) or not joints:
        raise RigError("joints: expected a non-empty list")
    names = [j.get("name", f"joint{i}") for i, j in enumerate(joints)]
    index = {n: i for i, n in enumerate(names)}
    parent, rest_rot, rest_trans, lo, hi = [], [], [], [], []
    for i, j in enumerate(joints):
        where = f"joints[{i}]."
        p = _field(j, "parent", where)
        if p is None or p == -1:
            parent.append(-1)
        elif isinstance(p, str):
            if p not in index:
                raise RigError(f"{where}parent: unknown joint {p!r}")
            parent.append(index[p])
        else:
            parent.append(int(p))
        q = np.asarray(j.get("rest_rotation", [1.0, 0.0, 0.0, 0.0]), dtype=np.float64)
        if q.shape != (4,) or not np.all(np.isfinite(q)) or np.linalg.norm(q) == 0:
            raise RigError(f"{where}rest_rotation: expected a nonzero wxyz quaternion")
        rest_rot.append(Rotation.from_quat(q[[1, 2, 3, 0]]).as_matrix())
        t = np.asarray(j.get("rest_translation", [0.0, 0.0, 0.0]), dtype=np.float64)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise RigError(f"{where}rest_translation: expected 3 finite numbers")
        rest_trans.append(t)
        for key, dst in (("limits_lo", lo), ("limits_hi", hi)):
            v = np.asarray(j.get(key, [0.0, 0.0, 0.0]), dtype=np.float64)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise RigError(f"{where}{key}: expected 3 finite numbers")
            dst.append(v)
    tl = doc.get("root_translation_limits", {"lo": [0, 0, 0], "hi": [0, 0, 0]})
    skel = Skeleton(parent, rest_rot, rest_trans, lo, hi, names, tl["lo"], tl["hi"])
    template = _field(doc, "template", "")
    return Rig(
        skel,
        np.asarray(_field(doc, "weights", ""), dtype=np.float64),
        np.asarray(_field(template, "vertices", "template."), dtype=np.float64),
        np.asarray(_field(template, "faces", "template."), dtype=np.intp),
        doc.get("merge_map"),
    )


def rig_to_dict(rig: Rig) -> dict:
    skel = rig.skeleton
    joints = []
    for j in range(skel.joint_count):
        xyzw = Rotation.from_matrix(skel.rest_rot[j]).as_quat()
        joints.append(
            {
                "name": skel.names[j],
                "parent": int(skel.parent[j]),
                "rest_rotation": [float(xyzw[3]), *map(float, xyzw[:3])],
                "rest_translation": skel.rest_trans[j].tolist(),
                "limits_lo": skel.limits_lo[j].tolist(),
                "limits_hi": skel.limits_hi[j].tolist(),
            }
        )
    return {
        "joints": joints,
        "root_translation_limits": {"lo": skel.trans_lo.tolist(), "hi": skel.trans_hi.tolist()},
        "weights": rig.weights.tolist(),
        "template": {"vertices": rig.vertices.tolist(), "faces": rig.faces.tolist()},
        "merge_map": rig.merge_map.tolist(),
    }


def load_rig(path) -> Rig:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise RigError(f"{path}: line {e.lineno}: {e.msg}") from None
    try:
        return rig_from_dict(doc)
    except RigError as e:
        raise RigError(f"{path}: {e}") from None


def save_rig(rig: Rig, path):
    Path(path).write_text(json.dumps(rig_to_dict(rig)))
