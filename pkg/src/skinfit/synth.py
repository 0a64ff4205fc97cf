"""Toy articulated rigs and scan generation with full ground truth.

Rigs are assembled from tube meshes (one per limb) around a bone hierarchy.
Scans are area-weighted surface samples of the posed mesh, optionally with
per-part density changes, holes and normal-direction noise.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio
from .rig import Rig, Skeleton, clamp_pose, lbs_pose, pose_within_limits

DATASET_FORMAT = "skinfit-dataset"
DATASET_VERSION = 1

Limits = tuple[tuple[float, float, float], tuple[float, float, float]]
LOCKED: Limits = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))


@dataclass(frozen=True)
class ToyRigSpec:
    """Parametric description of a chain or star (hand-like) rig.

    chain: one tube through ``segment_lengths`` along +y.
    star: a palm tube plus ``fingers`` tubes, each with ``segment_lengths``.
    ``joint_limits[s]`` applies to the s-th joint of each limb (chain joints
    after the root, or finger joints).  ``thickness`` and ``length`` are the
    modality multipliers for radii and limb segment lengths.
    """

    name: str
    topology: str
    segment_lengths: tuple[float, ...]
    radius: float
    root_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    root_limits: Limits = LOCKED
    joint_limits: tuple[Limits, ...] = ()
    fingers: int = 0
    finger_spacing: float = 0.0
    palm_length: float = 0.0
    palm_width: float = 0.0
    palm_thickness: float = 0.0
    translation_limit: float = 0.0
    around: int = 12
    rings_per_segment: int = 5
    cap_rings: int = 3
    blend: float = 0.5
    palm_around: int = 0
    palm_rings: int = 0
    thickness: float = 1.0
    length: float = 1.0

    def with_modality(self, thickness: float = 1.0, length: float = 1.0) -> ToyRigSpec:
        return replace(self, thickness=thickness, length=length)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _lim(lo, hi) -> Limits:
    return (tuple(lo), tuple(hi))


PRESETS: dict[str, ToyRigSpec] = {
    "chain1": ToyRigSpec("chain1", "chain", (0.8,), 0.1, root_offset=(0.0, -0.4, 0.0),
                         root_limits=_lim((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))),
    "chain2": ToyRigSpec("chain2", "chain", (0.4, 0.4), 0.08, root_offset=(0.0, -0.4, 0.0),
                         root_limits=_lim((-0.3, -0.3, -0.3), (0.3, 0.3, 0.3)),
                         joint_limits=(_lim((-0.6, 0, -1.2), (0.6, 0, 1.2)),)),
    "chain3": ToyRigSpec("chain3", "chain", (0.3, 0.3, 0.3), 0.07, root_offset=(0.0, -0.45, 0.0),
                         root_limits=_lim((-0.3, -0.3, -0.3), (0.3, 0.3, 0.3)),
                         joint_limits=(_lim((-0.6, 0, -1.2), (0.6, 0, 1.2)),) * 2),
    "hand3": ToyRigSpec("hand3", "star", (0.22, 0.2), 0.04, root_offset=(0.0, -0.45, 0.0),
                        root_limits=_lim((-0.3, -0.3, -0.3), (0.3, 0.3, 0.3)),
                        joint_limits=(_lim((-0.2, 0, -0.3), (1.3, 0, 0.3)), _lim((0, 0, 0), (1.4, 0, 0))),
                        fingers=3, finger_spacing=0.14, palm_length=0.4, palm_width=0.38,
                        palm_thickness=0.07, translation_limit=0.03, palm_around=20, palm_rings=8),
    "hand5": ToyRigSpec("hand5", "star", (0.16, 0.14, 0.12), 0.03, root_offset=(0.0, -0.45, 0.0),
                        root_limits=_lim((-0.3, -0.3, -0.3), (0.3, 0.3, 0.3)),
                        joint_limits=(_lim((-0.2, 0, -0.25), (1.3, 0, 0.25)),
                                      _lim((0, 0, 0), (1.4, 0, 0)), _lim((0, 0, 0), (1.2, 0, 0))),
                        fingers=5, finger_spacing=0.085, palm_length=0.4, palm_width=0.44,
                        palm_thickness=0.06, translation_limit=0.03),
    "swap2": ToyRigSpec("swap2", "star", (0.28, 0.28), 0.045, root_offset=(0.0, -0.4, 0.0),
                        joint_limits=(_lim((0, 0, -0.9), (0, 0, 0.9)), _lim((0, 0, -0.3), (0, 0, 0.3))),
                        fingers=2, finger_spacing=0.24, palm_length=0.3, palm_width=0.4,
                        palm_thickness=0.07),
}


def get_spec(name_or_spec) -> ToyRigSpec:
    if isinstance(name_or_spec, ToyRigSpec):
        return name_or_spec
    if name_or_spec not in PRESETS:
        raise KeyError(f"unknown rig spec {name_or_spec!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name_or_spec]


# -- geometry -------------------------------------------------------------------


def _frame(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = ref - ref.dot(d) * d
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def tube_mesh(path, rx, rz, rings_per_segment, around, cap_rings) -> tuple[np.ndarray, np.ndarray]:
    """Closed tube with ellipsoidal end caps along a straight-segment polyline."""
    path = np.asarray(path, dtype=np.float64)
    phi = 2.0 * np.pi * np.arange(around) / around
    cos, sin = np.cos(phi)[:, None], np.sin(phi)[:, None]

    def ring(c, d, scale):
        e1, e2 = _frame(d)
        return c + scale * (rx * cos * e1 + rz * sin * e2)

    d_first = path[1] - path[0]
    d_first /= np.linalg.norm(d_first)
    d_last = path[-1] - path[-2]
    d_last /= np.linalg.norm(d_last)
    cap = 0.5 * (rx + rz)
    rings = []
    for k in range(cap_rings, 0, -1):
        g = 0.5 * np.pi * k / (cap_rings + 1)
        rings.append(ring(path[0] - d_first * cap * np.cos(g), d_first, np.sin(g)))
    for s in range(len(path) - 1):
        d = path[s + 1] - path[s]
        d /= np.linalg.norm(d)
        for i in range(0 if s == 0 else 1, rings_per_segment + 1):
            rings.append(ring(path[s] + (path[s + 1] - path[s]) * i / rings_per_segment, d, 1.0))
    for k in range(1, cap_rings + 1):
        g = 0.5 * np.pi * k / (cap_rings + 1)
        rings.append(ring(path[-1] + d_last * cap * np.sin(g), d_last, np.cos(g)))
    start = path[0] - d_first * cap
    end = path[-1] + d_last * cap
    verts = np.concatenate([start[None], *rings, end[None]])
    faces = []
    nr = len(rings)
    base = lambda r: 1 + r * around  # noqa: E731
    for a in range(around):
        b = (a + 1) % around
        faces.append((0, base(0) + b, base(0) + a))
        for r in range(nr - 1):
            p, q = base(r), base(r + 1)
            faces.append((p + a, p + b, q + b))
            faces.append((p + a, q + b, q + a))
        faces.append((len(verts) - 1, base(nr - 1) + a, base(nr - 1) + b))
    return verts, np.asarray(faces, dtype=np.intp)


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((p - a) @ ab) / ab.dot(ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


@dataclass
class Limb:
    joints: list[int]
    tip_offset: np.ndarray  # tip position in the frame of the last joint


@dataclass
class ToyRig:
    """A Rig plus the limb layout needed by pose samplers."""

    rig: Rig
    spec: ToyRigSpec
    limbs: list[Limb] = field(default_factory=list)


def build_toy_rig(spec) -> ToyRig:
    spec = get_spec(spec)
    if spec.radius <= 0 or any(length <= 0 for length in spec.segment_lengths):
        raise ValueError(f"{spec.name}: radius and segment lengths must be positive")
    if spec.topology == "chain":
        return _build_chain(spec)
    if spec.topology == "star":
        if spec.fingers < 1:
            raise ValueError(f"{spec.name}: star topology needs at least one finger")
        if spec.fingers > 1 and spec.finger_spacing < 2 * spec.radius * spec.thickness:
            raise ValueError(f"{spec.name}: overlapping finger segments (spacing < 2 radius)")
        return _build_star(spec)
    raise ValueError(f"{spec.name}: unknown topology {spec.topology!r}")


def _limits(spec: ToyRigSpec, s: int) -> Limits:
    return spec.joint_limits[s] if s < len(spec.joint_limits) else LOCKED


def _weights(verts, bones, candidates, blend):
    """Smoothed distance-to-bone weights restricted to candidate bones."""
    dist = np.stack([_point_segment_distance(verts, a, b) for a, b in bones], axis=1)
    mask = np.zeros_like(dist, dtype=bool)
    mask[:, candidates] = True
    dist = np.where(mask, dist, np.inf)
    rel = dist - dist.min(axis=1, keepdims=True)
    w = np.exp(-((rel / blend) ** 2))
    w /= w.sum(axis=1, keepdims=True)
    w[w < 1e-3] = 0.0
    return w / w.sum(axis=1, keepdims=True)


def _build_chain(spec: ToyRigSpec) -> ToyRig:
    lengths = np.asarray(spec.segment_lengths) * spec.length
    r = spec.radius * spec.thickness
    n = len(lengths)
    offsets = [np.asarray(spec.root_offset, dtype=np.float64)] + [np.array([0.0, lengths[s], 0.0]) for s in range(n - 1)]
    limits = [spec.root_limits] + [_limits(spec, s) for s in range(n - 1)]
    skel = _skeleton(list(range(-1, n - 1)), offsets, limits, [f"seg{s}" for s in range(n)], spec)
    origins = skel.rest_world[:, :3, 3]
    tip = origins[-1] + np.array([0.0, lengths[-1], 0.0])
    path = np.concatenate([origins, tip[None]])
    verts, faces = tube_mesh(path, r, r, spec.rings_per_segment, spec.around, spec.cap_rings)
    bones = [(path[s], path[s + 1]) for s in range(n)]
    w = _weights(verts, bones, list(range(n)), spec.blend * r)
    rig = Rig(skel, w, verts, faces)
    return ToyRig(rig, spec, [Limb(list(range(n)), np.array([0.0, lengths[-1], 0.0]))])


def _build_star(spec: ToyRigSpec) -> ToyRig:
    lengths = np.asarray(spec.segment_lengths) * spec.length
    r = spec.radius * spec.thickness
    nseg, nf = len(lengths), spec.fingers
    parents, offsets, limits, names, merge = [-1], [np.asarray(spec.root_offset, dtype=np.float64)], [spec.root_limits], ["palm"], [0]
    limbs = []
    xs = (np.arange(nf) - (nf - 1) / 2.0) * spec.finger_spacing
    for f in range(nf):
        joints = []
        for s in range(nseg):
            j = len(parents)
            joints.append(j)
            parents.append(0 if s == 0 else j - 1)
            offsets.append(np.array([xs[f], spec.palm_length, 0.0]) if s == 0 else np.array([0.0, lengths[s - 1], 0.0]))
            limits.append(_limits(spec, s))
            names.append(f"finger{f}_{s}")
            merge.append(f + 1)
        limbs.append(Limb(joints, np.array([0.0, lengths[-1], 0.0])))
    skel = _skeleton(parents, offsets, limits, names, spec)
    origins = skel.rest_world[:, :3, 3]
    root = origins[0]
    palm_end = root + np.array([0.0, spec.palm_length, 0.0])
    bones = [(root, palm_end)]
    parts_v, parts_f, cands = [], [], []
    pv, pf = tube_mesh(np.stack([root, palm_end]), 0.5 * spec.palm_width * spec.thickness,
                       spec.palm_thickness * spec.thickness, spec.palm_rings or spec.rings_per_segment,
                       spec.palm_around or spec.around, spec.cap_rings)
    parts_v.append(pv)
    parts_f.append(pf)
    cands.append([0])
    for limb in limbs:
        path = [origins[j] for j in limb.joints]
        path.append(path[-1] + np.array([0.0, lengths[-1], 0.0]))
        for s, j in enumerate(limb.joints):
            bones.append((path[s], path[s + 1]))
        v, f = tube_mesh(np.stack(path), r, r, spec.rings_per_segment, spec.around, spec.cap_rings)
        parts_v.append(v)
        parts_f.append(f)
        cands.append([0] + limb.joints)
    verts, faces, w_rows = [], [], []
    offset = 0
    for v, f, c in zip(parts_v, parts_f, cands):
        verts.append(v)
        faces.append(f + offset)
        w_rows.append(_weights(v, bones, c, spec.blend * r))
        offset += len(v)
    rig = Rig(skel, np.concatenate(w_rows), np.concatenate(verts), np.concatenate(faces), np.asarray(merge))
    return ToyRig(rig, spec, limbs)


def _skeleton(parents, offsets, limits, names, spec: ToyRigSpec) -> Skeleton:
    j = len(parents)
    t = spec.translation_limit
    return Skeleton(
        parents,
        np.tile(np.eye(3), (j, 1, 1)),
        np.asarray(offsets),
        np.asarray([lim[0] for lim in limits], dtype=np.float64),
        np.asarray([lim[1] for lim in limits], dtype=np.float64),
        names,
        np.full(3, -t),
        np.full(3, t),
    )


# -- surface sampling -------------------------------------------------------------


def face_areas(verts, faces) -> np.ndarray:
    a, b, c = (verts[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def face_normals(verts, faces) -> np.ndarray:
    a, b, c = (verts[faces[:, i]] for i in range(3))
    n = np.cross(b - a, c - a)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


def face_labels(vertex_labels, faces) -> np.ndarray:
    """Majority vote of the three corner labels; no majority -> lowest label."""
    lab = np.asarray(vertex_labels)[faces]
    a, b, c = lab[:, 0], lab[:, 1], lab[:, 2]
    out = np.minimum(np.minimum(a, b), c)
    out = np.where(a == b, a, out)
    out = np.where(a == c, a, out)
    out = np.where(b == c, b, out)
    return out


def sample_surface(verts, faces, n: int, rng: np.random.Generator, face_weight=None):
    """Area-weighted random surface locations: (face index, barycentrics)."""
    p = face_areas(verts, faces)
    if face_weight is not None:
        p = p * face_weight
    p = p / p.sum()
    fidx = rng.choice(len(faces), size=n, p=p)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    return fidx, bary


def interpolate(verts, faces, fidx, bary) -> np.ndarray:
    """Points at barycentric locations; verts may carry a leading batch axis."""
    corners = verts[..., faces[fidx], :]  # (..., n, 3, 3)
    return (corners * bary[:, :, None]).sum(axis=-2)


@dataclass
class HoleSpec:
    """Spherical region (rest-template coordinates) removed from a scan."""

    center: tuple[float, float, float]
    radius: float


@dataclass
class Scan:
    points: np.ndarray
    gt_pose: np.ndarray
    gt_translation: np.ndarray
    gt_labels: np.ndarray
    gt_correspondence: np.ndarray
    face_index: np.ndarray
    barycentric: np.ndarray
    modality: int = 0


def sample_scan(rig: Rig, pose, n: int, rng: np.random.Generator, translation=None,
                density=None, holes=(), drop_parts=(), sigma: float = 0.005,
                source: Rig | None = None, modality: int = 0) -> Scan:
    """Sample ``n`` points from the posed surface with full ground truth.

    ``source`` is the modality rig actually scanned (defaults to ``rig``); it
    must share topology with ``rig``.  ``density`` gives per-part sampling
    multipliers.  Samples landing in ``holes`` or ``drop_parts`` are removed
    and replaced by further draws.
    """
    if not pose_within_limits(pose, rig.skeleton):
        raise ValueError("sample_scan: pose outside joint limits")
    src = source or rig
    if src.vertices.shape != rig.vertices.shape or not np.array_equal(src.faces, rig.faces):
        raise ValueError("sample_scan: source rig must share the template topology")
    posed = lbs_pose(pose, src.vertices, src.weights, src.skeleton, translation)
    flabels = face_labels(rig.labels, rig.faces)
    weight = None
    if density is not None:
        weight = np.asarray(density, dtype=np.float64)[flabels]
    keep_face = ~np.isin(flabels, np.asarray(drop_parts, dtype=np.intp))
    fidx_all, bary_all = [], []
    have = 0
    for _ in range(50):
        fidx, bary = sample_surface(posed, rig.faces, max(n, 16), rng, weight)
        ok = keep_face[fidx]
        if holes:
            rest = interpolate(src.vertices, rig.faces, fidx, bary)
            for h in holes:
                ok &= np.linalg.norm(rest - np.asarray(h.center), axis=1) > h.radius
        fidx_all.append(fidx[ok])
        bary_all.append(bary[ok])
        have += int(ok.sum())
        if have >= n:
            break
    fidx = np.concatenate(fidx_all)[:n]
    bary = np.concatenate(bary_all)[:n]
    pts = interpolate(posed, rig.faces, fidx, bary)
    if sigma > 0:
        pts = pts + face_normals(posed, rig.faces)[fidx] * rng.normal(0.0, sigma, size=(len(fidx), 1))
    rest_pts = interpolate(src.vertices, rig.faces, fidx, bary)
    corners = rig.faces[fidx]
    d = np.linalg.norm(src.vertices[corners] - rest_pts[:, None, :], axis=2)
    corr = corners[np.arange(len(fidx)), np.argmin(d, axis=1)]
    return Scan(pts, np.asarray(pose, dtype=np.float64),
                np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64),
                flabels[fidx], corr, fidx, bary, modality)


# -- pose samplers ---------------------------------------------------------------------


def uniform_poses(skel: Skeleton, count: int, rng: np.random.Generator):
    theta = rng.uniform(skel.limits_lo, skel.limits_hi, size=(count,) + skel.limits_lo.shape)
    trans = rng.uniform(skel.trans_lo, skel.trans_hi, size=(count, 3))
    return theta, trans


def _tip(toy: ToyRig, limb: Limb, pose) -> np.ndarray:
    from .rig import joint_transforms

    g = joint_transforms(pose, toy.rig.skeleton)[limb.joints[-1]]
    return g[:3, :3] @ limb.tip_offset + g[:3, 3]


def touching_pose(toy: ToyRig, rng: np.random.Generator, gap: float = 0.1):
    """Uniform pose with two adjacent fingertips driven to near contact.

    Flexion of the second finger copies the first; the spread angles (z axis
    of each finger's base joint) close symmetrically until the tip centres
    sit 2 radii * (1 + gap) apart.
    """
    skel = toy.rig.skeleton
    if len(toy.limbs) < 2:
        raise ValueError("touching poses need at least two limbs")
    theta, trans = uniform_poses(skel, 1, rng)
    theta, trans = theta[0], trans[0]
    a = int(rng.integers(len(toy.limbs) - 1))
    la, lb = toy.limbs[a], toy.limbs[a + 1]
    for ja, jb in zip(la.joints, lb.joints):
        theta[jb, 0] = theta[ja, 0]
    theta = clamp_pose(theta, skel)
    ba, bb = la.joints[0], lb.joints[0]
    target = 2.0 * toy.spec.radius * toy.spec.thickness * (1.0 + gap)

    def dist(s, sign):
        t = theta.copy()
        t[ba, 2], t[bb, 2] = -sign * s, sign * s
        return np.linalg.norm(_tip(toy, la, t) - _tip(toy, lb, t)), t

    # closing direction depends on limb layout
    sign = 1.0 if dist(1e-3, 1.0)[0] <= dist(1e-3, -1.0)[0] else -1.0
    if sign > 0:
        hi = min(-skel.limits_lo[ba, 2], skel.limits_hi[bb, 2])
    else:
        hi = min(skel.limits_hi[ba, 2], -skel.limits_lo[bb, 2])

    # fingers may swing past each other, so scan for the first contact
    grid = np.linspace(0.0, max(hi, 0.0), 65)
    d = np.array([dist(g, sign)[0] for g in grid])
    hit = np.flatnonzero(d <= target)
    if len(hit) == 0:
        return dist(grid[np.argmin(d)], sign)[1], trans
    if hit[0] == 0:
        return dist(0.0, sign)[1], trans
    lo_s, hi_s = grid[hit[0] - 1], grid[hit[0]]
    for _ in range(40):
        mid = 0.5 * (lo_s + hi_s)
        if dist(mid, sign)[0] > target:
            lo_s = mid
        else:
            hi_s = mid
    return dist(hi_s, sign)[1], trans


def touching_poses(toy: ToyRig, count: int, rng: np.random.Generator):
    out = [touching_pose(toy, rng) for _ in range(count)]
    return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])


def crossed_poses(toy: ToyRig, count: int, rng: np.random.Generator, spread=(0.5, 0.75)):
    """Two-limb poses with the fingers crossed over each other (swap scenario)."""
    skel = toy.rig.skeleton
    if len(toy.limbs) != 2:
        raise ValueError("crossed poses need exactly two limbs")
    theta = np.zeros((count,) + skel.limits_lo.shape)
    la, lb = toy.limbs
    theta[:, la.joints[0], 2] = -rng.uniform(*spread, size=count)
    theta[:, lb.joints[0], 2] = rng.uniform(*spread, size=count)
    for j in la.joints[1:] + lb.joints[1:]:
        theta[:, j, 2] = rng.uniform(-0.1, 0.1, size=count)
    theta = np.clip(theta, skel.limits_lo, skel.limits_hi)
    return theta, np.zeros((count, 3))


POSE_SAMPLERS = {
    "uniform": lambda toy, count, rng: uniform_poses(toy.rig.skeleton, count, rng),
    "touching": touching_poses,
    "crossed": crossed_poses,
}


# -- datasets ---------------------------------------------------------------------------


@dataclass
class Dataset:
    rig: Rig
    spec: ToyRigSpec
    modalities: list[tuple[float, float]]
    scans: list[Scan]
    split: list[str]
    manifest: dict

    def subset(self, split: str) -> list[Scan]:
        return [s for s, k in zip(self.scans, self.split) if k == split]

    def modality_rig(self, modality: int) -> Rig:
        t, length = self.modalities[modality]
        return build_toy_rig(self.spec.with_modality(t, length)).rig


def scan_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_scans(spec, sampler: str, count: int, seed: int, n_points: int = 2048,
                   modalities=((1.0, 1.0),), sigma: float = 0.005, holes=(), density=None):
    """Seeded scans; scan i uses its own RNG stream derived from (seed, i)."""
    toy = build_toy_rig(spec)
    variants = [build_toy_rig(toy.spec.with_modality(t, ln)).rig for t, ln in modalities]
    scans = []
    for i in range(count):
        rng = scan_rng(seed, i)
        theta, trans = POSE_SAMPLERS[sampler](toy, 1, rng)
        mod = int(rng.integers(len(variants)))
        scans.append(sample_scan(toy.rig, theta[0], n_points, rng, trans[0], density=density,
                                 holes=holes, sigma=sigma, source=variants[mod], modality=mod))
    return toy, scans


def make_dataset(out_dir, spec="hand3", sampler: str = "uniform", count: int = 500, seed: int = 0,
                 holdout: int = 50, n_points: int = 2048, modalities=((1.0, 1.0),),
                 sigma: float = 0.005) -> Path:
    """Write scans (PLY + JSON sidecar), the rig and a manifest into ``out_dir``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= holdout < count:
        raise ValueError("holdout must be in [0, count)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    toy, scans = generate_scans(spec, sampler, count, seed, n_points, modalities, sigma)
    from .rig import save_rig

    save_rig(toy.rig, out / "rig.json")
    entries = []
    for i, s in enumerate(scans):
        stem = f"scan_{i:05d}"
        fileio.save_cloud(out / f"{stem}.ply", s.points, s.gt_labels)
        sidecar = {
            "gt_pose": s.gt_pose.tolist(),
            "gt_translation": s.gt_translation.tolist(),
            "gt_labels": s.gt_labels.tolist(),
            "gt_correspondence": s.gt_correspondence.tolist(),
            "face_index": s.face_index.tolist(),
            "barycentric": s.barycentric.tolist(),
            "modality": s.modality,
        }
        (out / f"{stem}.json").write_text(json.dumps(sidecar))
        entries.append({"cloud": f"{stem}.ply", "sidecar": f"{stem}.json",
                        "split": "holdout" if i >= count - holdout else "train"})
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": seed,
        "spec": asdict(toy.spec),
        "spec_hash": toy.spec.digest(),
        "sampler": sampler,
        "count": count,
        "holdout": holdout,
        "n_points": n_points,
        "sigma": sigma,
        "modalities": [list(m) for m in modalities],
        "rig": "rig.json",
        "scans": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def spec_from_dict(doc: dict) -> ToyRigSpec:
    def tup(x):
        return tuple(tup(v) for v in x) if isinstance(x, list) else x

    return ToyRigSpec(**{k: tup(v) for k, v in doc.items()})


def load_dataset(path) -> Dataset:
    from .rig import load_rig

    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{root}: not a skinfit dataset")
    rig = load_rig(root / manifest["rig"])
    scans, split = [], []
    for e in manifest["scans"]:
        pts, _ = fileio.load_cloud(root / e["cloud"])
        side = json.loads((root / e["sidecar"]).read_text())
        scans.append(Scan(pts, np.asarray(side["gt_pose"]), np.asarray(side["gt_translation"]),
                          np.asarray(side["gt_labels"], dtype=np.intp),
                          np.asarray(side["gt_correspondence"], dtype=np.intp),
                          np.asarray(side["face_index"], dtype=np.intp),
                          np.asarray(side["barycentric"]), int(side["modality"])))
        split.append(e["split"])
    return Dataset(rig, spec_from_dict(manifest["spec"]), [tuple(m) for m in manifest["modalities"]],
                   scans, split, manifest)
