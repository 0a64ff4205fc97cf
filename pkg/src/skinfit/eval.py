"""Reconstruction, pose, correspondence and segmentation metrics on holdout scans."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import chamfer
from .rig import Rig, joint_transforms, lbs_pose
from .synth import Scan, interpolate


def recon_metric(x, v_d) -> float:
    """Square root of the Chamfer distance."""
    return float(np.sqrt(chamfer(x, v_d)))


def joint_origins(theta, rig_or_skel, translation=None) -> np.ndarray:
    skel = getattr(rig_or_skel, "skeleton", rig_or_skel)
    return joint_transforms(theta, skel, translation)[:, :3, 3]


def pose_metric(theta_hat, theta_gt, rig, trans_hat=None, trans_gt=None) -> float:
    """Mean over joints of the distance between world joint origins."""
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    theta_gt = np.asarray(theta_gt, dtype=np.float64)
    skel = getattr(rig, "skeleton", rig)
    shape = (skel.joint_count, 3)
    if theta_hat.shape != shape or theta_gt.shape != shape:
        raise ValueError(f"poses must have shape {shape} for this rig")
    a = joint_origins(theta_hat, skel, trans_hat)
    b = joint_origins(theta_gt, skel, trans_gt)
    return float(np.linalg.norm(a - b, axis=1).mean())


def seg_metric(pred, gt) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"label length mismatch: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("no labels to compare")
    return float(np.mean(pred == gt))


# -- projection onto a triangle mesh -----------------------------------------------


def closest_point_barycentric(p, a, b, c) -> np.ndarray:
    """Barycentric coordinates of the closest point on triangles (a, b, c) to p.

    All inputs broadcast to (..., 3); region tests follow the standard
    Voronoi-region construction for a triangle.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    shape = np.broadcast_shapes(d1.shape, d3.shape, d5.shape)
    out = np.empty(shape + (3,))
    done = np.zeros(shape, dtype=bool)

    def put(mask, u, v, w):
        nonlocal done
        m = mask & ~done
        out[m] = np.stack([np.broadcast_to(t, shape) for t in (u, v, w)], axis=-1)[m]
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        put((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        put((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        t = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t, t, 0.0)
        t = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t, 0.0, t)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1.0 - t, t)
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        put(np.ones(shape, dtype=bool), 1.0 - v - w, v, w)
    return out


def project_to_mesh(points, verts, faces, chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Nearest surface location (face index, barycentric) of each point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = np.asarray(verts)[np.asarray(faces)]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    fidx = np.empty(len(points), dtype=np.intp)
    bary = np.empty((len(points), 3))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk, None, :]
        w = closest_point_barycentric(p, a, b, c)
        q = w[..., 0:1] * a + w[..., 1:2] * b + w[..., 2:3] * c
        d = ((q - p) ** 2).sum(-1)
        best = np.argmin(d, axis=1)
        fidx[s:s + chunk] = best
        bary[s:s + chunk] = w[np.arange(len(best)), best]
    return fidx, bary


def true_surface(scan: Scan, source: Rig) -> np.ndarray:
    """Ground-truth posed vertices of the rig a scan was sampled from."""
    return lbs_pose(scan.gt_pose, source.vertices, source.weights, source.skeleton, scan.gt_translation)


def pair_correspondence_error(scan_a: Scan, v_d_a, scan_b: Scan, v_d_b, faces, true_b,
                              sample=None) -> float:
    """Mean transfer error A -> B through the two reconstructions."""
    idx = np.arange(len(scan_a.points)) if sample is None else sample
    fa, ba = project_to_mesh(scan_a.points[idx], v_d_a, faces)
    pred = interpolate(v_d_b, faces, fa, ba)
    truth = interpolate(true_b, faces, scan_a.face_index[idx], scan_a.barycentric[idx])
    return float(np.linalg.norm(pred - truth, axis=1).mean())


def correspondence_metric(scans: list[Scan], v_ds, faces, sources: list[Rig], n_pairs: int = 400,
                          seed: int = 0, points_per_pair: int = 128, return_pairs: bool = False):
    """Mean correspondence error over random ordered pairs of holdout scans.

    v_ds[i] is the reconstruction (posed deformed template) of scans[i];
    sources[modality] is the rig each scan's ground truth was drawn from.
    """
    if len(scans) != len(v_ds):
        raise ValueError("one reconstruction per scan is required")
    if not scans:
        raise ValueError("no scans to evaluate")
    rng = np.random.default_rng([seed, 7])
    truths = [true_surface(s, sources[s.modality]) for s in scans]
    errs, pairs = [], []
    for _ in range(n_pairs):
        i, j = rng.integers(len(scans), size=2)
        a = scans[i]
        k = min(points_per_pair, len(a.points))
        sample = rng.choice(len(a.points), size=k, replace=False)
        errs.append(pair_correspondence_error(a, v_ds[i], scans[j], v_ds[j], faces, truths[j], sample))
        pairs.append((int(i), int(j)))
    value = float(np.mean(errs))
    return (value, pairs, errs) if return_pairs else value


# -- reports --------------------------------------------------------------------------


@dataclass
class EvalReport:
    recon: float
    pose_err: float
    corr_err: float
    seg_acc: float
    per_scan: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path, csv_path=None):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        csv_path = Path(csv_path) if csv_path else path.with_suffix(".csv")
        cols = ["scan", "recon", "pose_err", "seg_acc"]
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.per_scan:
                w.writerow([row[c] for c in cols])


def evaluate(models, rig: Rig, scans: list[Scan], sources: list[Rig] | None = None,
             n_pairs: int = 400, seed: int = 0, points_per_pair: int = 128) -> EvalReport:
    """Fit every scan and compute all four metrics."""
    from .trainer import fit

    if not scans:
        raise ValueError("no scans to evaluate")
    sources = sources or [rig]
    per_scan, v_ds = [], []
    for i, s in enumerate(scans):
        r = fit(models, rig, s.points)
        v_ds.append(r.v_d)
        per_scan.append({
            "scan": i,
            "recon": recon_metric(s.points, r.v_d),
            "pose_err": pose_metric(r.theta, s.gt_pose, rig, r.translation, s.gt_translation),
            "seg_acc": seg_metric(r.labels, s.gt_labels),
        })
    corr = correspondence_metric(scans, v_ds, rig.faces, sources, n_pairs, seed, points_per_pair) if n_pairs else 0.0
    mean = lambda k: float(np.mean([r[k] for r in per_scan]))  # noqa: E731
    return EvalReport(mean("recon"), mean("pose_err"), corr, mean("seg_acc"), per_scan)
