"""Joint training of the encoder, deformer and segmenter.

Each main step alternates: build a pose mixture, update the segmenter on
LBS-generated samples, label a fresh real batch, then take one gradient step
on encoder and deformer against the total objective.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fileio
from .autodiff import Adam, NonFiniteError, Tape
from .losses import build_laplacian, chamfer_t, laplacian_reg_t, structured_chamfer_t
from .regressor import Deformer, Encoder, loopback_loss_t, pose_code
from .rig import Rig, clamp_pose, clamp_translation, lbs_pose_batch, lbs_pose_t, load_rig, save_rig
from .segnet import SegNet, SurfaceSampler, make_self_supervision, seg_infer, seg_infer_batch, seg_train_step


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Non-finite loss; models hold the last finite state."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"training aborted at step {step}: {cause}")
        self.step = step


@dataclass
class TrainConfig:
    lambda_s: float = 1.0
    lam: float = 0.5
    lambda_lap: float = 0.005
    lambda_theta: float = 0.5
    epsilon: float = 0.1
    rho: float = 0.5
    batch_size: int = 8
    points: int = 256
    selfsup_points: int = 256
    pretrain_steps: int = 2000
    steps: int = 5000
    lr: float = 3e-3
    deformer_lr: float = 3e-4
    seg_lr: float = 1e-4
    pretrain_lr: float = 2e-3
    lr_decay: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    joint_segmentation: bool = True
    seg_holdout: int = 8
    seg_eval_every: int = 10
    record_time: bool = True
    checkpoint_every: int = 0
    workers: int = 1
    encoder_widths: tuple[int, int] = (64, 128)
    feature: int = 128
    deformer_hidden: tuple[int, int] = (256, 128)
    seg_widths: tuple[int, int] = (64, 128)

    def __post_init__(self):
        for name in ("lambda_s", "lam", "lambda_lap", "lambda_theta", "epsilon"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        for name in ("batch_size", "points", "selfsup_points", "seg_holdout", "seg_eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0 or self.pretrain_steps < 0:
            raise ConfigError("step counts must be >= 0")
        self.encoder_widths = tuple(self.encoder_widths)
        self.deformer_hidden = tuple(self.deformer_hidden)
        self.seg_widths = tuple(self.seg_widths)

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def load_config(path) -> tuple[TrainConfig, dict]:
    """TrainConfig plus an optional [paths] table from a TOML file."""
    doc = fileio.load_toml(path)
    paths = doc.pop("paths", {})
    bad = sorted(set(paths) - {"rig", "data", "out"})
    if bad:
        raise ConfigError(f"{path}: unknown [paths] keys: {', '.join(bad)}")
    try:
        return TrainConfig.from_dict(doc), paths
    except (ConfigError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from None


def save_config(path, config: TrainConfig, paths: dict | None = None):
    doc = config.to_dict()
    if paths:
        doc["paths"] = dict(paths)
    fileio.save_toml(path, doc)


# -- run log ---------------------------------------------------------------------

RUNLOG_COLUMNS = ("step", "L_c2", "L_s2", "L_lap", "L_theta", "total", "seg_acc", "secs")


@dataclass(frozen=True)
class StepRecord:
    step: int
    L_c2: float
    L_s2: float
    L_lap: float
    L_theta: float
    total: float
    seg_acc: float
    secs: float


@dataclass
class RunLog:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord):
        if self.records and rec.step != self.records[-1].step + 1:
            raise ValueError("run log records must be consecutive")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RUNLOG_COLUMNS)
            for r in self.records:
                w.writerow([r.step] + [repr(float(getattr(r, c))) for c in RUNLOG_COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path) -> RunLog:
        log = cls()
        with open(path, newline="") as fh:
            rows = csv.reader(fh)
            if tuple(next(rows)) != RUNLOG_COLUMNS:
                raise ValueError(f"{path}: unexpected run log header")
            for row in rows:
                log.append(StepRecord(int(row[0]), *map(float, row[1:])))
        return log


# -- models ----------------------------------------------------------------------


@dataclass
class Models:
    encoder: Encoder
    deformer: Deformer
    segnet: SegNet

    @classmethod
    def create(cls, rig: Rig, config: TrainConfig) -> Models:
        rng = np.random.default_rng([config.seed, 0])
        enc = Encoder(rig.joint_count, rng, config.encoder_widths, config.feature)
        dfm = Deformer(enc.out_dim + config.feature, rng, config.deformer_hidden)
        seg = SegNet(rig.part_count, rng, config.seg_widths)
        return cls(enc, dfm, seg)

    def all(self):
        return (self.encoder, self.deformer, self.segnet)

    def state(self) -> dict:
        return {m.name: m.state() for m in self.all()}

    def load_state(self, state: dict):
        for m in self.all():
            m.load_state(state[m.name])


def save_run(out_dir, models: Models, rig: Rig, config: TrainConfig, runlog: RunLog | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for m in models.all():
        ad.save_params(out / f"{m.name}.json", m.params, {"model": m.name})
    save_rig(rig, out / "rig.json")
    save_config(out / "config.toml", config)
    if runlog is not None:
        runlog.write_csv(out / "runlog.csv")


def load_run(run_dir) -> tuple[Models, Rig, TrainConfig]:
    root = Path(run_dir)
    if not (root / "config.toml").exists():
        raise FileNotFoundError(f"{root}: no config.toml; not a run directory")
    config, _ = load_config(root / "config.toml")
    rig = load_rig(root / "rig.json")
    models = Models.create(rig, config)
    for m in models.all():
        params, _ = ad.load_params(root / f"{m.name}.json")
        m.load_state(params)
    return models, rig, config


# -- pose mixture ------------------------------------------------------------------


def sample_pose_mixture(encoder: Encoder, clouds, rig: Rig, epsilon: float, rho: float,
                        rng: np.random.Generator, batch_size: int | None = None):
    """Mixture of uniform poses and perturbed encoder estimates.

    The first ceil(rho * B) samples are uniform in the limits; sample i >= that
    is clamp(f(X_i)) + Unif(-epsilon, epsilon), clamped again.  Translations
    follow the same split without perturbation.  Returns
    (theta (B, J, 3), trans (B, 3), tags) with tags "uniform" or "perturbed".
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    skel = rig.skeleton
    b = len(clouds) if batch_size is None else batch_size
    n_uniform = min(b, math.ceil(rho * b - 1e-12))
    theta = np.empty((b, skel.joint_count, 3))
    trans = np.empty((b, 3))
    theta[:n_uniform] = rng.uniform(skel.limits_lo, skel.limits_hi, size=(n_uniform, skel.joint_count, 3))
    trans[:n_uniform] = rng.uniform(skel.trans_lo, skel.trans_hi, size=(n_uniform, 3))
    if n_uniform < b:
        est_theta, est_trans, _ = encoder.encode(np.asarray(clouds)[n_uniform:b])
        noise = rng.uniform(-epsilon, epsilon, size=est_theta.shape)
        theta[n_uniform:] = clamp_pose(clamp_pose(est_theta, skel) + noise, skel)
        trans[n_uniform:] = clamp_translation(est_trans, skel)
    tags = ["uniform"] * n_uniform + ["perturbed"] * (b - n_uniform)
    return theta, trans, tags


# -- segmentation pretraining ----------------------------------------------------------


def seg_holdout_set(rig: Rig, config: TrainConfig, sampler: SurfaceSampler | None = None):
    """Fixed uniform-pose samples of the base template for seg accuracy."""
    rng = np.random.default_rng([config.seed, 1])
    skel = rig.skeleton
    theta = rng.uniform(skel.limits_lo, skel.limits_hi, size=(config.seg_holdout, skel.joint_count, 3))
    trans = rng.uniform(skel.trans_lo, skel.trans_hi, size=(config.seg_holdout, 3))
    return make_self_supervision(rig, rig.vertices, theta, trans, config.selfsup_points, rng, sampler)


def seg_accuracy(segnet: SegNet, clouds, labels) -> float:
    return float(np.mean(seg_infer_batch(segnet, clouds) == labels))


def _cosine(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


def pretrain_segmentation(rig: Rig, config: TrainConfig, segnet: SegNet | None = None,
                          log_every: int = 0, log=None) -> tuple[SegNet, float]:
    """Train the segmenter on uniform poses of the base template only.

    Returns the model and its accuracy on the fixed holdout set.
    """
    if segnet is None:
        segnet = SegNet(rig.part_count, np.random.default_rng([config.seed, 0]), config.seg_widths)
    rng = np.random.default_rng([config.seed, 2])
    sampler = SurfaceSampler(rig)
    hold_x, hold_y = seg_holdout_set(rig, config, sampler)
    skel = rig.skeleton
    opt = Adam(config.pretrain_lr, config.beta1, config.beta2)
    b = config.batch_size
    for i in range(config.pretrain_steps):
        if config.lr_decay:
            opt.lr = _cosine(config.pretrain_lr, i, config.pretrain_steps)
        theta = rng.uniform(skel.limits_lo, skel.limits_hi, size=(b, skel.joint_count, 3))
        trans = rng.uniform(skel.trans_lo, skel.trans_hi, size=(b, 3))
        x, y = make_self_supervision(rig, rig.vertices, theta, trans, config.selfsup_points, rng, sampler)
        loss = seg_train_step(segnet, opt, x, y)
        if log is not None and log_every and (i % log_every == 0 or i == config.pretrain_steps - 1):
            log(f"pretrain-seg step {i} loss {loss:.4f} holdout acc {seg_accuracy(segnet, hold_x, hold_y):.4f}")
    return segnet, seg_accuracy(segnet, hold_x, hold_y)


# -- main loop --------------------------------------------------------------------


def _finite_grads(grads: dict):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")


class Trainer:
    """Holds models, optimizers and RNG streams for the main loop."""

    def __init__(self, rig: Rig, clouds: list[np.ndarray], config: TrainConfig,
                 models: Models | None = None, out_dir=None):
        if not clouds:
            raise ValueError("training needs at least one cloud")
        if any(len(c) == 0 for c in clouds):
            raise ValueError("training clouds must be non-empty")
        self.rig = rig
        self.clouds = [np.asarray(c, dtype=np.float64) for c in clouds]
        self.config = config
        self.models = models or Models.create(rig, config)
        self.out_dir = out_dir
        self.rng = np.random.default_rng([config.seed, 3])
        self.sampler = SurfaceSampler(rig)
        self.lap = build_laplacian(len(rig.vertices), rig.faces)
        self.opt_f = Adam(config.lr, config.beta1, config.beta2)
        self.opt_d = Adam(config.deformer_lr, config.beta1, config.beta2)
        self.opt_s = Adam(config.seg_lr, config.beta1, config.beta2)
        self.hold_x, self.hold_y = seg_holdout_set(rig, config, self.sampler)
        self.runlog = RunLog()
        self.step_index = 0
        self._seg_acc = seg_accuracy(self.models.segnet, self.hold_x, self.hold_y)

    def draw_batch(self) -> np.ndarray:
        """B clouds, each subsampled to ``points`` (with replacement only if short)."""
        cfg = self.config
        idx = self.rng.choice(len(self.clouds), size=cfg.batch_size, replace=len(self.clouds) < cfg.batch_size)
        out = []
        for i in idx:
            c = self.clouds[i]
            pick = self.rng.choice(len(c), size=cfg.points, replace=len(c) < cfg.points)
            out.append(c[pick])
        return np.stack(out)

    def deformed_templates(self, clouds) -> np.ndarray:
        enc, dfm = self.models.encoder, self.models.deformer
        theta, trans, phi = enc.forward(None, clouds)
        return dfm.forward(None, pose_code(theta, trans, phi), self.rig.vertices).value

    def train_step(self) -> StepRecord:
        cfg, rig, skel = self.config, self.rig, self.rig.skeleton
        enc, dfm, seg = self.models.all()
        t0 = time.perf_counter()
        if cfg.lr_decay:
            k = self.step_index
            self.opt_f.lr = _cosine(cfg.lr, k, cfg.steps)
            self.opt_d.lr = _cosine(cfg.deformer_lr, k, cfg.steps)
            self.opt_s.lr = _cosine(cfg.seg_lr, k, cfg.steps)
        # (1) real batch, (2) pose mixture
        x = self.draw_batch()
        theta_p, trans_p, _ = sample_pose_mixture(enc, x, rig, cfg.epsilon, cfg.rho, self.rng)
        x2 = self.draw_batch()
        use_seg = cfg.lambda_s > 0
        if use_seg and cfg.joint_segmentation:
            # (3) self-supervision on the current per-example deformed templates
            templates = self.deformed_templates(x)
            sx, sy = make_self_supervision(rig, templates, theta_p, trans_p, cfg.selfsup_points,
                                           self.rng, self.sampler)
            seg_train_step(seg, self.opt_s, sx, sy)
        # (4) labels for the fresh batch from the updated segmenter
        x2_labels = seg_infer_batch(seg, x2) if use_seg else None
        # (5) encoder + deformer step
        tape = Tape()
        theta, trans, phi = enc.forward(tape, x2)
        theta_c = ad.clip(theta, skel.limits_lo, skel.limits_hi)
        trans_c = ad.clip(trans, skel.trans_lo, skel.trans_hi)
        u_d = dfm.forward(tape, pose_code(theta, trans, phi), rig.vertices)
        v_d = lbs_pose_t(theta_c, u_d, rig.weights, skel, trans_c)
        v = lbs_pose_t(theta_c, rig.vertices, rig.weights, skel, trans_c)
        xs = list(x2)
        l_c2 = ad.add(chamfer_t(xs, v_d, cfg.workers), ad.mul(chamfer_t(xs, v, cfg.workers), cfg.lam))
        total = l_c2
        l_s2 = l_lap = l_theta = 0.0
        if use_seg:
            s2 = ad.add(structured_chamfer_t(xs, x2_labels, v_d, rig.labels, cfg.workers),
                        ad.mul(structured_chamfer_t(xs, x2_labels, v, rig.labels, cfg.workers), cfg.lam))
            total = ad.add(total, ad.mul(s2, cfg.lambda_s))
            l_s2 = float(s2.value)
        if cfg.lambda_lap > 0:
            lap = laplacian_reg_t(u_d, self.lap)
            total = ad.add(total, ad.mul(lap, cfg.lambda_lap))
            l_lap = float(lap.value)
        if cfg.lambda_theta > 0:
            posed = lbs_pose_batch(theta_p, rig.vertices, rig.weights, skel, trans_p)
            gen, _ = self.sampler.sample(posed, cfg.selfsup_points, self.rng)
            lt = loopback_loss_t(enc, tape, gen, theta_p, trans_p)
            total = ad.add(total, ad.mul(lt, cfg.lambda_theta))
            l_theta = float(lt.value)
        grads = tape.backward(total)
        _finite_grads(grads)
        self.opt_f.step(enc.params, enc.grads_from(grads))
        self.opt_d.step(dfm.params, dfm.grads_from(grads))
        if self.step_index % cfg.seg_eval_every == 0 or self.step_index == cfg.steps - 1:
            self._seg_acc = seg_accuracy(seg, self.hold_x, self.hold_y)
        secs = time.perf_counter() - t0 if cfg.record_time else 0.0
        rec = StepRecord(self.step_index, float(l_c2.value), l_s2, l_lap, l_theta,
                         float(total.value), self._seg_acc, secs)
        self.runlog.append(rec)
        self.step_index += 1
        return rec

    def checkpoint(self):
        if self.out_dir is not None:
            save_run(self.out_dir, self.models, self.rig, self.config, self.runlog)

    def run(self, steps: int | None = None, log_every: int = 0, log=None) -> RunLog:
        """Run ``steps`` main steps (default: config.steps).

        A non-finite loss restores the state from before the failing step,
        writes it as the checkpoint and raises TrainingAborted.
        """
        steps = self.config.steps if steps is None else steps
        for _ in range(steps):
            saved = self.models.state()
            try:
                rec = self.train_step()
            except NonFiniteError as e:
                self.models.load_state(saved)
                self.checkpoint()
                raise TrainingAborted(self.step_index, e) from e
            if log is not None and log_every and rec.step % log_every == 0:
                log(f"step {rec.step} total {rec.total:.5f} L_c2 {rec.L_c2:.5f} L_s2 {rec.L_s2:.5f} "
                    f"L_theta {rec.L_theta:.5f} seg_acc {rec.seg_acc:.4f}")
            every = self.config.checkpoint_every
            if every and (rec.step + 1) % every == 0:
                self.checkpoint()
        self.checkpoint()
        return self.runlog


def train(rig: Rig, clouds, config: TrainConfig, out_dir=None, models: Models | None = None,
          pretrain: bool = True, log=None, log_every: int = 0) -> tuple[Models, RunLog]:
    """Segmentation pretraining (if requested and λ_s > 0) followed by the main loop."""
    models = models or Models.create(rig, config)
    if pretrain and config.lambda_s > 0 and config.pretrain_steps > 0:
        pretrain_segmentation(rig, config, models.segnet, log_every=log_every, log=log)
    trainer = Trainer(rig, clouds, config, models, out_dir)
    return models, trainer.run(log=log, log_every=log_every)


# -- inference ----------------------------------------------------------------------


@dataclass
class FitResult:
    theta: np.ndarray
    translation: np.ndarray
    u_d: np.ndarray
    v_d: np.ndarray
    labels: np.ndarray


def fit(models: Models, rig: Rig, cloud) -> FitResult:
    """Clamped pose, deformed template, its posed mesh and point labels for one cloud."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) == 0:
        raise ValueError("fit needs a non-empty cloud")
    skel = rig.skeleton
    theta, trans, phi = models.encoder.forward(None, cloud[None])
    u_d = models.deformer.forward(None, pose_code(theta, trans, phi), rig.vertices).value[0]
    th = clamp_pose(theta.value[0], skel)
    tr = clamp_translation(trans.value[0], skel)
    v_d = lbs_pose_batch(th[None], u_d, rig.weights, skel, tr[None])[0]
    labels, _ = seg_infer(models.segnet, cloud)
    return FitResult(th, tr, u_d, v_d, labels)


def fit_batch(models: Models, rig: Rig, clouds) -> list[FitResult]:
    return [fit(models, rig, c) for c in clouds]
