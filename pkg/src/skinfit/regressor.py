"""Joint-angle encoder, template deformer and the loop-back loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .nn import Model, canonical_order, he_init
from .rig import Rig


class Encoder(Model):
    """Set network X -> (angles, root translation, feature phi).

    Per-point MLP, mean and max pooling, then a two-layer head whose hidden
    activation is the shape feature phi.
    """

    name = "encoder"

    def __init__(self, joint_count: int, rng: np.random.Generator, widths=(64, 128), feature: int = 128):
        super().__init__()
        self.joint_count = joint_count
        self.feature = feature
        self.depth = len(widths)
        dims = (3,) + tuple(widths)
        self.params = {}
        for i in range(self.depth):
            self.params[f"w{i}"] = he_init(rng, dims[i], dims[i + 1])
            self.params[f"b{i}"] = np.zeros(dims[i + 1])
        d = self.depth
        self.params[f"w{d}"] = he_init(rng, 2 * dims[-1], feature)
        self.params[f"b{d}"] = np.zeros(feature)
        self.params[f"w{d + 1}"] = he_init(rng, feature, self.out_dim, gain=0.01)
        self.params[f"b{d + 1}"] = np.zeros(self.out_dim)

    @property
    def out_dim(self) -> int:
        return self.joint_count * 3 + 3

    @property
    def head(self) -> str:
        return f"w{self.depth + 1}"

    def forward(self, tape: Tape | None, clouds) -> tuple[Tensor, Tensor, Tensor]:
        clouds = np.asarray(clouds, dtype=np.float64)
        if clouds.ndim != 3 or clouds.shape[1] == 0:
            raise ValueError("encoder needs a (B, n>=1, 3) batch of clouds")
        order = canonical_order(clouds)
        h = np.take_along_axis(clouds, order[..., None], axis=1)
        p = self.bind(tape)
        for i in range(self.depth):
            h = ad.relu(ad.add(ad.matmul(h, p[f"w{i}"]), p[f"b{i}"]))
        d = self.depth
        pooled = ad.concat([ad.mean(h, axis=1), ad.max_pool(h, axis=1)], axis=-1)
        phi = ad.relu(ad.add(ad.matmul(pooled, p[f"w{d}"]), p[f"b{d}"]))
        out = ad.add(ad.matmul(phi, p[f"w{d + 1}"]), p[f"b{d + 1}"])
        batch, jc = clouds.shape[0], self.joint_count
        theta = ad.reshape(out[:, : jc * 3], (batch, jc, 3))
        trans = out[:, jc * 3:]
        return theta, trans, phi

    def encode(self, clouds):
        """Inference: raw (unclamped) angles (B, J, 3), translations (B, 3), phi (B, F)."""
        theta, trans, phi = self.forward(None, clouds)
        return theta.value, trans.value, phi.value


class Deformer(Model):
    """Three-layer MLP on concat(u_i, pose code, phi) predicting a residual offset.

    The first layer is evaluated as u @ W_u + code @ W_c, the same affine map
    as on the concatenated input, with the per-cloud half computed once per
    cloud rather than once per vertex.  The last layer starts at zero, so the
    deformed template equals the input template before training.
    """

    name = "deformer"

    def __init__(self, code_dim: int, rng: np.random.Generator, hidden=(256, 128)):
        super().__init__()
        h0, h1 = hidden
        w_first = he_init(rng, 3 + code_dim, h0)
        self.params = {
            "wu": w_first[:3].copy(),
            "wc": w_first[3:].copy(),
            "b0": np.zeros(h0),
            "w1": he_init(rng, h0, h1),
            "b1": np.zeros(h1),
            "w2": np.zeros((h1, 3)),
            "b2": np.zeros(3),
        }

    def forward(self, tape: Tape | None, code, template) -> Tensor:
        """code: (B, C) tensor; template: (m, 3) -> deformed templates (B, m, 3)."""
        template = np.asarray(template, dtype=np.float64)
        code = ad._lift(code, tape)
        if code.shape[-1] != self.params["wc"].shape[0]:
            raise ValueError(f"deformer code width {code.shape[-1]} != {self.params['wc'].shape[0]}")
        p = self.bind(tape)
        batch, m = code.shape[0], template.shape[0]
        per_vertex = ad.matmul(template, p["wu"])  # (m, h0)
        per_cloud = ad.add(ad.matmul(code, p["wc"]), p["b0"])  # (B, h0)
        h = ad.relu(ad.add(per_vertex, ad.reshape(per_cloud, (batch, 1, per_cloud.shape[-1]))))
        h = ad.relu(ad.add(ad.matmul(h, p["w1"]), p["b1"]))
        offset = ad.add(ad.matmul(h, p["w2"]), p["b2"])
        return ad.add(offset, template)


def pose_code(theta: Tensor, trans: Tensor, phi: Tensor) -> Tensor:
    batch = theta.shape[0]
    return ad.concat([ad.reshape(theta, (batch, theta.shape[1] * 3)), trans, phi], axis=-1)


def deform_template(deformer: Deformer, phi, theta, trans, template, tape: Tape | None = None) -> Tensor:
    return deformer.forward(tape, pose_code(ad._lift(theta, tape), ad._lift(trans, tape), ad._lift(phi, tape)), template)


def pose_vector(theta, trans) -> np.ndarray:
    theta = np.asarray(theta)
    return np.concatenate([theta.reshape(len(theta), -1), np.asarray(trans)], axis=1)


def loopback_loss_t(encoder: Encoder, tape: Tape | None, clouds, theta_gen, trans_gen) -> Tensor:
    """Mean squared error between regressed and generating pose parameters.

    ``clouds`` are samples of the base template posed with the generating
    parameters; angles enter unclamped.
    """
    theta, trans, _ = encoder.forward(tape, clouds)
    target = pose_vector(theta_gen, trans_gen)
    batch = theta.shape[0]
    pred = ad.concat([ad.reshape(theta, (batch, encoder.joint_count * 3)), trans], axis=-1)
    return ad.mean(ad.square(ad.sub(pred, target)))


def loopback_loss(encoder, rig: Rig, theta_gen, trans_gen, clouds) -> float:
    return float(loopback_loss_t(encoder, None, clouds, theta_gen, trans_gen).value)
