"""Losses, optimizers and the seeded training loops."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .fields import FieldSpec, SamplePlan, TrainingSet, sample_training_points
from .lipreg import ConfigError, RegularizerSpec, lipschitz_bound, regularizer
from .net import Activation, MlpParams, backward, forward, init_params
from .tensor import DimensionError, logistic, make_rng

log = logging.getLogger(__name__)

LOSS_KINDS = ("mse", "bce")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, bound, params=None, log=None):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} "
                         f"(Lipschitz bound product {bound:.6g})")
        self.epoch, self.batch, self.bound = epoch, batch, bound
        self.params, self.log = params, log


def loss(kind: str, prediction, target):
    """Mean loss over all entries and its gradient w.r.t. ``prediction``."""
    p = np.asarray(prediction, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64).reshape(p.shape)
    n = p.size
    if kind == "mse":
        r = p - y
        return float(np.sum(r * r) / n), 2.0 * r / n
    if kind == "bce":
        if np.any((p <= 0) | (p >= 1)):
            raise ValueError("binary cross-entropy needs predictions strictly inside (0, 1)")
        value = -np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)) / n
        return float(value), (p - y) / (p * (1 - p)) / n
    raise ValueError(f"unknown loss {kind!r}")


def bce_with_logits(z, target):
    """Cross-entropy of ``sigmoid(z)``; gradient taken w.r.t. the logits ``z``."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64).reshape(z.shape)
    n = z.size
    value = np.sum(np.logaddexp(0.0, z) - y * z) / n
    return float(value), (logistic(z) - y) / n


# ------------------------------------------------------------------ optimizers

@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")

    def to_dict(self):
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "adam"), float(d.get("lr", 1e-4)), float(d.get("beta1", 0.9)),
                   float(d.get("beta2", 0.999)), float(d.get("eps", 1e-8)))


@dataclass
class OptimizerState:
    """Adam moments kept as flat vectors over all arrays, in ``arrays()`` order."""
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def for_arrays(cls, arrays):
        n = sum(a.size for a in arrays)
        return cls(np.zeros(n), np.zeros(n), 0)


def _flat(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


def _unflat(vec, like) -> list:
    out, k = [], 0
    for a in like:
        out.append(vec[k:k + a.size].reshape(a.shape))
        k += a.size
    return out


def adam_update(state: OptimizerState, arrays, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam on plain array lists; returns (new arrays, state).

    The moment vectors are updated in place and the same state object is returned.
    """
    if len(arrays) != len(grads) or any(a.shape != g.shape for a, g in zip(arrays, grads)):
        raise DimensionError("gradient shapes do not match parameter shapes")
    g = _flat(grads)
    if g.size != state.m.size:
        raise DimensionError("optimizer state was built for different arrays")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    m, v = state.m, state.v
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    new = _flat(arrays) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return _unflat(new, arrays), state


def adam_step(state: OptimizerState, params: MlpParams, grads, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step applied uniformly to weights, biases and bound parameters."""
    new, state = adam_update(state, params.arrays(), grads.arrays(), lr, beta1, beta2, eps)
    return params.with_arrays(new), state


def sgd_step(params: MlpParams, grads, lr: float) -> MlpParams:
    pa, ga = params.arrays(), grads.arrays()
    if len(pa) != len(ga) or any(a.shape != g.shape for a, g in zip(pa, ga)):
        raise DimensionError("gradient shapes do not match parameter shapes")
    return params.with_arrays([a - lr * g for a, g in zip(pa, ga)])


# ------------------------------------------------------------------ configuration

@dataclass
class ArchConfig:
    dims: list = field(default_factory=lambda: [3, 64, 64, 64, 64, 64, 1])
    activation: Activation = field(default_factory=Activation)
    lipschitz_mode: bool = False
    kscale: bool = False
    input_scale: float = 100.0
    spatial_dim: int = 2
    output_activation: str = "identity"

    def to_dict(self):
        return {"dims": list(self.dims), "activation": self.activation.to_dict(),
                "lipschitz_mode": self.lipschitz_mode, "kscale": self.kscale,
                "input_scale": self.input_scale, "spatial_dim": self.spatial_dim,
                "output_activation": self.output_activation}

    @classmethod
    def from_dict(cls, d):
        return cls([int(v) for v in d["dims"]], Activation.from_dict(d.get("activation", "relu")),
                   bool(d.get("lipschitz_mode", False)), bool(d.get("kscale", False)),
                   float(d.get("input_scale", 100.0)), int(d.get("spatial_dim", 2)),
                   d.get("output_activation", "identity"))


@dataclass
class TrainConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    loss_kind: str = "mse"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 100
    batch_size: int = 512
    seed: int = 0
    shapes: list = field(default_factory=list)
    sample_plan: SamplePlan = field(default_factory=SamplePlan)
    resample_each_epoch: bool = False

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not self.shapes:
            raise ConfigError("at least one shape is required")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss_kind!r}")
        widths = {s.latent_target.size for s in self.shapes}
        if len(widths) != 1:
            raise ConfigError("latent targets must share one dimension")
        latent = widths.pop()
        a = self.arch
        if a.dims[0] != a.spatial_dim + latent:
            raise ConfigError(f"input width {a.dims[0]} != spatial {a.spatial_dim} + latent {latent}")
        if any(s.dim != a.spatial_dim for s in self.shapes):
            raise ConfigError("shape dimension does not match arch.spatial_dim")
        if self.loss_kind == "bce" and a.output_activation != "sigmoid":
            raise ConfigError("bce loss needs output_activation 'sigmoid'")
        if self.regularizer.variant in ("lipschitz_product", "log_product") and not a.lipschitz_mode:
            raise ConfigError(f"{self.regularizer.variant} needs arch.lipschitz_mode")
        if self.regularizer.variant == "k_scale" and not a.kscale:
            raise ConfigError("k_scale needs arch.kscale")
        if a.lipschitz_mode and a.kscale:
            raise ConfigError("lipschitz_mode and kscale are exclusive")
        return self

    def to_dict(self):
        return {"arch": self.arch.to_dict(), "regularizer": self.regularizer.to_dict(),
                "loss_kind": self.loss_kind, "optimizer": self.optimizer.to_dict(),
                "epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed,
                "shapes": [s.to_dict() for s in self.shapes],
                "sample_plan": self.sample_plan.to_dict(),
                "resample_each_epoch": self.resample_each_epoch}

    @classmethod
    def from_dict(cls, d, base_dir=None):
        return cls(
            ArchConfig.from_dict(d["arch"]),
            RegularizerSpec.from_dict(d.get("regularizer", {})),
            d.get("loss_kind", "mse"),
            OptimizerConfig.from_dict(d.get("optimizer", {})),
            int(d.get("epochs", 100)),
            int(d.get("batch_size", 512)),
            int(d.get("seed", 0)),
            [FieldSpec.from_dict(s, base_dir) for s in d.get("shapes", [])],
            SamplePlan.from_dict(d.get("sample_plan", {})),
            bool(d.get("resample_each_epoch", False)),
        )


def default_latents(n_shapes: int) -> list[np.ndarray]:
    """Fixed latent codes: 0/1 for two shapes, a triangle for three, one-hot otherwise."""
    if n_shapes == 1:
        return [np.zeros(1)]
    if n_shapes == 2:
        return [np.array([0.0]), np.array([1.0])]
    if n_shapes == 3:
        return [np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([0.5, 0.866])]
    return list(np.eye(n_shapes))


# ------------------------------------------------------------------ training

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # dicts with epoch/loss/reg/objective/bound/seconds
    batch_size: int = 0
    n_samples: int = 0

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def __len__(self):
        return len(self.rows)


def build_training_set(config: TrainConfig, epoch: int = 0) -> TrainingSet:
    plan = config.sample_plan
    sets = []
    for k, spec in enumerate(config.shapes):
        p = SamplePlan(plan.n_total, plan.fractions, plan.near_sigma, plan.bbox,
                       plan.seed + 7919 * k + 104729 * epoch)
        sets.append(sample_training_points(spec, p))
    return TrainingSet.concat(sets)


def _batch_objective(config, params, xb, tb, yb):
    pred, cache = forward(params, xb, tb)
    if config.loss_kind == "bce":
        # use the logits for a stable gradient; value matches loss("bce", ...)
        value, d_z = bce_with_logits(cache.pre[-1], yb)
        d_pred = d_z / np.maximum(pred * (1 - pred), 1e-300)
    else:
        value, d_pred = loss("mse", pred, yb.reshape(pred.shape))
    grads = backward(params, cache, d_pred)
    rv, rg = regularizer(config.regularizer, params, xb)
    grads.add_(rg)
    return value, rv, grads


def train(config: TrainConfig, params: MlpParams | None = None, callback=None):
    """Minimize task loss + regularizer; returns (params, TrainLog).

    The training set is sampled once up front (or once per epoch when
    ``resample_each_epoch``). Minibatches come from a seeded permutation.
    """
    config.validate()
    a = config.arch
    if params is None:
        params = init_params(a.dims, a.activation, a.lipschitz_mode, config.seed,
                             input_scale=a.input_scale, spatial_dim=a.spatial_dim,
                             output_activation=a.output_activation, kscale=a.kscale)
    data = build_training_set(config)
    rng = make_rng(config.seed + 1)
    opt = config.optimizer
    state = OptimizerState.for_arrays(params.arrays())
    tlog = TrainLog(batch_size=config.batch_size, n_samples=len(data))
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if config.resample_each_epoch and epoch:
            data = build_training_set(config, epoch)
        order = rng.permutation(len(data))
        tot_loss = tot_reg = 0.0
        n_batches = 0
        for b, s in enumerate(range(0, len(data), config.batch_size)):
            idx = order[s:s + config.batch_size]
            value, rv, grads = _batch_objective(config, params, data.x[idx], data.t[idx],
                                                data.target[idx])
            # a sum is finite only if every term is
            if not np.isfinite(value + rv + sum(float(g.sum()) for g in grads.arrays())):
                raise TrainingDiverged(epoch, b, lipschitz_bound(params).product, params, tlog)
            if opt.kind == "adam":
                params, state = adam_step(state, params, grads, opt.lr, opt.beta1, opt.beta2, opt.eps)
            else:
                params = sgd_step(params, grads, opt.lr)
            tot_loss += value
            tot_reg += rv
            n_batches += 1
        row = {"epoch": epoch, "loss": tot_loss / n_batches, "reg": tot_reg / n_batches}
        row["objective"] = row["loss"] + row["reg"]
        row["bound"] = lipschitz_bound(params).product
        row["seconds"] = time.perf_counter() - t0
        if not np.isfinite(row["bound"]):
            raise TrainingDiverged(epoch, n_batches - 1, row["bound"], params, tlog)
        tlog.rows.append(row)
        if callback is not None:
            callback(epoch, params, row)
    return params, tlog


def fit_mse(params: MlpParams, spec: FieldSpec, x: np.ndarray) -> float:
    """Mean squared error between the network at ``spec.latent_target`` and the field."""
    from .fields import eval_field
    from .net import predict
    pred = predict(params, x, spec.latent_target)[:, 0]
    return float(np.mean((pred - eval_field(spec, x)) ** 2))


# ------------------------------------------------------------------ autoencoder

@dataclass
class AutoencoderConfig:
    """Encoder from SDF images to a sigmoid-squashed latent, decoder as a field network."""
    latent_dim: int = 8
    encoder_hidden: list = field(default_factory=lambda: [128, 64])
    encoder_activation: Activation = field(default_factory=lambda: Activation("leaky_relu", 0.01))
    decoder_hidden: list = field(default_factory=lambda: [64, 64, 64])
    decoder_activation: Activation = field(default_factory=lambda: Activation("fullsort"))
    lipschitz_mode: bool = False
    input_scale: float = 100.0
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=1e-3))
    epochs: int = 60
    images_per_batch: int = 16
    points_per_image: int = 196
    seed: int = 0

    def to_dict(self):
        return {"latent_dim": self.latent_dim, "encoder_hidden": list(self.encoder_hidden),
                "encoder_activation": self.encoder_activation.to_dict(),
                "decoder_hidden": list(self.decoder_hidden),
                "decoder_activation": self.decoder_activation.to_dict(),
                "lipschitz_mode": self.lipschitz_mode, "input_scale": self.input_scale,
                "regularizer": self.regularizer.to_dict(), "optimizer": self.optimizer.to_dict(),
                "epochs": self.epochs, "images_per_batch": self.images_per_batch,
                "points_per_image": self.points_per_image, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        base = cls()
        return cls(
            int(d.get("latent_dim", base.latent_dim)),
            [int(v) for v in d.get("encoder_hidden", base.encoder_hidden)],
            Activation.from_dict(d.get("encoder_activation", base.encoder_activation.to_dict())),
            [int(v) for v in d.get("decoder_hidden", base.decoder_hidden)],
            Activation.from_dict(d.get("decoder_activation", base.decoder_activation.to_dict())),
            bool(d.get("lipschitz_mode", False)),
            float(d.get("input_scale", 100.0)),
            RegularizerSpec.from_dict(d.get("regularizer", {})),
            OptimizerConfig.from_dict(d.get("optimizer", base.optimizer.to_dict())),
            int(d.get("epochs", base.epochs)),
            int(d.get("images_per_batch", base.images_per_batch)),
            int(d.get("points_per_image", base.points_per_image)),
            int(d.get("seed", 0)),
        )


def encode(encoder: MlpParams, images: np.ndarray) -> np.ndarray:
    from .net import predict
    return logistic(predict(encoder, None, images.reshape(images.shape[0], -1)))


def train_autoencoder(config: AutoencoderConfig, sdf_images: np.ndarray, pixel_xy: np.ndarray):
    """Train encoder + decoder on SDF images.

    ``sdf_images`` is (n_images, n_pixels); ``pixel_xy`` is (n_pixels, 2),
    the location of each pixel. Returns (encoder, decoder, TrainLog). The
    regularizer applies to the decoder only.
    """
    n_img, n_pix = sdf_images.shape
    k = config.latent_dim
    if config.regularizer.variant in ("lipschitz_product", "log_product") and not config.lipschitz_mode:
        raise ConfigError(f"{config.regularizer.variant} needs lipschitz_mode")
    encoder = init_params([n_pix, *config.encoder_hidden, k], config.encoder_activation,
                          False, config.seed, input_scale=1.0, spatial_dim=0)
    decoder = init_params([2 + k, *config.decoder_hidden, 1], config.decoder_activation,
                          config.lipschitz_mode, config.seed + 1,
                          input_scale=config.input_scale, spatial_dim=2)
    rng = make_rng(config.seed + 2)
    opt = config.optimizer
    st_e = OptimizerState.for_arrays(encoder.arrays())
    st_d = OptimizerState.for_arrays(decoder.arrays())
    tlog = TrainLog(batch_size=config.images_per_batch, n_samples=n_img)
    ppi = min(config.points_per_image, n_pix)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n_img)
        tot_loss = tot_reg = 0.0
        nb = 0
        for b, s in enumerate(range(0, n_img, config.images_per_batch)):
            ids = order[s:s + config.images_per_batch]
            m = ids.size
            imgs = sdf_images[ids]
            z, ecache = forward(encoder, None, imgs)
            lat = logistic(z)
            pix = np.stack([rng.choice(n_pix, ppi, replace=False) for _ in range(m)])
            xb = pixel_xy[pix].reshape(-1, 2)
            tb = np.repeat(lat, ppi, axis=0)
            yb = imgs[np.arange(m)[:, None], pix].reshape(-1)
            pred, dcache = forward(decoder, xb, tb)
            value, d_pred = loss("mse", pred, yb.reshape(pred.shape))
            gd = backward(decoder, dcache, d_pred)
            rv, rg = regularizer(config.regularizer, decoder, xb)
            gd.add_(rg)
            d_lat = gd.d_input[:, 2:].reshape(m, ppi, k).sum(axis=1)
            ge = backward(encoder, ecache, d_lat * lat * (1.0 - lat))
            if not np.isfinite(value + rv):
                raise TrainingDiverged(epoch, b, lipschitz_bound(decoder).product)
            if opt.kind == "adam":
                decoder, st_d = adam_step(st_d, decoder, gd, opt.lr, opt.beta1, opt.beta2, opt.eps)
                encoder, st_e = adam_step(st_e, encoder, ge, opt.lr, opt.beta1, opt.beta2, opt.eps)
            else:
                decoder = sgd_step(decoder, gd, opt.lr)
                encoder = sgd_step(encoder, ge, opt.lr)
            tot_loss += value
            tot_reg += rv
            nb += 1
        row = {"epoch": epoch, "loss": tot_loss / nb, "reg": tot_reg / nb}
        row["objective"] = row["loss"] + row["reg"]
        row["bound"] = lipschitz_bound(decoder).product
        row["seconds"] = time.perf_counter() - t0
        tlog.rows.append(row)
    return encoder, decoder, tlog
