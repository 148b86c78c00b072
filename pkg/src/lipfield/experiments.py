"""Experiment protocols shared by the CLI recipes and the acceptance tests.

Every function here is deterministic given its seed.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .evaluation import (chamfer, fgsm_attack, fit_latent, latent_profile, marching_squares)
from .fields import (Circle, DoubleTorus, FieldSpec, SamplePlan, Torus, builtin_polygon, eval_field,
                     grid_points, sdf_from_bitmap, star_polygon)
from .lipreg import DEFAULT_ALPHA, RegularizerSpec
from .net import Activation, MlpParams, predict
from .optim import (ArchConfig, AutoencoderConfig, OptimizerConfig, TrainConfig, encode, fit_mse,
                    train, train_autoencoder)
from .tensor import make_rng

MODES = ("vanilla", "lipschitz", "dirichlet")

# 2d interpolation protocol: 5 hidden ReLU layers of width 64
INTERP_DIMS = [3, 64, 64, 64, 64, 64, 1]
INTERP_INPUT_SCALE = 10.0
INTERP_EPOCHS = 800
INTERP_BATCH = 256
INTERP_SAMPLES = 4096
INTERP_LR = 1e-3
DIRICHLET_ALPHA = 1e-2
DIRICHLET_LATENTS = (1.0 / 3.0, 2.0 / 3.0)
DIRICHLET_EPOCHS = 400


def interp_shapes(second: str = "star") -> list[FieldSpec]:
    """Circle at t=0 and a star (or the cat silhouette) at t=1."""
    other = star_polygon() if second == "star" else builtin_polygon(second)
    return [FieldSpec(Circle((0.5, 0.5), 0.3), "sdf", [0.0]), FieldSpec(other, "sdf", [1.0])]


def interp_config(mode: str, seed: int, *, second: str = "star", epochs: int = INTERP_EPOCHS,
                  alpha: float | None = None, dims=None) -> TrainConfig:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "lipschitz":
        reg = RegularizerSpec("lipschitz_product", DEFAULT_ALPHA["2d"] if alpha is None else alpha)
    elif mode == "dirichlet":
        reg = RegularizerSpec("dirichlet", DIRICHLET_ALPHA if alpha is None else alpha,
                              dirichlet_samples=[[t] for t in DIRICHLET_LATENTS])
    else:
        reg = RegularizerSpec()
    arch = ArchConfig(list(dims or INTERP_DIMS), Activation("relu"), mode == "lipschitz",
                      input_scale=INTERP_INPUT_SCALE)
    plan = SamplePlan(INTERP_SAMPLES, (0.0, 0.0, 1.0), 0.01, ((0.0, 0.0), (1.0, 1.0)), seed)
    return TrainConfig(arch, reg, "mse", OptimizerConfig("adam", INTERP_LR), epochs,
                       INTERP_BATCH, seed, interp_shapes(second), plan)


@dataclass
class SmoothnessReport:
    fit_mse: list          # grid MSE at each training latent
    ts: np.ndarray
    profile: np.ndarray    # mean squared latent derivative at each t

    @property
    def jac_max(self) -> float:
        return float(self.profile.max())

    @property
    def jac_mean(self) -> float:
        return float(self.profile.mean())

    @property
    def peak_ratio(self) -> float:
        """max / mean of the profile: 1 for a perfectly uniform latent speed."""
        return self.jac_max / self.jac_mean


def smoothness_report(params: MlpParams, shapes, res: int = 64, n_t: int = 21,
                      t_range=(0.0, 1.0)) -> SmoothnessReport:
    g = grid_points(res)
    ts = np.linspace(t_range[0], t_range[1], n_t)
    prof = latent_profile(params, g, [[t] for t in ts])
    return SmoothnessReport([fit_mse(params, s, g) for s in shapes], ts, prof)


# ------------------------------------------------------------------ contours and point sets

def field_grid(params: MlpParams, t, res: int = 128) -> np.ndarray:
    """Network values on a ``res`` x ``res`` lattice over the unit square, indexed [x, y]."""
    return predict(params, grid_points(res), t)[:, 0].reshape(res, res)


def zero_contour(values: np.ndarray):
    res = values.shape[0]
    return marching_squares(values, 0.0, (0.0, 0.0), 1.0 / (res - 1))


def shape_contour(spec: FieldSpec, res: int = 128):
    return zero_contour(eval_field(spec, grid_points(res)).reshape(res, res))


def boundary_points(polygon, n: int, seed: int) -> np.ndarray:
    """``n`` points placed uniformly at random by arc length on a polygon boundary."""
    v = polygon.verts
    w = np.roll(v, -1, axis=0)
    lengths = np.linalg.norm(w - v, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = np.sort(make_rng(seed).random(n)) * cum[-1]
    k = np.minimum(np.searchsorted(cum, s, side="right") - 1, len(v) - 1)
    a = ((s - cum[k]) / lengths[k])[:, None]
    return v[k] * (1 - a) + w[k] * a


def toy_fit(params: MlpParams, seed: int, n_points: int = 8, optimizer: str = "adam",
            lr: float | None = None, steps: int = 300, t_init: float = 0.5):
    """Fit the latent code to ``n_points`` star boundary points, starting from ``t_init``."""
    pts = boundary_points(star_polygon(), n_points, seed)
    if lr is None:
        lr = 1e-2 if optimizer == "adam" else 1.0
    return fit_latent(params, pts, [t_init], optimizer=optimizer, lr=lr, steps=steps)


def partial_completion(params: MlpParams, seed: int, n_points: int = 64, res: int = 128,
                       steps: int = 300):
    """Observe the left half of the star, fit t, compare the completed contour to the truth.

    Returns (chamfer distance, fitted latent).
    """
    pts = boundary_points(star_polygon(), 2 * n_points, seed)
    left = pts[pts[:, 0] < 0.5]
    fit = fit_latent(params, left, [0.5], lr=1e-2, steps=steps)
    recovered = zero_contour(field_grid(params, fit.t_star, res)).points()
    truth = shape_contour(FieldSpec(star_polygon()), res).points()
    if recovered.size == 0:
        return float("inf"), fit.t_star
    return chamfer(recovered, truth), fit.t_star


# ------------------------------------------------------------------ raster autoencoding

def synthetic_digits(n: int, size: int = 28, seed: int = 0) -> np.ndarray:
    """Digit-like 8-bit rasters: one to three thick strokes or rings per image."""
    rng = make_rng(seed)
    c = np.arange(size) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    out = np.zeros((n, size, size), dtype=np.uint8)
    lo, hi = 0.2 * size, 0.8 * size
    for i in range(n):
        ink = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            width = rng.uniform(1.2, 2.5)
            if rng.random() < 0.3:
                cx, cy = rng.uniform(0.35 * size, 0.65 * size, 2)
                r = rng.uniform(0.12 * size, 0.28 * size)
                ink |= np.abs(np.hypot(xx - cx, yy - cy) - r) <= width
            else:
                a, b = rng.uniform(lo, hi, 2), rng.uniform(lo, hi, 2)
                ab = b - a
                s = ((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / max(ab @ ab, 1e-9)
                s = np.clip(s, 0.0, 1.0)
                ink |= np.hypot(xx - a[0] - s * ab[0], yy - a[1] - s * ab[1]) <= width
        out[i] = np.where(ink, 255, 0)
    return out


def raster_dataset(images: np.ndarray):
    """SDF images flattened to (n, pixels) in [x, y] order, plus the pixel-center coordinates."""
    n, rows, cols = images.shape
    sdfs = np.stack([sdf_from_bitmap(img).shape.values.ravel() for img in images])
    size = max(rows, cols)
    ix, iy = np.meshgrid(np.arange(cols), np.arange(rows), indexing="ij")
    xy = np.stack([(ix.ravel() + 0.5) / size, (iy.ravel() + 0.5) / size], axis=1)
    return sdfs, xy


# small batches give the product term enough Adam steps to settle within 60 epochs
AE_ALPHA = 1e-3
AE_INPUT_SCALE = 10.0
AE_LR = 3e-3
AE_IMAGES_PER_BATCH = 4


def autoencoder_config(lipschitz: bool, seed: int, epochs: int = 60,
                       alpha: float = AE_ALPHA) -> AutoencoderConfig:
    reg = RegularizerSpec("lipschitz_product", alpha) if lipschitz else RegularizerSpec()
    return AutoencoderConfig(lipschitz_mode=lipschitz, regularizer=reg, epochs=epochs, seed=seed,
                             input_scale=AE_INPUT_SCALE, optimizer=OptimizerConfig("adam", AE_LR),
                             images_per_batch=AE_IMAGES_PER_BATCH)


@dataclass
class AttackSummary:
    epsilon: float
    mean_abs_delta: float   # averaged over images
    max_abs_delta: float    # worst over images
    recon_mse: float


def attack_autoencoder(encoder, decoder, sdfs, xy, epsilon: float = 0.05) -> AttackSummary:
    lat = encode(encoder, sdfs)
    means, maxes = [], []
    for i, t in enumerate(lat):
        rep = fgsm_attack(decoder, t, epsilon, xy, seed=i)
        means.append(rep.mean_abs_delta)
        maxes.append(rep.max_abs_delta)
    recon = np.stack([predict(decoder, xy, t)[:, 0] for t in lat])
    return AttackSummary(epsilon, float(np.mean(means)), float(np.max(maxes)),
                         float(np.mean((recon - sdfs) ** 2)))


def run_autoencoder_attack(lipschitz: bool, seed: int, n_images: int = 200, epochs: int = 60,
                           epsilon: float = 0.05, alpha: float = AE_ALPHA):
    """Train on synthetic rasters and attack every training code; returns (summary, log, decoder)."""
    images = synthetic_digits(n_images, seed=seed)
    sdfs, xy = raster_dataset(images)
    enc, dec, log = train_autoencoder(autoencoder_config(lipschitz, seed, epochs, alpha), sdfs, xy)
    return attack_autoencoder(enc, dec, sdfs, xy, epsilon), log, dec


# ------------------------------------------------------------------ depth comparison

DEPTH_WIDTH = 32
DEPTH_ALPHA = 1e-3
DEPTH_EPOCHS = 1200   # the product term on 10 layers needs about this long to settle
DEPTH_BATCH = 64


def depth_config(n_hidden: int, variant: str, seed: int, *, epochs: int = DEPTH_EPOCHS,
                 alpha: float = DEPTH_ALPHA, lr: float = 1e-2) -> TrainConfig:
    """Circle/star interpolation with ``n_hidden`` hidden layers under a fixed alpha."""
    if variant not in ("lipschitz_product", "yoshida_sq_sum"):
        raise ValueError("variant must be lipschitz_product or yoshida_sq_sum")
    base = interp_config("lipschitz" if variant == "lipschitz_product" else "vanilla", seed,
                         epochs=epochs, dims=[3] + [DEPTH_WIDTH] * n_hidden + [1])
    reg = RegularizerSpec(variant, alpha, norm_kind="inf")
    plan = replace(base.sample_plan, n_total=1024)
    return replace(base, regularizer=reg, sample_plan=plan, batch_size=DEPTH_BATCH,
                   optimizer=OptimizerConfig("adam", lr))


def depth_change(variant: str, seed: int, depths=(5, 10), **kw) -> tuple[float, list]:
    """|ln(P_deep / P_shallow)| of the final bound products, and the products."""
    prods = [train(depth_config(d, variant, seed, **kw))[1].rows[-1]["bound"] for d in depths]
    return abs(float(np.log(prods[1] / prods[0]))), prods


# ------------------------------------------------------------------ shipped recipes

TORUS_DIMS = [4, 64, 64, 64, 64, 64, 1]


def torus_config(seed: int = 0, epochs: int = 200) -> TrainConfig:
    """Torus at t=0, double torus at t=1, Lipschitz network."""
    shapes = [FieldSpec(Torus(), "sdf", [0.0]), FieldSpec(DoubleTorus(), "sdf", [1.0])]
    arch = ArchConfig(list(TORUS_DIMS), Activation("relu"), True, input_scale=INTERP_INPUT_SCALE,
                      spatial_dim=3)
    plan = SamplePlan(INTERP_SAMPLES, (0.4, 0.4, 0.2), 0.01,
                      ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), seed)
    return TrainConfig(arch, RegularizerSpec("lipschitz_product", DEFAULT_ALPHA["3d"]), "mse",
                       OptimizerConfig("adam", INTERP_LR), epochs, INTERP_BATCH, seed, shapes, plan)


def _field_recipe(cfg: TrainConfig, shapes: list) -> dict:
    d = cfg.to_dict()
    d["shapes"] = shapes
    return d


def recipes() -> dict:
    """Ready-to-run configs keyed by file name; shapes are written in their short form."""
    star_pair = [{"kind": "circle", "center": [0.5, 0.5], "radius": 0.3, "latent": [0.0]},
                 {"kind": "star", "latent": [1.0]}]
    cat_pair = [star_pair[0], {"kind": "polygon", "builtin": "cat", "latent": [1.0]}]
    torus_pair = [{"kind": "torus3d", "major": 0.25, "minor": 0.08, "latent": [0.0]},
                  {"kind": "double_torus3d", "latent": [1.0],
                   "first": {"kind": "torus3d", "major": 0.2, "minor": 0.07,
                             "center": [0.32, 0.5, 0.5]},
                   "second": {"kind": "torus3d", "major": 0.2, "minor": 0.07,
                              "center": [0.68, 0.5, 0.5]}}]
    out = {"torus_interp.json": _field_recipe(torus_config(), torus_pair)}
    for mode in ("vanilla", "lipschitz"):
        out[f"star_{mode}.json"] = _field_recipe(interp_config(mode, 0), star_pair)
    out["cat_lipschitz.json"] = _field_recipe(
        interp_config("lipschitz", 0, second="cat", epochs=DIRICHLET_EPOCHS), cat_pair)
    out["cat_dirichlet.json"] = _field_recipe(
        interp_config("dirichlet", 0, second="cat", epochs=DIRICHLET_EPOCHS), cat_pair)
    for variant, short in (("lipschitz_product", "lipschitz"), ("yoshida_sq_sum", "yoshida")):
        for depth in (5, 10):
            out[f"depth{depth}_{short}.json"] = _field_recipe(depth_config(depth, variant, 0),
                                                              star_pair)
    for lip, name in ((False, "vanilla"), (True, "lipschitz")):
        d = {"kind": "autoencoder", **autoencoder_config(lip, 0).to_dict()}
        d["data"] = {"n_images": 200, "seed": 0}
        out[f"autoencoder_{name}.json"] = d
    return out


def recipe_points() -> dict:
    """Point files for the latent-fitting recipes, keyed by file name."""
    pts = boundary_points(star_polygon(), 128, 0)
    return {"star_points.txt": boundary_points(star_polygon(), 8, 0),
            "star_left_half.txt": pts[pts[:, 0] < 0.5]}


def write_recipes(directory) -> None:
    import json
    import re
    from pathlib import Path
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    flat = re.compile(r"\[\s+([^\[\]{}]*?)\s+\]")   # keep lists of scalars on one line
    for name, cfg in recipes().items():
        text = flat.sub(lambda m: "[" + ", ".join(v.strip() for v in m.group(1).split(",")) + "]",
                        json.dumps(cfg, indent=2))
        (d / name).write_text(text + "\n")
    for name, pts in recipe_points().items():
        np.savetxt(d / name, pts, fmt="%.17g")


if __name__ == "__main__":
    import sys
    write_recipes(sys.argv[1] if len(sys.argv) > 1 else "recipes")
