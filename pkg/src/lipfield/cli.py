"""Command line: ``lipfield <train|interp|attack|fit|metrics>``.

Every command writes into one output directory. Files:

* ``checkpoint.json`` - network arrays as flat lists with explicit shapes.
  Floats are written with ``repr`` so a load reproduces them bit for bit.
* ``*.csv`` - header row, numbers with 17 significant digits.
* ``*.pgm`` - binary 8-bit grayscale, one pixel per grid node. Value ``v``
  maps to ``round(255 * (v - lo) / (hi - lo))`` clipped to [0, 255], with
  ``[lo, hi]`` = ``--pgm-range`` (default -0.5 0.5, so 0 is mid-gray).
  The top image row is the largest y.
* ``*.svg`` - zero contour polylines in unit-square coordinates.
* ``manifest.json`` - command, resolved configuration, seed, version,
  outputs and wall time.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (LatentFitDiverged, empirical_lipschitz, fgsm_attack, fit_latent,
                         jacobian_norm_sq_samples, marching_squares)
from .experiments import raster_dataset, synthetic_digits
from .fields import FieldSpec, SamplePlan, read_idx
from .lipreg import ConfigError, RegularizerSpec, lipschitz_bound
from .net import Activation, MlpParams, predict
from .optim import (ArchConfig, AutoencoderConfig, OptimizerConfig, TrainConfig, TrainingDiverged,
                    train, train_autoencoder)
from .tensor import DimensionError

CHECKPOINT_FORMAT = "lipfield-checkpoint"
CHECKPOINT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


# ------------------------------------------------------------------ checkpoints

def _pack(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unpack(d) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_dict(params: MlpParams, meta: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": params.dims,
        "activation": params.activation.to_dict(),
        "lipschitz_mode": params.lipschitz_mode,
        "kscale": params.kscale_mode,
        "input_scale": params.input_scale,
        "spatial_dim": params.spatial_dim,
        "output_activation": params.output_activation,
        "weights": [_pack(w) for w in params.weights],
        "biases": [_pack(b) for b in params.biases],
        "rho": None if params.rho is None else _pack(params.rho),
        "k_rho": None if params.k_rho is None else _pack(params.k_rho),
        "meta": meta or {},
    }


def params_from_dict(d: dict) -> MlpParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise UsageError("not a lipfield checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise UsageError(f"checkpoint version {d.get('version')} is not supported "
                         f"(expected {CHECKPOINT_VERSION})")
    p = MlpParams([_unpack(w) for w in d["weights"]], [_unpack(b) for b in d["biases"]],
                  Activation.from_dict(d["activation"]),
                  None if d.get("rho") is None else _unpack(d["rho"]),
                  None if d.get("k_rho") is None else _unpack(d["k_rho"]),
                  float(d["input_scale"]), int(d["spatial_dim"]), d["output_activation"])
    if p.dims != list(d["dims"]):
        raise UsageError("checkpoint dims do not match its weight shapes")
    return p


def save_checkpoint(path, params: MlpParams, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(params, meta), indent=1) + "\n")


def load_checkpoint(path) -> tuple[MlpParams, dict]:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read checkpoint {path}: {e}") from e
    try:
        return params_from_dict(d), d.get("meta", {})
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"malformed checkpoint {path}: {e}") from e


# ------------------------------------------------------------------ writers

def fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.17g" % float(v)


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_pgm(path, values: np.ndarray, lo: float, hi: float) -> None:
    """``values[i, j]`` at (x_i, y_j); written with y increasing upward."""
    g = np.clip(np.round(255.0 * (values - lo) / (hi - lo)), 0, 255).astype(np.uint8)
    img = g.T[::-1]
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(head + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError("not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data[m.end():], dtype=np.uint8).reshape(h, w)


def write_svg(path, polylines) -> None:
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 1 1" width="512" height="512">',
             '<rect width="1" height="1" fill="white"/>',
             '<g transform="translate(0,1) scale(1,-1)" fill="none" stroke="black" '
             'stroke-width="0.004">']
    for pl in polylines:
        pts = " ".join(f"{x:.6f},{y:.6f}" for x, y in pl)
        parts.append(f'<polyline points="{pts}"/>')
    parts += ["</g>", "</svg>"]
    Path(path).write_text("\n".join(parts) + "\n")


# ------------------------------------------------------------------ grids

def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("LIPFIELD_THREADS", "1")))
    except ValueError:
        return 1


def slice_points(res: int, spatial_dim: int, z: float = 0.5) -> np.ndarray:
    """Lattice over the unit square (x index major); 3-d fields are cut at height ``z``."""
    c = np.linspace(0.0, 1.0, res)
    gx, gy = np.meshgrid(c, c, indexing="ij")
    cols = [gx.ravel(), gy.ravel()]
    if spatial_dim == 3:
        cols.append(np.full(gx.size, z))
    elif spatial_dim != 2:
        raise UsageError("grid output needs a 2-d or 3-d field")
    return np.stack(cols, axis=1)


def grid_values(params: MlpParams, pts: np.ndarray, t, chunk: int = 4096) -> np.ndarray:
    """Field at ``pts``, chunks spread over LIPFIELD_THREADS threads, assembled in order."""
    starts = range(0, pts.shape[0], chunk)
    run = lambda s: predict(params, pts[s:s + chunk], t)[:, 0]
    n = thread_count()
    if n == 1:
        parts = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(n) as ex:
            parts = list(ex.map(run, starts))
    return np.concatenate(parts)


def contour_of(values: np.ndarray):
    res = values.shape[0]
    return marching_squares(values, 0.0, (0.0, 0.0), 1.0 / (res - 1))


# ------------------------------------------------------------------ config parsing

def _locate(text: str, key: str) -> str:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return f"line {text.count(chr(10), 0, m.start()) + 1}" if m else "top level"


_SECTION_PARSERS = {
    "arch": ArchConfig.from_dict,
    "regularizer": RegularizerSpec.from_dict,
    "optimizer": OptimizerConfig.from_dict,
    "shapes": None,
    "sample_plan": SamplePlan.from_dict,
}


def parse_config(path) -> tuple[str, object, dict]:
    """Return (kind, config object, raw dict); kind is 'field' or 'autoencoder'."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from e
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be an object")
    kind = raw.get("kind", "field")
    base = Path(path).parent
    if kind == "field":
        for key, parse in _SECTION_PARSERS.items():
            if key not in raw:
                continue
            try:
                if key == "shapes":
                    for i, sd in enumerate(raw[key]):
                        try:
                            FieldSpec.from_dict(sd, base)
                        except Exception as e:
                            raise type(e)(f"[{i}] {e}") from e
                else:
                    parse(raw[key])
            except (KeyError, TypeError, ValueError, AttributeError) as e:
                raise UsageError(f"{path}: {_locate(text, key)}: field '{key}': "
                                 f"{type(e).__name__}: {e}") from e
    try:
        if kind == "field":
            if "arch" not in raw:
                raise KeyError("arch")
            cfg = TrainConfig.from_dict(raw, base).validate()
        elif kind == "autoencoder":
            cfg = AutoencoderConfig.from_dict(raw)
            _data_spec(raw, base)
            if cfg.epochs < 1:
                raise ConfigError("epochs must be at least 1")
        else:
            raise ConfigError(f"unknown config kind {kind!r}")
    except KeyError as e:
        raise UsageError(f"{path}: missing field {e}") from e
    except (TypeError, ValueError, AttributeError) as e:
        raise UsageError(f"{path}: {type(e).__name__}: {e}") from e
    return kind, cfg, raw


def _data_spec(raw, base):
    data = raw.get("data")
    if not isinstance(data, dict):
        raise ConfigError("autoencoder config needs a 'data' object")
    if "idx" in data:
        p = Path(data["idx"])
        return ("idx", p if p.is_absolute() else base / p, int(data.get("limit", 200)))
    return ("synthetic", int(data.get("n_images", 200)), int(data.get("seed", 0)))


def parse_latent(text: str, k: int) -> np.ndarray:
    try:
        t = np.array([float(v) for v in text.split(",")])
    except ValueError as e:
        raise UsageError(f"bad latent code {text!r}") from e
    if t.size != k:
        raise UsageError(f"latent code {text!r} has {t.size} entries, network expects {k}")
    return t


def read_points(path, spatial_dim: int) -> np.ndarray:
    pts = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read points: {e}") from e
    for ln, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals = [float(v) for v in line.split()]
        except ValueError as e:
            raise UsageError(f"{path}:{ln}: not a number") from e
        if len(vals) != spatial_dim:
            raise UsageError(f"{path}:{ln}: expected {spatial_dim} coordinates")
        pts.append(vals)
    if not pts:
        raise UsageError(f"{path}: no points")
    return np.array(pts)


# ------------------------------------------------------------------ commands

class Run:
    """Collects outputs for the manifest."""

    def __init__(self, args, out: Path):
        self.args, self.out, self.files = args, out, []
        self.t0 = time.perf_counter()
        self.config = {k: v for k, v in vars(args).items() if k != "func"}
        self.seed = getattr(args, "seed", None)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def manifest(self, status: str, error: str | None = None) -> None:
        m = {"command": self.args.command, "config": self.config, "seed": self.seed,
             "version": __version__, "status": status, "outputs": sorted(self.files),
             "wall_time": time.perf_counter() - self.t0}
        if error:
            m["error"] = error
        (self.out / "manifest.json").write_text(json.dumps(m, indent=1, default=str) + "\n")


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    kind, cfg, raw = parse_config(args.config)   # fails before touching the output dir
    if args.seed is not None:
        cfg.seed = args.seed
        if kind == "field":
            cfg.sample_plan.seed = args.seed
    run = Run(args, _prepare_out(args))
    run.config = {"kind": kind, **cfg.to_dict()}
    if kind == "autoencoder":
        run.config["data"] = raw["data"]
    run.seed = cfg.seed
    try:
        if kind == "field":
            params, log = train(cfg)
            meta = {"seed": cfg.seed, "epochs": cfg.epochs,
                    "latents": [s.latent_target.tolist() for s in cfg.shapes]}
        else:
            src = _data_spec(raw, Path(args.config).parent)
            if src[0] == "idx":
                imgs = read_idx(src[1])[:src[2]]
            else:
                imgs = synthetic_digits(src[1], seed=src[2])
            sdfs, xy = raster_dataset(np.asarray(imgs, dtype=np.float64))
            enc, params, log = train_autoencoder(cfg, sdfs, xy)
            save_checkpoint(run.path("encoder.json"), enc, {"seed": cfg.seed, "role": "encoder"})
            meta = {"seed": cfg.seed, "epochs": cfg.epochs, "role": "decoder"}
    except TrainingDiverged as e:
        if e.params is not None:
            save_checkpoint(run.path("diverged_checkpoint.json"), e.params,
                            {"epoch": e.epoch, "batch": e.batch})
        run.manifest("numerical_abort", str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    meta["final_epoch"] = len(log) - 1
    save_checkpoint(run.path("checkpoint.json"), params, meta)
    write_csv(run.path("trainlog.csv"), ["epoch", "loss", "reg", "bound", "seconds"],
              [[r["epoch"], r["loss"], r["reg"], r["bound"], r["seconds"]] for r in log.rows])
    run.manifest("ok")
    return EXIT_OK


def _latent_list(args, k: int) -> list[np.ndarray]:
    if args.t_range is not None:
        if k != 1:
            raise UsageError("--t-range needs a 1-d latent code")
        a, b, step = args.t_range
        if step <= 0 or b < a:
            raise UsageError("--t-range needs START <= STOP and STEP > 0")
        n = int(np.floor((b - a) / step + 1e-9)) + 1
        return [np.array([a + i * step]) for i in range(n)]
    if not args.t:
        raise UsageError("give --t or --t-range")
    return [parse_latent(s, k) for s in args.t]


def cmd_interp(args) -> int:
    if args.res < 2:
        raise UsageError("--res must be at least 2")
    params, _ = load_checkpoint(args.checkpoint)
    ts = _latent_list(args, params.latent_dim)
    pts = slice_points(args.res, params.spatial_dim, args.slice_z)
    run = Run(args, _prepare_out(args))
    rows = []
    lo, hi = args.pgm_range
    for i, t in enumerate(ts):
        vals = grid_values(params, pts, t).reshape(args.res, args.res)
        write_pgm(run.path(f"field_{i:03d}.pgm"), vals, lo, hi)
        write_svg(run.path(f"contour_{i:03d}.svg"), contour_of(vals).polylines)
        rows.append([i, *t, float(np.mean(jacobian_norm_sq_samples(params, pts, t)))])
    header = ["index"] + [f"t{j}" for j in range(params.latent_dim)] + ["jacobian_norm_sq"]
    write_csv(run.path("smoothness.csv"), header, rows)
    run.manifest("ok")
    return EXIT_OK


def cmd_attack(args) -> int:
    if args.epsilon < 0:
        raise UsageError("--epsilon must be nonnegative")
    params, _ = load_checkpoint(args.checkpoint)
    t = parse_latent(args.t, params.latent_dim)
    pts = slice_points(args.res, params.spatial_dim, args.slice_z)
    run = Run(args, _prepare_out(args))
    rep = fgsm_attack(params, t, args.epsilon, pts, seed=args.seed)
    lo, hi = args.pgm_range
    for name, tt in (("before", t), ("after", rep.t_adv)):
        write_pgm(run.path(f"{name}.pgm"), grid_values(params, pts, tt).reshape(args.res, args.res),
                  lo, hi)
    k = params.latent_dim
    write_csv(run.path("attack.csv"),
              ["epsilon", "mean_abs_delta", "max_abs_delta"] + [f"t_adv{j}" for j in range(k)],
              [[rep.epsilon, rep.mean_abs_delta, rep.max_abs_delta, *rep.t_adv]])
    run.manifest("ok")
    return EXIT_OK


def cmd_fit(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    pts = read_points(args.points, params.spatial_dim)
    k = params.latent_dim
    t0 = parse_latent(args.t_init, k) if args.t_init else np.full(k, 0.5)
    run = Run(args, _prepare_out(args))
    try:
        fit = fit_latent(params, pts, t0, optimizer=args.optimizer, lr=args.lr, steps=args.steps,
                         eikonal_weight=args.eikonal_weight, fd_step=args.fd_step)
    except LatentFitDiverged as e:
        _write_trajectory(run, e.trajectory, e.losses, k)
        run.manifest("numerical_abort", str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_trajectory(run, fit.trajectory, fit.losses, k)
    if params.spatial_dim in (2, 3):
        grid = slice_points(args.res, params.spatial_dim, args.slice_z)
        vals = grid_values(params, grid, fit.t_star).reshape(args.res, args.res)
        write_svg(run.path("contour.svg"), contour_of(vals).polylines)
    run.manifest("ok")
    return EXIT_OK


def _write_trajectory(run, traj, losses, k):
    rows = [[i, *traj[i], losses[i]] for i in range(len(losses))]
    write_csv(run.path("trajectory.csv"), ["step"] + [f"t{j}" for j in range(k)] + ["loss"], rows)


def cmd_metrics(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    k = params.latent_dim
    if args.t:
        ts = [parse_latent(s, k) for s in args.t]
    elif meta.get("latents"):
        ts = [np.asarray(t, dtype=np.float64) for t in meta["latents"]]
    elif k == 1:
        ts = [np.array([v]) for v in np.linspace(0.0, 1.0, 21)]
    else:
        raise UsageError("give --t for networks with multi-dimensional latents")
    pts = slice_points(args.res, params.spatial_dim, args.slice_z)
    run = Run(args, _prepare_out(args))
    rep = lipschitz_bound(params)
    probe = empirical_lipschitz(params, pts, args.pairs, seed=args.seed)
    jac = np.concatenate([jacobian_norm_sq_samples(params, pts, t) for t in ts])
    header = (["bound_product"] + [f"c{i}" for i in range(len(rep.per_layer))]
              + ["empirical_ratio_max", "pairs_tested", "jacobian_norm_sq_mean",
                 "jacobian_norm_sq_max"])
    write_csv(run.path("metrics.csv"), header,
              [[rep.product, *rep.per_layer, probe.empirical_ratio_max, probe.pairs_tested,
                float(jac.mean()), float(jac.max())]])
    run.manifest("ok")
    return EXIT_OK


# ------------------------------------------------------------------ entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lipfield", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_default=0):
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=seed_default)

    def grid(sp, res=64):
        sp.add_argument("--res", type=int, default=res, help="grid resolution per axis")
        sp.add_argument("--slice-z", type=float, default=0.5, help="cut height for 3-d fields")

    s = sub.add_parser("train", help="train a network from a JSON config")
    s.add_argument("--config", required=True)
    common(s, None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("interp", help="fields, contours and smoothness along latent codes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--t", nargs="+", help="latent codes, comma separated entries")
    s.add_argument("--t-range", nargs=3, type=float, metavar=("START", "STOP", "STEP"))
    s.add_argument("--pgm-range", nargs=2, type=float, default=(-0.5, 0.5))
    grid(s)
    common(s)
    s.set_defaults(func=cmd_interp)

    s = sub.add_parser("attack", help="sign-gradient attack on the latent code")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--t", required=True)
    s.add_argument("--epsilon", type=float, default=0.05)
    s.add_argument("--pgm-range", nargs=2, type=float, default=(-0.5, 0.5))
    grid(s)
    common(s)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("fit", help="optimize the latent code to fit a point file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--points", required=True, help="text file, one 'x y [z]' per line")
    s.add_argument("--t-init")
    s.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--steps", type=int, default=300)
    s.add_argument("--eikonal-weight", type=float, default=0.0)
    s.add_argument("--fd-step", type=float, default=1e-3)
    grid(s, 128)
    common(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("metrics", help="bound, probe and smoothness summary")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--t", nargs="+")
    s.add_argument("--pairs", type=int, default=1000)
    grid(s, 32)
    common(s)
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
