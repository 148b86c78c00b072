"""Smoothness metrics, Lipschitz probing, latent attacks and latent fitting, contours, set distances."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .lipreg import lipschitz_bound
from .net import MlpParams, assemble_input, backward, forward, layer_bounds, normalize_rows, predict
from .optim import OptimizerState, adam_update
from .tensor import DimensionError, logistic, make_rng, softplus


# ------------------------------------------------------------------ smoothness

def latent_jacobian(params: MlpParams, x, t) -> np.ndarray:
    """d f / d t for every sample: array (n, out_dim, latent_dim)."""
    y, cache = forward(params, x, t)
    y = np.atleast_2d(y)
    d = params.spatial_dim
    out = np.empty((y.shape[0], y.shape[1], params.latent_dim))
    for o in range(y.shape[1]):
        g = np.zeros_like(y)
        g[:, o] = 1.0
        out[:, o, :] = backward(params, cache, g).d_input[:, d:]
    return out


def jacobian_norm_sq_samples(params: MlpParams, x_samples, t) -> np.ndarray:
    j = latent_jacobian(params, x_samples, t)
    return (j * j).sum(axis=(1, 2))


def jacobian_norm_sq(params: MlpParams, x_samples, t) -> float:
    """Mean over ``x_samples`` of the squared Frobenius norm of df/dt at latent ``t``."""
    x = np.asarray(x_samples, dtype=np.float64)
    if x.size == 0 and params.spatial_dim:
        raise DimensionError("need at least one sample point")
    return float(np.mean(jacobian_norm_sq_samples(params, x, t)))


def latent_profile(params: MlpParams, x_samples, ts) -> np.ndarray:
    """``jacobian_norm_sq`` along a list of latent codes."""
    return np.array([jacobian_norm_sq(params, x_samples, t) for t in ts])


@dataclass
class ProbeReport:
    empirical_ratio_max: float
    certified_bound: float
    pairs_tested: int


def empirical_lipschitz(params: MlpParams, x_grid, n_pairs: int = 1000, seed: int = 0,
                        t_range=(-0.5, 1.5), chunk_points: int = 1 << 17) -> ProbeReport:
    """Largest observed |f(x,t0) - f(x,t1)| / ||t0 - t1||_inf over random latent pairs."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    rng = make_rng(seed)
    k = params.latent_dim
    t0 = rng.uniform(t_range[0], t_range[1], (n_pairs, k))
    t1 = rng.uniform(t_range[0], t_range[1], (n_pairs, k))
    dist = np.abs(t0 - t1).max(axis=1)
    keep = dist >= 1e-12
    t0, t1, dist = t0[keep], t1[keep], dist[keep]
    x = np.asarray(x_grid, dtype=np.float64).reshape(-1, params.spatial_dim)
    m = x.shape[0]
    per = max(1, chunk_points // max(m, 1))
    best = 0.0
    for s in range(0, t0.shape[0], per):
        a, b = t0[s:s + per], t1[s:s + per]
        xs = np.tile(x, (a.shape[0], 1))
        fa = predict(params, xs, np.repeat(a, m, axis=0)).reshape(a.shape[0], -1)
        fb = predict(params, xs, np.repeat(b, m, axis=0)).reshape(a.shape[0], -1)
        ratio = np.abs(fa - fb).max(axis=1) / dist[s:s + per]
        best = max(best, float(ratio.max()))
    return ProbeReport(best, lipschitz_bound(params).product, int(t0.shape[0]))


# ------------------------------------------------------------------ latent attack

@dataclass
class AttackReport:
    epsilon: float
    mean_abs_delta: float
    max_abs_delta: float
    t_adv: np.ndarray = field(default=None, repr=False)


def fgsm_attack(params: MlpParams, t, epsilon: float, x_grid, seed: int = 0,
                probe: float = 1e-3) -> AttackReport:
    """Single-step sign attack on the latent code against the clean reconstruction.

    The reconstruction loss is minimal (zero gradient) at ``t`` itself, so the
    gradient is read at ``t + probe * r`` for a seeded random sign vector ``r``.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    x = np.asarray(x_grid, dtype=np.float64).reshape(-1, params.spatial_dim)
    clean = predict(params, x, t)
    r = np.where(make_rng(seed).random(t.size) < 0.5, -1.0, 1.0)
    y, cache = forward(params, x, t + probe * r)
    n = y.size
    g = backward(params, cache, 2.0 * (y - clean) / n).d_input[:, params.spatial_dim:].sum(axis=0)
    t_adv = t + epsilon * np.sign(g)
    delta = np.abs(predict(params, x, t_adv) - clean)
    return AttackReport(float(epsilon), float(delta.mean()), float(delta.max()), t_adv)


# ------------------------------------------------------------------ latent fitting

class LatentFitDiverged(RuntimeError):
    def __init__(self, step, trajectory, losses):
        super().__init__(f"latent fit produced a non-finite loss at step {step}")
        self.trajectory, self.losses = trajectory, losses


@dataclass
class LatentFit:
    t_star: np.ndarray
    final_loss: float
    trajectory: np.ndarray  # (steps + 1, latent_dim)
    losses: np.ndarray      # loss at every trajectory entry


def _fit_objective(params, x, t, eikonal_weight, fd_step):
    d = params.spatial_dim
    y, cache = forward(params, x, t)
    n = y.shape[0]
    value = float(np.mean(y * y))
    grad = backward(params, cache, 2.0 * y / n).d_input[:, d:].sum(axis=0)
    if eikonal_weight:
        def eik(tt):
            yy, cc = forward(params, x, tt)
            gx = backward(params, cc, np.ones_like(yy)).d_input[:, :d]
            return float(np.mean((np.linalg.norm(gx, axis=1) - 1.0) ** 2))
        value += eikonal_weight * eik(t)
        for k in range(t.size):
            e = np.zeros_like(t)
            e[k] = fd_step
            grad[k] += eikonal_weight * (eik(t + e) - eik(t - e)) / (2 * fd_step)
    return value, grad


def fit_latent(params: MlpParams, points, t_init, optimizer: str = "adam", lr: float = 1e-2,
               steps: int = 300, eikonal_weight: float = 0.0, fd_step: float = 1e-3,
               betas=(0.9, 0.999), eps: float = 1e-8) -> LatentFit:
    """Optimize only the latent code so the network vanishes on ``points``.

    Minimizes mean f(x_j, t)^2, plus ``eikonal_weight`` * mean (|grad_x f| - 1)^2
    whose t-derivative is taken by central differences with ``fd_step``.
    """
    x = np.asarray(points, dtype=np.float64).reshape(-1, params.spatial_dim)
    if x.shape[0] == 0:
        raise ValueError("need at least one point to fit")
    t = np.atleast_1d(np.asarray(t_init, dtype=np.float64)).copy()
    if t.size != params.latent_dim:
        raise DimensionError(f"latent code has {t.size} entries, network expects {params.latent_dim}")
    traj, losses = [t.copy()], []
    state = OptimizerState.for_arrays([t])
    for step in range(steps + 1):
        value, grad = _fit_objective(params, x, t, eikonal_weight, fd_step)
        losses.append(value)
        if not np.isfinite(value):
            raise LatentFitDiverged(step, np.array(traj), np.array(losses))
        if step == steps:
            break
        if optimizer == "adam":
            (t,), state = adam_update(state, [t], [grad], lr, betas[0], betas[1], eps)
        elif optimizer == "sgd":
            t = t - lr * grad
        else:
            raise ValueError(f"unknown optimizer {optimizer!r}")
        traj.append(t.copy())
    return LatentFit(t, losses[-1], np.array(traj), np.array(losses))


# ------------------------------------------------------------------ contours and distances

@dataclass
class Contour:
    polylines: list  # list of (m, 2) arrays; closed loops repeat their first point

    def points(self) -> np.ndarray:
        if not self.polylines:
            return np.zeros((0, 2))
        return np.concatenate(self.polylines)

    def __len__(self):
        return len(self.polylines)


def marching_squares(grid, iso: float = 0.0, origin=(0.0, 0.0), spacing=1.0) -> Contour:
    """Iso-contour of ``grid[i, j]`` sampled at ``origin + (i, j) * spacing``.

    Edge crossings are linearly interpolated; saddle cells are split using the
    sign of the cell-center average. Segments are chained into polylines.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2 or min(g.shape) < 2:
        raise DimensionError("marching squares needs at least a 2x2 grid")
    ids, pts = kernels.march_cells(g, iso)
    sp = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (2,))
    pts = np.asarray(origin, dtype=np.float64) + pts * sp
    return Contour(_chain(ids, pts))


def _chain(ids, pts):
    by_edge: dict[int, list] = {}
    for s, (a, b) in enumerate(ids):
        by_edge.setdefault(int(a), []).append(s)
        by_edge.setdefault(int(b), []).append(s)
    used = np.zeros(len(ids), dtype=bool)

    def walk(seg, edge):
        # follow segments starting from `edge` of `seg`, returning appended points
        out = []
        while True:
            nxt = [s for s in by_edge[edge] if s != seg and not used[s]]
            if not nxt:
                return out, edge
            seg = nxt[0]
            used[seg] = True
            a, b = ids[seg]
            if a == edge:
                out.append(pts[seg, 1])
                edge = int(b)
            else:
                out.append(pts[seg, 0])
                edge = int(a)

    lines = []
    for s in range(len(ids)):
        if used[s]:
            continue
        used[s] = True
        start, end = int(ids[s, 0]), int(ids[s, 1])
        fwd, last = walk(s, end)
        if last == start and fwd:
            lines.append(np.array([pts[s, 0], pts[s, 1], *fwd]))
            continue
        back, _ = walk(s, start)
        lines.append(np.array([*back[::-1], pts[s, 0], pts[s, 1], *fwd]))
    return lines


def _check_sets(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("point sets must be nonempty")
    return a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbor distance, halved."""
    a, b = _check_sets(a, b)
    return 0.5 * (float(kernels.min_dists(a, b).mean()) + float(kernels.min_dists(b, a).mean()))


def hausdorff(a, b) -> float:
    a, b = _check_sets(a, b)
    return max(float(kernels.min_dists(a, b).max()), float(kernels.min_dists(b, a).max()))


# ------------------------------------------------------------------ gradient check

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    skipped: list = field(default_factory=list)  # names of entries straddling a kink
    worst: str = ""

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _signature(params, z, i):
    """Discrete state of layer ``i`` (activation pattern) given its pre-activation."""
    if i == params.n_layers - 1:
        return b""
    k = params.activation.kind
    if k in ("relu", "leaky_relu"):
        return np.packbits(z > 0).tobytes()
    if k == "fullsort":
        return np.argsort(z, axis=-1, kind="stable").tobytes()
    return b""


def _run_from(params, h, start, ws_hat, clipped):
    """Objective pieces from layer ``start`` on; returns output and discrete signature."""
    sig = [clipped[j].tobytes() if clipped[j] is not None else b"" for j in range(params.n_layers)]
    last = params.n_layers - 1
    for i in range(start, params.n_layers):
        z = h @ ws_hat[i].T + params.biases[i]
        sig.append(_signature(params, z, i))
        if i < last:
            h = params.activation.forward(z)[0]
        elif params.output_activation == "sigmoid":
            h = logistic(z)
        else:
            h = z
    return h, b"".join(sig)


def _prepare(params):
    bounds = layer_bounds(params)
    ws, cl = [], []
    for i, w in enumerate(params.weights):
        if bounds[i] is None:
            ws.append(w)
            cl.append(None)
        else:
            wh, _, _, c = normalize_rows(w, bounds[i])
            ws.append(wh)
            cl.append(c)
    if params.k_rho is not None:
        ws[-1] = ws[-1] * softplus(params.k_rho[0])
    return ws, cl


def _objective(params, h0, g_out, start=0, h_start=None):
    ws, cl = _prepare(params)
    h = h0 if h_start is None else h_start
    y, sig = _run_from(params, h, start, ws, cl)
    return float(np.sum(g_out * y)), sig


def grad_check(params: MlpParams, seed: int = 0, h: float = 1e-5, n_samples: int = 3,
               floor: float = 1e-6) -> GradCheckResult:
    """Compare ``backward`` against central differences on a random batch.

    Covers every weight, bias and bound parameter plus every latent input.
    The error of an entry is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    Entries whose +h and -h evaluations land in different activation / clipping
    patterns sit on a kink and are skipped.
    """
    rng = make_rng(seed)
    d, k = params.spatial_dim, params.latent_dim
    x = rng.random((n_samples, d))
    t = rng.random((n_samples, k))
    y, cache = forward(params, x, t)
    g_out = rng.standard_normal(y.shape)
    grads = backward(params, cache, g_out)
    h0 = assemble_input(params, x, t)[0]

    worst, worst_name, n_checked, skipped = 0.0, "", 0, []

    def record(name, analytic, fp, fm, sp, sm):
        nonlocal worst, worst_name, n_checked
        if sp != sm:
            skipped.append(name)
            return
        numeric = (fp - fm) / (2 * h)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        n_checked += 1
        if err > worst:
            worst, worst_name = err, name

    arrays = params.arrays()
    g_arrays = grads.arrays()
    names = []
    for i in range(params.n_layers):
        names += [f"W{i}", f"b{i}"]
    if params.rho is not None:
        names.append("rho")
    if params.k_rho is not None:
        names.append("k_rho")
    for ai, (name, a, ga) in enumerate(zip(names, arrays, g_arrays)):
        for idx in np.ndindex(a.shape):
            vals = []
            for sgn in (1.0, -1.0):
                pert = [arr.copy() if j == ai else arr for j, arr in enumerate(arrays)]
                pert[ai][idx] += sgn * h
                vals.append(_objective(params.with_arrays(pert), h0, g_out))
            record(f"{name}{list(idx)}", ga[idx], vals[0][0], vals[1][0], vals[0][1], vals[1][1])
    for s in range(n_samples):
        for j in range(k):
            vals = []
            for sgn in (1.0, -1.0):
                hp = h0.copy()
                hp[s, d + j] += sgn * h
                vals.append(_objective(params, hp, g_out))
            record(f"t[{s},{j}]", grads.d_input[s, d + j], vals[0][0], vals[1][0],
                   vals[0][1], vals[1][1])
    return GradCheckResult(worst, n_checked, skipped, worst_name)
