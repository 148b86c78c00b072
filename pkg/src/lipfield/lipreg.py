"""Row-sum weight normalization, network Lipschitz bounds and regularizers."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .net import ContractError, Gradients, MlpParams, backward, forward, layer_bounds, normalize_rows
from .tensor import as_matrix, logistic, matrix_norm, softplus, spectral_norm_and_grad

VARIANTS = ("lipschitz_product", "yoshida_sq_sum", "direct_product", "log_product",
            "k_scale", "l1", "l2", "dirichlet", "none")

# default weights per experiment family
DEFAULT_ALPHA = {"2d": 3e-6, "3d": 1e-6, "occupancy": 1e-6, "l1": 1e-7, "l2": 1e-7}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class RegularizerSpec:
    variant: str = "none"
    alpha: float = 0.0
    norm_kind: str = "spectral"  # yoshida_sq_sum only
    dirichlet_samples: list = field(default_factory=list)
    fd_step: float = 1e-3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown regularizer variant {self.variant!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.fd_step <= 0:
            raise ConfigError("fd_step must be positive")
        if self.norm_kind not in ("inf", "one", "spectral"):
            raise ConfigError(f"unknown norm kind {self.norm_kind!r}")
        self.dirichlet_samples = [np.atleast_1d(np.asarray(t, dtype=np.float64))
                                  for t in self.dirichlet_samples]
        if (self.variant == "dirichlet") != bool(self.dirichlet_samples):
            raise ConfigError("dirichlet_samples must be given exactly for the dirichlet variant")

    def to_dict(self):
        return {"variant": self.variant, "alpha": self.alpha, "norm_kind": self.norm_kind,
                "dirichlet_samples": [t.tolist() for t in self.dirichlet_samples],
                "fd_step": self.fd_step}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("variant", "none"), float(d.get("alpha", 0.0)),
                   d.get("norm_kind", "spectral"), list(d.get("dirichlet_samples", [])),
                   float(d.get("fd_step", 1e-3)))


@dataclass
class LipschitzBoundReport:
    per_layer: list
    product: float


def normalize_row_inf(w, c_eff: float) -> np.ndarray:
    """Scale each row of ``w`` by ``min(1, c_eff / sum_j |w_rj|)``.

    >>> normalize_row_inf([[3.0, -1.0], [0.5, 0.25]], 2.0)
    array([[ 1.5 , -0.5 ],
           [ 0.5 ,  0.25]])
    """
    if not c_eff > 0:
        raise ValueError(f"bound must be positive, got {c_eff}")
    return normalize_rows(as_matrix(w), float(c_eff))[0]


def lipschitz_bound(params: MlpParams) -> LipschitzBoundReport:
    """Per-layer bounds and their product (an upper bound in the inf-norm)."""
    if params.rho is not None:
        per = [float(c) for c in softplus(params.rho)]
    elif params.k_rho is not None:
        per = [1.0] * (params.n_layers - 1) + [float(softplus(params.k_rho[0]))]
    else:
        per = [matrix_norm(w, "inf") for w in params.weights]
    return LipschitzBoundReport(per, float(np.prod(per)))


def _norm_and_grad(w, kind):
    if kind == "spectral":
        return spectral_norm_and_grad(w)
    a = np.abs(w)
    axis = 1 if kind == "inf" else 0
    sums = a.sum(axis=axis)
    k = int(np.argmax(sums))
    g = np.zeros_like(w)
    if kind == "inf":
        g[k] = np.sign(w[k])
    else:
        g[:, k] = np.sign(w[:, k])
    return float(sums[k]), g


def regularizer(spec: RegularizerSpec, params: MlpParams, batch=None):
    """Regularization value and its gradient w.r.t. the parameters.

    ``batch`` is the array of spatial points used by the dirichlet variant
    (ignored by the others).
    """
    grads = Gradients.zeros_like(params)
    v, a = spec.variant, spec.alpha
    if v == "none" or (a == 0.0 and v != "dirichlet"):
        return 0.0, grads
    if v in ("lipschitz_product", "log_product"):
        if params.rho is None:
            raise ConfigError(f"{v} needs a network in Lipschitz mode")
        c = softplus(params.rho)
        if v == "lipschitz_product":
            prod = float(np.prod(c))
            # d/d c_i prod = prod of the others; avoid dividing by tiny c_i
            others = np.prod(np.where(np.eye(c.size, dtype=bool), 1.0, c), axis=1)
            grads.d_rho[:] = a * others * logistic(params.rho)
            return a * prod, grads
        grads.d_rho[:] = a * logistic(params.rho) / c
        return a * float(np.sum(np.log(c))), grads
    if v == "k_scale":
        if params.k_rho is None:
            raise ConfigError("k_scale needs a network built with kscale=True")
        grads.d_k_rho[:] = a * logistic(params.k_rho)
        return a * float(softplus(params.k_rho[0])), grads
    if v == "yoshida_sq_sum":
        total = 0.0
        for i, w in enumerate(params.weights):
            n, g = _norm_and_grad(w, spec.norm_kind)
            total += n * n
            grads.d_weights[i] = 2.0 * a * n * g
        return a * total, grads
    if v == "direct_product":
        norms, gs = zip(*(_norm_and_grad(w, "inf") for w in params.weights))
        for i, g in enumerate(gs):
            grads.d_weights[i] = a * float(np.prod(np.delete(norms, i))) * g
        return a * float(np.prod(norms)), grads
    if v == "l1":
        for i, w in enumerate(params.weights):
            grads.d_weights[i] = a * np.sign(w)
        return a * float(sum(np.abs(w).sum() for w in params.weights)), grads
    if v == "l2":
        for i, w in enumerate(params.weights):
            grads.d_weights[i] = 2.0 * a * w
        return a * float(sum((w * w).sum() for w in params.weights)), grads
    return _dirichlet(spec, params, batch, grads)


def _dirichlet(spec, params, batch, grads):
    """alpha * sum_j mean_x ||df/dt(x, t_j)||^2 with central differences in t."""
    if not spec.dirichlet_samples:
        raise ConfigError("dirichlet regularizer needs latent samples")
    k = params.latent_dim
    if params.spatial_dim:
        if batch is None:
            raise ConfigError("dirichlet regularizer needs a batch of spatial points")
        x = np.asarray(batch, dtype=np.float64).reshape(-1, params.spatial_dim)
    else:
        x = np.zeros((1, 0))
    n = x.shape[0]
    h = spec.fd_step
    total = 0.0
    for tj in spec.dirichlet_samples:
        if tj.shape != (k,):
            raise ConfigError(f"dirichlet sample {tj} does not have latent width {k}")
        for d in range(k):
            e = np.zeros(k)
            e[d] = h
            yp, cp = forward(params, x, np.broadcast_to(tj + e, (n, k)))
            ym, cm = forward(params, x, np.broadcast_to(tj - e, (n, k)))
            deriv = (yp - ym) / (2.0 * h)
            total += float(np.sum(deriv * deriv)) / n
            coef = spec.alpha * 2.0 * deriv / (2.0 * h * n)
            gp = backward(params, cp, coef)
            gm = backward(params, cm, -coef)
            grads.add_(gp).add_(gm)
    return spec.alpha * total, grads


def clip_weights_for_inference(params: MlpParams) -> MlpParams:
    """Fold the normalization into the weights and return a plain network."""
    if params.rho is None and params.k_rho is None:
        raise ContractError("network has no normalization layer to fold")
    bounds = layer_bounds(params)
    ws = [normalize_rows(w, c)[0] for w, c in zip(params.weights, bounds)]
    if params.k_rho is not None:
        ws[-1] = ws[-1] * softplus(params.k_rho[0])
    return replace(params, weights=ws, biases=[b.copy() for b in params.biases],
                   rho=None, k_rho=None)
