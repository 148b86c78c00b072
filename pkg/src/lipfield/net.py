"""Fully connected field network with a hand-written reverse pass.

The network maps a spatial point ``x`` and a latent code ``t`` to a field
value. The assembled input is ``[input_scale * x, t]``. Every layer can carry
a learnable bound ``softplus(rho_i)`` on the max absolute row sum of its
weight matrix; rows over the bound are rescaled on the fly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import DimensionError, logistic, make_rng, matrix_norm, softplus, softplus_inv

ACTIVATION_KINDS = ("relu", "leaky_relu", "tanh", "sigmoid", "fullsort", "identity")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")


class ContractError(RuntimeError):
    """A call violated a usage contract (stale cache, wrong network mode...)."""


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"
    slope: float = 0.01  # only used by leaky_relu

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not 0.0 <= self.slope <= 1.0:
            raise ValueError("leaky_relu slope must lie in [0, 1] to stay 1-Lipschitz")

    def forward(self, z: np.ndarray):
        """Return ``(y, aux)`` where ``aux`` is whatever ``backward`` needs."""
        k = self.kind
        if k == "relu":
            return np.maximum(z, 0.0), z > 0
        if k == "leaky_relu":
            mask = z > 0
            return np.where(mask, z, self.slope * z), mask
        if k == "tanh":
            y = np.tanh(z)
            return y, y
        if k == "sigmoid":
            y = logistic(z)
            return y, y
        if k == "fullsort":
            perm = np.argsort(z, axis=-1, kind="stable")
            return np.take_along_axis(z, perm, axis=-1), perm
        return z.copy(), None

    def backward(self, aux, g: np.ndarray) -> np.ndarray:
        k = self.kind
        if k == "relu":
            return g * aux
        if k == "leaky_relu":
            return np.where(aux, g, self.slope * g)
        if k == "tanh":
            return g * (1.0 - aux * aux)
        if k == "sigmoid":
            return g * aux * (1.0 - aux)
        if k == "fullsort":
            dz = np.empty_like(g)
            np.put_along_axis(dz, aux, g, axis=-1)
            return dz
        return g

    def to_dict(self):
        return {"kind": self.kind, "slope": self.slope}

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, str):
            return cls(d)
        return cls(d["kind"], float(d.get("slope", 0.01)))


def apply_activation(act: Activation | str, v):
    """Apply ``act`` to ``v``; returns the output and a vector-Jacobian product.

    >>> y, vjp = apply_activation("fullsort", np.array([3.0, 1.0, 2.0]))
    >>> y, vjp(np.array([1.0, 0.0, 0.0]))
    (array([1., 2., 3.]), array([0., 1., 0.]))
    """
    if isinstance(act, str):
        act = Activation(act)
    y, aux = act.forward(np.asarray(v, dtype=np.float64))
    return y, lambda g: act.backward(aux, np.asarray(g, dtype=np.float64))


@dataclass
class MlpParams:
    """Weights ``W_i`` (out x in), biases, and optional per-layer bound parameters.

    ``rho`` is set for Lipschitz networks; ``k_rho`` is set for the variant
    where every layer is normalized to bound 1 and the final weight matrix is
    multiplied by ``softplus(k_rho)``. Arrays are treated as immutable: the
    optimizers build new ``MlpParams`` rather than updating in place.
    """

    weights: list
    biases: list
    activation: Activation = field(default_factory=Activation)
    rho: np.ndarray | None = None
    k_rho: np.ndarray | None = None
    input_scale: float = 100.0
    spatial_dim: int = 2
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(f"layer {i} input width does not match layer {i - 1}")
        if self.rho is not None and self.rho.shape != (len(self.weights),):
            raise DimensionError("need one rho per layer")
        if self.rho is not None and self.k_rho is not None:
            raise ContractError("rho and k_rho are mutually exclusive")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if not 0 <= self.spatial_dim <= self.dims[0]:
            raise DimensionError("spatial_dim exceeds the input width")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def latent_dim(self) -> int:
        return self.dims[0] - self.spatial_dim

    @property
    def lipschitz_mode(self) -> bool:
        return self.rho is not None

    @property
    def kscale_mode(self) -> bool:
        return self.k_rho is not None

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order, matched by ``Gradients.arrays``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.rho is not None:
            out.append(self.rho)
        if self.k_rho is not None:
            out.append(self.k_rho)
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        arrays = list(arrays)
        n = self.n_layers
        ws, bs = arrays[0:2 * n:2], arrays[1:2 * n:2]
        rest = arrays[2 * n:]
        rho = rest.pop(0) if self.rho is not None else None
        k_rho = rest.pop(0) if self.k_rho is not None else None
        return replace(self, weights=ws, biases=bs, rho=rho, k_rho=k_rho)

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


@dataclass
class ForwardCache:
    params: MlpParams
    inputs: list          # input to each layer
    pre: list             # pre-activations
    aux: list             # activation data for backward
    w_hat: list           # weights actually applied
    row_sums: list
    scales: list
    clipped: list         # bool mask per layer, rows that were rescaled
    bounds: list          # per-layer bound used by the normalization (None if off)
    output: np.ndarray
    single: bool


@dataclass
class Gradients:
    d_weights: list
    d_biases: list
    d_rho: np.ndarray | None = None
    d_k_rho: np.ndarray | None = None
    d_input: np.ndarray | None = None  # per sample, w.r.t. the raw [x, t]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.d_weights, self.d_biases):
            out += [w, b]
        if self.d_rho is not None:
            out.append(self.d_rho)
        if self.d_k_rho is not None:
            out.append(self.d_k_rho)
        return out

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "Gradients":
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
            None if params.rho is None else np.zeros_like(params.rho),
            None if params.k_rho is None else np.zeros_like(params.k_rho),
        )

    def add_(self, other: "Gradients", scale: float = 1.0) -> "Gradients":
        for a, b in zip(self.arrays(), other.arrays()):
            a += scale * b
        return self


def init_params(dims, activation="relu", lipschitz_mode=False, seed=0, *,
                input_scale=100.0, spatial_dim=2, output_activation="identity",
                kscale=False) -> MlpParams:
    """Random network for ``dims`` = [input, hidden..., output].

    Glorot-uniform weights for tanh/sigmoid/identity/fullsort, He-normal for
    the ReLU family; zero biases. In Lipschitz mode each ``rho_i`` is set so
    that ``softplus(rho_i)`` equals the initial ``||W_i||_inf``.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise DimensionError("need at least input and output widths")
    if any(d <= 0 for d in dims):
        raise DimensionError(f"zero-width layer in {dims}")
    act = activation if isinstance(activation, Activation) else Activation.from_dict(activation)
    rng = make_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        if act.kind in ("relu", "leaky_relu"):
            w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        else:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    norms = np.array([matrix_norm(w, "inf") for w in weights])
    rho = softplus_inv(norms) if lipschitz_mode else None
    k_rho = softplus_inv(np.array([np.prod(norms)])) if kscale else None
    return MlpParams(weights, biases, act, rho, k_rho, float(input_scale),
                     int(spatial_dim), output_activation)


def layer_bounds(params: MlpParams) -> list:
    """Bound handed to the row normalization of each layer, or None when off."""
    if params.rho is not None:
        return list(softplus(params.rho))
    if params.k_rho is not None:
        return [1.0] * params.n_layers
    return [None] * params.n_layers


def normalize_rows(w: np.ndarray, c: float):
    """Row rescaling ``min(1, c / sum_j |w_rj|)``; returns (w_hat, scale, rowsum, clipped).

    Rows with sum exactly ``c`` or zero sum are left alone.
    """
    rowsum = np.abs(w).sum(axis=1)
    clipped = rowsum > c
    scale = np.ones_like(rowsum)
    if not clipped.any():
        return w.copy(), scale, rowsum, clipped
    np.divide(c, rowsum, out=scale, where=clipped)
    w_hat = w * scale[:, None]
    # rounding can leave a rescaled row one ulp above c; shrink it so a second pass is a no-op
    over = np.abs(w_hat).sum(axis=1) > c
    while over.any():
        scale[over] = np.nextafter(scale[over], 0.0)
        w_hat[over] = w[over] * scale[over, None]
        over = np.abs(w_hat).sum(axis=1) > c
    return w_hat, scale, rowsum, clipped


def _as_batch(a, width, name):
    if a is None:
        if width:
            raise DimensionError(f"missing {name} input of width {width}")
        return np.zeros((1, 0)), True
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim <= 1
    if single:
        a = a.reshape(1, -1)
    if a.ndim != 2 or a.shape[1] != width:
        raise DimensionError(f"{name} input has shape {a.shape}, expected width {width}")
    return a, single


def assemble_input(params: MlpParams, x, t) -> tuple[np.ndarray, bool]:
    """Stack ``[input_scale * x, t]`` row-wise, broadcasting a single x or t."""
    x, sx = _as_batch(x, params.spatial_dim, "spatial")
    t, st = _as_batch(t, params.latent_dim, "latent")
    n = max(x.shape[0], t.shape[0])
    if x.shape[0] not in (1, n) or t.shape[0] not in (1, n):
        raise DimensionError(f"batch sizes {x.shape[0]} and {t.shape[0]} do not broadcast")
    x = np.broadcast_to(x, (n, x.shape[1]))
    t = np.broadcast_to(t, (n, t.shape[1]))
    return np.concatenate([params.input_scale * x, t], axis=1), sx and st


def forward(params: MlpParams, x, t):
    """Evaluate the network on a batch.

    ``x`` is (n, spatial_dim) or a single point; ``t`` is (n, latent_dim) or a
    single code broadcast over the batch. Returns ``(output, cache)`` where
    output is (n, out_dim), or (out_dim,) when both inputs are single vectors.
    """
    h, single = assemble_input(params, x, t)
    bounds = layer_bounds(params)
    cache = ForwardCache(params, [], [], [], [], [], [], [], bounds, None, single)
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if bounds[i] is not None:
            w_hat, scale, rowsum, clipped = normalize_rows(w, bounds[i])
        else:
            w_hat, scale, rowsum, clipped = w, None, None, None
        if i == last and params.k_rho is not None:
            w_hat = w_hat * softplus(params.k_rho[0])
        z = h @ w_hat.T + b
        cache.inputs.append(h)
        cache.pre.append(z)
        cache.w_hat.append(w_hat)
        cache.row_sums.append(rowsum)
        cache.scales.append(scale)
        cache.clipped.append(clipped)
        if i < last:
            h, aux = params.activation.forward(z)
        elif params.output_activation == "sigmoid":
            h = logistic(z)
            aux = h
        else:
            h, aux = z, None
        cache.aux.append(aux)
    cache.output = h
    return (h[0] if single else h), cache


def backward(params: MlpParams, cache: ForwardCache, d_output) -> Gradients:
    """Gradients of ``sum(d_output * output)`` w.r.t. every parameter and the input."""
    if cache.params is not params:
        raise ContractError("cache was produced by a different parameter set")
    g = np.asarray(d_output, dtype=np.float64)
    if cache.single:
        g = g.reshape(1, -1)
    if g.shape != cache.output.shape:
        raise DimensionError(f"d_output {g.shape} does not match output {cache.output.shape}")
    n_layers = params.n_layers
    d_w = [None] * n_layers
    d_b = [None] * n_layers
    d_c = np.zeros(n_layers)
    d_k = None
    for i in range(n_layers - 1, -1, -1):
        if i == n_layers - 1:
            if params.output_activation == "sigmoid":
                y = cache.aux[i]
                g = g * y * (1.0 - y)
        else:
            g = params.activation.backward(cache.aux[i], g)
        d_b[i] = g.sum(axis=0)
        d_what = g.T @ cache.inputs[i]
        g = g @ cache.w_hat[i]
        if i == n_layers - 1 and params.k_rho is not None:
            k = softplus(params.k_rho[0])
            # w_hat = k * n(w); d k = <d_what, n(w)>
            d_k = np.array([np.sum(d_what * cache.w_hat[i]) / k * logistic(params.k_rho[0])])
            d_what = d_what * k
        bound = cache.bounds[i]
        if bound is None:
            d_w[i] = d_what
            continue
        w = params.weights[i]
        clipped = cache.clipped[i]
        if clipped.any():
            a = np.where(clipped, cache.row_sums[i], 1.0)
            gd = np.einsum("ij,ij->i", d_what, w)
            coef = np.where(clipped, bound * gd / (a * a), 0.0)
            d_w[i] = np.where(clipped, bound / a, 1.0)[:, None] * d_what - coef[:, None] * np.sign(w)
            d_c[i] = np.sum((gd / a)[clipped])
        else:
            d_w[i] = d_what
    d_rho = d_c * logistic(params.rho) if params.rho is not None else None
    d_in = g.copy()
    d_in[:, :params.spatial_dim] *= params.input_scale
    return Gradients(d_w, d_b, d_rho, d_k, d_in)


def predict(params: MlpParams, x, t, chunk: int = 65536) -> np.ndarray:
    """Forward pass without keeping a cache, evaluated in chunks."""
    h, single = assemble_input(params, x, t)
    outs = [_forward_assembled(params, h[s:s + chunk]) for s in range(0, h.shape[0], chunk)]
    out = np.concatenate(outs, axis=0) if outs else np.zeros((0, params.dims[-1]))
    return out[0] if single else out


def _forward_assembled(params, h):
    bounds = layer_bounds(params)
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        w_hat = w if bounds[i] is None else normalize_rows(w, bounds[i])[0]
        if i == last and params.k_rho is not None:
            w_hat = w_hat * softplus(params.k_rho[0])
        z = h @ w_hat.T + b
        if i < last:
            h = params.activation.forward(z)[0]
        elif params.output_activation == "sigmoid":
            h = logistic(z)
        else:
            h = z
    return h
