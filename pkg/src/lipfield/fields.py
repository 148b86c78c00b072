"""Ground-truth implicit fields, training point sampling, IDX images and bitmap SDFs."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from .tensor import DimensionError, make_rng

REPRESENTATIONS = ("sdf", "occupancy")


class SamplingError(RuntimeError):
    pass


class IdxParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DegenerateFieldWarning(UserWarning):
    pass


# ------------------------------------------------------------------ shapes

@dataclass(frozen=True)
class Circle:
    center: tuple = (0.5, 0.5)
    radius: float = 0.3
    dim = 2

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def to_dict(self):
        return {"kind": "circle", "center": list(self.center), "radius": self.radius}


def _segments_cross(p1, p2, q1, q2):
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    return (orient(p1, p2, q1) * orient(p1, p2, q2) < 0
            and orient(q1, q2, p1) * orient(q1, q2, p2) < 0)


@dataclass(frozen=True)
class Polygon:
    """Closed polygon given by its vertices (closure implicit)."""
    vertices: tuple
    dim = 2

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs at least three 2-d vertices")
        object.__setattr__(self, "vertices", tuple(map(tuple, v.tolist())))
        m = v.shape[0]
        for i in range(m):
            for j in range(i + 1, m):
                if j == i + 1 or (i == 0 and j == m - 1):
                    continue
                if _segments_cross(v[i], v[(i + 1) % m], v[j], v[(j + 1) % m]):
                    raise ValueError(f"polygon edges {i} and {j} intersect")

    @property
    def verts(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=np.float64)

    def sdf(self, p):
        p = np.asarray(p, dtype=np.float64)
        flat = p.reshape(-1, 2)
        return kernels.polygon_sdf(flat, self.verts).reshape(p.shape[:-1])

    def to_dict(self):
        return {"kind": "polygon", "vertices": [list(v) for v in self.vertices]}


def star_polygon(center=(0.5, 0.5), r_outer=0.35, r_inner=0.15, points=5) -> Polygon:
    """Star with ``2 * points`` vertices alternating between the two radii."""
    if r_outer <= 0 or r_inner <= 0 or points < 2:
        raise ValueError("star needs positive radii and at least two points")
    ang = np.pi / 2 + np.arange(2 * points) * np.pi / points
    r = np.where(np.arange(2 * points) % 2 == 0, r_outer, r_inner)
    verts = np.stack([center[0] + r * np.cos(ang), center[1] + r * np.sin(ang)], axis=1)
    return Polygon(tuple(map(tuple, verts)))


def load_polygon(path) -> Polygon:
    """Read one ``x y`` pair per line; blank lines and ``#`` comments are skipped."""
    pts = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{ln}: expected 'x y'")
        pts.append((float(parts[0]), float(parts[1])))
    return Polygon(tuple(pts))


def builtin_polygon(name: str) -> Polygon:
    return load_polygon(resources.files("lipfield") / "data" / f"{name}.txt")


@dataclass(frozen=True)
class Torus:
    major: float = 0.25
    minor: float = 0.08
    center: tuple = (0.5, 0.5, 0.5)
    dim = 3

    def __post_init__(self):
        if self.major <= 0 or self.minor <= 0:
            raise ValueError("torus radii must be positive")

    def sdf(self, p):
        q = np.asarray(p, dtype=np.float64) - np.asarray(self.center)
        ring = np.hypot(q[..., 0], q[..., 1]) - self.major
        return np.hypot(ring, q[..., 2]) - self.minor

    def to_dict(self):
        return {"kind": "torus3d", "major": self.major, "minor": self.minor,
                "center": list(self.center)}


@dataclass(frozen=True)
class DoubleTorus:
    """Union (min) of two tori: exact zero set, approximate distance elsewhere."""
    first: Torus = Torus(0.2, 0.07, (0.32, 0.5, 0.5))
    second: Torus = Torus(0.2, 0.07, (0.68, 0.5, 0.5))
    dim = 3

    def sdf(self, p):
        return np.minimum(self.first.sdf(p), self.second.sdf(p))

    def to_dict(self):
        return {"kind": "double_torus3d", "first": self.first.to_dict(),
                "second": self.second.to_dict()}


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """Samples ``values[i, j]`` at ``origin + (i, j) * spacing``, bilinearly interpolated."""
    values: np.ndarray
    spacing: float
    origin: tuple = (0.0, 0.0)
    dim = 2

    def __post_init__(self):
        if self.spacing <= 0:
            raise ValueError("raster spacing must be positive")
        if np.ndim(self.values) != 2 or min(np.shape(self.values)) < 2:
            raise ValueError("raster grid must be at least 2x2")

    def sdf(self, p):
        p = np.asarray(p, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        u = (p - np.asarray(self.origin)) / self.spacing
        nx, ny = v.shape
        fx = np.clip(u[..., 0], 0, nx - 1)
        fy = np.clip(u[..., 1], 0, ny - 1)
        i = np.minimum(np.floor(fx).astype(int), nx - 2)
        j = np.minimum(np.floor(fy).astype(int), ny - 2)
        a, b = fx - i, fy - j
        return ((1 - a) * (1 - b) * v[i, j] + a * (1 - b) * v[i + 1, j]
                + (1 - a) * b * v[i, j + 1] + a * b * v[i + 1, j + 1])

    def to_dict(self):
        return {"kind": "raster_grid", "values": np.asarray(self.values).tolist(),
                "spacing": self.spacing, "origin": list(self.origin)}


def shape_from_dict(d: dict, base_dir=None):
    kind = d["kind"]
    if kind == "circle":
        return Circle(tuple(d.get("center", (0.5, 0.5))), float(d["radius"]))
    if kind == "star":
        return star_polygon(tuple(d.get("center", (0.5, 0.5))), float(d.get("r_outer", 0.35)),
                            float(d.get("r_inner", 0.15)), int(d.get("points", 5)))
    if kind == "polygon":
        if "builtin" in d:
            return builtin_polygon(d["builtin"])
        if "file" in d:
            path = Path(d["file"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            return load_polygon(path)
        return Polygon(tuple(map(tuple, d["vertices"])))
    if kind == "torus3d":
        return Torus(float(d["major"]), float(d["minor"]), tuple(d.get("center", (0.5, 0.5, 0.5))))
    if kind == "double_torus3d":
        return DoubleTorus(shape_from_dict(d["first"]), shape_from_dict(d["second"]))
    if kind == "raster_grid":
        return RasterGrid(np.asarray(d["values"], dtype=np.float64), float(d["spacing"]),
                          tuple(d.get("origin", (0.0, 0.0))))
    raise ValueError(f"unknown shape kind {kind!r}")


@dataclass(frozen=True, eq=False)
class FieldSpec:
    shape: object
    representation: str = "sdf"
    latent_target: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        object.__setattr__(self, "latent_target",
                           np.atleast_1d(np.asarray(self.latent_target, dtype=np.float64)))

    @property
    def dim(self) -> int:
        return self.shape.dim

    def to_dict(self):
        d = self.shape.to_dict()
        d["representation"] = self.representation
        d["latent"] = self.latent_target.tolist()
        return d

    @classmethod
    def from_dict(cls, d, base_dir=None):
        return cls(shape_from_dict(d, base_dir), d.get("representation", "sdf"),
                   d.get("latent", []))


def eval_field(spec: FieldSpec, p) -> np.ndarray:
    """Field value at ``p`` (one point or an (n, dim) array)."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != spec.dim:
        raise DimensionError(f"point dimension {p.shape[-1]} != field dimension {spec.dim}")
    d = spec.shape.sdf(p)
    if spec.representation == "occupancy":
        return (d <= 0).astype(np.float64)
    return np.asarray(d, dtype=np.float64)


def sdf_gradient(shape, p, h=1e-6):
    """Central-difference spatial gradient of a shape's SDF."""
    p = np.asarray(p, dtype=np.float64)
    g = np.empty_like(p)
    for k in range(p.shape[-1]):
        e = np.zeros(p.shape[-1])
        e[k] = h
        g[..., k] = (shape.sdf(p + e) - shape.sdf(p - e)) / (2 * h)
    return g


# ------------------------------------------------------------------ sampling

@dataclass
class SamplePlan:
    n_total: int = 4096
    fractions: tuple = (0.4, 0.4, 0.2)  # on surface, near surface, uniform
    near_sigma: float = 0.01
    bbox: tuple = ((0.0, 0.0), (1.0, 1.0))
    seed: int = 0

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=np.float64)
        if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
            raise ValueError("fractions must be three nonnegative numbers summing to 1")
        if self.n_total < 1:
            raise ValueError("n_total must be positive")
        lo, hi = np.asarray(self.bbox[0], float), np.asarray(self.bbox[1], float)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("bbox must be (lower corner, upper corner) with lower < upper")

    def counts(self) -> tuple[int, int, int]:
        n_on = int(round(self.n_total * self.fractions[0]))
        n_near = int(round(self.n_total * self.fractions[1]))
        return n_on, n_near, self.n_total - n_on - n_near

    def to_dict(self):
        return {"n_total": self.n_total, "fractions": list(self.fractions),
                "near_sigma": self.near_sigma, "bbox": [list(self.bbox[0]), list(self.bbox[1])],
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        bbox = d.get("bbox", [[0.0, 0.0], [1.0, 1.0]])
        return cls(int(d.get("n_total", 4096)), tuple(d.get("fractions", (0.4, 0.4, 0.2))),
                   float(d.get("near_sigma", 0.01)), (tuple(bbox[0]), tuple(bbox[1])),
                   int(d.get("seed", 0)))


@dataclass
class TrainingSet:
    x: np.ndarray       # (n, dim)
    t: np.ndarray       # (n, latent)
    target: np.ndarray  # (n,)

    def __len__(self):
        return self.x.shape[0]

    @staticmethod
    def concat(sets) -> "TrainingSet":
        return TrainingSet(np.concatenate([s.x for s in sets]),
                           np.concatenate([s.t for s in sets]),
                           np.concatenate([s.target for s in sets]))


def surface_points(shape, n, bbox, rng, max_rounds=20, tol=1e-6):
    """Project uniform samples onto the zero set with Newton steps along the gradient."""
    lo, hi = np.asarray(bbox[0], float), np.asarray(bbox[1], float)
    found = []
    have = 0
    for _ in range(max_rounds):
        p = lo + (hi - lo) * rng.random((max(2 * (n - have), 64), lo.size))
        for _ in range(30):
            d = shape.sdf(p)
            g = sdf_gradient(shape, p)
            gg = np.maximum((g * g).sum(-1), 1e-12)
            p = p - (d / gg)[:, None] * g
        ok = (np.abs(shape.sdf(p)) < tol) & np.all((p >= lo) & (p <= hi), axis=1)
        found.append(p[ok])
        have += int(ok.sum())
        if have >= n:
            return np.concatenate(found)[:n]
    raise SamplingError(f"found only {have} of {n} surface points inside the box")


def sample_training_points(spec: FieldSpec, plan: SamplePlan) -> TrainingSet:
    lo, hi = np.asarray(plan.bbox[0], float), np.asarray(plan.bbox[1], float)
    if lo.size != spec.dim:
        raise DimensionError("sample box dimension does not match the field")
    rng = make_rng(plan.seed)
    n_on, n_near, n_uni = plan.counts()
    need = n_on + n_near
    surf = surface_points(spec.shape, need, plan.bbox, rng) if need else np.zeros((0, lo.size))
    on = surf[:n_on]
    near = surf[n_on:] + plan.near_sigma * rng.standard_normal((n_near, lo.size))
    near = np.clip(near, lo, hi)
    uni = lo + (hi - lo) * rng.random((n_uni, lo.size))
    x = np.concatenate([on, near, uni])
    target = eval_field(spec, x)
    t = np.broadcast_to(spec.latent_target, (x.shape[0], spec.latent_target.size)).copy()
    return TrainingSet(x, t, target)


def grid_points(res: int, bbox=((0.0, 0.0), (1.0, 1.0))) -> np.ndarray:
    """``res`` x ``res`` lattice over a 2-d box, flattened with the x index major."""
    (x0, y0), (x1, y1) = bbox
    xs = np.linspace(x0, x1, res)
    ys = np.linspace(y0, y1, res)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


# ------------------------------------------------------------------ IDX files

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX file (the MNIST container format) into an array."""
    if len(data) < 4:
        raise IdxParseError("file shorter than the 4-byte magic number", len(data))
    if data[0] != 0 or data[1] != 0:
        raise IdxParseError("bad magic: first two bytes must be zero", 0)
    code, ndim = data[2], data[3]
    if code not in _IDX_TYPES:
        raise IdxParseError(f"unsupported type code 0x{code:02x}", 2)
    if ndim == 0:
        raise IdxParseError("zero dimensions", 3)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxParseError("truncated dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = np.dtype(_IDX_TYPES[code])
    size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) < header + size:
        raise IdxParseError(f"truncated payload: expected {size} bytes, found {len(data) - header}",
                            len(data))
    if len(data) > header + size:
        raise IdxParseError("trailing bytes after payload", header + size)
    arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=header)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


def write_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}[arr.dtype]
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(np.dtype(_IDX_TYPES[code])).tobytes()


# ------------------------------------------------------------------ bitmap SDF

def sdf_from_bitmap(image, threshold=127.5, representation="sdf", latent=()) -> FieldSpec:
    """Signed distance of a binarized image, mapped to the unit box.

    Pixels with value above ``threshold`` are inside. Pixel ``image[r, c]``
    sits at x = (c + 0.5) / N, y = (r + 0.5) / N with N = max(rows, cols).
    Distances run between pixel centers and the boundary half a pixel away,
    so values step by exactly one pixel across the boundary.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("image must be a nonempty 2-d array")
    inside = img > threshold
    n = max(img.shape)
    spacing = 1.0 / n
    if inside.all() or not inside.any():
        warnings.warn("bitmap is entirely one-signed; returning a constant field",
                      DegenerateFieldWarning, stacklevel=2)
        const = np.hypot(*img.shape) * (-1.0 if inside.all() else 1.0)
        sdf_px = np.full(img.shape, const)
    else:
        d_out = np.sqrt(kernels.edt_sq(inside))    # outside pixels: distance to inside
        d_in = np.sqrt(kernels.edt_sq(~inside))    # inside pixels: distance to outside
        sdf_px = np.where(inside, -(d_in - 0.5), d_out - 0.5)
    grid = sdf_px.T * spacing  # index as [x, y]
    return FieldSpec(RasterGrid(grid, spacing, (0.5 * spacing, 0.5 * spacing)),
                     representation, latent)
