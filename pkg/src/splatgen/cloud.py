"""Gaussian cloud parameters, gradient buffers and PLY interchange."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from .errors import ParameterError, PlyParseError

SH_C0 = 0.28209479177387814

PLY_FIELDS = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def color_to_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def evaluate_gaussian(p, mu2d, sigma2d) -> float:
    """Unnormalized 2D Gaussian exp(-1/2 d^T Sigma^-1 d)."""
    d = np.asarray(p, dtype=np.float64) - np.asarray(mu2d, dtype=np.float64)
    a, b, c = sigma2d[0][0], sigma2d[0][1], sigma2d[1][1]
    det = a * c - b * b
    if det <= 0:
        raise ParameterError("2D covariance must be positive definite")
    q = (c * d[..., 0] ** 2 - 2 * b * d[..., 0] * d[..., 1] + a * d[..., 1] ** 2) / det
    return np.exp(-0.5 * q)


@dataclass
class GaussianCloud:
    """Raw (pre-activation) parameters of N Gaussians.

    Scales are stored as logs, opacities as logits, colors as degree-0
    SH coefficients; quaternions (w, x, y, z) are normalized on read.
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    f_dc: np.ndarray
    opacity_logits: np.ndarray

    PARAMS = ("means", "log_scales", "quats", "f_dc", "opacity_logits")

    def __post_init__(self):
        shapes = {"means": 3, "log_scales": 3, "quats": 4, "f_dc": 3}
        for name, width in shapes.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != width:
                raise ParameterError(f"{name} must have shape (N, {width}), got {arr.shape}")
            setattr(self, name, arr)
        self.opacity_logits = np.ascontiguousarray(
            np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1))
        n = self.means.shape[0]
        if n < 1:
            raise ParameterError("a cloud needs at least one Gaussian")
        for name in self.PARAMS:
            if getattr(self, name).shape[0] != n:
                raise ParameterError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")

    @classmethod
    def from_activated(cls, means, scales, rotations=None, colors=None, opacities=None):
        means = np.asarray(means, dtype=np.float64)
        n = means.shape[0]
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        colors = np.full((n, 3), 0.5) if colors is None else np.broadcast_to(colors, (n, 3))
        opacities = np.full(n, 0.1) if opacities is None else np.broadcast_to(opacities, (n,))
        return cls(means, np.log(scales), np.asarray(rotations, dtype=np.float64),
                   color_to_dc(colors), logit(opacities))

    def __len__(self):
        return self.means.shape[0]

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def rotations(self):
        return self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)

    @property
    def colors(self):
        """RGB before the render-time clamp to [0, 1]."""
        return 0.5 + SH_C0 * self.f_dc

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, k).copy() for k in self.PARAMS))

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, k)[index] for k in self.PARAMS))

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(*(np.concatenate([getattr(self, k), getattr(other, k)])
                               for k in self.PARAMS))

    def params(self) -> dict:
        return {k: getattr(self, k) for k in self.PARAMS}


@dataclass
class CloudGradients:
    """dL/d(raw parameters) plus the screen-space statistics densification uses."""

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    f_dc: np.ndarray
    opacity_logits: np.ndarray
    grad2d_accum: np.ndarray
    hit_count: np.ndarray
    means_accum: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "CloudGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros((n, 3)))

    def __len__(self):
        return self.means.shape[0]

    def reset(self, n: int | None = None):
        n = len(self) if n is None else n
        for f in fields(self):
            arr = getattr(self, f.name)
            setattr(self, f.name, np.zeros((n,) + arr.shape[1:], dtype=arr.dtype))

    def param_grads(self) -> dict:
        return {k: getattr(self, k) for k in GaussianCloud.PARAMS}

    def scale_params(self, factor: float):
        for k in GaussianCloud.PARAMS:
            getattr(self, k)[...] *= factor

    def add_(self, other: "CloudGradients") -> "CloudGradients":
        for f in fields(self):
            getattr(self, f.name)[...] += getattr(other, f.name)
        return self

    def add_stats_(self, other: "CloudGradients") -> "CloudGradients":
        """Fold in only the densification statistics of ``other``."""
        self.grad2d_accum += other.grad2d_accum
        self.hit_count += other.hit_count
        self.means_accum += other.means_accum
        return self

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, f.name))) for f in fields(self))


def write_ply(cloud: GaussianCloud, path) -> None:
    n = len(cloud)
    data = np.empty((n, len(PLY_FIELDS)), dtype="<f4")
    data[:, 0:3] = cloud.means
    data[:, 3:6] = cloud.f_dc
    data[:, 6] = cloud.opacity_logits
    data[:, 7:10] = cloud.log_scales
    data[:, 10:14] = cloud.quats
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_FIELDS]
    header.append("end_header")
    with open(os.fspath(path), "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyParseError("malformed header: missing 'ply' magic line")
    elements = []
    fmt = None
    while True:
        raw = fh.readline()
        if not raw:
            raise PlyParseError("malformed header: end_header not found")
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError as exc:
            raise PlyParseError("malformed header: non-ASCII bytes") from exc
        if not line or line.startswith(("comment", "obj_info")):
            continue
        tok = line.split()
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) != 3:
                raise PlyParseError(f"malformed header: bad format line {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyParseError(f"malformed header: bad element line {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError(f"malformed header: property before element: {line!r}")
            if tok[1] == "list":
                raise PlyParseError(
                    f"element {elements[-1][0]}: list property {tok[-1]} is not supported")
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PlyParseError(f"malformed header: bad property line {line!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise PlyParseError(f"malformed header: unknown keyword {tok[0]!r}")
    if fmt is None:
        raise PlyParseError("malformed header: missing format line")
    if fmt != "binary_little_endian":
        raise PlyParseError(f"unsupported PLY format {fmt!r}; expected binary_little_endian")
    return elements


def read_ply(path) -> GaussianCloud:
    with open(os.fspath(path), "rb") as fh:
        elements = _parse_header(fh)
        payload = fh.read()
    offset = 0
    vertex = None
    for name, count, props in elements:
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        size = dtype.itemsize * count
        if len(payload) - offset < size:
            raise PlyParseError(
                f"truncated payload in element {name}: expected {size} bytes, "
                f"got {len(payload) - offset}")
        if name == "vertex":
            vertex = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        offset += size
    if vertex is None:
        raise PlyParseError("missing element vertex")
    for field in PLY_FIELDS:
        if field not in vertex.dtype.names:
            raise PlyParseError(f"missing property {field}")

    def cols(*names):
        return np.stack([vertex[c].astype(np.float64) for c in names], axis=1)

    return GaussianCloud(
        cols("x", "y", "z"),
        cols("scale_0", "scale_1", "scale_2"),
        cols("rot_0", "rot_1", "rot_2", "rot_3"),
        cols("f_dc_0", "f_dc_1", "f_dc_2"),
        vertex["opacity"].astype(np.float64),
    )
