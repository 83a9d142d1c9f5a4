"""Cameras, perspective projection and rotation/covariance helpers.

World convention: +y up, the body faces +z, azimuth 0 looks at the front.
Positive azimuth swings the camera toward the subject's right side (-x),
so azimuth +90 is the right-side view. View space is x right, y down,
z forward; pixel (row i, col j) has its center at (x=j, y=i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

NEAR = 0.01
FAR = 100.0
COV2D_FLOOR = 0.3


@dataclass(frozen=True)
class Camera:
    distance: float
    elevation: float
    azimuth: float
    fovy: float
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    width: int = 64
    height: int = 64
    near: float = NEAR
    far: float = FAR
    position: np.ndarray = field(init=False, repr=False, compare=False)
    rotation: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (0.0 < self.fovy < 180.0):
            raise ParameterError(f"fovy must lie in (0, 180) degrees, got {self.fovy}")
        if not self.distance > 0.0:
            raise ParameterError(f"camera distance must be positive, got {self.distance}")
        if self.width < 1 or self.height < 1:
            raise ParameterError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (0.0 < self.near < self.far):
            raise ParameterError(f"need 0 < near < far, got near={self.near} far={self.far}")
        target = np.asarray(self.target, dtype=np.float64)
        if target.shape != (3,) or not np.all(np.isfinite(target)):
            raise ParameterError("camera target must be a finite 3-vector")
        object.__setattr__(self, "target", tuple(float(v) for v in target))
        el = np.deg2rad(self.elevation)
        az = np.deg2rad(self.azimuth)
        offset = self.distance * np.array(
            [-np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)]
        )
        position = target + offset
        forward = -offset / np.linalg.norm(offset)
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            # looking straight up/down: pick a right vector in the horizontal plane
            right = np.array([np.cos(az), 0.0, np.sin(az)])
        else:
            right = right / norm
        down = np.cross(forward, right)
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "rotation", np.stack([right, down, forward]))

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(0.5 * np.deg2rad(self.fovy))

    @property
    def principal_point(self) -> tuple[float, float]:
        return (0.5 * self.width - 0.5, 0.5 * self.height - 0.5)

    def view_matrix(self) -> np.ndarray:
        """4x4 world-to-camera rigid transform."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = -self.rotation @ self.position
        return m

    def intrinsics(self) -> np.ndarray:
        cx, cy = self.principal_point
        f = self.focal
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])

    def with_size(self, width: int, height: int | None = None) -> "Camera":
        return camera_from_spherical(
            self.distance, self.elevation, self.azimuth, self.fovy, self.target,
            width, width if height is None else height, near=self.near, far=self.far,
        )


def camera_from_spherical(distance, elevation, azimuth, fovy, target=(0.0, 0.0, 0.0),
                          width=64, height=64, near=NEAR, far=FAR) -> Camera:
    return Camera(float(distance), float(elevation), float(azimuth), float(fovy),
                  tuple(np.asarray(target, dtype=np.float64).tolist()),
                  int(width), int(height), float(near), float(far))


def world_to_view(camera: Camera, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return (p - camera.position) @ camera.rotation.T


def project_point(camera: Camera, p):
    """Project world point(s) ``p`` (..., 3) to pixels.

    Returns ``(pixel, view_depth)``. Points with ``view_depth <= near``
    are not renderable; their pixel is NaN.
    """
    t = world_to_view(camera, p)
    z = t[..., 2]
    f = camera.focal
    cx, cy = camera.principal_point
    with np.errstate(divide="ignore", invalid="ignore"):
        pixel = np.stack([f * t[..., 0] / z + cx, f * t[..., 1] / z + cy], axis=-1)
    pixel = np.where((z > camera.near)[..., None], pixel, np.nan)
    return pixel, z


def normalize_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix for (w, x, y, z) quaternion(s); normalizes first."""
    w, x, y, z = np.moveaxis(normalize_quaternion(q), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def covariance_from(scale, rotation) -> np.ndarray:
    """Sigma = R diag(s^2) R^T for scale(s) (..., 3) and quaternion(s) (..., 4)."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ParameterError("scale components must be positive")
    m = quaternion_to_matrix(rotation) * scale[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def projection_jacobian(camera: Camera, t) -> np.ndarray:
    """d(pixel)/d(view-space point) at view-space point(s) t (..., 3)."""
    t = np.asarray(t, dtype=np.float64)
    f = camera.focal
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    zero = np.zeros_like(z)
    return np.stack([
        np.stack([f / z, zero, -f * x / z**2], -1),
        np.stack([zero, f / z, -f * y / z**2], -1),
    ], -2)


def project_covariance(camera: Camera, mu, sigma3d, floor: float = COV2D_FLOOR) -> np.ndarray:
    """EWA screen-space covariance J W Sigma W^T J^T plus an isotropic floor."""
    t = world_to_view(camera, mu)
    m = projection_jacobian(camera, t) @ camera.rotation
    cov = m @ np.asarray(sigma3d, dtype=np.float64) @ np.swapaxes(m, -1, -2)
    return cov + floor * np.eye(2)
