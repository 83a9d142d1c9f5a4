"""Parametric body model, skinning, surface-sampled initialization and
pose-map rendering.

The model container is an ``.npz`` archive holding the arrays below plus a
JSON ``meta`` entry (joint names, COCO keypoint map, format version); see
``docs/body_model_format.md``. ``build_toy_body`` produces a small
articulated capsule person with the same schema so nothing here needs
licensed assets.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .cloud import GaussianCloud
from .errors import DegenerateCollapseError, ModelFormatError, ParameterError
from .geometry import Camera, project_point

FORMAT_VERSION = 1
BODY_HEIGHT = 1.8
INIT_OPACITY = 0.1

COCO_KEYPOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
FACE_KEYPOINTS = ("nose", "left_eye", "right_eye", "left_ear", "right_ear")
COCO_LIMBS = (
    ("left_ankle", "left_knee"), ("left_knee", "left_hip"),
    ("right_ankle", "right_knee"), ("right_knee", "right_hip"),
    ("left_hip", "right_hip"), ("left_shoulder", "left_hip"),
    ("right_shoulder", "right_hip"), ("left_shoulder", "right_shoulder"),
    ("left_shoulder", "left_elbow"), ("right_shoulder", "right_elbow"),
    ("left_elbow", "left_wrist"), ("right_elbow", "right_wrist"),
    ("left_eye", "right_eye"), ("nose", "left_eye"), ("nose", "right_eye"),
    ("left_eye", "left_ear"), ("right_eye", "right_ear"),
    ("left_ear", "left_shoulder"), ("right_ear", "right_shoulder"),
)
# OpenPose palette; keypoint discs use the full color, limbs 60% of it
_PALETTE = (
    (255, 0, 0), (255, 85, 0), (255, 170, 0), (255, 255, 0), (170, 255, 0),
    (85, 255, 0), (0, 255, 0), (0, 255, 85), (0, 255, 170), (0, 255, 255),
    (0, 170, 255), (0, 85, 255), (0, 0, 255), (85, 0, 255), (170, 0, 255),
    (255, 0, 255), (255, 0, 170), (255, 0, 85),
)
KEYPOINT_COLORS = {name: _PALETTE[i] for i, name in enumerate(COCO_KEYPOINTS)}
LIMB_COLORS = tuple(tuple(int(round(0.6 * c)) for c in _PALETTE[i % len(_PALETTE)])
                    for i in range(len(COCO_LIMBS)))


@dataclass
class BodyModel:
    template: np.ndarray          # (V, 3)
    faces: np.ndarray             # (F, 3) int
    shapedirs: np.ndarray         # (V, 3, n_betas)
    posedirs: np.ndarray          # (V, 3, 9 * (K - 1))
    exprdirs: np.ndarray          # (V, 3, n_expr)
    j_regressor: np.ndarray       # (K, V)
    weights: np.ndarray           # (V, K)
    parents: np.ndarray           # (K,), parents[root] == -1
    joint_names: list = field(default_factory=list)
    keypoint_map: list = field(default_factory=list)  # [(coco name, "joint"|"vertex", index)]

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.shapedirs = np.asarray(self.shapedirs, dtype=np.float64)
        self.posedirs = np.asarray(self.posedirs, dtype=np.float64)
        self.exprdirs = np.asarray(self.exprdirs, dtype=np.float64)
        self.j_regressor = np.asarray(self.j_regressor, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.keypoint_map = [(str(n), str(k), int(i)) for n, k, i in self.keypoint_map]
        self.validate()
        self._order = _topological_order(self.parents)

    @property
    def num_vertices(self):
        return self.template.shape[0]

    @property
    def num_joints(self):
        return self.parents.shape[0]

    @property
    def num_betas(self):
        return self.shapedirs.shape[2]

    @property
    def num_expressions(self):
        return self.exprdirs.shape[2]

    def joint_index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise ParameterError(f"body model has no joint named {name!r}") from None

    def validate(self):
        v, k = self.template.shape[0], self.parents.shape[0]
        problems = []
        if self.template.ndim != 2 or self.template.shape[1] != 3:
            problems.append(f"template must be (V, 3), got {self.template.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            problems.append(f"faces must be (F, 3), got {self.faces.shape}")
        elif self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            problems.append("faces reference vertices out of range")
        for name in ("shapedirs", "exprdirs"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (v, 3):
                problems.append(f"{name} must be (V, 3, n), got {arr.shape}")
        if self.posedirs.shape != (v, 3, 9 * (k - 1)):
            problems.append(f"posedirs must be {(v, 3, 9 * (k - 1))}, got {self.posedirs.shape}")
        if self.j_regressor.shape != (k, v):
            problems.append(f"j_regressor must be {(k, v)}, got {self.j_regressor.shape}")
        if self.weights.shape != (v, k):
            problems.append(f"weights must be {(v, k)}, got {self.weights.shape}")
        elif np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(1) - 1) > 1e-6):
            problems.append("skinning weight rows must be nonnegative and sum to 1")
        if self.joint_names and len(self.joint_names) != k:
            problems.append("joint_names length does not match the joint count")
        names = [n for n, _, _ in self.keypoint_map]
        if sorted(names) != sorted(COCO_KEYPOINTS):
            problems.append("keypoint_map must cover the 17 COCO keypoints exactly once")
        for name, kind, idx in self.keypoint_map:
            limit = k if kind == "joint" else v
            if kind not in ("joint", "vertex") or not 0 <= idx < limit:
                problems.append(f"keypoint {name}: bad reference {kind}[{idx}]")
        if problems:
            raise ModelFormatError("; ".join(problems))
        _topological_order(self.parents)


def _topological_order(parents) -> np.ndarray:
    parents = np.asarray(parents)
    roots = np.flatnonzero(parents < 0)
    if roots.size != 1 or roots[0] != 0:
        raise ModelFormatError("parent table must have exactly one root, at joint 0")
    children = {i: [] for i in range(parents.size)}
    for j, p in enumerate(parents):
        if p >= 0:
            if p >= parents.size:
                raise ModelFormatError(f"joint {j} has out-of-range parent {p}")
            children[int(p)].append(j)
    order, stack = [], [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != parents.size:
        raise ModelFormatError("parent table is not a tree (cycle or disconnected joint)")
    return np.asarray(order)


@dataclass
class PoseParams:
    betas: np.ndarray | None = None        # (n_betas,)
    pose: np.ndarray | None = None         # (K - 1, 3) axis-angle per non-root joint
    expression: np.ndarray | None = None   # (n_expr,)
    global_orient: np.ndarray | None = None  # (3,) axis-angle of the root
    transl: np.ndarray | None = None       # (3,)

    def resolved(self, model: BodyModel) -> "PoseParams":
        def arr(value, shape, name):
            out = np.zeros(shape) if value is None else np.asarray(value, dtype=np.float64)
            if out.shape != shape:
                raise ParameterError(f"{name} must have shape {shape}, got {out.shape}")
            if not np.all(np.isfinite(out)):
                raise ParameterError(f"{name} must be finite")
            return out

        k = model.num_joints
        res = PoseParams(arr(self.betas, (model.num_betas,), "betas"),
                         arr(self.pose, (k - 1, 3), "pose"),
                         arr(self.expression, (model.num_expressions,), "expression"),
                         arr(self.global_orient, (3,), "global_orient"),
                         arr(self.transl, (3,), "transl"))
        angles = np.linalg.norm(np.vstack([res.global_orient, res.pose]), axis=1)
        if np.any(angles >= np.pi):
            raise ParameterError("axis-angle magnitudes must be below pi")
        return res


def rodrigues(aa) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    axis = np.where(theta > 1e-12, aa / np.where(theta > 1e-12, theta, 1.0), 0.0)
    x, y, z = np.moveaxis(axis, -1, 0)
    zero = np.zeros_like(x)
    kmat = np.stack([np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1),
                     np.stack([-y, x, zero], -1)], -2)
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    return np.eye(3) + s * kmat + (1 - c) * (kmat @ kmat)


def skin(model: BodyModel, params: PoseParams | None = None):
    """Blend shapes followed by linear blend skinning.

    Returns posed ``(vertices (V, 3), joints (K, 3))``.
    """
    p = (params or PoseParams()).resolved(model)
    v_shaped = model.template + model.shapedirs @ p.betas + model.exprdirs @ p.expression
    joints = model.j_regressor @ v_shaped
    rots = rodrigues(np.vstack([p.global_orient, p.pose]))
    pose_feature = (rots[1:] - np.eye(3)).reshape(-1)
    v_posed = v_shaped + model.posedirs @ pose_feature

    # Forward kinematics in displacement form: D_j = P_j - J_j and A_j = R_j - I,
    # so an identity pose yields exactly zero displacement.
    k = model.num_joints
    world_rot = np.empty((k, 3, 3))
    disp = np.empty((k, 3))
    for j in model._order:
        parent = model.parents[j]
        if parent < 0:
            world_rot[j] = rots[j]
            disp[j] = 0.0
        else:
            world_rot[j] = world_rot[parent] @ rots[j]
            disp[j] = disp[parent] + (world_rot[parent] - np.eye(3)) @ (joints[j] - joints[parent])
    world_pos = joints + disp
    # vertex v moves by sum_k w_k [A_k (v - J_k) + D_k]
    a = world_rot - np.eye(3)
    blend_a = np.einsum("vk,kij->vij", model.weights, a)
    blend_c = model.weights @ (np.einsum("kij,kj->ki", a, joints) - disp)
    verts = v_posed + np.einsum("vij,vj->vi", blend_a, v_posed) - blend_c
    return verts + p.transl, world_pos + p.transl


def keypoints(model: BodyModel, vertices, joints) -> dict:
    out = {}
    for name, kind, idx in model.keypoint_map:
        out[name] = np.asarray(joints[idx] if kind == "joint" else vertices[idx])
    return out


@dataclass
class PosedBody:
    """A posed body moved into the scene frame (height 1.8, pelvis at origin)."""

    vertices: np.ndarray
    joints: np.ndarray
    faces: np.ndarray
    keypoints: dict
    scale: float
    offset: np.ndarray
    joint_names: list

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.vertices.min(0) + self.vertices.max(0))

    @property
    def head(self) -> np.ndarray:
        if "head" in self.joint_names:
            return self.joints[self.joint_names.index("head")]
        return self.keypoints["nose"]

    @property
    def extent(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def pose_body(model: BodyModel, params: PoseParams | None = None,
              height: float = BODY_HEIGHT) -> PosedBody:
    verts, joints = skin(model, params)
    span = verts[:, 1].max() - verts[:, 1].min()
    if not span > 0:
        raise DegenerateCollapseError("posed body has zero height")
    scale = height / span
    offset = -scale * joints[0]
    verts = verts * scale + offset
    joints = joints * scale + offset
    return PosedBody(verts, joints, model.faces, keypoints(model, verts, joints),
                     float(scale), offset, list(model.joint_names))


def triangle_areas(vertices, faces) -> np.ndarray:
    tri = np.asarray(vertices)[np.asarray(faces)]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def sample_mesh_surface(vertices, faces, count: int, rng=None, return_faces=False):
    """Area-weighted uniform samples on a triangle mesh.

    Returns ``(points, nn_dist)`` where nn_dist is the mean nearest-neighbor
    distance of up to 1000 sampled points to the full sample set.
    """
    if count < 1:
        raise ParameterError("sample count must be >= 1")
    rng = np.random.default_rng(rng)
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    areas = triangle_areas(vertices, faces)
    total = areas.sum()
    if not total > 0:
        raise DegenerateCollapseError("mesh has zero surface area")
    cdf = np.cumsum(areas)
    face_idx = np.searchsorted(cdf, rng.random(count) * cdf[-1], side="right")
    face_idx = np.minimum(face_idx, len(faces) - 1)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = vertices[faces[face_idx]]
    points = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
              + (r1 * r2)[:, None] * tri[:, 2])
    if count > 1:
        sub = points if count <= 1000 else points[rng.choice(count, 1000, replace=False)]
        dist, _ = cKDTree(points).query(sub, k=2)
        nn_dist = float(dist[:, 1].mean())
    else:
        nn_dist = 0.0
    if not nn_dist > 0:
        nn_dist = float(np.sqrt(total / count))
    if return_faces:
        return points, nn_dist, face_idx
    return points, nn_dist


def sample_surface(model: BodyModel, params: PoseParams | None, count: int, rng=None):
    body = pose_body(model, params)
    return sample_mesh_surface(body.vertices, body.faces, count, rng)


def init_cloud(model: BodyModel, params: PoseParams | None = None, count: int = 100_000,
               rng=None, opacity: float = INIT_OPACITY) -> GaussianCloud:
    """Gaussians on the posed body surface: identity rotation, gray, low opacity.

    The isotropic scale is the mean nearest-neighbor spacing of the samples.
    """
    body = pose_body(model, params)
    points, nn_dist = sample_mesh_surface(body.vertices, body.faces, count, rng)
    return GaussianCloud.from_activated(points, nn_dist, opacities=opacity)


def view_class(azimuth: float) -> str:
    az = (azimuth + 180.0) % 360.0 - 180.0
    if abs(az) <= 60.0:
        return "front"
    if 60.0 < az <= 120.0:
        return "right"
    if -120.0 <= az < -60.0:
        return "left"
    return "back"


def visible_keypoints(azimuth: float) -> tuple:
    hidden = {
        "front": (),
        "right": ("left_eye", "left_ear"),
        "left": ("right_eye", "right_ear"),
        "back": FACE_KEYPOINTS,
    }[view_class(azimuth)]
    return tuple(k for k in COCO_KEYPOINTS if k not in hidden)


def draw_skeleton(kps2d: dict, visible, width: int, height: int) -> np.ndarray:
    """Rasterize an OpenPose-style map from pixel-space keypoints."""
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    size = max(1, int(round(4 * min(width, height) / 512)))
    pts = {}
    for name in visible:
        p = kps2d.get(name)
        if p is not None and np.all(np.isfinite(p)):
            pts[name] = (int(round(p[0])), int(round(p[1])))
    for (a, b), color in zip(COCO_LIMBS, LIMB_COLORS):
        if a in pts and b in pts:
            cv2.line(canvas, pts[a], pts[b], color, thickness=size, lineType=cv2.LINE_8)
    for name, center in pts.items():
        cv2.circle(canvas, center, size, KEYPOINT_COLORS[name], thickness=-1,
                   lineType=cv2.LINE_8)
    return canvas


def render_skeleton(model: BodyModel, params: PoseParams | None, camera: Camera,
                    body: PosedBody | None = None) -> np.ndarray:
    """RGB uint8 pose map with view-dependent face keypoint culling."""
    body = body or pose_body(model, params)
    kps2d = {}
    for name, p in body.keypoints.items():
        pix, _ = project_point(camera, p)
        kps2d[name] = pix
    return draw_skeleton(kps2d, visible_keypoints(camera.azimuth), camera.width, camera.height)


def save_body_model(model: BodyModel, path) -> None:
    meta = {"format": "splatgen-body", "version": FORMAT_VERSION,
            "joint_names": list(model.joint_names),
            "keypoint_map": [list(k) for k in model.keypoint_map]}
    np.savez_compressed(
        os.fspath(path), meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
        template=model.template, faces=model.faces, shapedirs=model.shapedirs,
        posedirs=model.posedirs, exprdirs=model.exprdirs, j_regressor=model.j_regressor,
        weights=model.weights, parents=model.parents)


def load_body_model(path) -> BodyModel:
    try:
        data = np.load(os.fspath(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ModelFormatError(f"cannot read body model {path}: {exc}") from exc
    with data:
        missing = [k for k in ("meta", "template", "faces", "shapedirs", "posedirs", "exprdirs",
                               "j_regressor", "weights", "parents") if k not in data.files]
        if missing:
            raise ModelFormatError(f"body model {path} is missing arrays: {', '.join(missing)}")
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("format") != "splatgen-body" or meta.get("version") != FORMAT_VERSION:
            raise ModelFormatError(f"{path}: unsupported body model format {meta.get('format')!r} "
                                   f"v{meta.get('version')}")
        return BodyModel(data["template"], data["faces"], data["shapedirs"], data["posedirs"],
                         data["exprdirs"], data["j_regressor"], data["weights"], data["parents"],
                         meta["joint_names"], [tuple(k) for k in meta["keypoint_map"]])


def write_obj(vertices, faces, path) -> None:
    with open(os.fspath(path), "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in np.asarray(faces) + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


# SMPL-X release layout -> container. Face keypoints are vertex ids from the
# public SMPL-X topology; body keypoints are SMPL-X joints.
SMPLX_KEYPOINTS = (
    ("nose", "vertex", 9120), ("left_eye", "vertex", 9448), ("right_eye", "vertex", 9929),
    ("left_ear", "vertex", 6), ("right_ear", "vertex", 616),
    ("left_shoulder", "joint", 16), ("right_shoulder", "joint", 17),
    ("left_elbow", "joint", 18), ("right_elbow", "joint", 19),
    ("left_wrist", "joint", 20), ("right_wrist", "joint", 21),
    ("left_hip", "joint", 1), ("right_hip", "joint", 2),
    ("left_knee", "joint", 4), ("right_knee", "joint", 5),
    ("left_ankle", "joint", 7), ("right_ankle", "joint", 8),
)
SMPLX_JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar",
    "right_collar", "head", "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "jaw", "left_eye_smplhf", "right_eye_smplhf",
) + tuple(f"{side}_{finger}{i}" for side in ("left", "right")
          for finger in ("index", "middle", "pinky", "ring", "thumb") for i in (1, 2, 3))


def convert_smplx(src, dst, num_betas: int = 10, num_expressions: int = 10,
                  keypoint_map=SMPLX_KEYPOINTS) -> BodyModel:
    """Convert an SMPL-X release ``.npz`` (v_template, f, shapedirs, ...) into a container."""
    try:
        raw = np.load(os.fspath(src), allow_pickle=True)
    except (OSError, ValueError) as exc:
        raise ModelFormatError(f"cannot read SMPL-X file {src}: {exc}") from exc
    need = ("v_template", "f", "shapedirs", "posedirs", "J_regressor", "weights", "kintree_table")
    missing = [k for k in need if k not in raw.files]
    if missing:
        raise ModelFormatError(f"{src} is missing SMPL-X arrays: {', '.join(missing)}")
    shapedirs = np.asarray(raw["shapedirs"], dtype=np.float64)
    # full releases stack 300 shape + 100 expression columns; compact ones
    # stack num_betas shape columns followed by the expression columns
    split = 300 if shapedirs.shape[2] > 300 else min(num_betas, shapedirs.shape[2])
    betas = shapedirs[:, :, :min(num_betas, split)]
    expr = shapedirs[:, :, split:split + num_expressions]
    posedirs = np.asarray(raw["posedirs"], dtype=np.float64)
    v = np.asarray(raw["v_template"]).shape[0]
    if posedirs.ndim == 2 and posedirs.shape[1] == v * 3:  # (P, V*3) layout of some exports
        posedirs = posedirs.T.reshape(v, 3, -1)
    parents = np.asarray(raw["kintree_table"][0], dtype=np.int64).copy()
    parents[0] = -1
    k = parents.size
    names = list(SMPLX_JOINT_NAMES[:k]) if k <= len(SMPLX_JOINT_NAMES) else \
        [f"joint{i}" for i in range(k)]
    model = BodyModel(raw["v_template"], raw["f"], betas, posedirs, expr,
                      np.asarray(raw["J_regressor"], dtype=np.float64), raw["weights"], parents,
                      names, list(keypoint_map))
    save_body_model(model, dst)
    return model
