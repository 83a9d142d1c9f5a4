"""A ~550-vertex articulated "capsule person" in the body-model schema.

T-pose, +y up, facing +z, the body's left on +x. Good enough to exercise
skinning, sampling, culling and the training loop without SMPL-X files.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .body import BodyModel, load_body_model, save_body_model

JOINTS = (
    ("pelvis", -1, (0.0, 0.95, 0.0)),
    ("spine", 0, (0.0, 1.15, 0.0)),
    ("chest", 1, (0.0, 1.35, 0.0)),
    ("neck", 2, (0.0, 1.50, 0.0)),
    ("head", 3, (0.0, 1.60, 0.0)),
    ("left_shoulder", 2, (0.19, 1.42, 0.0)),
    ("left_elbow", 5, (0.46, 1.42, 0.0)),
    ("left_wrist", 6, (0.72, 1.42, 0.0)),
    ("right_shoulder", 2, (-0.19, 1.42, 0.0)),
    ("right_elbow", 8, (-0.46, 1.42, 0.0)),
    ("right_wrist", 9, (-0.72, 1.42, 0.0)),
    ("left_hip", 0, (0.10, 0.90, 0.0)),
    ("left_knee", 11, (0.10, 0.50, 0.0)),
    ("left_ankle", 12, (0.10, 0.09, 0.0)),
    ("right_hip", 0, (-0.10, 0.90, 0.0)),
    ("right_knee", 14, (-0.10, 0.50, 0.0)),
    ("right_ankle", 15, (-0.10, 0.09, 0.0)),
)
HEAD_CENTER = np.array([0.0, 1.68, 0.0])
HEAD_RADIUS = 0.11
AROUND = 8


def _frame(axis):
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(ref, axis)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def _capsule(a, b, r1, r2, ring_params=(0.0, 0.5, 1.0)):
    """Closed capsule mesh; returns vertices, faces, axis parameter u per vertex,
    axis point per vertex and the index lists of each cylinder ring."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    length = np.linalg.norm(b - a)
    axis = (b - a) / length
    e1, e2 = _frame(axis)
    ang = 2 * np.pi * np.arange(AROUND) / AROUND
    circle = np.cos(ang)[:, None] * r1 * e1 + np.sin(ang)[:, None] * r2 * e2
    r_mean = 0.5 * (r1 + r2)
    rings = [(-r_mean * np.sin(np.pi / 4), np.cos(np.pi / 4))]
    rings += [(u * length, 1.0) for u in ring_params]
    rings += [(length + r_mean * np.sin(np.pi / 4), np.cos(np.pi / 4))]
    verts, us, ring_ids = [], [], []
    verts.append(a - axis * r_mean)
    us.append(-r_mean / length)
    for i, (t, f) in enumerate(rings):
        ids = list(range(len(verts), len(verts) + AROUND))
        verts.extend(a + axis * t + f * circle)
        us.extend([t / length] * AROUND)
        if 0 < i < len(rings) - 1:
            ring_ids.append(ids)
    verts.append(b + axis * r_mean)
    us.append(1.0 + r_mean / length)
    verts = np.asarray(verts)
    faces = []
    for k in range(AROUND):
        faces.append((0, 1 + (k + 1) % AROUND, 1 + k))
    for i in range(len(rings) - 1):
        base0 = 1 + i * AROUND
        base1 = base0 + AROUND
        for k in range(AROUND):
            k1 = (k + 1) % AROUND
            faces.append((base0 + k, base0 + k1, base1 + k1))
            faces.append((base0 + k, base1 + k1, base1 + k))
    last = len(verts) - 1
    base = 1 + (len(rings) - 1) * AROUND
    for k in range(AROUND):
        faces.append((base + k, base + (k + 1) % AROUND, last))
    us = np.asarray(us)
    axis_pts = a + np.clip(us, 0.0, 1.0)[:, None] * (b - a)
    return verts, np.asarray(faces), us, axis_pts, ring_ids


def _sphere(center, radius, around=12, lats=7):
    verts = [center + np.array([0.0, radius, 0.0])]
    for i in range(1, lats + 1):
        phi = np.pi * i / (lats + 1)
        for k in range(around):
            th = 2 * np.pi * k / around
            verts.append(center + radius * np.array(
                [np.sin(phi) * np.sin(th), np.cos(phi), np.sin(phi) * np.cos(th)]))
    verts.append(center - np.array([0.0, radius, 0.0]))
    verts = np.asarray(verts)
    faces = []
    for k in range(around):
        faces.append((0, 1 + k, 1 + (k + 1) % around))
    for i in range(lats - 1):
        b0, b1 = 1 + i * around, 1 + (i + 1) * around
        for k in range(around):
            k1 = (k + 1) % around
            faces.append((b0 + k, b1 + k, b1 + k1))
            faces.append((b0 + k, b1 + k1, b0 + k1))
    last = len(verts) - 1
    base = 1 + (lats - 1) * around
    for k in range(around):
        faces.append((base + k, last, base + (k + 1) % around))
    return verts, np.asarray(faces)


def build_toy_body() -> BodyModel:
    names = [j[0] for j in JOINTS]
    parents = np.array([j[1] for j in JOINTS])
    jpos = np.array([j[2] for j in JOINTS])
    idx = {n: i for i, n in enumerate(names)}
    k = len(JOINTS)

    all_v, all_f, all_w, all_radial = [], [], [], []
    regress = {}
    offset = 0

    def add(verts, faces, weights, radial):
        nonlocal offset
        all_v.append(verts)
        all_f.append(faces + offset)
        all_w.append(weights)
        all_radial.append(radial)
        offset += len(verts)
        return offset - len(verts)

    # torso: rings at pelvis, spine, chest, neck heights, weights blended by height
    torso_js = ["pelvis", "spine", "chest", "neck"]
    heights = [jpos[idx[n], 1] for n in torso_js]
    a, b = jpos[idx["pelvis"]], jpos[idx["neck"]]
    params = [(h - heights[0]) / (heights[-1] - heights[0]) for h in heights]
    v, f, u, ax, rings = _capsule(a, b, 0.16, 0.10, params)
    w = np.zeros((len(v), k))
    y = np.clip(v[:, 1], heights[0], heights[2])
    for lo, hi in ((0, 1), (1, 2)):
        sel = (y >= heights[lo]) & (y <= heights[hi])
        t = (y[sel] - heights[lo]) / (heights[hi] - heights[lo])
        w[sel] = 0.0
        w[sel, idx[torso_js[lo]]] = 1 - t
        w[sel, idx[torso_js[hi]]] = t
    base = add(v, f, w, v - ax)
    for name, ring in zip(torso_js, rings):
        regress.setdefault(name, [base + i for i in ring])

    def limb(joint, start, end, r, end_joint=None):
        v, f, u, ax, rings = _capsule(start, end, r, r)
        w = np.zeros((len(v), k))
        parent = parents[idx[joint]]
        blend = np.clip(0.5 + 2.5 * np.clip(u, 0.0, None), 0.5, 1.0)
        w[:, idx[joint]] = blend
        w[:, parent] += 1 - blend
        base = add(v, f, w, v - ax)
        regress.setdefault(joint, [base + i for i in rings[0]])
        if end_joint is not None:
            regress.setdefault(end_joint, [base + i for i in rings[-1]])

    limb("neck", jpos[idx["neck"]], jpos[idx["head"]], 0.05, "head")
    for side in ("left", "right"):
        limb(f"{side}_shoulder", jpos[idx[f"{side}_shoulder"]], jpos[idx[f"{side}_elbow"]], 0.05)
        limb(f"{side}_elbow", jpos[idx[f"{side}_elbow"]], jpos[idx[f"{side}_wrist"]], 0.04,
             f"{side}_wrist")
        limb(f"{side}_hip", jpos[idx[f"{side}_hip"]], jpos[idx[f"{side}_knee"]], 0.075)
        limb(f"{side}_knee", jpos[idx[f"{side}_knee"]], jpos[idx[f"{side}_ankle"]], 0.055,
             f"{side}_ankle")
        ankle = jpos[idx[f"{side}_ankle"]]
        limb(f"{side}_ankle", ankle, ankle + np.array([0.0, -0.04, 0.14]), 0.04)

    hv, hf = _sphere(HEAD_CENTER, HEAD_RADIUS)
    hw = np.zeros((len(hv), k))
    hw[:, idx["head"]] = 1.0
    head_base = add(hv, hf, hw, hv - HEAD_CENTER)

    template = np.concatenate(all_v)
    faces = np.concatenate(all_f)
    weights = np.concatenate(all_w)
    radial = np.concatenate(all_radial)
    n_v = len(template)

    j_reg = np.zeros((k, n_v))
    for name, ids in regress.items():
        j_reg[idx[name], ids] = 1.0 / len(ids)
    assert np.all(j_reg.sum(1) > 0), "every joint needs a regressor ring"

    shapedirs = np.zeros((n_v, 3, 2))
    shapedirs[:, :, 0] = 0.05 * template      # overall size
    shapedirs[:, :, 1] = 0.15 * radial        # girth
    exprdirs = np.zeros((n_v, 3, 1))
    head = slice(head_base, head_base + len(hv))
    front = np.clip((hv - HEAD_CENTER)[:, 2] / HEAD_RADIUS, 0.0, None)
    exprdirs[head, 2, 0] = 0.01 * front
    posedirs = np.zeros((n_v, 3, 9 * (k - 1)))

    def nearest_head(direction):
        d = np.asarray(direction, float)
        target = HEAD_CENTER + HEAD_RADIUS * d / np.linalg.norm(d)
        return head_base + int(np.argmin(np.linalg.norm(hv - target, axis=1)))

    kp = [
        ("nose", "vertex", nearest_head((0.0, -0.1, 1.0))),
        ("left_eye", "vertex", nearest_head((0.38, 0.2, 0.9))),
        ("right_eye", "vertex", nearest_head((-0.38, 0.2, 0.9))),
        ("left_ear", "vertex", nearest_head((1.0, 0.0, 0.0))),
        ("right_ear", "vertex", nearest_head((-1.0, 0.0, 0.0))),
    ]
    for name in ("shoulder", "elbow", "wrist", "hip", "knee", "ankle"):
        for side in ("left", "right"):
            kp.append((f"{side}_{name}", "joint", idx[f"{side}_{name}"]))
    return BodyModel(template, faces, shapedirs, posedirs, exprdirs, j_reg, weights, parents,
                     names, kp)


def toy_body_path():
    return resources.files("splatgen") / "data" / "toy_body.npz"


def load_toy_body() -> BodyModel:
    path = toy_body_path()
    if path.is_file():
        return load_body_model(path)
    return build_toy_body()


if __name__ == "__main__":
    save_body_model(build_toy_body(), str(toy_body_path()))
