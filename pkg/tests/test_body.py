import json

import numpy as np
import pytest
from scipy import stats

from splatgen.body import (COCO_KEYPOINTS, FACE_KEYPOINTS, KEYPOINT_COLORS, LIMB_COLORS,
                           BodyModel, PoseParams, init_cloud, load_body_model, pose_body,
                           render_skeleton, rodrigues, sample_mesh_surface, save_body_model,
                           skin, triangle_areas, view_class, visible_keypoints, write_obj)
from splatgen.errors import DegenerateCollapseError, ModelFormatError, ParameterError
from splatgen.geometry import camera_from_spherical, project_point
from splatgen.rasterizer import render

from oracles import rodrigues_ref, two_bone_model


class TestModel:
    def test_toy_body_schema(self, toy_body):
        assert 400 <= toy_body.num_vertices <= 800
        np.testing.assert_allclose(toy_body.weights.sum(1), 1.0, atol=1e-12)
        assert np.all(toy_body.weights >= 0)
        assert sorted(n for n, _, _ in toy_body.keypoint_map) == sorted(COCO_KEYPOINTS)

    def test_rejects_bad_weights(self, toy_body):
        w = toy_body.weights.copy()
        w[0] *= 2
        with pytest.raises(ModelFormatError, match="sum to 1"):
            BodyModel(toy_body.template, toy_body.faces, toy_body.shapedirs, toy_body.posedirs,
                      toy_body.exprdirs, toy_body.j_regressor, w, toy_body.parents,
                      toy_body.joint_names, toy_body.keypoint_map)

    def test_rejects_cycle(self, toy_body):
        parents = toy_body.parents.copy()
        parents[1] = 2
        parents[2] = 1
        with pytest.raises(ModelFormatError):
            BodyModel(toy_body.template, toy_body.faces, toy_body.shapedirs, toy_body.posedirs,
                      toy_body.exprdirs, toy_body.j_regressor, toy_body.weights, parents,
                      toy_body.joint_names, toy_body.keypoint_map)

    def test_rejects_incomplete_keypoints(self, toy_body):
        with pytest.raises(ModelFormatError, match="COCO"):
            BodyModel(toy_body.template, toy_body.faces, toy_body.shapedirs, toy_body.posedirs,
                      toy_body.exprdirs, toy_body.j_regressor, toy_body.weights,
                      toy_body.parents, toy_body.joint_names, toy_body.keypoint_map[:-1])

    def test_container_roundtrip(self, toy_body, tmp_path):
        save_body_model(toy_body, tmp_path / "m.npz")
        back = load_body_model(tmp_path / "m.npz")
        np.testing.assert_array_equal(back.template, toy_body.template)
        np.testing.assert_array_equal(back.weights, toy_body.weights)
        assert back.keypoint_map == toy_body.keypoint_map
        assert back.joint_names == toy_body.joint_names

    def test_container_wrong_format(self, tmp_path):
        np.savez(tmp_path / "x.npz", meta=np.frombuffer(json.dumps({"format": "other"}).encode(),
                                                         dtype=np.uint8))
        with pytest.raises(ModelFormatError):
            load_body_model(tmp_path / "x.npz")
        with pytest.raises(ModelFormatError):
            load_body_model(tmp_path / "missing.npz")

    def test_obj_export(self, toy_body, tmp_path):
        write_obj(toy_body.template, toy_body.faces, tmp_path / "b.obj")
        lines = (tmp_path / "b.obj").read_text().splitlines()
        assert sum(ln.startswith("v ") for ln in lines) == toy_body.num_vertices
        assert sum(ln.startswith("f ") for ln in lines) == len(toy_body.faces)


class TestSkinning:
    def test_rodrigues(self, rng):
        for _ in range(50):
            aa = rng.normal(size=3)
            aa *= rng.uniform(0, 3.1) / np.linalg.norm(aa)
            np.testing.assert_allclose(rodrigues(aa), rodrigues_ref(aa), atol=1e-12)
        np.testing.assert_array_equal(rodrigues(np.zeros(3)), np.eye(3))

    def test_identity_pose_exact(self, toy_body):
        verts, joints = skin(toy_body)
        assert np.abs(verts - toy_body.template).max() == 0.0
        assert np.abs(joints - toy_body.j_regressor @ toy_body.template).max() == 0.0

    def test_global_rotation_equivariance(self, toy_body, rng):
        aa = np.array([0.3, -1.1, 0.6])
        rot = rodrigues_ref(aa)
        verts, joints = skin(toy_body, PoseParams(global_orient=aa))
        root = toy_body.j_regressor[0] @ toy_body.template
        expected = (toy_body.template - root) @ rot.T + root
        np.testing.assert_allclose(verts, expected, atol=1e-6)

    def test_rigid_equivariance_with_pose(self, toy_body, rng):
        pose = rng.normal(size=(toy_body.num_joints - 1, 3)) * 0.3
        base, _ = skin(toy_body, PoseParams(pose=pose))
        aa = np.array([0.0, 0.9, 0.2])
        rot = rodrigues_ref(aa)
        turned, _ = skin(toy_body, PoseParams(pose=pose, global_orient=aa))
        root = toy_body.j_regressor[0] @ toy_body.template
        np.testing.assert_allclose(turned, (base - root) @ rot.T + root, atol=1e-6)

    def test_translation_equivariance(self, toy_body, rng):
        pose = rng.normal(size=(toy_body.num_joints - 1, 3)) * 0.3
        a, ja = skin(toy_body, PoseParams(pose=pose))
        t = np.array([0.25, -1.5, 3.0])
        b, jb = skin(toy_body, PoseParams(pose=pose, transl=t))
        np.testing.assert_array_equal(b, a + t)
        np.testing.assert_array_equal(jb, ja + t)

    def test_two_bone_blend(self):
        model = two_bone_model()
        aa = np.array([0.0, 0.0, np.pi / 2])
        verts, joints = skin(model, PoseParams(pose=aa[None]))
        rot = rodrigues_ref(aa)
        elbow = np.array([1.0, 0.0, 0.0])
        child = lambda p: rot @ (p - elbow) + elbow  # noqa: E731
        np.testing.assert_allclose(verts[0], model.template[0], atol=1e-12)
        np.testing.assert_allclose(verts[1], child(model.template[1]), atol=1e-12)
        np.testing.assert_allclose(verts[1], [1.0, 1.0, 0.0], atol=1e-12)
        blend = 0.5 * model.template[2] + 0.5 * child(model.template[2])
        np.testing.assert_allclose(verts[2], blend, atol=1e-12)
        np.testing.assert_allclose(joints[1], elbow, atol=1e-12)

    def test_shape_blend_moves_joints(self, toy_body):
        _, j0 = skin(toy_body)
        _, j1 = skin(toy_body, PoseParams(betas=[1.0, 0.0]))
        np.testing.assert_allclose(j1, 1.05 * j0, atol=1e-9)

    def test_expression_changes_only_head(self, toy_body):
        v0, _ = skin(toy_body)
        v1, _ = skin(toy_body, PoseParams(expression=[1.0]))
        moved = np.flatnonzero(np.abs(v1 - v0).max(1) > 0)
        head = toy_body.weights[moved, toy_body.joint_index("head")]
        assert moved.size > 0 and np.all(head == 1.0)

    @pytest.mark.parametrize("kwargs", [dict(betas=np.zeros(5)), dict(pose=np.zeros((3, 3))),
                                        dict(global_orient=[np.pi, 0, 0]),
                                        dict(transl=[np.nan, 0, 0])])
    def test_invalid_params(self, toy_body, kwargs):
        with pytest.raises(ParameterError):
            skin(toy_body, PoseParams(**kwargs))

    def test_pose_body_normalization(self, toy_body):
        body = pose_body(toy_body)
        assert np.ptp(body.vertices[:, 1]) == pytest.approx(1.8, abs=1e-6)
        np.testing.assert_allclose(body.joints[0], 0.0, atol=1e-12)


class TestSampling:
    def test_two_triangle_area_ratio(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [3, 0, 0], [4, 0, 0], [3, 6, 0]], float)
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        np.testing.assert_allclose(triangle_areas(verts, faces), [1, 3])
        _, _, face_idx = sample_mesh_surface(verts, faces, 40000, 0, return_faces=True)
        hits = np.bincount(face_idx, minlength=2)
        assert abs(hits[1] - 30000) <= 500
        assert stats.chisquare(hits, [10000, 30000]).pvalue > 0.01

    def test_points_inside_single_triangle(self, rng):
        tri = rng.normal(size=(3, 3))
        pts, _ = sample_mesh_surface(tri, np.array([[0, 1, 2]]), 5000, rng)
        # barycentric coordinates from a least-squares solve
        basis = np.stack([tri[1] - tri[0], tri[2] - tri[0]], axis=1)
        uv, *_ = np.linalg.lstsq(basis, (pts - tri[0]).T, rcond=None)
        assert np.all(uv >= -1e-9) and np.all(uv.sum(0) <= 1 + 1e-9)
        resid = basis @ uv - (pts - tri[0]).T
        assert np.abs(resid).max() < 1e-9

    def test_centroid_convergence(self):
        tri = np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]])
        pts, _ = sample_mesh_surface(tri, np.array([[0, 1, 2]]), 100_000, 3)
        centroid = tri.mean(0)
        assert np.linalg.norm(pts.mean(0) - centroid) < 0.01 * np.linalg.norm(tri[1] - tri[0])

    def test_uniform_over_toy_body(self, toy_body):
        body = pose_body(toy_body)
        _, _, face_idx = sample_mesh_surface(body.vertices, body.faces, 100_000, 11,
                                             return_faces=True)
        areas = triangle_areas(body.vertices, body.faces)
        expected = 100_000 * areas / areas.sum()
        observed = np.bincount(face_idx, minlength=len(areas))
        assert stats.chisquare(observed, expected).pvalue > 0.01

    def test_nn_distance(self):
        # regular grid samples would have spacing h; random ones are of the same order
        verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
        _, nn = sample_mesh_surface(verts, np.array([[0, 1, 2], [0, 2, 3]]), 10_000, 0)
        assert 0.25 / np.sqrt(10_000) < nn < 2.0 / np.sqrt(10_000)

    def test_degenerate_mesh(self):
        verts = np.zeros((3, 3))
        with pytest.raises(DegenerateCollapseError):
            sample_mesh_surface(verts, np.array([[0, 1, 2]]), 10)
        with pytest.raises(ParameterError):
            sample_mesh_surface(np.eye(3), np.array([[0, 1, 2]]), 0)


class TestInitCloud:
    def test_count_and_opacity(self, toy_body):
        cloud = init_cloud(toy_body, count=100_000, rng=0)
        assert len(cloud) == 100_000
        assert np.abs(cloud.opacities - 0.1).max() <= 1e-6
        np.testing.assert_allclose(cloud.colors, 0.5)
        np.testing.assert_allclose(cloud.rotations, np.tile([1.0, 0, 0, 0], (100_000, 1)))
        assert np.ptp(cloud.scales) == 0.0
        assert np.ptp(cloud.means[:, 1]) <= 1.8 + 1e-9

    def test_frontal_silhouette_covered(self, toy_body):
        cloud = init_cloud(toy_body, count=100_000, rng=0)
        body = pose_body(toy_body)
        cam = camera_from_spherical(2.2, 0, 0, 55, tuple(body.center), 128, 128)
        out = render(cloud, cam)
        # silhouette interior: pixels hit by the torso well inside its outline
        torso = body.joints[[toy_body.joint_index("spine"), toy_body.joint_index("chest")]]
        pix, _ = project_point(cam, torso)
        for x, y in np.round(pix).astype(int):
            patch = out.alpha[y - 2:y + 3, x - 2:x + 3]
            assert patch.min() > 0.9


def _colors(img):
    return set(map(tuple, img.reshape(-1, 3).tolist()))


@pytest.fixture(scope="module")
def maps(toy_body):
    body = pose_body(toy_body)
    out = {}
    for az in (0, 90, -90, 180):
        cam = camera_from_spherical(2.5, 0, az, 50, tuple(body.center), 512, 512)
        out[az] = render_skeleton(toy_body, None, cam, body=body)
    return out


class TestSkeleton:
    def test_view_classes(self):
        assert [view_class(a) for a in (0, 60, 61, 120, 121, -60, -61, -120, -121, 180, 420)] == \
            ["front", "front", "right", "right", "back", "front", "left", "left", "back", "back",
             "front"]
        assert visible_keypoints(10) == visible_keypoints(-45) == COCO_KEYPOINTS

    def test_colors_disjoint(self):
        assert not set(KEYPOINT_COLORS.values()) & set(LIMB_COLORS)

    def test_front_has_all_keypoints(self, maps):
        present = _colors(maps[0])
        assert all(KEYPOINT_COLORS[k] in present for k in COCO_KEYPOINTS)

    def test_back_hides_face(self, maps):
        present = _colors(maps[180])
        for k in FACE_KEYPOINTS:
            assert KEYPOINT_COLORS[k] not in present
        assert KEYPOINT_COLORS["left_shoulder"] in present

    def test_right_view_drops_left_eye_and_ear(self, maps):
        present = _colors(maps[90])
        assert KEYPOINT_COLORS["left_eye"] not in present
        assert KEYPOINT_COLORS["left_ear"] not in present
        assert KEYPOINT_COLORS["right_eye"] in present

    def test_left_view_drops_right_eye_and_ear(self, maps):
        present = _colors(maps[-90])
        assert KEYPOINT_COLORS["right_eye"] not in present
        assert KEYPOINT_COLORS["right_ear"] not in present
        assert KEYPOINT_COLORS["left_eye"] in present

    def test_discs_at_projected_keypoints(self, toy_body, maps):
        body = pose_body(toy_body)
        cam = camera_from_spherical(2.5, 0, 0, 50, tuple(body.center), 512, 512)
        img = maps[0]
        for name in ("left_wrist", "right_knee", "nose"):
            pix, _ = project_point(cam, body.keypoints[name])
            ys, xs = np.nonzero(np.all(img == KEYPOINT_COLORS[name], axis=-1))
            centre = np.array([xs.mean(), ys.mean()])
            assert np.linalg.norm(centre - pix) <= 1.0

    def test_size_scaling(self, toy_body):
        body = pose_body(toy_body)
        cam = camera_from_spherical(2.5, 0, 0, 50, tuple(body.center), 128, 96)
        img = render_skeleton(toy_body, None, cam, body=body)
        assert img.shape == (96, 128, 3) and img.dtype == np.uint8


class TestConvert:
    def _release(self, toy_body, path, flat_posedirs=False):
        k = toy_body.num_joints
        v = toy_body.num_vertices
        posedirs = np.random.default_rng(0).normal(size=(v, 3, 9 * (k - 1))) * 1e-3
        kintree = np.stack([np.where(toy_body.parents < 0, 2**32 - 1, toy_body.parents),
                            np.arange(k)]).astype(np.uint32)
        np.savez(path, v_template=toy_body.template, f=toy_body.faces.astype(np.uint32),
                 shapedirs=np.concatenate([toy_body.shapedirs, toy_body.exprdirs], axis=2),
                 posedirs=posedirs.reshape(v * 3, -1).T if flat_posedirs else posedirs,
                 J_regressor=toy_body.j_regressor, weights=toy_body.weights,
                 kintree_table=kintree)
        return posedirs

    @pytest.mark.parametrize("flat", [False, True])
    def test_convert(self, toy_body, tmp_path, flat):
        from splatgen.body import convert_smplx
        posedirs = self._release(toy_body, tmp_path / "release.npz", flat)
        model = convert_smplx(tmp_path / "release.npz", tmp_path / "out.npz", num_betas=2,
                              num_expressions=1, keypoint_map=toy_body.keypoint_map)
        np.testing.assert_allclose(model.posedirs, posedirs)
        assert model.parents[0] == -1
        np.testing.assert_array_equal(model.parents[1:], toy_body.parents[1:])
        assert model.num_betas == 2 and model.num_expressions == 1
        back = load_body_model(tmp_path / "out.npz")
        np.testing.assert_array_equal(back.template, toy_body.template)

    def test_missing_arrays(self, tmp_path):
        from splatgen.body import convert_smplx
        np.savez(tmp_path / "bad.npz", v_template=np.zeros((3, 3)))
        with pytest.raises(ModelFormatError, match="missing SMPL-X arrays"):
            convert_smplx(tmp_path / "bad.npz", tmp_path / "o.npz")
