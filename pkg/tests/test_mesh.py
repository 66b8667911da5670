import struct

import numpy as np
import pytest

from mammoforge.errors import ValidationError
from mammoforge.mesh import (
    DEFAULT_PALETTE,
    TriangleMesh,
    edge_use_counts,
    export_scene,
    is_watertight,
    marching_cubes,
    signed_volume,
    smooth_taubin,
    write_binary_stl,
)
from mammoforge.volume import GridMeta, LabelVolume

from conftest import make_labels


def sphere_labels(n, center, radius, spacing=(1, 1, 1)):
    x, y, z = np.meshgrid(*(np.arange(d) for d in (n, n, n)), indexing="ij")
    mask = ((x - center) ** 2 + (y - center) ** 2 + (z - center) ** 2) <= radius ** 2
    return make_labels(mask.astype(np.uint8), spacing=spacing)


def parse_obj(path):
    vertices, faces, groups = [], [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vertices.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p) - 1 for p in parts[1:4]])
        elif parts[0] == "g":
            groups.append(parts[1])
    return np.array(vertices), np.array(faces), groups


class TestMarchingCubes:
    def test_single_voxel_closed_euler_2(self):
        arr = np.zeros((3, 3, 3), dtype=np.uint8)
        arr[1, 1, 1] = 1
        mesh = marching_cubes(make_labels(arr), 1)
        assert is_watertight(mesh)
        edges = len(edge_use_counts(mesh))
        euler = mesh.n_vertices - edges + mesh.n_triangles
        assert euler == 2
        assert signed_volume(mesh) > 0

    def test_empty_mask_empty_mesh(self):
        mesh = marching_cubes(make_labels(np.zeros((4, 4, 4), np.uint8)), 1)
        assert mesh.is_empty()

    def test_absent_label_empty_mesh(self):
        arr = np.zeros((4, 4, 4), dtype=np.uint8)
        arr[1, 1, 1] = 2
        mesh = marching_cubes(make_labels(arr), 3)
        assert mesh.is_empty()

    def test_digital_sphere_volume_within_5pct(self):
        radius = 20
        mesh = marching_cubes(sphere_labels(45, 22, radius), 1)
        assert is_watertight(mesh)
        analytic = 4.0 / 3.0 * np.pi * radius ** 3
        assert abs(signed_volume(mesh) - analytic) / analytic < 0.05

    def test_world_coordinates_respect_geometry(self):
        arr = np.zeros((5, 5, 5), dtype=np.uint8)
        arr[2, 2, 2] = 1
        lab = make_labels(arr, spacing=(2.0, 2.0, 2.0), origin=(10.0, -5.0, 3.0))
        mesh = marching_cubes(lab, 1)
        centroid = mesh.vertices.mean(axis=0)
        assert np.allclose(centroid, (14.0, -1.0, 7.0), atol=1e-9)

    def test_random_closed_masks_watertight(self, rng):
        for _ in range(20):
            arr = (rng.random((8, 8, 8)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
            mesh = marching_cubes(make_labels(arr), 1)
            if mesh.is_empty():
                continue
            assert is_watertight(mesh)
            counts = edge_use_counts(mesh)
            assert set(counts.values()) == {2}

    def test_consistent_outward_winding(self, rng):
        arr = (rng.random((7, 7, 7)) < 0.5).astype(np.uint8)
        mesh = marching_cubes(make_labels(arr), 1)
        # each directed edge appears exactly once when winding is consistent
        directed = {}
        for a, b, c in mesh.triangles:
            for u, v in ((a, b), (b, c), (c, a)):
                directed[(int(u), int(v))] = directed.get((int(u), int(v)), 0) + 1
        assert all(n == 1 for n in directed.values())
        assert signed_volume(mesh) > 0

    def test_no_degenerate_triangles(self, rng):
        arr = (rng.random((8, 8, 8)) < 0.5).astype(np.uint8)
        mesh = marching_cubes(make_labels(arr), 1)
        assert mesh.triangle_areas().min() > 1e-9

    def test_mesh_volume_tracks_voxel_volume(self):
        lab = sphere_labels(40, 20, 15, spacing=(1.0, 1.0, 1.0))
        mesh = marching_cubes(lab, 1)
        voxel_volume = float((lab.labels == 1).sum())
        assert abs(signed_volume(mesh) - voxel_volume) / voxel_volume < 0.05


class TestTaubin:
    def test_zero_iterations_identity(self):
        mesh = marching_cubes(sphere_labels(20, 10, 6), 1)
        out = smooth_taubin(mesh, iterations=0)
        assert out is mesh

    def test_sphere_volume_drift_below_2pct(self):
        mesh = marching_cubes(sphere_labels(40, 20, 14), 1)
        before = signed_volume(mesh)
        out = smooth_taubin(mesh, iterations=10, lam=0.5, mu=-0.53)
        after = signed_volume(out)
        assert abs(after - before) / before <= 0.02

    def test_topology_unchanged(self):
        mesh = marching_cubes(sphere_labels(16, 8, 5), 1)
        out = smooth_taubin(mesh, 10, 0.5, -0.53)
        assert np.array_equal(out.triangles, mesh.triangles)
        assert is_watertight(out)

    def test_cube_max_displacement_below_half_pitch(self):
        arr = np.zeros((12, 12, 12), dtype=np.uint8)
        arr[3:9, 3:9, 3:9] = 1
        mesh = marching_cubes(make_labels(arr), 1)
        out = smooth_taubin(mesh, 10, 0.5, -0.53)
        disp = np.linalg.norm(out.vertices - mesh.vertices, axis=1)
        assert disp.max() < 0.5

    def test_parameter_validation(self):
        mesh = marching_cubes(sphere_labels(10, 5, 3), 1)
        with pytest.raises(ValidationError):
            smooth_taubin(mesh, 5, 0.5, -0.4)   # |mu| must exceed lambda
        with pytest.raises(ValidationError):
            smooth_taubin(mesh, -1, 0.5, -0.53)


class TestExport:
    def test_stl_byte_size_formula(self, tmp_path):
        arr = np.zeros((8, 8, 8), dtype=np.uint8)
        arr[2:6, 2:6, 2:6] = 1
        mesh = marching_cubes(make_labels(arr), 1)
        path = tmp_path / "cube.stl"
        write_binary_stl(mesh, path)
        size = path.stat().st_size
        assert size == 80 + 4 + 50 * mesh.n_triangles
        with open(path, "rb") as fh:
            fh.seek(80)
            count = struct.unpack("<I", fh.read(4))[0]
        assert count == mesh.n_triangles

    def test_stl_per_label_names(self, tmp_path):
        arr = np.zeros((6, 6, 6), dtype=np.uint8)
        arr[1:3, 1:3, 1:3] = 1
        arr[3:5, 3:5, 3:5] = 3
        lab = make_labels(arr)
        meshes = [marching_cubes(lab, 1), marching_cubes(lab, 3)]
        written = export_scene(meshes, tmp_path / "out", "stl_per_label")
        assert sorted(p.name for p in written) == ["lesion.stl", "whole_breast.stl"]

    def test_obj_round_trip_counts(self, tmp_path):
        arr = np.zeros((8, 8, 8), dtype=np.uint8)
        arr[1:4, 1:4, 1:4] = 1
        arr[4:7, 4:7, 4:7] = 3
        lab = make_labels(arr)
        meshes = [marching_cubes(lab, 1), marching_cubes(lab, 3)]
        written = export_scene(meshes, tmp_path, "obj_mtl")
        obj = [p for p in written if p.suffix == ".obj"][0]
        vertices, faces, groups = parse_obj(obj)
        assert len(vertices) == sum(m.n_vertices for m in meshes)
        assert len(faces) == sum(m.n_triangles for m in meshes)
        assert groups == ["whole_breast", "lesion"]
        # reconstructed geometry identical up to the 6-decimal format
        first = meshes[0]
        assert np.allclose(vertices[:first.n_vertices], first.vertices, atol=1e-5)

    def test_mtl_palette_fixed(self, tmp_path):
        arr = np.zeros((5, 5, 5), dtype=np.uint8)
        arr[2, 2, 2] = 2
        meshes = [marching_cubes(make_labels(arr), 2)]
        export_scene(meshes, tmp_path, "obj_mtl")
        mtl = (tmp_path / "scene.mtl").read_text()
        assert "newmtl fibroglandular" in mtl
        assert "Kd 0.0000 0.6000 0.0000" in mtl

    def test_empty_mesh_list_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            export_scene([], tmp_path, "stl_per_label")

    def test_deterministic_bytes(self, tmp_path):
        arr = np.zeros((6, 6, 6), dtype=np.uint8)
        arr[2:4, 2:4, 2:4] = 3
        mesh = marching_cubes(make_labels(arr), 3)
        write_binary_stl(mesh, tmp_path / "a.stl")
        write_binary_stl(mesh, tmp_path / "b.stl")
        assert (tmp_path / "a.stl").read_bytes() == (tmp_path / "b.stl").read_bytes()
