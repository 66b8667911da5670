"""Triangle-surface extraction, smoothing, and scene export.

Marching cubes here is specialized to binary masks at iso-value 0.5: every
vertex sits on the midpoint of a lattice edge. The 256-entry cube table is
generated at import time by tracing the cut polygon loops over each cube
configuration; ambiguous faces (two diagonal inside corners) are always
resolved by isolating the inside corners, a rule that depends only on the
shared face's corner states, so adjacent cubes agree and the resulting
meshes are watertight by construction. Each loop is fan-triangulated from
its own centroid vertex, which lies strictly inside the cube and therefore
never coincides with a neighboring cube's geometry.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .volume import LABEL_NAMES, LabelVolume, voxel_to_world

# cube corner k has offset bits (x, y, z) = (k & 1, k >> 1 & 1, k >> 2 & 1)
_CORNERS = [(k & 1, (k >> 1) & 1, (k >> 2) & 1) for k in range(8)]
_EDGES: list[tuple[int, int]] = []
for _k, (_x, _y, _z) in enumerate(_CORNERS):
    if _x == 0:
        _EDGES.append((_k, _k + 1))
    if _y == 0:
        _EDGES.append((_k, _k + 2))
    if _z == 0:
        _EDGES.append((_k, _k + 4))
_EDGES = sorted(set(_EDGES))
_EDGE_MID = {e: tuple((np.array(_CORNERS[e[0]]) + np.array(_CORNERS[e[1]])) / 2.0)
             for e in _EDGES}
_FACES = [[k for k in range(8) if _CORNERS[k][axis] == side]
          for axis in range(3) for side in (0, 1)]


def _trace_loops(config: int) -> list[list[tuple[int, int]]]:
    """Oriented cut-polygon loops (lists of edge keys) for one corner config."""
    inside = [(config >> k) & 1 for k in range(8)]
    cut = {e for e in _EDGES if inside[e[0]] != inside[e[1]]}
    if not cut:
        return []
    segments: list[tuple[tuple[int, int], tuple[int, int]]] = []
    for face in _FACES:
        face_cuts = [e for e in cut if e[0] in face and e[1] in face]
        if len(face_cuts) == 2:
            segments.append((face_cuts[0], face_cuts[1]))
        elif len(face_cuts) == 4:
            # ambiguous face: isolate each inside corner so the pairing is a
            # function of the face state alone
            for corner in (k for k in face if inside[k]):
                pair = [e for e in face_cuts if corner in e]
                segments.append((pair[0], pair[1]))
    adjacency: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for a, b in segments:
        adjacency.setdefault(a, []).append(b)
        adjacency.setdefault(b, []).append(a)
    loops = []
    seen: set[tuple[int, int]] = set()
    for start in sorted(adjacency):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            choices = [n for n in adjacency[cur] if n != prev]
            nxt = sorted(choices)[0] if prev is None else choices[0]
            if nxt == start:
                break
            loop.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        # orient so triangle normals point away from the inside region
        pts = [np.array(_EDGE_MID[e]) for e in loop]
        vec_area = 0.5 * sum(np.cross(pts[i], pts[(i + 1) % len(pts)])
                             for i in range(len(pts)))
        outward = sum(
            (np.array(_CORNERS[b], float) - np.array(_CORNERS[a], float))
            * (1.0 if inside[a] else -1.0)
            for a, b in loop)
        orient = float(np.dot(vec_area, outward))
        assert abs(orient) > 1e-9, f"degenerate loop orientation in config {config}"
        loops.append(loop[::-1] if orient < 0 else loop)
    return loops


_LOOP_TABLE = [_trace_loops(c) for c in range(256)]


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle surface in world millimetres."""

    vertices: np.ndarray = field(repr=False)   # (n, 3) float64
    triangles: np.ndarray = field(repr=False)  # (m, 3) int32
    label: int = 0
    color: tuple[float, float, float] = (0.8, 0.8, 0.8)

    def __init__(self, vertices, triangles, label=0, color=(0.8, 0.8, 0.8)):
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int32).reshape(-1, 3)
        if triangles.size and (triangles.min() < 0
                               or triangles.max() >= len(vertices)):
            raise ValidationError("triangle indices out of range")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "label", int(label))
        object.__setattr__(self, "color", tuple(float(c) for c in color))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.n_triangles == 0

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(
            np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def drop_degenerate(self, min_area: float = 1e-12) -> "TriangleMesh":
        if self.is_empty():
            return self
        keep = self.triangle_areas() > min_area
        return TriangleMesh(self.vertices, self.triangles[keep], self.label,
                            self.color)


def signed_volume(mesh: TriangleMesh) -> float:
    """Signed enclosed volume (mm^3); positive for outward-wound closed meshes."""
    if mesh.is_empty():
        return 0.0
    v = mesh.vertices[mesh.triangles]
    return float(np.einsum("ij,ij->i", v[:, 0],
                           np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def edge_use_counts(mesh: TriangleMesh) -> dict[tuple[int, int], int]:
    """Undirected edge -> number of incident triangles."""
    counts: dict[tuple[int, int], int] = {}
    for a, b, c in mesh.triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            key = (int(u), int(v)) if u < v else (int(v), int(u))
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every edge used by exactly two triangles."""
    if mesh.is_empty():
        return False
    return all(c == 2 for c in edge_use_counts(mesh).values())


def marching_cubes(labels: LabelVolume, label: int) -> TriangleMesh:
    """Extract the iso-surface of ``labels == label`` at iso-value 0.5.

    Vertices come out in world coordinates. An absent label yields an
    empty mesh. The mask is zero-padded first, so even masks touching the
    volume border produce closed surfaces.
    """
    mask = np.pad(labels.labels == label, 1).astype(np.uint8)
    nx, ny, nz = mask.shape
    config = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint8)
    for k, (x, y, z) in enumerate(_CORNERS):
        config |= mask[x:x + nx - 1, y:y + ny - 1, z:z + nz - 1] << k

    vertex_ids: dict[tuple[int, int, int], int] = {}
    vertices: list[tuple[float, float, float]] = []
    triangles: list[tuple[int, int, int]] = []
    for i, j, k in np.argwhere((config != 0) & (config != 255)):
        cell = config[i, j, k]
        base = (float(i - 1), float(j - 1), float(k - 1))
        for loop in _LOOP_TABLE[cell]:
            ids = []
            cx = cy = cz = 0.0
            for edge in loop:
                mx, my, mz = _EDGE_MID[edge]
                key = (2 * i + int(2 * mx), 2 * j + int(2 * my),
                       2 * k + int(2 * mz))
                vid = vertex_ids.get(key)
                if vid is None:
                    vid = len(vertices)
                    vertex_ids[key] = vid
                    vertices.append((base[0] + mx, base[1] + my, base[2] + mz))
                ids.append(vid)
                cx += mx
                cy += my
                cz += mz
            n = len(ids)
            centroid_id = len(vertices)
            vertices.append((base[0] + cx / n, base[1] + cy / n,
                             base[2] + cz / n))
            for t in range(n):
                triangles.append((centroid_id, ids[t], ids[(t + 1) % n]))

    if not triangles:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32),
                            label=label)
    world = voxel_to_world(labels.meta, np.asarray(vertices, dtype=np.float64))
    return TriangleMesh(world, np.asarray(triangles, dtype=np.int32),
                        label=label).drop_degenerate()


def _vertex_adjacency(mesh: TriangleMesh) -> list[np.ndarray]:
    neighbor_sets: list[set[int]] = [set() for _ in range(mesh.n_vertices)]
    for a, b, c in mesh.triangles:
        neighbor_sets[a].update((b, c))
        neighbor_sets[b].update((a, c))
        neighbor_sets[c].update((a, b))
    return [np.fromiter(sorted(s), dtype=np.int64) for s in neighbor_sets]


def smooth_taubin(mesh: TriangleMesh, iterations: int = 10,
                  lam: float = 0.5, mu: float = -0.53) -> TriangleMesh:
    """Taubin lambda/mu smoothing: shrink step then inflate step per iteration.

    Topology (the triangle list) is untouched; only vertex positions move.
    Requires 0 < lam < -mu so the pass band stays below unity gain and
    closed meshes keep their volume to within a couple of percent.
    """
    if iterations < 0:
        raise ValidationError("iterations must be >= 0")
    if not (0 < lam < -mu):
        raise ValidationError(f"need 0 < lambda < -mu, got lambda={lam}, mu={mu}")
    if iterations == 0 or mesh.is_empty():
        return mesh
    neighbors = _vertex_adjacency(mesh)
    counts = np.array([max(len(n), 1) for n in neighbors], dtype=np.float64)
    idx = np.concatenate([n for n in neighbors]) if neighbors else np.array([])
    offsets = np.concatenate([[0], np.cumsum([len(n) for n in neighbors])])

    def umbrella(pos: np.ndarray) -> np.ndarray:
        sums = np.add.reduceat(pos[idx], offsets[:-1], axis=0)
        empty = offsets[:-1] == offsets[1:]
        if empty.any():
            sums[empty] = pos[empty] * counts[empty, None]
        return sums / counts[:, None] - pos

    pos = mesh.vertices.copy()
    for _ in range(iterations):
        pos = pos + lam * umbrella(pos)
        pos = pos + mu * umbrella(pos)
    return TriangleMesh(pos, mesh.triangles, mesh.label, mesh.color)


@dataclass(frozen=True)
class MaterialSpec:
    name: str
    rgb: tuple[float, float, float]
    alpha: float = 1.0


# fixed palette: semi-transparent tan breast, green fibroglandular, red lesion
DEFAULT_PALETTE: dict[int, MaterialSpec] = {
    1: MaterialSpec("whole_breast", (0.824, 0.706, 0.549), alpha=0.35),
    2: MaterialSpec("fibroglandular", (0.0, 0.6, 0.0), alpha=1.0),
    3: MaterialSpec("lesion", (0.9, 0.05, 0.05), alpha=1.0),
}

STL_HEADER_SIZE = 80
STL_TRIANGLE_SIZE = 50


def write_binary_stl(mesh: TriangleMesh, path) -> None:
    """Little-endian binary STL: 80-byte header, uint32 count, 50-byte records."""
    path = Path(path)
    name = LABEL_NAMES.get(mesh.label, f"label{mesh.label}")
    header = f"mammoforge {name}".encode("ascii")[:STL_HEADER_SIZE]
    header += b"\x00" * (STL_HEADER_SIZE - len(header))
    v = mesh.vertices[mesh.triangles]
    normals = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    lengths = np.linalg.norm(normals, axis=1)
    lengths[lengths == 0] = 1.0
    normals = (normals / lengths[:, None]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", mesh.n_triangles))
        tri = v.astype("<f4")
        for t in range(mesh.n_triangles):
            fh.write(normals[t].tobytes())
            fh.write(tri[t].tobytes())
            fh.write(b"\x00\x00")


def write_obj_scene(meshes: list[TriangleMesh], obj_path, mtl_path,
                    palette: dict[int, MaterialSpec] | None = None) -> None:
    """Single OBJ with one group per label plus an MTL with the fixed palette."""
    palette = palette if palette is not None else DEFAULT_PALETTE
    obj_path, mtl_path = Path(obj_path), Path(mtl_path)

    with open(mtl_path, "w", encoding="ascii") as mtl:
        for mesh in meshes:
            mat = palette.get(mesh.label) or MaterialSpec(
                LABEL_NAMES.get(mesh.label, f"label{mesh.label}"), mesh.color)
            mtl.write(f"newmtl {mat.name}\n")
            mtl.write(f"Kd {mat.rgb[0]:.4f} {mat.rgb[1]:.4f} {mat.rgb[2]:.4f}\n")
            mtl.write(f"d {mat.alpha:.4f}\n\n")

    with open(obj_path, "w", encoding="ascii") as obj:
        obj.write(f"mtllib {mtl_path.name}\n")
        base = 1  # OBJ indices are 1-based and global across groups
        for mesh in meshes:
            mat = palette.get(mesh.label) or MaterialSpec(
                LABEL_NAMES.get(mesh.label, f"label{mesh.label}"), mesh.color)
            obj.write(f"g {mat.name}\n")
            obj.write(f"usemtl {mat.name}\n")
            for x, y, z in mesh.vertices:
                obj.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
            for a, b, c in mesh.triangles:
                obj.write(f"f {base + a} {base + b} {base + c}\n")
            base += mesh.n_vertices


def export_scene(meshes: list[TriangleMesh], out_dir,
                 format: str = "stl_per_label",
                 palette: dict[int, MaterialSpec] | None = None) -> list[Path]:
    """Write meshes as one binary STL per label or a single OBJ+MTL scene."""
    if not meshes:
        raise ValidationError("export_scene needs at least one mesh")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if format == "stl_per_label":
        for mesh in meshes:
            name = LABEL_NAMES.get(mesh.label, f"label{mesh.label}")
            path = out_dir / f"{name}.stl"
            write_binary_stl(mesh, path)
            written.append(path)
    elif format == "obj_mtl":
        obj, mtl = out_dir / "scene.obj", out_dir / "scene.mtl"
        write_obj_scene(meshes, obj, mtl, palette)
        written.extend([obj, mtl])
    else:
        raise ValidationError(f"unknown export format {format!r}")
    return written
