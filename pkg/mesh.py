"""Conforming triangular meshes: built-in geometries, uniform refinement and newest-vertex bisection."""
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from errors import MeshError, ValidationError

logger = logging.getLogger(__name__)


DIRICHLET = "dirichlet"


EdgeKey = Tuple[int, int]

# local edge i is opposite local vertex i
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


def edge_key(i: int, j: int) -> EdgeKey:
    i, j = int(i), int(j)
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True, eq=False)
class Mesh2D:
    """Triangulation with edge topology, boundary tags and bisection metadata.

    refinement_edge holds a local edge index per triangle; generation counts
    bisection levels since the coarse mesh (a uniform split counts two).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    refinement_edge: np.ndarray
    boundary_tags: Dict[EdgeKey, str]
    generation: np.ndarray

    def __post_init__(self):
        for name, dtype in (("vertices", float), ("triangles", np.int64),
                            ("refinement_edge", np.int64), ("generation", np.int64)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "boundary_tags", dict(self.boundary_tags))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def _topology(self):
        tri = self.triangles
        pairs = np.sort(tri[:, LOCAL_EDGES].reshape(-1, 2), axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        counts = np.bincount(inverse, minlength=len(edges))
        if np.any(counts > 2):
            raise MeshError("Edge shared by more than two triangles", {"edges": int(np.sum(counts > 2))})
        order = np.argsort(inverse, kind="stable")
        owner = order // 3
        _, starts = np.unique(inverse[order], return_index=True)
        edge_tris = np.full((len(edges), 2), -1, dtype=np.int64)
        edge_tris[:, 0] = owner[starts]
        shared = counts == 2
        edge_tris[shared, 1] = owner[starts[shared] + 1]
        return edges.astype(np.int64), inverse.reshape(-1, 3).astype(np.int64), edge_tris

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as (lower id, higher id) vertex pairs."""
        return self._topology[0]

    @property
    def tri_edges(self) -> np.ndarray:
        """Global edge index of each local edge, shape (n_triangles, 3)."""
        return self._topology[1]

    @property
    def edge_tris(self) -> np.ndarray:
        """Adjacent triangles per edge, second entry -1 on the boundary."""
        return self._topology[2]

    @cached_property
    def boundary_edge_ids(self) -> np.ndarray:
        return np.nonzero(self.edge_tris[:, 1] < 0)[0]

    @cached_property
    def edge_index(self) -> Dict[EdgeKey, int]:
        return {(int(a), int(b)): g for g, (a, b) in enumerate(self.edges)}

    def edge_tag(self, edge: int) -> Optional[str]:
        a, b = self.edges[edge]
        return self.boundary_tags.get((int(a), int(b)))

    @cached_property
    def edge_labels(self) -> List[Optional[str]]:
        return [self.edge_tag(g) for g in range(self.n_edges)]

    @cached_property
    def dirichlet_edges(self) -> np.ndarray:
        return np.array([g for g in self.boundary_edge_ids if self.edge_labels[g] == DIRICHLET], dtype=np.int64)

    @cached_property
    def neumann_edges(self) -> np.ndarray:
        return np.array([g for g in self.boundary_edge_ids if self.edge_labels[g] not in (None, DIRICHLET)],
                        dtype=np.int64)

    @property
    def has_dirichlet(self) -> bool:
        return len(self.dirichlet_edges) > 0

    @cached_property
    def dirichlet_vertices(self) -> np.ndarray:
        if not self.has_dirichlet:
            return np.zeros(0, dtype=np.int64)
        return np.unique(self.edges[self.dirichlet_edges])

    @cached_property
    def signed_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        d1 = v[:, 1] - v[:, 0]
        d2 = v[:, 2] - v[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def total_area(self) -> float:
        return float(np.sum(self.signed_areas))

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def hanging_nodes(self) -> np.ndarray:
        """Vertices lying in the open interior of a boundary-multiplicity edge."""
        found = set()
        x = self.vertices
        for g in self.boundary_edge_ids:
            a, b = x[self.edges[g]]
            t = b - a
            length2 = float(t @ t)
            rel = x - a
            s = rel @ t / length2
            dist = np.abs(rel[:, 0] * t[1] - rel[:, 1] * t[0]) / np.sqrt(length2)
            inside = (s > 1e-12) & (s < 1 - 1e-12) & (dist < 1e-12 * np.sqrt(length2))
            found.update(int(v) for v in np.nonzero(inside)[0])
        return np.array(sorted(found), dtype=np.int64)

    def validate(self) -> "Mesh2D":
        """Check every mesh invariant and raise MeshError on the first violation."""
        if np.any(self.signed_areas <= 0):
            raise MeshError("Non-positive triangle area", {"triangles": np.nonzero(self.signed_areas <= 0)[0][:10].tolist()})
        boundary = {(int(a), int(b)) for a, b in self.edges[self.boundary_edge_ids]}
        tagged = set(self.boundary_tags)
        if boundary != tagged:
            raise MeshError("Boundary tags do not match the boundary edge set",
                            {"untagged": len(boundary - tagged), "stale": len(tagged - boundary)})
        if any(not tag for tag in self.boundary_tags.values()):
            raise MeshError("Empty boundary tag")
        hanging = self.hanging_nodes()
        if len(hanging):
            raise MeshError("Hanging nodes", {"vertices": hanging[:10].tolist()})
        # edge -> triangle adjacency must agree with triangle -> edge incidence
        for side in (0, 1):
            ids = np.nonzero(self.edge_tris[:, side] >= 0)[0]
            owners = self.edge_tris[ids, side]
            if not np.all(np.any(self.tri_edges[owners] == ids[:, None], axis=1)):
                raise MeshError("Inconsistent edge adjacency")
        return self


@dataclass(frozen=True)
class GeometryTables:
    area: np.ndarray           # (nt,)
    h_K: np.ndarray            # (nt,) longest edge
    jacobian: np.ndarray       # (nt, 2, 2), columns v1 - v0 and v2 - v0
    det: np.ndarray            # (nt,)
    inverse: np.ndarray        # (nt, 2, 2)
    local_normals: np.ndarray  # (nt, 3, 2) outward unit normal of local edge i
    local_lengths: np.ndarray  # (nt, 3)
    edge_length: np.ndarray    # (ne,)
    edge_normal: np.ndarray    # (ne, 2) global orientation, outward on the boundary
    edge_sign: np.ndarray      # (nt, 3) +1 where the global normal is outward for the triangle


def geometry_tables(mesh: Mesh2D) -> GeometryTables:
    cached = mesh.__dict__.get("_geometry")
    if cached is not None:
        return cached
    x = mesh.vertices
    v = x[mesh.triangles]
    jac = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=-1)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    ends = v[:, LOCAL_EDGES]                                # (nt, 3, 2, 2)
    vec = ends[:, :, 1] - ends[:, :, 0]
    lengths = np.linalg.norm(vec, axis=-1)
    h_K = lengths.max(axis=1)
    bad = det <= 1e-14 * h_K ** 2
    if np.any(bad):
        raise MeshError("Degenerate triangle", {"triangles": np.nonzero(bad)[0][:10].tolist()})
    inverse = np.linalg.inv(jac)
    local_normals = np.stack([vec[..., 1], -vec[..., 0]], axis=-1) / lengths[..., None]

    edges = mesh.edges
    t = x[edges[:, 1]] - x[edges[:, 0]]
    edge_length = np.linalg.norm(t, axis=1)
    edge_normal = np.stack([t[:, 1], -t[:, 0]], axis=1) / edge_length[:, None]
    bnd = mesh.boundary_edge_ids
    mid = 0.5 * (x[edges[bnd, 0]] + x[edges[bnd, 1]])
    outward = np.einsum("ij,ij->i", edge_normal[bnd], mid - mesh.centroids[mesh.edge_tris[bnd, 0]])
    edge_normal[bnd[outward < 0]] *= -1.0
    edge_sign = np.sign(np.einsum("tej,tej->te", edge_normal[mesh.tri_edges], local_normals))

    tables = GeometryTables(
        area=0.5 * det, h_K=h_K, jacobian=jac, det=det, inverse=inverse,
        local_normals=local_normals, local_lengths=lengths,
        edge_length=edge_length, edge_normal=edge_normal, edge_sign=edge_sign,
    )
    mesh.__dict__["_geometry"] = tables
    return tables


def _longest_edges(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    ends = v[:, LOCAL_EDGES]
    lengths = np.linalg.norm(ends[:, :, 1] - ends[:, :, 0], axis=-1)
    return np.argmax(lengths, axis=1)


def _from_triangles(vertices: np.ndarray, triangles: np.ndarray,
                    tagger: Callable[[np.ndarray, np.ndarray], str]) -> Mesh2D:
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64).copy()
    v = vertices[triangles]
    cross = ((v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
             - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0]))
    flip = cross < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    ref = _longest_edges(vertices, triangles)
    bare = Mesh2D(vertices, triangles, ref, {}, np.zeros(len(triangles)))
    tags = {}
    for g in bare.boundary_edge_ids:
        a, b = bare.edges[g]
        tags[(int(a), int(b))] = tagger(vertices[a], vertices[b])
    return Mesh2D(vertices, triangles, ref, tags, np.zeros(len(triangles)))


def _unit_square() -> Mesh2D:
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    triangles = np.array([[0, 1, 2], [0, 2, 3]])
    return _from_triangles(vertices, triangles, lambda p, q: DIRICHLET)


def _lshape() -> Mesh2D:
    # diamond |x|+|y| <= sqrt(2) minus the right sub-diamond, re-entrant corner at the origin
    s = 1.0 / np.sqrt(2.0)
    vertices = np.array([
        [0.0, 0.0], [s, s], [0.0, 2 * s], [-s, s],
        [-2 * s, 0.0], [-s, -s], [0.0, -2 * s], [s, -s],
    ])
    triangles = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5], [0, 5, 6], [0, 6, 7]])
    return _from_triangles(vertices, triangles, lambda p, q: "traction")


# Tapered beam of the usual Cook benchmark: the clamped edge runs from (0, 0) to (0, 44) and the
# loaded edge from (48, 44) to (48, 60). A literal lower corner at (48, 0) would make a trapezoid
# with a straight bottom edge, which is not this benchmark.
COOK_CORNERS = np.array([[0.0, 0.0], [48.0, 44.0], [48.0, 60.0], [0.0, 44.0]])


def _cook(n: int = 2) -> Mesh2D:
    a, b, c, d = COOK_CORNERS
    vertices = []
    for j in range(n + 1):
        eta = j / n
        for i in range(n + 1):
            xi = i / n
            vertices.append((1 - xi) * (1 - eta) * a + xi * (1 - eta) * b + xi * eta * c + (1 - xi) * eta * d)
    triangles = []
    for j in range(n):
        for i in range(n):
            v00, v10 = j * (n + 1) + i, j * (n + 1) + i + 1
            v01, v11 = v00 + n + 1, v10 + n + 1
            triangles += [[v00, v10, v11], [v00, v11, v01]]

    def tagger(p, q):
        if abs(p[0]) < 1e-12 and abs(q[0]) < 1e-12:
            return DIRICHLET
        if abs(p[0] - 48.0) < 1e-12 and abs(q[0] - 48.0) < 1e-12:
            return "load"
        return "free"

    return _from_triangles(np.array(vertices), np.array(triangles), tagger)


_BUILDERS = {"unit_square": _unit_square, "lshape": _lshape, "cook": _cook}


def retag_boundary(mesh: Mesh2D, tagger: Callable[[np.ndarray, np.ndarray], str]) -> Mesh2D:
    """Same triangulation with boundary tags recomputed from edge endpoint coordinates."""
    tags = {}
    for g in mesh.boundary_edge_ids:
        a, b = mesh.edges[g]
        tags[(int(a), int(b))] = tagger(mesh.vertices[a], mesh.vertices[b])
    return Mesh2D(mesh.vertices, mesh.triangles, mesh.refinement_edge, tags, mesh.generation)


def builtin_geometry(name: str, resolution: int = 1) -> Mesh2D:
    """Coarse mesh of a named benchmark domain, uniformly refined resolution - 1 times."""
    if name not in _BUILDERS:
        raise ValidationError(f"Unknown geometry '{name}'", {"known": sorted(_BUILDERS)})
    if isinstance(resolution, bool) or not isinstance(resolution, (int, np.integer)) or resolution < 1:
        raise ValidationError(f"Degenerate resolution {resolution!r}, expected a positive integer")
    mesh = _BUILDERS[name]()
    for _ in range(int(resolution) - 1):
        mesh = uniform_refine(mesh)
    logger.debug(f"builtin_geometry {name} resolution={resolution}: {mesh.n_triangles} triangles")
    return mesh


def _split_tags(tags: Dict[EdgeKey, str], midpoint: Callable[[EdgeKey], Optional[int]]) -> Dict[EdgeKey, str]:
    out = {}
    for (a, b), tag in tags.items():
        m = midpoint((a, b))
        if m is None:
            out[(a, b)] = tag
        else:
            out[edge_key(a, m)] = tag
            out[edge_key(m, b)] = tag
    return out


def uniform_refine(mesh: Mesh2D) -> Mesh2D:
    """Split every triangle into four similar children through its edge midpoints."""
    nv = mesh.n_vertices
    edges = mesh.edges
    midpoints = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])
    tri = mesh.triangles
    m = nv + mesh.tri_edges          # m[:, i] is the midpoint of the edge opposite vertex i
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    m0, m1, m2 = m[:, 0], m[:, 1], m[:, 2]
    children = np.stack([
        np.stack([v0, m2, m1], axis=1),
        np.stack([m2, v1, m0], axis=1),
        np.stack([m1, m0, v2], axis=1),
        np.stack([m0, m1, m2], axis=1),
    ], axis=1).reshape(-1, 3)
    # every child is a scaled copy of its parent with the same local vertex order
    ref = np.repeat(mesh.refinement_edge, 4)
    gen = np.repeat(mesh.generation + 2, 4)
    index = mesh.edge_index
    tags = _split_tags(mesh.boundary_tags, lambda key: nv + index[key])
    return Mesh2D(vertices, children, ref, tags, gen)


def bisect_refine(mesh: Mesh2D, marked: Iterable[int]) -> Mesh2D:
    """Newest-vertex bisection of the marked triangles with conforming closure."""
    marked = sorted({int(t) for t in marked})
    if not marked:
        return mesh
    if marked[0] < 0 or marked[-1] >= mesh.n_triangles:
        raise ValidationError("Marked triangle id out of range", {"n_triangles": mesh.n_triangles})

    tri_edges = mesh.tri_edges
    ref_edge = tri_edges[np.arange(mesh.n_triangles), mesh.refinement_edge]
    edge_marked = np.zeros(mesh.n_edges, dtype=bool)
    edge_marked[ref_edge[marked]] = True
    for _ in range(mesh.n_edges + 1):
        need = edge_marked[tri_edges].any(axis=1) & ~edge_marked[ref_edge]
        if not need.any():
            break
        edge_marked[ref_edge[need]] = True
    else:
        raise MeshError("Conforming closure did not terminate; inconsistent refinement edges")

    nv = mesh.n_vertices
    split = np.nonzero(edge_marked)[0]
    mid = np.full(mesh.n_edges, -1, dtype=np.int64)
    mid[split] = nv + np.arange(len(split))
    edges = mesh.edges
    vertices = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[edges[split, 0]] + mesh.vertices[edges[split, 1]])])
    index = mesh.edge_index

    def midpoint(key: EdgeKey) -> Optional[int]:
        g = index.get(key)
        if g is None or mid[g] < 0:
            return None
        return int(mid[g])

    triangles: List[Tuple[int, int, int]] = []
    refs: List[int] = []
    gens: List[int] = []

    def bisect(verts: Tuple[int, int, int], r: int, gen: int):
        apex, a, b = verts[r], verts[(r + 1) % 3], verts[(r + 2) % 3]
        m = midpoint(edge_key(a, b))
        if m is None:
            triangles.append(verts)
            refs.append(r)
            gens.append(gen)
            return
        # the new vertex m is opposite the refinement edge of each child
        bisect((apex, a, m), 2, gen + 1)
        bisect((apex, m, b), 1, gen + 1)

    for t in range(mesh.n_triangles):
        bisect(tuple(int(v) for v in mesh.triangles[t]), int(mesh.refinement_edge[t]), int(mesh.generation[t]))

    tags = _split_tags(mesh.boundary_tags, midpoint)
    refined = Mesh2D(vertices, np.array(triangles), np.array(refs), tags, np.array(gens))
    logger.debug(f"bisect_refine: {len(marked)} marked, {len(split)} edges split, "
                 f"{mesh.n_triangles} -> {refined.n_triangles} triangles")
    return refined


def save_mesh(mesh: Mesh2D, path: Union[str, Path]) -> None:
    lines = ["msh2d v1", f"vertices {mesh.n_vertices}"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in mesh.vertices]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{a} {b} {c} {r} {g}" for (a, b, c), r, g in zip(mesh.triangles, mesh.refinement_edge, mesh.generation)]
    lines.append(f"boundary {len(mesh.boundary_tags)}")
    lines += [f"{a} {b} {tag}" for (a, b), tag in sorted(mesh.boundary_tags.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path: Union[str, Path]) -> Mesh2D:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "msh2d v1":
        raise ValidationError(f"Not a msh2d v1 file: {path}")
    try:
        pos = 1
        nv = int(lines[pos].split()[1])
        vertices = np.array([[float(s) for s in lines[pos + 1 + i].split()] for i in range(nv)])
        pos += nv + 1
        nt = int(lines[pos].split()[1])
        rows = np.array([[int(s) for s in lines[pos + 1 + i].split()] for i in range(nt)], dtype=np.int64)
        pos += nt + 1
        nb = int(lines[pos].split()[1])
        tags = {}
        for i in range(nb):
            a, b, tag = lines[pos + 1 + i].split(maxsplit=2)
            tags[edge_key(int(a), int(b))] = tag.strip()
    except (IndexError, ValueError) as e:
        raise ValidationError(f"Malformed msh2d file {path}: {e}")
    return Mesh2D(vertices, rows[:, :3], rows[:, 3], tags, rows[:, 4])
