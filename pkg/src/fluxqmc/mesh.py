"""Structured triangulations of the unit square and triangle quadrature.

An m x m grid of cells, each split along the lower-left to upper-right
diagonal, gives 2 m^2 positively oriented triangles.  Edges carry a global
orientation: the unit normal of edge (v0, v1) with v0 < v1 is the tangent
rotated clockwise.  For m a multiple of 5 the subdomain (0.2, 0.8)^2 is a
union of elements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError

# Symmetric 7-point triangle rule, exact through degree 5.  Barycentric
# coordinates and weights normalized to sum to 1.
_QA = (6.0 - np.sqrt(15.0)) / 21.0
_QB = (6.0 + np.sqrt(15.0)) / 21.0
_QW1 = (155.0 - np.sqrt(15.0)) / 1200.0
_QW2 = (155.0 + np.sqrt(15.0)) / 1200.0
TRI_QUAD_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_QA, _QA, 1 - 2 * _QA],
    [_QA, 1 - 2 * _QA, _QA],
    [1 - 2 * _QA, _QA, _QA],
    [_QB, _QB, 1 - 2 * _QB],
    [_QB, 1 - 2 * _QB, _QB],
    [1 - 2 * _QB, _QB, _QB],
])
TRI_QUAD_W = np.array([9.0 / 40.0, _QW1, _QW1, _QW1, _QW2, _QW2, _QW2])


@dataclass
class TriMesh:
    """Triangulation with precomputed geometry.

    vertices       (V, 2) coordinates
    triangles      (F, 3) vertex indices, positive orientation
    edges          (E, 2) vertex pairs with v0 < v1
    tri_edges      (F, 3) global edge index opposite each local vertex
    edge_sign      (F, 3) +1 where the global edge normal points out of
                   the triangle, -1 otherwise
    boundary_edge  (E,) flags
    edge_tris      (E, 2, 2) adjacent (triangle, local slot) pairs, -1 padded
    """

    m: int
    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    tri_edges: np.ndarray
    edge_sign: np.ndarray
    boundary_edge: np.ndarray
    edge_tris: np.ndarray
    area: np.ndarray
    edge_len: np.ndarray  # (E,) global edge lengths
    edge_normal: np.ndarray  # (E, 2) global unit normals
    h: float

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def quad_points(self) -> np.ndarray:
        """Physical quadrature points, shape (F, 7, 2)."""
        tri = self.vertices[self.triangles]  # (F, 3, 2)
        return np.einsum("qi,fid->fqd", TRI_QUAD_BARY, tri)

    def quad_weights(self) -> np.ndarray:
        """Quadrature weights scaled by element area, shape (F, 7)."""
        return self.area[:, None] * TRI_QUAD_W[None, :]

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def subdomain_mask(self, lo: float = 0.2, hi: float = 0.8) -> np.ndarray:
        """Boolean element mask of the axis-aligned square (lo, hi)^2;
        raises when the square is not edge-aligned with the grid."""
        for c in (lo, hi):
            if abs(c * self.m - round(c * self.m)) > 1e-12:
                raise AlignmentError(
                    f"subdomain boundary {c} does not lie on mesh lines for m={self.m}")
        cen = self.centroids()
        return ((cen[:, 0] > lo) & (cen[:, 0] < hi)
                & (cen[:, 1] > lo) & (cen[:, 1] < hi))


def build_mesh(m: int) -> TriMesh:
    """Uniform m x m criss-cross-free triangulation of (0,1)^2 (diagonal
    from each cell's lower-left to upper-right corner)."""
    if m < 1:
        raise ValueError("m must be at least 1")
    g = np.linspace(0.0, 1.0, m + 1)
    gx, gy = np.meshgrid(g, g, indexing="xy")
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    def vid(ix, iy):
        return iy * (m + 1) + ix

    tris = []
    for iy in range(m):
        for ix in range(m):
            v00, v10 = vid(ix, iy), vid(ix + 1, iy)
            v01, v11 = vid(ix, iy + 1), vid(ix + 1, iy + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    triangles = np.asarray(tris, dtype=np.int64)

    edge_index: dict[tuple[int, int], int] = {}
    tri_edges = np.empty_like(triangles)
    adjacency: list[list[tuple[int, int]]] = []
    for f, (a, b, c) in enumerate(triangles):
        for loc, (u, v) in enumerate(((b, c), (c, a), (a, b))):
            key = (min(u, v), max(u, v))
            e = edge_index.get(key)
            if e is None:
                e = len(edge_index)
                edge_index[key] = e
                adjacency.append([])
            adjacency[e].append((f, loc))
            tri_edges[f, loc] = e
    edges = np.empty((len(edge_index), 2), dtype=np.int64)
    for (u, v), e in edge_index.items():
        edges[e] = (u, v)
    boundary_edge = np.asarray([len(adj) == 1 for adj in adjacency])
    edge_tris = np.full((len(edge_index), 2, 2), -1, dtype=np.int64)
    for e, adj in enumerate(adjacency):
        for i, (f, loc) in enumerate(adj):
            edge_tris[e, i] = (f, loc)

    tri = vertices[triangles]
    d1 = tri[:, 1] - tri[:, 0]
    d2 = tri[:, 2] - tri[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    if np.any(area <= 0.0):
        raise ValueError("triangulation produced a non-positive element")

    evec = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    edge_len_global = np.hypot(evec[:, 0], evec[:, 1])
    tangent = evec / edge_len_global[:, None]
    normal = np.column_stack([tangent[:, 1], -tangent[:, 0]])

    # outward normal of local edge loc (opposite vertex loc): away from it
    sign = np.empty_like(triangles)
    for loc in range(3):
        e = tri_edges[:, loc]
        mid = 0.5 * (vertices[edges[e, 0]] + vertices[edges[e, 1]])
        opp = tri[:, loc]
        out = mid - opp
        sign[:, loc] = np.where(np.einsum("fd,fd->f", out, normal[e]) > 0.0, 1, -1)

    return TriMesh(m=m, vertices=vertices, triangles=triangles, edges=edges,
                   tri_edges=tri_edges, edge_sign=sign, boundary_edge=boundary_edge,
                   edge_tris=edge_tris, area=area, edge_len=edge_len_global,
                   edge_normal=normal, h=float(edge_len_global.max()))
