"""Structured simplicial meshes of the unit square and unit cube.

Conventions (fixed once, they influence table values):

* 2D: every cell ``[x_i, x_{i+1}] x [y_j, y_{j+1}]`` is cut along the diagonal
  from ``(x_i, y_j)`` to ``(x_{i+1}, y_{j+1})``.
* 3D: every cube is Kuhn-split into 6 tetrahedra sharing the main diagonal
  ``(0,0,0) -> (1,1,1)`` of the cell.

Local facet ``f`` of an element is the facet opposite local vertex ``f``.
Global facets are keyed by their sorted vertex tuples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import permutations
from math import factorial

import numpy as np


@dataclass(frozen=True)
class ElementGeometry:
    volume: float
    diameter: float
    facet_areas: np.ndarray
    outward_normals: np.ndarray
    jacobian: np.ndarray  # x = offset + jacobian @ xi
    offset: np.ndarray
    inverse_transpose: np.ndarray


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    dim: int
    vertices: np.ndarray  # (nv, d)
    elements: np.ndarray  # (ne, d+1), positively oriented
    facets: np.ndarray = field(init=False)  # (nf, d), sorted vertex ids
    element_facets: np.ndarray = field(init=False)  # (ne, d+1) global facet ids
    facet_elements: np.ndarray = field(init=False)  # (nf, 2), -1 if absent
    facet_local: np.ndarray = field(init=False)  # (nf, 2) local facet index, -1 if absent

    def __post_init__(self):
        d = self.dim
        ne = len(self.elements)
        local = np.array([[j for j in range(d + 1) if j != f] for f in range(d + 1)])
        all_f = np.sort(self.elements[:, local], axis=2).reshape(-1, d)
        facets, inverse = np.unique(all_f, axis=0, return_inverse=True)
        inverse = inverse.reshape(ne, d + 1)
        nf = len(facets)
        fe = -np.ones((nf, 2), dtype=np.int64)
        fl = -np.ones((nf, 2), dtype=np.int64)
        flat = inverse.ravel()
        order = np.argsort(flat, kind="stable")
        elem_of = order // (d + 1)
        lf_of = order % (d + 1)
        sorted_f = flat[order]
        first = np.ones(len(sorted_f), dtype=bool)
        first[1:] = sorted_f[1:] != sorted_f[:-1]
        slot = np.where(first, 0, 1)
        if np.any(np.bincount(sorted_f, minlength=nf) > 2):
            raise ValueError("non-manifold mesh: a facet is shared by more than two elements")
        fe[sorted_f, slot] = elem_of
        fl[sorted_f, slot] = lf_of
        object.__setattr__(self, "facets", facets)
        object.__setattr__(self, "element_facets", inverse)
        object.__setattr__(self, "facet_elements", fe)
        object.__setattr__(self, "facet_local", fl)

    # -- sizes -----------------------------------------------------------
    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def boundary_flags(self) -> np.ndarray:
        return self.facet_elements[:, 1] < 0

    @cached_property
    def facet_adjacency(self) -> list[list[tuple[int, int]]]:
        out = []
        for (e0, e1), (l0, l1) in zip(self.facet_elements, self.facet_local):
            refs = [(int(e0), int(l0))]
            if e1 >= 0:
                refs.append((int(e1), int(l1)))
            out.append(refs)
        return out

    # -- batched geometry ---------------------------------------------------
    @cached_property
    def jacobians(self) -> np.ndarray:
        v = self.vertices[self.elements]
        return np.transpose(v[:, 1:] - v[:, :1], (0, 2, 1))

    @cached_property
    def dets(self) -> np.ndarray:
        return np.linalg.det(self.jacobians)

    @cached_property
    def inv_jacobians(self) -> np.ndarray:
        return np.linalg.inv(self.jacobians)

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.abs(self.dets) / factorial(self.dim)

    @cached_property
    def diameters(self) -> np.ndarray:
        v = self.vertices[self.elements]
        diff = v[:, :, None, :] - v[:, None, :, :]
        return np.sqrt((diff**2).sum(-1)).max(axis=(1, 2))

    @cached_property
    def _barycentric_gradients(self) -> np.ndarray:
        # rows of J^{-1} are grad(lambda_1..lambda_d); lambda_0 closes the sum
        ginv = self.inv_jacobians
        g0 = -ginv.sum(axis=1, keepdims=True)
        return np.concatenate([g0, ginv], axis=1)  # (ne, d+1, d)

    @cached_property
    def normals(self) -> np.ndarray:
        """Outward unit normals per (element, local facet)."""
        g = self._barycentric_gradients
        return -g / np.linalg.norm(g, axis=2, keepdims=True)

    @cached_property
    def facet_areas(self) -> np.ndarray:
        """Facet measures per (element, local facet)."""
        g = self._barycentric_gradients
        return self.dim * self.volumes[:, None] * np.linalg.norm(g, axis=2)

    @cached_property
    def facet_patterns(self) -> np.ndarray:
        """Index into :func:`facet_permutations` for each (element, local facet).

        A pattern lists, in global facet vertex order, the local element
        vertices of that facet; it pins down how the facet's own
        parameterization sits inside the reference element.
        """
        d = self.dim
        radix = (d + 1) ** np.arange(d)
        lookup = -np.ones((d + 1) ** d, dtype=np.int64)
        for i, p in enumerate(facet_permutations(d)):
            lookup[np.dot(p, radix)] = i
        gverts = self.facets[self.element_facets]  # (ne, d+1, d)
        loc = np.argmax(self.elements[:, None, None, :] == gverts[..., None], axis=3)
        return lookup[loc @ radix]

    @cached_property
    def facet_normals(self) -> np.ndarray:
        """Global facet normal: outward normal of the first adjacent element."""
        e, lf = self.facet_elements[:, 0], self.facet_local[:, 0]
        return self.normals[e, lf]

    def element_geometry(self, element_id: int) -> ElementGeometry:
        if not 0 <= element_id < self.n_elements:
            raise ValueError(f"element id {element_id} out of range")
        i = element_id
        return ElementGeometry(
            volume=float(self.volumes[i]),
            diameter=float(self.diameters[i]),
            facet_areas=self.facet_areas[i].copy(),
            outward_normals=self.normals[i].copy(),
            jacobian=self.jacobians[i].copy(),
            offset=self.vertices[self.elements[i, 0]].copy(),
            inverse_transpose=self.inv_jacobians[i].T.copy(),
        )

    def map_to_physical(self, ref_points: np.ndarray) -> np.ndarray:
        """Physical images (ne, npts, d) of reference points (npts, d)."""
        x0 = self.vertices[self.elements[:, 0]]
        return x0[:, None, :] + np.einsum("eij,qj->eqi", self.jacobians, ref_points)

    def dump(self, path) -> None:
        """Plain-text dump: vertex block then element block."""
        with open(path, "w") as fh:
            fh.write(f"dim {self.dim}\nvertices {self.n_vertices}\n")
            np.savetxt(fh, self.vertices, fmt="%.17g")
            fh.write(f"elements {self.n_elements}\n")
            np.savetxt(fh, self.elements, fmt="%d")


def facet_permutations(dim: int) -> list[tuple[int, ...]]:
    """Ordered ``dim``-tuples of distinct local vertex ids (all facet patterns)."""
    return list(permutations(range(dim + 1), dim))


def element_geometry(mesh: SimplicialMesh, element_id: int) -> ElementGeometry:
    return mesh.element_geometry(element_id)


def _orient(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    v = vertices[elements]
    jac = np.transpose(v[:, 1:] - v[:, :1], (0, 2, 1))
    neg = np.linalg.det(jac) < 0
    elements = elements.copy()
    elements[neg, 0], elements[neg, 1] = elements[neg, 1], elements[neg, 0].copy()
    return elements


def build_unit_square_mesh(M: int) -> SimplicialMesh:
    if M < 1:
        raise ValueError("M must be a positive integer")
    x = np.linspace(0.0, 1.0, M + 1)
    X, Y = np.meshgrid(x, x, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    j, i = np.meshgrid(np.arange(M), np.arange(M), indexing="ij")
    v00 = (j * (M + 1) + i).ravel()
    v10, v01 = v00 + 1, v00 + M + 1
    v11 = v01 + 1
    tris = np.concatenate(
        [np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])]
    )
    return SimplicialMesh(2, verts, _orient(verts, tris))


def build_unit_cube_mesh(M: int) -> SimplicialMesh:
    if M < 1:
        raise ValueError("M must be a positive integer")
    x = np.linspace(0.0, 1.0, M + 1)
    Z, Y, X = np.meshgrid(x, x, x, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    k, j, i = np.meshgrid(np.arange(M), np.arange(M), np.arange(M), indexing="ij")
    base = (k * (M + 1) ** 2 + j * (M + 1) + i).ravel()
    step = np.array([1, M + 1, (M + 1) ** 2])
    tets = []
    for perm in permutations(range(3)):
        a = base
        b = a + step[perm[0]]
        c = b + step[perm[1]]
        dd = c + step[perm[2]]
        tets.append(np.column_stack([a, b, c, dd]))
    return SimplicialMesh(3, verts, _orient(verts, np.concatenate(tets)))
