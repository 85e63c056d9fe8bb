"""Parametrized SPD family on a structured grid.

Each instance couples the 7-point Dirichlet Laplacian on the unit cube with
a random embedded 1D tree through a tube-supported diagonal term,

    A = K + 2 pi eps M,

and its right-hand side is the 3D trace of the solution of a 1D problem on
the tree, so every ``b`` lives on the tube around the tree.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .linalg import SparseMatrix, as_vector, read_mtx, read_vector, write_mtx, write_vector

__all__ = [
    "Geometry1D",
    "ProblemInstance",
    "RhsSet",
    "assemble",
    "build_rhs_set",
    "generate_geometry",
    "laplacian_3d",
    "make_dataset",
    "read_instance",
    "sample_sphere",
    "write_instance",
]

SEGMENT_LENGTH = (0.15, 0.4)
BOX = (0.1, 0.9)


@dataclass(frozen=True, eq=False)
class Geometry1D:
    """Tree of straight segments inside the unit cube.

    ``segments[i] = (parent, child)``; vertex 0 is the root and arc length is
    measured from it along the tree.
    """

    seed: int
    vertices: np.ndarray
    segments: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        S = np.asarray(self.segments, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "segments", S)
        if np.any(V <= 0.0) or np.any(V >= 1.0):
            raise ValueError("vertices must lie strictly inside the unit cube")
        if S.size and (S.min() < 0 or S.max() >= len(V)):
            raise ValueError("segment references a missing vertex")
        if np.any(self.lengths() <= 0.0):
            raise ValueError("zero-length segment")
        if not self._connected():
            raise ValueError("geometry graph is not connected")

    def _connected(self):
        if len(self.vertices) <= 1:
            return True
        adj = {i: [] for i in range(len(self.vertices))}
        for a, b in self.segments:
            adj[a].append(b)
            adj[b].append(a)
        seen, stack = {0}, [0]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.vertices)

    def lengths(self):
        a, b = self.vertices[self.segments[:, 0]], self.vertices[self.segments[:, 1]]
        return np.linalg.norm(b - a, axis=1)

    @property
    def total_length(self):
        return float(self.lengths().sum())

    def arc_offsets(self):
        """Arc-length coordinate of every vertex, measured from the root."""
        s = np.full(len(self.vertices), np.nan)
        s[0] = 0.0
        lengths = self.lengths()
        pending = list(range(len(self.segments)))
        while pending:
            rest = []
            for i in pending:
                a, b = self.segments[i]
                if not np.isnan(s[a]) and np.isnan(s[b]):
                    s[b] = s[a] + lengths[i]
                elif not np.isnan(s[b]) and np.isnan(s[a]):
                    s[a] = s[b] + lengths[i]
                elif np.isnan(s[a]) and np.isnan(s[b]):
                    rest.append(i)
            if len(rest) == len(pending):
                break
            pending = rest
        return s

    def distance(self, points):
        """Euclidean distance from each point to the union of segments."""
        points = np.atleast_2d(points)
        best = np.full(len(points), np.inf)
        for a_i, b_i in self.segments:
            a, b = self.vertices[a_i], self.vertices[b_i]
            ab = b - a
            t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
            proj = a + t[:, None] * ab
            best = np.minimum(best, np.linalg.norm(points - proj, axis=1))
        return best

    def to_dict(self):
        return {"seed": int(self.seed), "vertices": self.vertices.tolist(),
                "segments": self.segments.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["seed"], np.array(d["vertices"]), np.array(d["segments"]))


def generate_geometry(seed: int, n_segments: int, max_attempts=10_000) -> Geometry1D:
    """Grow a random tree by attaching segments to existing vertices.

    Segment lengths are uniform in ``[0.15, 0.4]`` and directions uniform on
    the sphere; endpoints leaving ``[0.1, 0.9]^3`` are rejected.
    """
    if n_segments < 1:
        raise ValueError("n_segments must be at least 1")
    rng = np.random.default_rng(seed)
    vertices = [rng.uniform(0.3, 0.7, size=3)]
    segments = []
    attempts = 0
    while len(segments) < n_segments:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(f"rejection budget of {max_attempts} exceeded for seed {seed}")
        parent = int(rng.integers(len(vertices)))
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        length = rng.uniform(*SEGMENT_LENGTH)
        end = vertices[parent] + length * direction
        if np.all(end >= BOX[0]) and np.all(end <= BOX[1]):
            segments.append((parent, len(vertices)))
            vertices.append(end)
    return Geometry1D(seed, np.array(vertices), np.array(segments))


@dataclass(eq=False)
class ProblemInstance:
    """One member ``(A, b, d)`` of the family."""

    A: SparseMatrix
    b: np.ndarray
    d: np.ndarray
    mu: Geometry1D
    eps: float
    grid_n: int
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.A.rows

    @property
    def grid(self):
        return (self.grid_n,) * 3


def laplacian_3d(grid_n: int) -> sp.csr_matrix:
    """7-point Dirichlet Laplacian on ``grid_n^3`` interior nodes of the unit cube."""
    h = 1.0 / (grid_n + 1)
    T = sp.diags([-np.ones(grid_n - 1), 2.0 * np.ones(grid_n), -np.ones(grid_n - 1)],
                 [-1, 0, 1]) / h ** 2
    I = sp.identity(grid_n)
    K = sp.kron(sp.kron(T, I), I) + sp.kron(sp.kron(I, T), I) + sp.kron(sp.kron(I, I), T)
    return sp.csr_matrix(K)


def grid_points(grid_n: int) -> np.ndarray:
    """Node coordinates in row-major ``(x, y, z)`` order."""
    h = 1.0 / (grid_n + 1)
    c = h * np.arange(1, grid_n + 1)
    X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])


def _discretize_tree(geometry: Geometry1D, h: float):
    """Split every segment into elements of length at most ``h``.

    Returns node positions, arc-length coordinates, and element index pairs
    with their lengths.
    """
    arc = geometry.arc_offsets()
    pos = [v for v in geometry.vertices]
    s = list(arc)
    elements = []
    for a_i, b_i in geometry.segments:
        a, b = geometry.vertices[a_i], geometry.vertices[b_i]
        n_el = max(1, math.ceil(np.linalg.norm(b - a) / h))
        chain = [a_i]
        for k in range(1, n_el):
            t = k / n_el
            pos.append(a + t * (b - a))
            s.append(arc[a_i] + t * (arc[b_i] - arc[a_i]))
            chain.append(len(pos) - 1)
        chain.append(b_i)
        elements.extend(zip(chain[:-1], chain[1:]))
    pos = np.array(pos)
    elements = np.array(elements)
    el_len = np.linalg.norm(pos[elements[:, 1]] - pos[elements[:, 0]], axis=1)
    return pos, np.array(s), elements, el_len


def _forcing(s, seed):
    """Smooth three-term random Fourier series in arc length."""
    rng = np.random.default_rng([seed, 1])
    amp = rng.standard_normal(3)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
    span = max(float(s.max()), 1e-12)
    k = np.arange(1, 4)
    return (amp * np.sin(np.outer(s, k) * np.pi / span + phase)).sum(axis=1)


def assemble(geometry: Geometry1D, grid_n: int, eps=0.1, tube_radius=2.0) -> ProblemInstance:
    """Build the SPD operator, right-hand side and parameter field.

    Parameters
    ----------
    geometry : Geometry1D
        Embedded tree.
    grid_n : int
        Interior nodes per axis (``h = 1 / (grid_n + 1)``).
    eps : float
        Coupling strength.
    tube_radius : float
        Tube radius in units of ``h``.

    Notes
    -----
    The tube weight is ``w(p) = max(0, 1 - dist(p, tree) / rho)`` and the
    coupling block is ``diag(w) / h^2``, matching the scaling of ``K``. The
    1D problem (graph Laplacian plus lumped mass) is solved against the
    random forcing and its nodal values are spread onto nearby grid nodes
    with per-node normalized weights.
    """
    if grid_n < 4:
        raise ValueError("grid_n must be at least 4")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    h = 1.0 / (grid_n + 1)
    rho = tube_radius * h
    pts = grid_points(grid_n)
    w = np.maximum(0.0, 1.0 - geometry.distance(pts) / rho)
    if not np.any(w > 0):
        raise ValueError("tube around the geometry contains no grid nodes")

    K = laplacian_3d(grid_n)
    coupling = 2.0 * np.pi * eps
    A = K + sp.diags(coupling * w / h ** 2) if eps > 0 else K

    pos, s, elements, el_len = _discretize_tree(geometry, h)
    n1 = len(pos)
    mass = np.zeros(n1)
    np.add.at(mass, elements[:, 0], el_len / 2)
    np.add.at(mass, elements[:, 1], el_len / 2)
    b = np.zeros(grid_n ** 3)
    if eps > 0:
        rows = np.concatenate([elements[:, 0], elements[:, 1], elements[:, 0], elements[:, 1]])
        cols = np.concatenate([elements[:, 0], elements[:, 1], elements[:, 1], elements[:, 0]])
        inv = 1.0 / el_len
        vals = np.concatenate([inv, inv, -inv, -inv])
        K11 = sp.csr_matrix((vals, (rows, cols)), shape=(n1, n1))
        x = spla.spsolve(sp.csc_matrix(K11 + sp.diags(coupling * mass)),
                         mass * _forcing(s, geometry.seed))
        for q in range(n1):
            wq = np.maximum(0.0, 1.0 - np.linalg.norm(pts - pos[q], axis=1) / rho)
            total = wq.sum()
            if total > 0:
                b -= coupling * mass[q] * x[q] * wq / total

    return ProblemInstance(
        A=SparseMatrix.from_scipy(A, spd=True),
        b=b,
        d=w,
        mu=geometry,
        eps=float(eps),
        grid_n=int(grid_n),
        meta={"tube_radius": float(tube_radius), "n_1d": int(n1)},
    )


def sample_sphere(dim: int, seed=None) -> np.ndarray:
    """Uniform sample from the unit sphere in ``R^dim`` (normalized Gaussian)."""
    if dim < 1:
        raise ValueError("dim must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    while True:
        v = rng.standard_normal(dim)
        n = np.linalg.norm(v)
        if n > 0:
            return v / n


@dataclass
class RhsSet:
    canonical: np.ndarray
    augmented: list

    @property
    def vectors(self):
        return np.vstack([self.canonical] + list(self.augmented))

    def __len__(self):
        return 1 + len(self.augmented)


def build_rhs_set(instance: ProblemInstance, n_augment=4, seed=0) -> RhsSet:
    """Normalized physical right-hand side plus ``n_augment`` sphere samples."""
    b = as_vector(instance.b, name="b")
    nb = np.linalg.norm(b)
    if nb == 0.0:
        raise ValueError("instance right-hand side is zero")
    rng = np.random.default_rng(seed)
    return RhsSet(b / nb, [sample_sphere(b.size, rng) for _ in range(n_augment)])


def make_dataset(seeds, grid_n, eps=0.1, n_segments=(2, 5)):
    """Instances for the given geometry seeds.

    ``n_segments`` is either a fixed count or an inclusive ``(lo, hi)``
    range sampled per seed.
    """
    out = []
    for seed in seeds:
        if np.isscalar(n_segments):
            count = int(n_segments)
        else:
            lo, hi = n_segments
            count = int(np.random.default_rng([seed, 2]).integers(lo, hi + 1))
        out.append(assemble(generate_geometry(seed, count), grid_n, eps))
    return out


# --- on-disk instances ------------------------------------------------------


def write_instance(directory, instance: ProblemInstance):
    """Write ``matrix.mtx``, ``b.vec``, ``d.vec``, ``geometry.json`` and ``meta.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_mtx(directory / "matrix.mtx", instance.A)
    write_vector(directory / "b.vec", instance.b)
    write_vector(directory / "d.vec", instance.d)
    (directory / "geometry.json").write_text(json.dumps(instance.mu.to_dict(), indent=1) + "\n")
    meta = {"grid_n": instance.grid_n, "eps": instance.eps, **instance.meta}
    (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_instance(directory) -> ProblemInstance:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    geometry = Geometry1D.from_dict(json.loads((directory / "geometry.json").read_text()))
    extra = {k: v for k, v in meta.items() if k not in ("grid_n", "eps")}
    return ProblemInstance(
        A=read_mtx(directory / "matrix.mtx", spd=True),
        b=read_vector(directory / "b.vec"),
        d=read_vector(directory / "d.vec"),
        mu=geometry,
        eps=meta["eps"],
        grid_n=meta["grid_n"],
        meta=extra,
    )
