"""Desk-scale diffusion pencils with conductivity contrast.

A 1D magnetic diffusion problem on ``[0, L]`` with homogeneous Dirichlet
ends, discretized by finite differences on ``N_c`` uniform cells. The
unknowns are the ``N_c - 1`` interior nodes; node ``i`` sits between cells
``i-1`` and ``i``. The stiffness is ``(1/(mu0 h)) tridiag(-1, 2, -1)`` and
the lumped mass gives node ``i`` half of each neighbouring cell,
``h (sigma_{i-1} + sigma_i) / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .expmact import Pencil

MU0 = 4e-7 * np.pi


@dataclass(frozen=True, eq=False)
class Diffusion1D:
    length: float
    sigma: np.ndarray
    source_node: int | None = None

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if sigma.size < 2:
            raise ValueError("need at least two cells")
        if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ValueError("conductivities must be positive and finite")
        if not self.length > 0:
            raise ValueError("length must be positive")
        object.__setattr__(self, "sigma", sigma)
        node = self.source_node
        if node is None:
            node = (sigma.size - 1) // 2
        if not 0 <= node < sigma.size - 1:
            raise ValueError("source node out of range")
        object.__setattr__(self, "source_node", int(node))

    @classmethod
    def uniform(cls, n_cells: int, sigma: float, length: float = 100.0, source_node=None):
        return cls(length, np.full(n_cells, float(sigma)), source_node)

    @property
    def n_cells(self) -> int:
        return self.sigma.size

    @property
    def h(self) -> float:
        return self.length / self.n_cells

    @property
    def n_nodes(self) -> int:
        return self.n_cells - 1

    def node_position(self, i) -> np.ndarray:
        return (np.asarray(i) + 1) * self.h

    def to_dict(self) -> dict:
        return {"length": self.length, "sigma": self.sigma.tolist(),
                "source_node": self.source_node}

    @classmethod
    def from_dict(cls, d) -> Diffusion1D:
        return cls(d["length"], np.array(d["sigma"]), d.get("source_node"))


def stiffness_matrix(spec: Diffusion1D) -> np.ndarray:
    n = spec.n_nodes
    K = 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    return K / (MU0 * spec.h)


def cell_mass_components(spec: Diffusion1D) -> np.ndarray:
    """Unit-conductivity nodal mass of each cell, shape ``(N_c, N)``."""
    n, h = spec.n_nodes, spec.h
    C = np.zeros((spec.n_cells, n))
    for c in range(spec.n_cells):
        if c - 1 >= 0:
            C[c, c - 1] += 0.5 * h
        if c < n:
            C[c, c] += 0.5 * h
    return C


def build_diffusion_pencil(spec: Diffusion1D, observation=None) -> Pencil:
    """Stiffness, lumped mass and a nodal impulse source ``e_node / h``."""
    K = stiffness_matrix(spec)
    M = np.diag(spec.sigma @ cell_mass_components(spec))
    f = np.zeros(spec.n_nodes)
    f[spec.source_node] = 1.0 / spec.h
    Q = None if observation is None else observation.Q
    return Pencil(K, M, f, Q, bandwidth=1, meta={"model": "diffusion1d", **spec.to_dict()})


def analytic_uniform_eigs(spec: Diffusion1D) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigenpairs of the uniform model (M-orthonormal vectors)."""
    if np.ptp(spec.sigma) != 0:
        raise ValueError("closed form needs uniform conductivity")
    nc, h, s = spec.n_cells, spec.h, spec.sigma[0]
    k = np.arange(1, nc)
    lam = 2.0 * (1.0 - np.cos(k * np.pi / nc)) / (s * h**2 * MU0)
    i = np.arange(1, nc)
    V = np.sqrt(2.0 / nc) * np.sin(np.outer(i, k) * np.pi / nc) / np.sqrt(s * h)
    return lam, V


def analytic_uniform_transient(spec: Diffusion1D, times) -> np.ndarray:
    """Eigen-expansion ``sum_k exp(-lam_k t) v_k v_k^T f`` for the uniform model."""
    lam, V = analytic_uniform_eigs(spec)
    f = np.zeros(spec.n_nodes)
    f[spec.source_node] = 1.0 / spec.h
    return V @ (np.exp(-np.outer(lam, np.atleast_1d(times))) * (V.T @ f)[:, None])


@dataclass(frozen=True, eq=False)
class ParamModel:
    """``M(m) = sum_k exp(m_k) M_k`` over regions of cells."""

    components: tuple
    region_map: np.ndarray
    m: np.ndarray = field(default=None)

    def __post_init__(self):
        comps = tuple(np.asarray(c, dtype=float) for c in self.components)
        region_map = np.asarray(self.region_map, dtype=int)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "region_map", region_map)
        if self.m is not None:
            m = np.asarray(self.m, dtype=float)
            if m.shape != (len(comps),):
                raise ValueError("one parameter per component")
            object.__setattr__(self, "m", m)

    @property
    def n_params(self) -> int:
        return len(self.components)

    def mass(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        if m.shape != (self.n_params,) or not np.all(np.isfinite(m)):
            raise ValueError("parameter vector must be finite, one entry per component")
        M = np.zeros_like(self.components[0])
        for mk, Mk in zip(m, self.components):
            M += np.exp(mk) * Mk
        return M


def split_param_model(spec: Diffusion1D, region_map) -> ParamModel:
    """Per-region unit-conductivity mass components and the generating ``log sigma``.

    ``region_map[c]`` is the region of cell ``c``; regions must be
    ``0..P-1``, each nonempty, and uniform in conductivity.
    """
    region_map = np.asarray(region_map, dtype=int)
    if region_map.shape != (spec.n_cells,):
        raise ValueError("region map needs one entry per cell")
    P = int(region_map.max()) + 1 if region_map.size else 0
    if region_map.min() < 0 or set(np.unique(region_map)) != set(range(P)):
        raise ValueError("regions must partition the cells into labels 0..P-1")
    C = cell_mass_components(spec)
    comps, m = [], []
    for k in range(P):
        cells = region_map == k
        comps.append(np.diag(C[cells].sum(axis=0)))
        s = spec.sigma[cells]
        m.append(np.log(s[0]) if np.ptp(s) == 0 else np.nan)
    m = np.array(m)
    return ParamModel(tuple(comps), region_map, None if np.any(np.isnan(m)) else m)


def contiguous_regions(n_cells: int, n_regions: int) -> np.ndarray:
    """Region labels for ``n_regions`` contiguous blocks of nearly equal size."""
    return np.minimum((np.arange(n_cells) * n_regions) // n_cells, n_regions - 1)


@dataclass(frozen=True, eq=False)
class Observation:
    Q: np.ndarray
    descriptions: tuple

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if np.any(np.all(Q == 0, axis=1)):
            raise ValueError("observation rows must be nonzero")
        object.__setattr__(self, "Q", Q)

    def stack(self, other: Observation) -> Observation:
        return Observation(np.vstack([self.Q, other.Q]), self.descriptions + other.descriptions)


def make_observation(spec: Diffusion1D, kind: str, location: int) -> Observation:
    """A point value at node ``location`` or a centered difference around it."""
    n = spec.n_nodes
    if not 0 <= location < n:
        raise ValueError(f"location {location} outside nodes 0..{n - 1}")
    row = np.zeros(n)
    if kind == "point":
        row[location] = 1.0
        desc = f"point node {location}"
    elif kind == "derivative_stencil":
        if not 1 <= location < n - 1:
            raise ValueError("derivative stencil needs an interior node")
        row[location + 1] = 0.5 / spec.h
        row[location - 1] = -0.5 / spec.h
        desc = f"centered difference node {location}"
    else:
        raise ValueError(f"unknown observation kind {kind!r}")
    return Observation(row[None, :], (desc,))
