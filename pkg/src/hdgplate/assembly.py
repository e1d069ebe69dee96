"""Assembly of the three hybrid-DG block systems for plate bending.

The solve is staged: a scalar Poisson-type system (stage one), a
perturbed saddle-point system coupling bending stress, rotation and a
stream-function pressure (stage two), the deflection Poisson-type system
driven by the computed rotation (stage three), and an algebraic shear
recovery (stage four).  Each stage is assembled in an interior/trace
block layout: the interior block is block-diagonal with one dense block
per element, the trace blocks couple elements only through single-valued
edge unknowns, and the whole matrix is symmetric (sign conventions are
chosen so the trace-row coupling equals the transpose of the
interior-to-trace block).

Edge stabilization terms involve L2 projections of interior traces onto
edge polynomial spaces; these are assembled exactly through edge mass
matrix algebra, never through pointwise approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import femspace as fs
from .mesh import Mesh

__all__ = [
    "PlateMaterial",
    "SpaceConfig",
    "stabilization",
    "constitutive_apply",
    "constitutive_inverse_apply",
    "constitutive_inverse_matrix",
    "DiscreteField",
    "StageDofMap",
    "BlockSystem",
    "ElementBlockGroup",
    "assemble_step1",
    "assemble_step2",
    "assemble_step3",
    "recover_gamma",
    "SolutionFields",
    "bh_norm",
]


# ----------------------------------------------------------------------
# material and space parameters


@dataclass(frozen=True)
class PlateMaterial:
    """Plate parameters; the shear modulus is derived, never stored."""

    E: float = 1.0
    nu: float = 0.3
    kappa: float = 5.0 / 6.0
    t: float = 1.0

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("E must be positive")
        if not 0 < self.nu <= 0.5:
            raise ValueError("nu must lie in (0, 1/2]")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not 0 < self.t <= 1:
            raise ValueError("t must lie in (0, 1]")

    @property
    def lam(self) -> float:
        return self.kappa * self.E / (2.0 * (1.0 + self.nu))


@dataclass(frozen=True)
class SpaceConfig:
    """Primary degree k >= 1 and rotation-trace degree l, max(1,k-1) <= l <= k."""

    k: int
    l: int = -1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.l == -1:
            object.__setattr__(self, "l", self.k)
        if not max(1, self.k - 1) <= self.l <= self.k:
            raise ValueError(
                f"l={self.l} outside [max(1, k-1), k] = "
                f"[{max(1, self.k - 1)}, {self.k}]")


def stabilization(element, material: PlateMaterial) -> tuple[float, float, float]:
    """Edge penalty weights (1/h_K, 1/h_K, h_K + t^2/h_K) of an element."""
    h = element.diameter if hasattr(element, "diameter") else float(element)
    if not h > 0:
        raise ValueError("element diameter must be positive")
    return 1.0 / h, 1.0 / h, h + material.t ** 2 / h


# Symmetric 2x2 tensors are stored as (11, 22, 12); the Frobenius inner
# product carries weight 2 on the off-diagonal slot.
_FROBENIUS_W = np.array([1.0, 1.0, 2.0])


def _constitutive_matrix(material: PlateMaterial) -> np.ndarray:
    a = material.E / (12.0 * (1.0 - material.nu ** 2))
    nu = material.nu
    return a * np.array([[1.0, nu, 0.0],
                         [nu, 1.0, 0.0],
                         [0.0, 0.0, 1.0 - nu]])


def _constitutive_inverse_component_matrix(material: PlateMaterial) -> np.ndarray:
    return np.linalg.inv(_constitutive_matrix(material))


def constitutive_inverse_matrix(material: PlateMaterial) -> np.ndarray:
    """Matrix K with K[a,b] = (Cinv E_a) : E_b on unit component tensors."""
    return _constitutive_inverse_component_matrix(material) * _FROBENIUS_W[None, :]


def constitutive_apply(tau: np.ndarray, material: PlateMaterial) -> np.ndarray:
    """Apply the plane-stress tensor to (..., 3) arrays of (11, 22, 12)."""
    return np.asarray(tau) @ _constitutive_matrix(material).T


def constitutive_inverse_apply(tau: np.ndarray, material: PlateMaterial) -> np.ndarray:
    return np.asarray(tau) @ _constitutive_inverse_component_matrix(material).T


# ----------------------------------------------------------------------
# batched element geometry


class _ElementBatch:
    """Stacked geometry for all elements with the same vertex count."""

    def __init__(self, mesh: Mesh, ids: np.ndarray):
        self.ids = ids
        ne = len(ids)
        nv = len(mesh.elements[ids[0]].vertex_loop)
        self.nv = nv
        self.verts = np.empty((ne, nv, 2))
        self.centroid = np.empty((ne, 2))
        self.h = np.empty(ne)
        self.area = np.empty(ne)
        self.edge_ids = np.empty((ne, nv), dtype=int)
        self.edge_signs = np.empty((ne, nv), dtype=int)
        for row, eid in enumerate(ids):
            el = mesh.elements[eid]
            self.verts[row] = mesh.points[list(el.vertex_loop)]
            self.centroid[row] = el.centroid
            self.h[row] = el.diameter
            self.area[row] = el.area
            self.edge_ids[row] = [e for e, _ in el.edges]
            self.edge_signs[row] = [s for _, s in el.edges]
        # per local edge: traversal direction = in-element tangent,
        # outward normal = tangent rotated by -90 degrees
        nxt = np.roll(self.verts, -1, axis=1)
        d = nxt - self.verts
        self.edge_len = np.hypot(d[..., 0], d[..., 1])
        self.tangents = d / self.edge_len[..., None]
        self.normals = np.stack(
            [self.tangents[..., 1], -self.tangents[..., 0]], axis=-1)

    def volume_rule(self, degree: int):
        ref, w0 = fs.triangle_reference_rule(degree)
        if self.nv == 3:
            # triangles map onto the reference rule without subdivision
            p0 = self.verts[:, 0, :][:, None, :]
            a = self.verts[:, 1, :][:, None, :] - p0
            b = self.verts[:, 2, :][:, None, :] - p0
            jac = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
            return (p0 + ref[None, :, :1] * a + ref[None, :, 1:] * b,
                    w0[None, :] * jac)
        pts, wts = [], []
        c = self.centroid[:, None, :]
        for i in range(self.nv):
            a = self.verts[:, i, :][:, None, :] - c
            b = self.verts[:, (i + 1) % self.nv, :][:, None, :] - c
            jac = (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])
            pts.append(c + ref[None, :, :1] * a + ref[None, :, 1:] * b)
            wts.append(w0[None, :] * jac)
        return np.concatenate(pts, axis=1), np.concatenate(wts, axis=1)

    def edge_rule(self, local_edge: int, degree: int):
        """Points, weights and global arclength parameter on one local edge."""
        npts = max(1, (degree + 2) // 2)
        x, w = fs.gauss_legendre_01(npts)
        p0 = self.verts[:, local_edge, :]
        p1 = self.verts[:, (local_edge + 1) % self.nv, :]
        pts = p0[:, None, :] + x[None, :, None] * (p1 - p0)[:, None, :]
        wts = w[None, :] * self.edge_len[:, local_edge][:, None]
        sign = self.edge_signs[:, local_edge][:, None]
        s = np.where(sign > 0, x[None, :], 1.0 - x[None, :])
        return pts, wts, s


def element_batches(mesh: Mesh) -> list[_ElementBatch]:
    by_nv: dict[int, list[int]] = {}
    for el in mesh.elements:
        by_nv.setdefault(len(el.vertex_loop), []).append(el.id)
    return [_ElementBatch(mesh, np.array(ids))
            for _, ids in sorted(by_nv.items())]


def _scalar_vals(exps, centroid, h, pts, dx=0, dy=0):
    """Scaled-monomial values on stacked elements: (ne, nb, nq)."""
    a = exps[:, 0].astype(float)
    b = exps[:, 1].astype(float)
    coef = np.ones_like(a)
    for _ in range(dx):
        coef, a = coef * a, np.maximum(a - 1, 0)
    for _ in range(dy):
        coef, b = coef * b, np.maximum(b - 1, 0)
    xi = (pts[..., 0] - centroid[:, None, 0]) / h[:, None]
    eta = (pts[..., 1] - centroid[:, None, 1]) / h[:, None]
    vals = (coef[None, :, None]
            * xi[:, None, :] ** a[None, :, None]
            * eta[:, None, :] ** b[None, :, None])
    if dx or dy:
        vals = vals / h[:, None, None] ** (dx + dy)
    return vals


def _ip(w, rows, cols):
    return np.einsum("eiq,ejq,eq->eij", rows, cols, w, optimize=True)


# ----------------------------------------------------------------------
# discrete fields


@dataclass
class DiscreteField:
    """Element-wise polynomial field: coefficient rows over all elements.

    Coefficients are component-major: entry ``c * nscalar + m`` multiplies
    the scaled monomial ``m`` placed in component ``c``.
    """

    mesh: Mesh
    degree: int
    rank: str
    coeffs: np.ndarray  # (num_elements, ncomp * nscalar)

    def __post_init__(self):
        self.ncomp = {"scalar": 1, "vector2": 2, "symtensor2x2": 3}[self.rank]
        self.nscalar = fs.space_dim(self.degree)
        if self.coeffs.shape != (self.mesh.num_elements, self.ncomp * self.nscalar):
            raise ValueError("coefficient array has the wrong shape")

    def values_batched(self, batch: _ElementBatch, pts: np.ndarray) -> np.ndarray:
        """(ne, ncomp, nq) values at per-element points of a batch."""
        vals = _scalar_vals(fs.monomial_exponents(self.degree),
                            batch.centroid, batch.h, pts)
        coeffs = self.coeffs[batch.ids]
        out = np.empty((len(batch.ids), self.ncomp, pts.shape[1]))
        for c in range(self.ncomp):
            block = coeffs[:, c * self.nscalar:(c + 1) * self.nscalar]
            out[:, c, :] = np.einsum("enq,en->eq", vals, block)
        return out

    def divergence_batched(self, batch: _ElementBatch, pts: np.ndarray) -> np.ndarray:
        if self.rank != "vector2":
            raise ValueError("divergence needs a vector2 field")
        exps = fs.monomial_exponents(self.degree)
        gx = _scalar_vals(exps, batch.centroid, batch.h, pts, dx=1)
        gy = _scalar_vals(exps, batch.centroid, batch.h, pts, dy=1)
        c = self.coeffs[batch.ids]
        n = self.nscalar
        return (np.einsum("enq,en->eq", gx, c[:, :n])
                + np.einsum("enq,en->eq", gy, c[:, n:]))

    def mean(self) -> float:
        """Integral mean over the whole domain (exact for the field degree)."""
        total = 0.0
        volume = 0.0
        for batch in element_batches(self.mesh):
            pts, w = batch.volume_rule(self.degree)
            vals = self.values_batched(batch, pts)
            total += float(np.einsum("ecq,eq->", vals, w))
            volume += float(w.sum())
        return total / volume


def recover_gamma(L: DiscreteField, R: DiscreteField,
                  material: PlateMaterial) -> DiscreteField:
    """Shear stress recovery: coefficient-wise L + (lam/t^2) R."""
    if L.coeffs.shape != R.coeffs.shape or L.degree != R.degree:
        raise ValueError("gradient and rotation-moment fields do not match")
    coeff = L.coeffs + material.lam / material.t ** 2 * R.coeffs
    return DiscreteField(L.mesh, L.degree, "vector2", coeff)


@dataclass
class SolutionFields:
    """Coefficient arrays of all thirteen discrete unknowns of one solve.

    Trace fields are (num_edges, per_edge) arrays with zeros on edges
    whose degrees of freedom were eliminated by the boundary condition.
    """

    mesh: Mesh
    spaces: SpaceConfig
    material: PlateMaterial
    L: DiscreteField
    r: DiscreteField
    r_hat: np.ndarray
    sigma: DiscreteField
    R: DiscreteField
    theta: DiscreteField
    theta_hat: np.ndarray
    p: DiscreteField
    p_hat: np.ndarray
    G: DiscreteField
    omega: DiscreteField
    omega_hat: np.ndarray
    gamma: DiscreteField
    reports: dict = field(default_factory=dict)


# ----------------------------------------------------------------------
# DOF maps


@dataclass(frozen=True)
class TraceField:
    name: str
    offset: int
    per_edge: int
    dirichlet: bool
    edge_rank: np.ndarray  # (num_edges,), -1 on eliminated edges

    def dofs(self, edge_ids: np.ndarray) -> np.ndarray:
        """Global dof indices (..., per_edge); -1 rows for eliminated edges."""
        rank = self.edge_rank[edge_ids]
        base = self.offset + rank[..., None] * self.per_edge
        out = base + np.arange(self.per_edge)
        out[rank < 0] = -1
        return out


class StageDofMap:
    """Interior (per-element) and trace (per-edge) numbering for one stage.

    Interior unknowns are element-major; each element owns one contiguous
    block with the per-field layout of ``interior_fields``.  Trace
    unknowns are field-major then edge-major; Dirichlet trace fields skip
    boundary edges entirely.
    """

    def __init__(self, mesh: Mesh, interior_fields, trace_fields):
        self.mesh = mesh
        self.interior_fields: dict[str, tuple[int, int]] = {}
        off = 0
        for name, size in interior_fields:
            self.interior_fields[name] = (off, size)
            off += size
        self.n_interior_per_element = off
        self.n_interior = off * mesh.num_elements

        n_edges = mesh.num_edges
        interior_rank = np.full(n_edges, -1, dtype=int)
        rank = 0
        for e in range(n_edges):
            if e not in mesh.boundary_edges:
                interior_rank[e] = rank
                rank += 1
        self.num_interior_edges = rank

        self.trace_fields: dict[str, TraceField] = {}
        off = 0
        for name, per_edge, dirichlet in trace_fields:
            er = interior_rank if dirichlet else np.arange(n_edges)
            count = rank if dirichlet else n_edges
            self.trace_fields[name] = TraceField(name, off, per_edge,
                                                 dirichlet, er.copy())
            off += count * per_edge
        self.n_trace = off

    def interior_slice(self, name: str) -> slice:
        off, size = self.interior_fields[name]
        return slice(off, off + size)

    def trace_to_edge_array(self, name: str, x2: np.ndarray) -> np.ndarray:
        """(num_edges, per_edge) coefficients; zeros on eliminated edges."""
        f = self.trace_fields[name]
        out = np.zeros((self.mesh.num_edges, f.per_edge))
        mask = f.edge_rank >= 0
        rows = f.offset + f.edge_rank[mask][:, None] * f.per_edge \
            + np.arange(f.per_edge)
        out[mask] = x2[rows]
        return out


# ----------------------------------------------------------------------
# block system


@dataclass
class ElementBlockGroup:
    """Dense local blocks for one batch of same-size elements."""

    batch: _ElementBatch
    a11: np.ndarray           # (ne, n1, n1)
    a12: np.ndarray           # (ne, n1, ntl)
    b1: np.ndarray            # (ne, n1)
    trace_indices: np.ndarray  # (ne, ntl), -1 for eliminated trace dofs


@dataclass
class BlockSystem:
    """Symmetric two-by-two block system with element-diagonal interior block."""

    dof: StageDofMap
    groups: list[ElementBlockGroup]
    a22: sp.csr_matrix
    b2: np.ndarray
    kernel_hint: np.ndarray | None = None
    stage: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_interior(self) -> int:
        return self.dof.n_interior

    @property
    def n_trace(self) -> int:
        return self.dof.n_trace

    def interior_to_global(self) -> np.ndarray:
        """Row index into the element-major interior vector per (group row)."""
        n1 = self.dof.n_interior_per_element
        return np.concatenate([g.batch.ids * n1 for g in self.groups])

    def monolithic_dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Full symmetric system (interior + trace) as dense arrays."""
        n1 = self.dof.n_interior_per_element
        ni, nt = self.n_interior, self.n_trace
        A = np.zeros((ni + nt, ni + nt))
        b = np.zeros(ni + nt)
        A[ni:, ni:] = self.a22.toarray()
        b[ni:] = self.b2
        for g in self.groups:
            for row in range(len(g.batch.ids)):
                i0 = g.batch.ids[row] * n1
                A[i0:i0 + n1, i0:i0 + n1] = g.a11[row]
                cols = g.trace_indices[row]
                keep = cols >= 0
                A[i0:i0 + n1, ni + cols[keep]] = g.a12[row][:, keep]
                A[ni + cols[keep], i0:i0 + n1] = g.a12[row][:, keep].T
                b[i0:i0 + n1] = g.b1[row]
        return A, b

    def export_matrix(self, stream) -> None:
        """Write the monolithic matrix in '(row, col, value)' text triplets."""
        A, _ = self.monolithic_dense()
        rows, cols = np.nonzero(A)
        for r, c in zip(rows, cols):
            stream.write(f"{r} {c} {float(A[r, c])!r}\n")


# ----------------------------------------------------------------------
# local block helpers


def _edge_projection_blocks(batch, local_edge, edge_degree, trace_deg, elem_deg):
    """Edge cross-mass C (edge basis x element trace) and edge mass E."""
    pts, w, s = batch.edge_rule(local_edge, edge_degree)
    ehat = s[:, None, :] ** np.arange(trace_deg + 1)[None, :, None]
    tr = _scalar_vals(fs.monomial_exponents(elem_deg),
                      batch.centroid, batch.h, pts)
    C = _ip(w, ehat, tr)          # (ne, m, nb)
    E = _ip(w, ehat, ehat)        # (ne, m, m)
    return C, E


def _stab_volume_block(C, E):
    """C^T E^{-1} C: exact edge-projection stabilization of interior traces."""
    return np.einsum("emi,emj->eij", C, np.linalg.solve(E, C), optimize=True)


def _scatter_symmetric(coo_rows, coo_cols, coo_vals, idx, local):
    """Collect a batched local trace block into COO lists, dropping -1 dofs."""
    ne, m, n = local.shape
    rows = np.broadcast_to(idx[:, :, None], (ne, m, n))
    cols = np.broadcast_to(idx[:, None, :], (ne, m, n))
    keep = (rows >= 0) & (cols >= 0)
    coo_rows.append(rows[keep])
    coo_cols.append(cols[keep])
    coo_vals.append(local[keep])


def _scatter_vector(vec, idx, local):
    keep = idx >= 0
    np.add.at(vec, idx[keep], local[keep])


# ----------------------------------------------------------------------
# stage one / three operator (shared assembly path)


def _poisson_dofmap(mesh: Mesh, spaces: SpaceConfig, trace_name: str) -> StageDofMap:
    k = spaces.k
    Ts, Tv = fs.space_dim(k - 1), fs.space_dim(k)
    return StageDofMap(
        mesh,
        interior_fields=[("flux", 2 * Ts), ("primal", Tv)],
        trace_fields=[(trace_name, k, True)],
    )


def _assemble_poisson_operator(mesh, spaces, trace_name, quad_degree, edge_degree):
    k = spaces.k
    Ts, Tv = fs.space_dim(k - 1), fs.space_dim(k)
    dof = _poisson_dofmap(mesh, spaces, trace_name)
    n1 = dof.n_interior_per_element
    tf = dof.trace_fields[trace_name]

    exps_s = fs.monomial_exponents(k - 1)
    exps_v = fs.monomial_exponents(k)

    groups = []
    coo_r, coo_c, coo_v = [], [], []
    sl_L1 = slice(0, Ts)
    sl_L2 = slice(Ts, 2 * Ts)
    sl_r = slice(2 * Ts, 2 * Ts + Tv)

    for batch in element_batches(mesh):
        ne, nv = len(batch.ids), batch.nv
        pts, w = batch.volume_rule(quad_degree)
        Vs = _scalar_vals(exps_s, batch.centroid, batch.h, pts)
        GXs = _scalar_vals(exps_s, batch.centroid, batch.h, pts, dx=1)
        GYs = _scalar_vals(exps_s, batch.centroid, batch.h, pts, dy=1)
        Vv = _scalar_vals(exps_v, batch.centroid, batch.h, pts)

        Mss = _ip(w, Vs, Vs)
        DX = _ip(w, GXs, Vv)   # rows: d/dx of P_{k-1}; cols: P_k
        DY = _ip(w, GYs, Vv)

        a11 = np.zeros((ne, n1, n1))
        a11[:, sl_L1, sl_L1] = -Mss
        a11[:, sl_L2, sl_L2] = -Mss
        a11[:, sl_L1, sl_r] = -DX
        a11[:, sl_L2, sl_r] = -DY
        a11[:, sl_r, sl_L1] = -DX.transpose(0, 2, 1)
        a11[:, sl_r, sl_L2] = -DY.transpose(0, 2, 1)

        ntl = nv * k
        a12 = np.zeros((ne, n1, ntl))
        trace_idx = np.empty((ne, ntl), dtype=int)
        alpha1 = 1.0 / batch.h

        for e in range(nv):
            Cs, _ = _edge_projection_blocks(batch, e, edge_degree, k - 1, k - 1)
            Cv, Ee = _edge_projection_blocks(batch, e, edge_degree, k - 1, k)
            # alpha1-weighted projection stabilization on the primal trace
            a11[:, sl_r, sl_r] += alpha1[:, None, None] * _stab_volume_block(Cv, Ee)

            cols = slice(e * k, (e + 1) * k)
            nrm = batch.normals[:, e, :]
            a12[:, sl_L1, cols] = nrm[:, 0, None, None] * Cs.transpose(0, 2, 1)
            a12[:, sl_L2, cols] = nrm[:, 1, None, None] * Cs.transpose(0, 2, 1)
            a12[:, sl_r, cols] = -alpha1[:, None, None] * Cv.transpose(0, 2, 1)

            idx = tf.dofs(batch.edge_ids[:, e])
            trace_idx[:, cols] = idx
            _scatter_symmetric(coo_r, coo_c, coo_v, idx,
                               alpha1[:, None, None] * Ee)

        groups.append(ElementBlockGroup(batch, a11, a12,
                                        np.zeros((ne, n1)), trace_idx))

    a22 = sp.coo_matrix(
        (np.concatenate(coo_v), (np.concatenate(coo_r), np.concatenate(coo_c))),
        shape=(dof.n_trace, dof.n_trace)).tocsr()
    return dof, groups, a22


def assemble_step1(mesh: Mesh, spaces: SpaceConfig, g: Callable,
                   quad_degree: int | None = None,
                   edge_degree: int | None = None,
                   source_degree: int | None = None) -> BlockSystem:
    """Stage-one system for the load potential: find (L, r, rhat) from g."""
    k = spaces.k
    quad_degree = 2 * k + 2 if quad_degree is None else quad_degree
    edge_degree = 2 * k + 2 if edge_degree is None else edge_degree
    source_degree = max(k + 8, quad_degree) if source_degree is None else source_degree

    dof, groups, a22 = _assemble_poisson_operator(
        mesh, spaces, "rhat", quad_degree, edge_degree)
    sl_r = dof.interior_slice("primal")
    for grp in groups:
        pts, w = grp.batch.volume_rule(source_degree)
        Vv = _scalar_vals(fs.monomial_exponents(k),
                          grp.batch.centroid, grp.batch.h, pts)
        gvals = np.asarray(g(pts[..., 0], pts[..., 1]), dtype=float)
        grp.b1[:, sl_r] = np.einsum("enq,eq,eq->en", Vv, gvals, w)

    return BlockSystem(dof, groups, a22, np.zeros(dof.n_trace), stage="step1",
                       meta={"quad_degree": quad_degree,
                             "edge_degree": edge_degree,
                             "source_degree": source_degree})


def assemble_step3(mesh: Mesh, spaces: SpaceConfig, material: PlateMaterial,
                   theta: DiscreteField, g: Callable,
                   quad_degree: int | None = None,
                   edge_degree: int | None = None,
                   source_degree: int | None = None) -> BlockSystem:
    """Stage-three system for the deflection, driven by the stage-two rotation."""
    if theta is None:
        raise ValueError("stage-three assembly needs the stage-two rotation")
    k = spaces.k
    quad_degree = 2 * k + 2 if quad_degree is None else quad_degree
    edge_degree = 2 * k + 2 if edge_degree is None else edge_degree
    source_degree = max(k + 8, quad_degree) if source_degree is None else source_degree

    dof, groups, a22 = _assemble_poisson_operator(
        mesh, spaces, "what", quad_degree, edge_degree)
    sl_r = dof.interior_slice("primal")
    tf = dof.trace_fields["what"]
    b2 = np.zeros(dof.n_trace)
    scale = material.t ** 2 / material.lam

    for grp in groups:
        batch = grp.batch
        pts, w = batch.volume_rule(source_degree)
        Vv = _scalar_vals(fs.monomial_exponents(k), batch.centroid, batch.h, pts)
        gvals = np.asarray(g(pts[..., 0], pts[..., 1]), dtype=float)
        divth = theta.divergence_batched(batch, pts)
        grp.b1[:, sl_r] = np.einsum("enq,eq,eq->en", Vv, scale * gvals - divth, w)

        # trace load <theta . n, s_hat>assembled from both adjacent elements
        for e in range(batch.nv):
            epts, ew, s = batch.edge_rule(e, edge_degree + k)
            ehat = s[:, None, :] ** np.arange(k)[None, :, None]
            thv = theta.values_batched(batch, epts)
            th_n = np.einsum("ecq,ec->eq", thv, batch.normals[:, e, :])
            load = np.einsum("emq,eq,eq->em", ehat, th_n, ew)
            _scatter_vector(b2, tf.dofs(batch.edge_ids[:, e]), load)

    return BlockSystem(dof, groups, a22, b2, stage="step3",
                       meta={"quad_degree": quad_degree,
                             "edge_degree": edge_degree,
                             "source_degree": source_degree})


# ----------------------------------------------------------------------
# stage two


def saddle_dofmap(mesh: Mesh, spaces: SpaceConfig) -> StageDofMap:
    k, l = spaces.k, spaces.l
    Ts, Tv = fs.space_dim(k - 1), fs.space_dim(k)
    return StageDofMap(
        mesh,
        interior_fields=[("sigma", 3 * Ts), ("R", 2 * Ts),
                         ("theta", 2 * Tv), ("p", Tv)],
        trace_fields=[("theta_hat", 2 * (l + 1), True), ("p_hat", k, False)],
    )


def assemble_step2(mesh: Mesh, spaces: SpaceConfig, material: PlateMaterial,
                   L: DiscreteField, f: Callable | None = None,
                   quad_degree: int | None = None,
                   edge_degree: int | None = None,
                   source_degree: int | None = None) -> BlockSystem:
    """Stage-two saddle system: find (sigma, R, theta, theta_hat, p, p_hat)."""
    if L is None:
        raise ValueError("stage-two assembly needs the stage-one flux field")
    k, l = spaces.k, spaces.l
    quad_degree = 2 * k + 2 if quad_degree is None else quad_degree
    edge_degree = 2 * k + 2 if edge_degree is None else edge_degree
    source_degree = max(k + 8, quad_degree) if source_degree is None else source_degree

    Ts, Tv = fs.space_dim(k - 1), fs.space_dim(k)
    dof = saddle_dofmap(mesh, spaces)
    n1 = dof.n_interior_per_element
    tf_th = dof.trace_fields["theta_hat"]
    tf_p = dof.trace_fields["p_hat"]
    m_th = 2 * (l + 1)

    Kinv = constitutive_inverse_matrix(material)
    lam_t2 = material.lam / material.t ** 2

    sl_sig = [slice(c * Ts, (c + 1) * Ts) for c in range(3)]
    off = 3 * Ts
    sl_R = [slice(off + c * Ts, off + (c + 1) * Ts) for c in range(2)]
    off += 2 * Ts
    sl_th = [slice(off + c * Tv, off + (c + 1) * Tv) for c in range(2)]
    off += 2 * Tv
    sl_p = slice(off, off + Tv)

    exps_s = fs.monomial_exponents(k - 1)
    exps_v = fs.monomial_exponents(k)

    groups = []
    coo_r, coo_c, coo_v = [], [], []

    for batch in element_batches(mesh):
        ne, nv = len(batch.ids), batch.nv
        pts, w = batch.volume_rule(quad_degree)
        Vs = _scalar_vals(exps_s, batch.centroid, batch.h, pts)
        GXs = _scalar_vals(exps_s, batch.centroid, batch.h, pts, dx=1)
        GYs = _scalar_vals(exps_s, batch.centroid, batch.h, pts, dy=1)
        Vv = _scalar_vals(exps_v, batch.centroid, batch.h, pts)
        GXv = _scalar_vals(exps_v, batch.centroid, batch.h, pts, dx=1)
        GYv = _scalar_vals(exps_v, batch.centroid, batch.h, pts, dy=1)

        Mss = _ip(w, Vs, Vs)
        DX = _ip(w, GXs, Vv)
        DY = _ip(w, GYs, Vv)
        EX = _ip(w, GXv, Vv)
        EY = _ip(w, GYv, Vv)

        a11 = np.zeros((ne, n1, n1))
        # stress mass, negated for the symmetric arrangement
        for ci in range(3):
            for cj in range(3):
                if Kinv[ci, cj] != 0.0:
                    a11[:, sl_sig[ci], sl_sig[cj]] = -Kinv[ci, cj] * Mss
        # (theta, div tau) coupling:  rows (11,22,12) x cols (1,2)
        for (c, u, blk) in ((0, 0, DX), (1, 1, DY), (2, 0, DY), (2, 1, DX)):
            a11[:, sl_sig[c], sl_th[u]] = -blk
            a11[:, sl_th[u], sl_sig[c]] = -blk.transpose(0, 2, 1)
        # scaled rotation-moment mass
        a11[:, sl_R[0], sl_R[0]] = lam_t2 * Mss
        a11[:, sl_R[1], sl_R[1]] = lam_t2 * Mss
        # (p, curl S) and its transpose
        a11[:, sl_R[0], sl_p] = -DY
        a11[:, sl_R[1], sl_p] = DX
        a11[:, sl_p, sl_R[0]] = -DY.transpose(0, 2, 1)
        a11[:, sl_p, sl_R[1]] = DX.transpose(0, 2, 1)
        # (curl phi, p) and its transpose
        a11[:, sl_th[0], sl_p] = -EY
        a11[:, sl_th[1], sl_p] = EX
        a11[:, sl_p, sl_th[0]] = -EY.transpose(0, 2, 1)
        a11[:, sl_p, sl_th[1]] = EX.transpose(0, 2, 1)

        ntl = nv * (m_th + k)
        a12 = np.zeros((ne, n1, ntl))
        trace_idx = np.empty((ne, ntl), dtype=int)
        alpha2 = 1.0 / batch.h
        alpha3 = batch.h + material.t ** 2 / batch.h

        for e in range(nv):
            Cls, El = _edge_projection_blocks(batch, e, edge_degree, l, k - 1)
            Clv, _ = _edge_projection_blocks(batch, e, edge_degree, l, k)
            Cks, Ek = _edge_projection_blocks(batch, e, edge_degree, k - 1, k - 1)
            Ckv, _ = _edge_projection_blocks(batch, e, edge_degree, k - 1, k)

            stab2 = alpha2[:, None, None] * _stab_volume_block(Clv, El)
            a11[:, sl_th[0], sl_th[0]] += stab2
            a11[:, sl_th[1], sl_th[1]] += stab2
            a11[:, sl_p, sl_p] -= alpha3[:, None, None] * _stab_volume_block(Ckv, Ek)

            nrm = batch.normals[:, e, :]
            tang = batch.tangents[:, e, :]
            c_th = e * m_th
            sl_that = [slice(c_th + u * (l + 1), c_th + (u + 1) * (l + 1))
                       for u in range(2)]
            c_p = nv * m_th + e * k
            sl_phat = slice(c_p, c_p + k)

            # <theta_hat, tau n>: unit tensors map n to (n1,0),(0,n2),(n2,n1)
            coeff = ((0, 0, nrm[:, 0]), (1, 1, nrm[:, 1]),
                     (2, 0, nrm[:, 1]), (2, 1, nrm[:, 0]))
            for c, u, val in coeff:
                a12[:, sl_sig[c], sl_that[u]] = \
                    val[:, None, None] * Cls.transpose(0, 2, 1)
            for u in range(2):
                a12[:, sl_R[u], sl_phat] = \
                    -tang[:, u, None, None] * Cks.transpose(0, 2, 1)
                a12[:, sl_th[u], sl_that[u]] = \
                    -alpha2[:, None, None] * Clv.transpose(0, 2, 1)
                a12[:, sl_th[u], sl_phat] = \
                    -tang[:, u, None, None] * Ckv.transpose(0, 2, 1)
            a12[:, sl_p, sl_phat] = alpha3[:, None, None] * Ckv.transpose(0, 2, 1)

            idx_th = tf_th.dofs(batch.edge_ids[:, e])  # (ne, 2(l+1))
            idx_p = tf_p.dofs(batch.edge_ids[:, e])
            trace_idx[:, c_th:c_th + m_th] = idx_th
            trace_idx[:, sl_phat] = idx_p

            a22_th = np.zeros((ne, m_th, m_th))
            a22_th[:, :l + 1, :l + 1] = alpha2[:, None, None] * El
            a22_th[:, l + 1:, l + 1:] = alpha2[:, None, None] * El
            _scatter_symmetric(coo_r, coo_c, coo_v, idx_th, a22_th)
            _scatter_symmetric(coo_r, coo_c, coo_v, idx_p,
                               -alpha3[:, None, None] * Ek)

        # load: (L + f, phi) on the rotation test rows
        b1 = np.zeros((ne, n1))
        spts, sw = batch.volume_rule(source_degree)
        Vv_s = _scalar_vals(exps_v, batch.centroid, batch.h, spts)
        load = L.values_batched(batch, spts)
        if f is not None:
            # vector callables return (2,) + points.shape
            fv = np.asarray(f(spts[..., 0], spts[..., 1]), dtype=float)
            load = load + np.moveaxis(fv, 0, 1)
        for u in range(2):
            b1[:, sl_th[u]] = np.einsum("enq,eq,eq->en", Vv_s, load[:, u, :], sw)

        groups.append(ElementBlockGroup(batch, a11, a12, b1, trace_idx))

    a22 = sp.coo_matrix(
        (np.concatenate(coo_v), (np.concatenate(coo_r), np.concatenate(coo_c))),
        shape=(dof.n_trace, dof.n_trace)).tocsr()

    # the condensed system annihilates constant pressure: mark that mode
    kernel = np.zeros(dof.n_trace)
    const_modes = tf_p.offset + np.arange(mesh.num_edges) * k
    kernel[const_modes] = 1.0
    kernel /= np.linalg.norm(kernel)

    return BlockSystem(dof, groups, a22, np.zeros(dof.n_trace),
                       kernel_hint=kernel, stage="step2",
                       meta={"quad_degree": quad_degree,
                             "edge_degree": edge_degree,
                             "source_degree": source_degree})


# ----------------------------------------------------------------------
# diagnostics


def bh_norm(mesh: Mesh, spaces: SpaceConfig, material: PlateMaterial,
            sigma: DiscreteField, R: DiscreteField, theta: DiscreteField,
            theta_hat: np.ndarray, p: DiscreteField, p_hat: np.ndarray,
            quad_degree: int | None = None) -> float:
    """Energy-type norm of a stage-two state (zero iff the state is zero).

    ``theta_hat``/``p_hat`` are (num_edges, per_edge) coefficient arrays
    with component-major layout for the vector trace.
    """
    k, l = spaces.k, spaces.l
    quad_degree = 2 * k + 2 if quad_degree is None else quad_degree
    exps_s = fs.monomial_exponents(k - 1)
    exps_v = fs.monomial_exponents(k)
    total = 0.0
    for batch in element_batches(mesh):
        pts, w = batch.volume_rule(quad_degree)
        sv = sigma.values_batched(batch, pts)
        sv2 = sv[:, 0] ** 2 + sv[:, 1] ** 2 + 2 * sv[:, 2] ** 2
        rv = R.values_batched(batch, pts)
        rv2 = (rv ** 2).sum(axis=1)
        gx_v = _scalar_vals(exps_v, batch.centroid, batch.h, pts, dx=1)
        gy_v = _scalar_vals(exps_v, batch.centroid, batch.h, pts, dy=1)
        tc = theta.coeffs[batch.ids]
        Tv = fs.space_dim(k)
        grad2 = np.zeros_like(rv2)
        for u in range(2):
            cu = tc[:, u * Tv:(u + 1) * Tv]
            grad2 += np.einsum("enq,en->eq", gx_v, cu) ** 2
            grad2 += np.einsum("enq,en->eq", gy_v, cu) ** 2
        pc = p.coeffs[batch.ids]
        perp2 = (np.einsum("enq,en->eq", gx_v, pc) ** 2
                 + np.einsum("enq,en->eq", gy_v, pc) ** 2)
        total += float(np.einsum(
            "eq,eq->", sv2 + rv2 / material.t ** 2 + grad2
            + material.t ** 2 * perp2, w))

        alpha2 = 1.0 / batch.h
        alpha3 = batch.h + material.t ** 2 / batch.h
        theta_coeffs = theta.coeffs[batch.ids]
        for e in range(batch.nv):
            epts, ew, s = batch.edge_rule(e, 2 * k + 2)
            ehat_l = s[:, None, :] ** np.arange(l + 1)[None, :, None]
            ehat_k = s[:, None, :] ** np.arange(k)[None, :, None]
            tr_v = _scalar_vals(exps_v, batch.centroid, batch.h, epts)
            El = _ip(ew, ehat_l, ehat_l)
            Ek = _ip(ew, ehat_k, ehat_k)
            th_hat_e = theta_hat[batch.edge_ids[:, e]]
            p_hat_e = p_hat[batch.edge_ids[:, e]]
            Clv = _ip(ew, ehat_l, tr_v)
            Ckv = _ip(ew, ehat_k, tr_v)
            for u in range(2):
                cu = theta_coeffs[:, u * Tv:(u + 1) * Tv]
                load = np.einsum("emj,ej->em", Clv, cu)
                proj = np.linalg.solve(El, load[..., None])[..., 0]
                diff = proj - th_hat_e[:, u * (l + 1):(u + 1) * (l + 1)]
                total += float((alpha2 * np.einsum(
                    "em,emn,en->e", diff, El, diff)).sum())
            loadp = np.einsum("emj,ej->em", Ckv, pc)
            projp = np.linalg.solve(Ek, loadp[..., None])[..., 0]
            diffp = projp - p_hat_e
            total += float((alpha3 * np.einsum(
                "em,emn,en->e", diffp, Ek, diffp)).sum())
    return float(np.sqrt(total))
