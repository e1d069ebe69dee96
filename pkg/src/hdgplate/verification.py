"""Manufactured-solution verification: exact fields, errors and rate tables.

The benchmark is a clamped unit-square plate with a polynomial rotation
and deflection whose body force vanishes identically.  All dependent
fields (shear stress, bending stress, transverse load) are derived from
the strong form by exact rational-coefficient polynomial arithmetic, so
a transcription error would show up as a nonzero body-force residual.
The transverse load is obtained from the strong form rather than from
any closed-form shortcut; its validity is certified by that residual.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numpy.polynomial.polynomial import polyval2d

from . import assembly as asm
from . import solver as slv
from .assembly import (DiscreteField, PlateMaterial, SolutionFields,
                       SpaceConfig, element_batches, recover_gamma)
from .mesh import Mesh, generate_structured

__all__ = [
    "Poly2",
    "PolyField",
    "ExactSolution",
    "exact_fields",
    "SolutionFields",
    "solve_plate",
    "l2_error",
    "table_errors",
    "observed_rate",
    "ErrorReport",
    "RateTable",
    "run_convergence",
    "CSV_HEADER",
]


# ----------------------------------------------------------------------
# exact bivariate polynomials


class Poly2:
    """Bivariate polynomial with exact Fraction coefficients."""

    __slots__ = ("coeffs",)

    def __init__(self, coeffs: dict | None = None):
        self.coeffs = {}
        if coeffs:
            for key, val in coeffs.items():
                val = Fraction(val)
                if val != 0:
                    self.coeffs[key] = val

    @classmethod
    def const(cls, value) -> "Poly2":
        return cls({(0, 0): Fraction(value)})

    @classmethod
    def x(cls) -> "Poly2":
        return cls({(1, 0): Fraction(1)})

    @classmethod
    def y(cls) -> "Poly2":
        return cls({(0, 1): Fraction(1)})

    def __add__(self, other):
        other = other if isinstance(other, Poly2) else Poly2.const(other)
        out = dict(self.coeffs)
        for key, val in other.coeffs.items():
            out[key] = out.get(key, Fraction(0)) + val
        return Poly2(out)

    __radd__ = __add__

    def __neg__(self):
        return Poly2({k: -v for k, v in self.coeffs.items()})

    def __sub__(self, other):
        other = other if isinstance(other, Poly2) else Poly2.const(other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Poly2):
            factor = Fraction(other)
            return Poly2({k: v * factor for k, v in self.coeffs.items()})
        out: dict = {}
        for (a1, b1), v1 in self.coeffs.items():
            for (a2, b2), v2 in other.coeffs.items():
                key = (a1 + a2, b1 + b2)
                out[key] = out.get(key, Fraction(0)) + v1 * v2
        return Poly2(out)

    __rmul__ = __mul__

    def __pow__(self, n: int):
        out = Poly2.const(1)
        for _ in range(n):
            out = out * self
        return out

    def dx(self) -> "Poly2":
        return Poly2({(a - 1, b): a * v
                      for (a, b), v in self.coeffs.items() if a > 0})

    def dy(self) -> "Poly2":
        return Poly2({(a, b - 1): b * v
                      for (a, b), v in self.coeffs.items() if b > 0})

    @property
    def degree(self) -> int:
        return max((a + b for (a, b) in self.coeffs), default=0)

    def is_zero(self) -> bool:
        return not self.coeffs

    def float_matrix(self) -> np.ndarray:
        if not self.coeffs:
            return np.zeros((1, 1))
        da = max(a for a, _ in self.coeffs)
        db = max(b for _, b in self.coeffs)
        mat = np.zeros((da + 1, db + 1))
        for (a, b), v in self.coeffs.items():
            mat[a, b] = float(v)
        return mat

    def __call__(self, x, y):
        return polyval2d(np.asarray(x, float), np.asarray(y, float),
                         self.float_matrix())

    def eval_exact(self, x, y) -> Fraction:
        """Round-off-free evaluation at a rational point."""
        x, y = Fraction(x), Fraction(y)
        return sum((v * x ** a * y ** b for (a, b), v in self.coeffs.items()),
                   Fraction(0))


class PolyField:
    """Tuple of polynomial components evaluated as (ncomp,) + shape arrays."""

    def __init__(self, components):
        self.components = tuple(components)
        self.ncomp = len(self.components)

    def __call__(self, x, y):
        return np.stack([c(x, y) for c in self.components])

    def __getitem__(self, i) -> Poly2:
        return self.components[i]


# ----------------------------------------------------------------------
# the manufactured solution


@dataclass(frozen=True)
class ExactSolution:
    """Closed-form clamped-plate solution and all derived exact fields."""

    material: PlateMaterial
    theta: PolyField       # rotation (2)
    omega: PolyField       # deflection (1), contains the t^2 correction
    gamma: PolyField       # shear stress (2), t-independent
    sigma: PolyField       # bending stress (3: 11, 22, 12)
    g: PolyField           # transverse load (1), derived from the strong form
    f: PolyField           # body force residual (2), vanishes identically
    r: PolyField           # gradient potential of the shear stress (1)
    p: PolyField           # rotated-gradient potential (1), zero here


def exact_fields(material: PlateMaterial = PlateMaterial()) -> ExactSolution:
    """Build the polynomial benchmark fields for the given parameters.

    All arithmetic is exact: float parameters are converted to their
    exact binary rationals, so differentiation and cancellation carry no
    round-off.  The body force comes out identically zero only for shear
    correction factor 5/6; for other values it is reported as-is.
    """
    E = Fraction(material.E)
    nu = Fraction(material.nu)
    kappa = Fraction(material.kappa)
    t2 = Fraction(material.t) ** 2
    lam = kappa * E / (2 * (1 + nu))

    X, Y = Poly2.x(), Poly2.y()
    one = Poly2.const(1)
    A = (X * (X - one)) ** 3
    B = (Y * (Y - one)) ** 3
    theta1 = 100 * B * X ** 2 * (X - one) ** 2 * (2 * X - one)
    theta2 = 100 * A * Y ** 2 * (Y - one) ** 2 * (2 * Y - one)

    bubble_x = X * (X - one) * (5 * X * X - 5 * X + one)
    bubble_y = Y * (Y - one) * (5 * Y * Y - 5 * Y + one)
    base = Fraction(100, 3) * A * B
    corr = (-Fraction(40) / (1 - nu)) * (B * bubble_x + A * bubble_y)
    omega = base + t2 * corr

    gamma1 = (omega.dx() - theta1) * (lam / t2)
    gamma2 = (omega.dy() - theta2) * (lam / t2)

    a = E / (12 * (1 - nu * nu))
    e11, e22 = theta1.dx(), theta2.dy()
    e12 = (theta1.dy() + theta2.dx()) * Fraction(1, 2)
    s11 = a * ((1 - nu) * e11 + nu * (e11 + e22))
    s22 = a * ((1 - nu) * e22 + nu * (e11 + e22))
    s12 = a * (1 - nu) * e12

    g = -(gamma1.dx() + gamma2.dy())
    f1 = -(s11.dx() + s12.dy()) - gamma1
    f2 = -(s12.dx() + s22.dy()) - gamma2

    return ExactSolution(
        material=material,
        theta=PolyField([theta1, theta2]),
        omega=PolyField([omega]),
        gamma=PolyField([gamma1, gamma2]),
        sigma=PolyField([s11, s22, s12]),
        g=PolyField([g]),
        f=PolyField([f1, f2]),
        r=PolyField([lam * corr]),
        p=PolyField([Poly2()]),
    )


# ----------------------------------------------------------------------
# errors


_COMPONENT_WEIGHTS = {"scalar": np.array([1.0]),
                      "vector2": np.array([1.0, 1.0]),
                      "symtensor2x2": np.array([1.0, 1.0, 2.0])}


def l2_error(fld: DiscreteField, exact, quad_degree: int = 26) -> float:
    """Broken L2 norm of (exact - field); Frobenius norm for tensors.

    ``exact`` is any callable returning (ncomp,) + points.shape values;
    pass a zero-coefficient field to measure the norm of ``exact`` itself.
    """
    weights = _COMPONENT_WEIGHTS[fld.rank]
    if quad_degree < 2 * fld.degree:
        raise ValueError("error quadrature degree too low for the field")
    total = 0.0
    for batch in element_batches(fld.mesh):
        pts, w = batch.volume_rule(quad_degree)
        vals = fld.values_batched(batch, pts)
        ex = np.asarray(exact(pts[..., 0], pts[..., 1]), dtype=float)
        if ex.ndim == 2:
            ex = ex[None, ...]
        if ex.shape[0] != fld.ncomp:
            raise ValueError(
                f"exact field has {ex.shape[0]} components, "
                f"discrete field has {fld.ncomp}")
        diff = np.moveaxis(ex, 0, 1) - vals
        total += float(np.einsum("ecq,c,eq->", diff ** 2, weights, w))
    return float(np.sqrt(total))


def observed_rate(e_coarse: float, e_fine: float) -> float:
    """log2 of the error ratio under one mesh halving."""
    if e_coarse <= 0 or e_fine <= 0:
        raise ValueError("errors must be positive to define a rate")
    return float(np.log2(e_coarse / e_fine))


# ----------------------------------------------------------------------
# staged solve


def solve_plate(mesh: Mesh, spaces: SpaceConfig, material: PlateMaterial,
                exact: ExactSolution | None = None,
                g=None, f=None,
                config: slv.SolverConfig = slv.SolverConfig()) -> SolutionFields:
    """Run the four solution stages on one mesh and collect all fields."""
    if exact is not None:
        g = exact.g[0]
        f = None  # body force vanishes for the benchmark
    if g is None:
        raise ValueError("either an exact solution or a load g is required")
    k = spaces.k

    bs1 = asm.assemble_step1(mesh, spaces, g)
    x1, x2, rep1 = slv.solve_stage(bs1, config)
    dof1 = bs1.dof
    L = DiscreteField(mesh, k - 1, "vector2", x1[:, dof1.interior_slice("flux")])
    r = DiscreteField(mesh, k, "scalar", x1[:, dof1.interior_slice("primal")])
    r_hat = dof1.trace_to_edge_array("rhat", x2)

    bs2 = asm.assemble_step2(mesh, spaces, material, L, f)
    y1, y2, rep2 = slv.solve_stage(bs2, config)
    dof2 = bs2.dof
    sigma = DiscreteField(mesh, k - 1, "symtensor2x2",
                          y1[:, dof2.interior_slice("sigma")])
    R = DiscreteField(mesh, k - 1, "vector2", y1[:, dof2.interior_slice("R")])
    theta = DiscreteField(mesh, k, "vector2", y1[:, dof2.interior_slice("theta")])
    p = DiscreteField(mesh, k, "scalar", y1[:, dof2.interior_slice("p")])
    # fix the pressure constant: shift the pair (p, p_hat) to zero mean
    shift = p.mean()
    p.coeffs[:, 0] -= shift
    tf_p = dof2.trace_fields["p_hat"]
    y2[tf_p.offset + np.arange(mesh.num_edges) * k] -= shift
    theta_hat = dof2.trace_to_edge_array("theta_hat", y2)
    p_hat = dof2.trace_to_edge_array("p_hat", y2)

    bs3 = asm.assemble_step3(mesh, spaces, material, theta, g)
    z1, z2, rep3 = slv.solve_stage(bs3, config)
    dof3 = bs3.dof
    G = DiscreteField(mesh, k - 1, "vector2", z1[:, dof3.interior_slice("flux")])
    omega = DiscreteField(mesh, k, "scalar", z1[:, dof3.interior_slice("primal")])
    omega_hat = dof3.trace_to_edge_array("what", z2)

    gamma = recover_gamma(L, R, material)

    return SolutionFields(mesh, spaces, material, L, r, r_hat, sigma, R,
                          theta, theta_hat, p, p_hat, G, omega, omega_hat,
                          gamma, reports={"step1": rep1, "step2": rep2,
                                          "step3": rep3})


# ----------------------------------------------------------------------
# convergence studies


CSV_HEADER = ["k", "mesh_kind", "n", "t", "iter",
              "err_theta", "rate_theta", "err_tgamma", "rate_tgamma",
              "err_sigma", "rate_sigma", "err_omega", "rate_omega"]

_KIND_ALIASES = {"tri": "triangle", "triangle": "triangle",
                 "quad": "quadrilateral", "quadrilateral": "quadrilateral"}


@dataclass
class ErrorReport:
    """Per-level errors; the L2 norms match the benchmark table columns."""

    n: int
    iterations: int
    err_theta: float
    err_tgamma: float
    err_sigma: float
    err_omega: float
    wall_time: float = 0.0

    def errors(self) -> tuple[float, float, float, float]:
        return (self.err_theta, self.err_tgamma, self.err_sigma, self.err_omega)


@dataclass
class RateTable:
    mesh_kind: str
    spaces: SpaceConfig
    material: PlateMaterial
    reports: list = field(default_factory=list)

    def rates(self) -> list[tuple[float, float, float, float]]:
        """Observed rates between consecutive halvings; None where undefined."""
        out = []
        for prev, cur in zip(self.reports, self.reports[1:]):
            if cur.n != 2 * prev.n:
                out.append((None,) * 4)
            else:
                out.append(tuple(observed_rate(a, b)
                                 for a, b in zip(prev.errors(), cur.errors())))
        return out

    def final_rates(self):
        return self.rates()[-1] if len(self.reports) > 1 else (None,) * 4

    def write_csv(self, stream) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        rates = [(None,) * 4] + self.rates()
        for rep, rate in zip(self.reports, rates):
            cells = [self.spaces.k, self.mesh_kind, rep.n,
                     f"{self.material.t:g}", rep.iterations]
            for err, rt in zip(rep.errors(), rate):
                cells.append(f"{err:.10e}")
                cells.append("" if rt is None else f"{rt:.4f}")
            writer.writerow(cells)


def table_errors(fields: SolutionFields, exact: ExactSolution,
                 quad_degree: int = 26):
    """The four table norms, sharing quadrature data across fields."""
    mat = fields.material
    acc = np.zeros(4)
    jobs = ((0, fields.theta, exact.theta, (1.0, 1.0)),
            (1, fields.gamma, exact.gamma, (1.0, 1.0)),
            (2, fields.sigma, exact.sigma, (1.0, 1.0, 2.0)),
            (3, fields.omega, exact.omega, (1.0,)))
    for batch in element_batches(fields.mesh):
        pts, w = batch.volume_rule(quad_degree)
        x, y = pts[..., 0], pts[..., 1]
        for slot, fld, ex, weights in jobs:
            vals = fld.values_batched(batch, pts)
            for c, wc in enumerate(weights):
                diff = ex[c](x, y) - vals[:, c, :]
                acc[slot] += wc * float(np.einsum("eq,eq->", diff ** 2, w))
    errs = np.sqrt(acc)
    return errs[0], mat.t * errs[1], errs[2], errs[3]


def run_convergence(material: PlateMaterial, kind: str, spaces: SpaceConfig,
                    levels, config: slv.SolverConfig = slv.SolverConfig(),
                    error_degree: int = 26) -> RateTable:
    """Solve on a sequence of structured meshes and tabulate errors.

    ``levels`` lists the cells-per-side counts; consecutive entries
    related by doubling get rate entries.  The reported iteration count
    is the outer CG iteration count of the stage-two trace solve.
    """
    kind = _KIND_ALIASES[kind]
    exact = exact_fields(material)
    table = RateTable(kind, spaces, material)
    for n in levels:
        t0 = time.perf_counter()
        mesh = generate_structured(kind, n)
        fields = solve_plate(mesh, spaces, material, exact, config=config)
        for stage, rep in fields.reports.items():
            if not rep.converged:
                raise RuntimeError(
                    f"level n={n}: {stage} solve did not reach tolerance "
                    f"(residual {rep.residual:.3e})")
        err_theta, err_tgamma, err_sigma, err_omega = table_errors(
            fields, exact, error_degree)
        table.reports.append(ErrorReport(
            n, fields.reports["step2"].iterations,
            err_theta, err_tgamma, err_sigma, err_omega,
            wall_time=time.perf_counter() - t0))
    return table
