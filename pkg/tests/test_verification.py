import io
from fractions import Fraction

import numpy as np
import pytest

from hdgplate import assembly as asm
from hdgplate import solver as slv
from hdgplate import verification as vf
from hdgplate.assembly import DiscreteField, PlateMaterial, SpaceConfig
from hdgplate.mesh import Mesh, generate_structured


class TestPoly2:
    def test_arithmetic_is_exact(self):
        X, Y = vf.Poly2.x(), vf.Poly2.y()
        p = (X + Y) * (X - Y) - X * X + Y * Y
        assert p.is_zero()

    def test_differentiation(self):
        X, Y = vf.Poly2.x(), vf.Poly2.y()
        p = X ** 3 * Y + 2 * Y
        assert (p.dx() - 3 * X ** 2 * Y).is_zero()
        assert (p.dy() - (X ** 3 + vf.Poly2.const(2))).is_zero()

    def test_float_and_exact_eval_agree(self):
        X, Y = vf.Poly2.x(), vf.Poly2.y()
        p = 3 * X ** 2 * Y - Y ** 2 + vf.Poly2.const(Fraction(1, 4))
        assert p(0.5, 0.25) == pytest.approx(float(p.eval_exact(
            Fraction(1, 2), Fraction(1, 4))), rel=1e-15)


class TestExactSolution:
    def setup_method(self):
        self.mat = PlateMaterial(t=0.1)
        self.exact = vf.exact_fields(self.mat)

    def test_rotation_vanishes_at_center(self):
        assert self.exact.theta(0.5, 0.5) == pytest.approx([0.0, 0.0], abs=1e-12)

    def test_deflection_center_value(self):
        # independently recomputed from the closed form at t=0.1, nu=0.3
        assert self.exact.omega[0](0.5, 0.5) == pytest.approx(
            9.254092261904615e-3, rel=1e-9)

    def test_body_force_vanishes(self):
        rng = np.random.default_rng(17)
        pts = rng.uniform(0.02, 0.98, size=(2, 100))
        fvals = self.exact.f(pts[0], pts[1])
        sigma_scale = np.abs(self.exact.sigma(pts[0], pts[1])).max()
        assert np.abs(fvals).max() <= 1e-10 * sigma_scale

    def test_clamped_boundary_exactly(self):
        samples = [Fraction(i, 49) for i in range(50)]
        for field in (self.exact.theta[0], self.exact.theta[1],
                      self.exact.omega[0]):
            for s in samples:
                assert field.eval_exact(s, 0) == 0
                assert field.eval_exact(s, 1) == 0
                assert field.eval_exact(0, s) == 0
                assert field.eval_exact(1, s) == 0

    def test_load_is_thickness_independent(self):
        g_thin = vf.exact_fields(PlateMaterial(t=0.003)).g[0]
        g_thick = vf.exact_fields(PlateMaterial(t=0.9)).g[0]
        assert (g_thin - g_thick).is_zero()

    def test_shear_potentials(self):
        # gamma = grad(r) + perp_grad(p) with p identically zero here
        r = self.exact.r[0]
        assert (self.exact.gamma[0] - r.dx()).is_zero()
        assert (self.exact.gamma[1] - r.dy()).is_zero()
        assert self.exact.p[0].is_zero()

    def test_degrees(self):
        assert self.exact.omega[0].degree == 12
        assert self.exact.theta[0].degree == 11
        assert self.exact.g[0].degree == 8


class TestErrorNorms:
    def test_self_error_is_zero(self):
        mesh = generate_structured("triangle", 2)
        rng = np.random.default_rng(3)
        coeffs = rng.standard_normal((8, 3))
        fld = DiscreteField(mesh, 1, "scalar", coeffs)
        # evaluate the piecewise polynomial through the field itself
        same = lambda x, y: _piecewise_eval(fld, x, y)
        err = vf.l2_error(fld, same, quad_degree=8)
        assert err <= 1e-14 * np.abs(coeffs).max()

    def test_norm_of_x_on_unit_square(self):
        mesh = generate_structured("quadrilateral", 2)
        zero = DiscreteField(mesh, 0, "scalar", np.zeros((4, 1)))
        err = vf.l2_error(zero, lambda x, y: x, quad_degree=4)
        assert err == pytest.approx(1 / np.sqrt(3), rel=1e-13)

    def test_invariant_under_element_permutation(self):
        mesh = generate_structured("triangle", 2)
        perm = [3, 1, 7, 0, 5, 2, 6, 4]
        loops = [mesh.elements[i].vertex_loop for i in perm]
        mesh_p = Mesh(mesh.points.copy(), loops)
        exact = lambda x, y: np.sin(x) * y
        zero = DiscreteField(mesh, 1, "scalar", np.zeros((8, 3)))
        zero_p = DiscreteField(mesh_p, 1, "scalar", np.zeros((8, 3)))
        a = vf.l2_error(zero, exact, quad_degree=12)
        b = vf.l2_error(zero_p, exact, quad_degree=12)
        assert a == pytest.approx(b, rel=1e-14)

    def test_quad_degree_guard(self):
        mesh = generate_structured("triangle", 1)
        fld = DiscreteField(mesh, 2, "scalar", np.zeros((2, 6)))
        with pytest.raises(ValueError):
            vf.l2_error(fld, lambda x, y: x, quad_degree=3)

    def test_component_mismatch_rejected(self):
        mesh = generate_structured("triangle", 1)
        fld = DiscreteField(mesh, 1, "vector2", np.zeros((2, 6)))
        with pytest.raises(ValueError):
            vf.l2_error(fld, lambda x, y: x, quad_degree=4)

    def test_tensor_norm_uses_frobenius_weights(self):
        mesh = generate_structured("quadrilateral", 1)
        zero = DiscreteField(mesh, 0, "symtensor2x2", np.zeros((1, 3)))
        # constant off-diagonal tensor [[0, 1], [1, 0]]: |tau|_F^2 = 2
        err = vf.l2_error(zero, lambda x, y: np.stack(
            [0 * x, 0 * x, 1 + 0 * x]), quad_degree=2)
        assert err == pytest.approx(np.sqrt(2.0), rel=1e-13)


def _piecewise_eval(fld, x, y):
    pts = np.stack([np.asarray(x), np.asarray(y)], axis=-1)
    out = np.zeros(pts.shape[:-1])
    for batch in asm.element_batches(fld.mesh):
        vals = fld.values_batched(batch, pts if pts.ndim == 3 else
                                  pts[None].repeat(len(batch.ids), axis=0))
        out = vals[:, 0, :] if pts.ndim == 3 else vals[0, 0]
    return out


class TestObservedRate:
    def test_clean_halving(self):
        assert vf.observed_rate(4e-2, 1e-2) == pytest.approx(2.0, abs=1e-14)

    def test_stagnation(self):
        assert vf.observed_rate(1e-3, 1e-3) == 0.0

    def test_reference_table_pair(self):
        # published pair for the finest halving of the k=1 thick-plate run
        assert vf.observed_rate(3.1768e-05, 7.9517e-06) == pytest.approx(
            2.00, abs=5e-3)

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            vf.observed_rate(0.0, 1e-3)
        with pytest.raises(ValueError):
            vf.observed_rate(1e-3, -1.0)


class TestPipeline:
    def setup_method(self):
        self.mat = PlateMaterial(t=0.1)
        self.spaces = SpaceConfig(1)
        self.exact = vf.exact_fields(self.mat)
        self.mesh = generate_structured("triangle", 4)
        self.fields = vf.solve_plate(self.mesh, self.spaces, self.mat,
                                     self.exact)

    def test_gamma_recovery_identity(self):
        expect = self.fields.L.coeffs \
            + self.mat.lam / self.mat.t ** 2 * self.fields.R.coeffs
        assert np.array_equal(self.fields.gamma.coeffs, expect)

    def test_boundary_trace_coefficients_vanish(self):
        for name in ("r_hat", "theta_hat", "omega_hat"):
            arr = getattr(self.fields, name)
            for e in self.mesh.edges:
                if e.is_boundary:
                    assert np.all(arr[e.id] == 0.0)

    def test_pressure_has_zero_mean(self):
        assert abs(self.fields.p.mean()) <= 1e-12

    def test_galerkin_residual(self):
        bs1 = asm.assemble_step1(self.mesh, self.spaces, self.exact.g[0])
        x1 = np.column_stack([self.fields.L.coeffs, self.fields.r.coeffs])
        tf = bs1.dof.trace_fields["rhat"]
        mask = tf.edge_rank >= 0
        x2 = self.fields.r_hat[mask].ravel()
        assert slv.full_residual(bs1, x1, x2) <= 1e-10

    def test_field_shapes(self):
        assert self.fields.sigma.rank == "symtensor2x2"
        assert self.fields.theta.degree == 1
        assert self.fields.gamma.degree == 0
        with pytest.raises(ValueError):
            DiscreteField(self.mesh, 1, "vector2", np.zeros((3, 3)))


class TestReducedTraceDegree:
    def test_l_equals_k_minus_1_still_converges(self):
        table = vf.run_convergence(PlateMaterial(t=0.1), "tri",
                                   SpaceConfig(2, 1), [4, 8, 16])
        th, tg, sg, om = table.final_rates()
        assert th > 2.3 and om > 2.3
        assert tg > 1.5 and sg > 1.5


class TestLockingFree:
    def test_rotation_error_uniform_in_thickness(self):
        # errors for a thin and a very thin plate stay within a factor 2
        errs = []
        for t in (0.01, 1e-6):
            table = vf.run_convergence(PlateMaterial(t=t), "tri",
                                       SpaceConfig(1), [32])
            errs.append(table.reports[0].err_theta)
        assert max(errs) / min(errs) < 2.0


class TestRateTable:
    def test_single_level_has_no_rates(self):
        table = vf.run_convergence(PlateMaterial(t=0.1), "tri", SpaceConfig(1),
                                   [4])
        assert table.rates() == []
        assert table.final_rates() == (None,) * 4

    def test_non_halving_levels_skip_rates(self):
        table = vf.RateTable("triangle", SpaceConfig(1), PlateMaterial())
        table.reports = [vf.ErrorReport(2, 1, 1, 1, 1, 1),
                         vf.ErrorReport(6, 1, 1, 1, 1, 1)]
        assert table.rates() == [(None,) * 4]

    def test_csv_layout_and_determinism(self):
        table = vf.run_convergence(PlateMaterial(t=0.1), "tri", SpaceConfig(1),
                                   [2, 4])
        buf1, buf2 = io.StringIO(), io.StringIO()
        table.write_csv(buf1)
        table.write_csv(buf2)
        assert buf1.getvalue() == buf2.getvalue()
        lines = buf1.getvalue().splitlines()
        assert lines[0] == ",".join(vf.CSV_HEADER)
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[:5] == ["1", "triangle", "2", "0.1",
                             str(table.reports[0].iterations)]
        assert first[6] == ""  # no rate on the first level
        assert lines[2].split(",")[6] != ""
