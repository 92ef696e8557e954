import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nllfr import nlfit
from nllfr.errors import DimensionError, IdentifiabilityError, InsufficientDataError
from nllfr.model import DUFFING, NllfrModel, eval_nonlinearity
from nllfr.slidewin import WzDataset


def wz(z, w):
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    return WzDataset(z.reshape(1, len(z), -1), w.reshape(1, len(w), -1))


class TestBuilders:
    def test_odd3(self):
        spec = nlfit.odd3()
        assert spec.locations[0].exponents == ((1,), (3,))

    def test_odd7_nocross_count(self):
        spec = nlfit.odd7_nocross()
        ex = spec.locations[0].exponents
        assert len(ex) == 8 and spec.n_z == 2 and spec.n_w == 1
        assert all(min(e) == 0 for e in ex)

    @pytest.mark.parametrize("n,deg,count", [(1, 5, 3), (2, 3, 6), (3, 3, 13)])
    def test_cross_term_counts(self, n, deg, count):
        ex = nlfit.odd_monomials(n, deg, cross_terms=True)
        assert len(ex) == count and all(sum(e) % 2 == 1 for e in ex)

    def test_unknown(self):
        with pytest.raises(KeyError):
            nlfit.get_poly_spec("odd9")

    def test_dict_round_trip(self):
        spec = nlfit.odd7_nocross()
        assert nlfit.get_poly_spec(spec.to_dict()) == spec

    def test_bad_exponent_shape(self):
        with pytest.raises(DimensionError):
            nlfit.PolyLocation((0, 1), ((1,),))


class TestFit:
    @given(st.floats(-1e3, 1e3), st.floats(-1e4, 1e4))
    @settings(max_examples=25, deadline=None)
    def test_exact_cubic(self, a, b):
        z = np.linspace(-0.3, 0.3, 200)
        fit = nlfit.fit_beta(wz(z, a * z + b * z ** 3), nlfit.odd3())
        np.testing.assert_allclose(fit.nonlinearity.coefficients[0], [a, b],
                                   rtol=1e-8, atol=1e-9 * (abs(a) + abs(b) + 1))

    def test_two_inputs(self, rng):
        Z = rng.uniform(-0.05, 0.05, (500, 2))
        beta = rng.standard_normal(8) * 10.0 ** rng.integers(0, 8, 8)
        spec = nlfit.odd7_nocross()
        nl = spec.to_nonlinearity().with_coefficients([beta])
        w = eval_nonlinearity(nl, Z)
        fit = nlfit.fit_beta(wz(Z, w), spec)
        np.testing.assert_allclose(fit.nonlinearity.features(Z) @ fit.nonlinearity.beta(), w,
                                   rtol=1e-7, atol=1e-9 * np.abs(w).max())
        assert fit.nrmse[0] < 1e-6

    def test_duplicate_monomial(self):
        spec = nlfit.PolySpec(1, (nlfit.PolyLocation((0,), ((1,), (3,), (1,))),))
        with pytest.raises(IdentifiabilityError) as ei:
            nlfit.fit_beta(wz(np.linspace(-1, 1, 50), np.zeros(50)), spec)
        assert ei.value.monomial == (1,)

    def test_zero_column(self):
        z = np.column_stack([np.linspace(-1, 1, 50), np.zeros(50)])
        with pytest.raises(IdentifiabilityError):
            nlfit.fit_beta(wz(z, z[:, 0]), nlfit.odd7_nocross())

    def test_collinear(self):
        # z2 = z1 makes z1 and z2 indistinguishable
        t = np.linspace(-1, 1, 50)
        with pytest.raises(IdentifiabilityError):
            nlfit.fit_beta(wz(np.column_stack([t, t]), t), nlfit.odd7_nocross())

    def test_too_few_samples(self):
        with pytest.raises(InsufficientDataError):
            nlfit.fit_beta(wz([0.1], [0.2]), nlfit.odd3())

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            nlfit.fit_beta(wz(np.ones((10, 2)), np.ones(10)), nlfit.odd3())


def test_assemble(tmp_path):
    nl = nlfit.odd3().to_nonlinearity().with_coefficients([[0.0, 500.0]])
    model = nlfit.assemble_initial_model(DUFFING, [1, 2, 100], nl, 1 / 128, {"step": 2})
    assert isinstance(model, NllfrModel) and model.provenance == {"step": 2}
    with pytest.raises(DimensionError):
        nlfit.assemble_initial_model(DUFFING, [1, 2, 100], nlfit.odd7_nocross().to_nonlinearity(), 1 / 128)


def test_scatter_csv(tmp_path):
    z = np.linspace(-0.2, 0.2, 30)
    d = wz(z, 500 * z ** 3)
    fit = nlfit.fit_beta(d, nlfit.odd3())
    nlfit.write_scatter_csv(d, fit.nonlinearity, tmp_path / "s.csv")
    data = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "z_1,w_1,w_fit_1"
    np.testing.assert_allclose(data[:, 2], data[:, 1], atol=1e-10)
