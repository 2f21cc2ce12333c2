import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from kedrl.bellman import EmbeddingModel
from kedrl.data import Trajectory, flatten
from kedrl.evaluation import OPEReport, embedding_error, evaluation_points, heldout_risk, mc_embedding, w1_1d
from kedrl.exceptions import InvalidInputError
from kedrl.grid import ReturnGrid
from kedrl.kernel import MaternParams

KZ = MaternParams(2.5, 1.0, 0.5)
KX = MaternParams(1.5, 1.0, 1.0)


def model_with(coef, atoms, inputs):
    atoms = np.asarray(atoms, dtype=float)
    grid = ReturnGrid(atoms, atoms.shape[0], 1.0, 1)
    return EmbeddingModel(np.asarray(coef, float), grid, KZ, KX, 1e-3, 0.9, np.asarray(inputs, float))


def held_out_set(n_traj=4, T=3, seed=0):
    r = np.random.default_rng(seed)
    trajs = [Trajectory(r.normal(size=(T, 1)), r.uniform(size=(T, 1)), r.normal(size=(T, 1))) for _ in range(n_traj)]
    return flatten(trajs, 0.9)


class TestHeldoutRisk:
    def test_zero_coefficients(self):
        ds = held_out_set()
        model = model_with(np.zeros((3, 2)), [[0.0], [1.0]], np.zeros((3, 2)))
        assert heldout_risk(model, ds) == pytest.approx(KZ.variance, rel=1e-14)

    def test_exact_one_point(self):
        # one transition whose return equals the single atom; coefficient makes w = 1
        tr = Trajectory([[0.0], [0.0]], [[0.5], [0.5]], [[2.0], [7.0]])
        ds = flatten([tr], 0.9)
        y = 2.0 + 0.9 * 7.0
        x = ds.inputs
        model = model_with([[1.0 / KX.variance]], [[y]], x)
        assert heldout_risk(model, ds) == pytest.approx(0.0, abs=1e-14)

    def test_matches_loop(self, rng):
        ds = held_out_set(seed=1)
        atoms = rng.normal(size=(4, 1)) * 2
        x_train = rng.normal(size=(5, 2))
        coef = rng.normal(size=(5, 4)) * 0.3
        model = model_with(coef, atoms, x_train)
        total = 0.0
        for x, y in zip(ds.inputs, ds.returns_to_go):
            w = coef.T @ np.array([oracles.kern(xt, x, KX) for xt in x_train])
            atom_pts = list(atoms)
            total += oracles.discrete_mmd_sq([y], [1.0], atom_pts, w, KZ)
        assert heldout_risk(model, ds) == pytest.approx(total / len(ds), rel=1e-10)

    @given(st.integers(0, 2**32 - 1))
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        model = model_with(r.normal(size=(4, 3)), r.normal(size=(3, 1)), r.normal(size=(4, 2)))
        assert heldout_risk(model, held_out_set(seed=seed % 100)) >= 0.0

    def test_empty(self):
        model = model_with(np.zeros((1, 1)), [[0.0]], [[0.0, 0.0]])
        with pytest.raises(InvalidInputError):
            heldout_risk(model, None)


class TestEmbeddingError:
    def test_exact_reproduction(self, rng):
        mc = rng.normal(size=(30, 1))
        # atoms are the MC samples and omega equals the uniform weights
        model = model_with(np.full((1, 30), 1 / 30 / KX.variance), mc, [[0.0, 0.0]])
        pts = evaluation_points(mc, 25)
        bias, rmse, mae, e = embedding_error(model, mc, pts, np.zeros(2))
        assert max(abs(bias), rmse, mae) < 1e-15

    def test_offset_shifts_bias(self, rng):
        mc = rng.normal(size=(30, 1))
        model = model_with(rng.normal(size=(2, 4)), rng.normal(size=(4, 1)), rng.normal(size=(2, 2)))
        pts = evaluation_points(mc, 25)
        ref = mc_embedding(mc, pts, KZ)
        b0, *_ = embedding_error(model, mc, pts, np.zeros(2), reference=ref)
        b1, *_ = embedding_error(model, mc, pts, np.zeros(2), reference=ref - 0.125)
        assert b1 - b0 == pytest.approx(0.125, abs=1e-14)

    def test_metric_definitions(self, rng):
        mc = rng.normal(size=(10, 1))
        model = model_with(rng.normal(size=(2, 3)), rng.normal(size=(3, 1)), rng.normal(size=(2, 2)))
        pts = evaluation_points(mc, 7)
        bias, rmse, mae, e = embedding_error(model, mc, pts, np.zeros(2))
        assert bias == pytest.approx(np.mean(e)) and mae == pytest.approx(np.mean(np.abs(e)))
        assert rmse == pytest.approx(np.sqrt(np.mean(e**2)))

    def test_mc_embedding_loop(self, rng):
        mc = rng.normal(size=(12, 2))
        pts = rng.normal(size=(5, 2))
        expected = oracles.embed_loop(np.full(12, 1 / 12), mc, pts, KZ)
        np.testing.assert_allclose(mc_embedding(mc, pts, KZ), expected, rtol=1e-12)

    def test_evaluation_points(self):
        pts = evaluation_points(np.array([[0.0, 0.0], [1.0, 2.0]]), 5, pad=0.1)
        assert pts.shape == (25, 2)
        np.testing.assert_allclose(pts.min(axis=0), [-0.1, -0.2])
        np.testing.assert_allclose(pts.max(axis=0), [1.1, 2.2])

    def test_empty_grid(self, rng):
        model = model_with(np.zeros((1, 1)), [[0.0]], [[0.0, 0.0]])
        with pytest.raises(InvalidInputError):
            embedding_error(model, np.zeros((3, 1)), np.zeros((0, 1)), np.zeros(2))


class TestW1:
    def test_identical(self):
        assert w1_1d([1.0, 3.0, 2.0], [3.0, 2.0, 1.0]) == 0.0

    def test_single(self):
        assert w1_1d([0.0], [1.0]) == 1.0

    def test_hand(self):
        assert w1_1d([0.0, 1.0], [1.0, 2.0]) == 1.0

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=12), st.floats(-5, 5))
    def test_matches_cdf_integral(self, xs, shift):
        ys = [x + shift * (i % 2) for i, x in enumerate(xs)]
        ps = np.full(len(xs), 1 / len(xs))
        assert w1_1d(xs, ys) == pytest.approx(oracles.w1_discrete(np.array(xs), ps, np.array(ys), ps), abs=1e-9)

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            w1_1d([], [])
        with pytest.raises(InvalidInputError):
            w1_1d([1.0], [1.0, 2.0])


class TestReport:
    def test_aggregate(self):
        reps = [OPEReport(0.1, 0.2, 0.15, heldout_risk=1.0), OPEReport(-0.1, 0.4, 0.25, heldout_risk=3.0)]
        agg = OPEReport.aggregate(reps, {"a": 1})
        assert agg.bias == pytest.approx(0.0) and agg.rmse == pytest.approx(0.3)
        assert agg.rmse_sd == pytest.approx(np.std([0.2, 0.4], ddof=1))
        assert agg.heldout_risk == 2.0

    def test_single_replicate_no_sd(self):
        agg = OPEReport.aggregate([OPEReport(0.1, 0.2, 0.15)])
        assert agg.bias_sd is None and agg.rmse_sd is None

    def test_json_roundtrip(self, tmp_path):
        rep = OPEReport(0.1, 0.2, 0.15, residuals=[0.1, -0.2], heldout_risk=0.5, config={"seed": 3})
        rep.to_json(tmp_path / "r.json")
        data = json.loads((tmp_path / "r.json").read_text())
        assert data == rep.to_dict()
        rep.to_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "replicate,bias,rmse,mae,heldout_risk"

    def test_empty_aggregate(self):
        with pytest.raises(InvalidInputError):
            OPEReport.aggregate([])
