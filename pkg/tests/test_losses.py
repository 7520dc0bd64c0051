import json
import math

import numpy as np
import pytest
import torch

import oracles
from crowdflow.losses import (
    BCE_EPS,
    EvalReport,
    density_loss,
    evaluate,
    seg_bce_loss,
    total_loss,
)


def test_density_loss_matches_loop_oracle():
    rng = np.random.default_rng(21)
    for _ in range(20):
        shape = tuple(rng.integers(1, 8, size=int(rng.integers(1, 4))))
        pred = rng.standard_normal(shape)
        gt = rng.standard_normal(shape)
        got = float(density_loss(pred, gt))
        assert got == pytest.approx(oracles.mse_loss_reference(pred, gt), rel=1e-12)


def test_density_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        density_loss(np.zeros((2, 3)), np.zeros((3, 2)))


def test_bce_matches_loop_oracle():
    rng = np.random.default_rng(22)
    for _ in range(20):
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        pred = rng.uniform(0.0, 1.0, size=shape)
        gt = (rng.uniform(size=shape) > 0.5).astype(np.float64)
        got = float(seg_bce_loss(pred, gt))
        assert got == pytest.approx(oracles.bce_reference(pred, gt, BCE_EPS), rel=1e-10)


def test_bce_finite_at_extreme_predictions():
    pred = np.array([[0.0, 1.0], [1.0, 0.0]])
    gt = np.array([[1.0, 0.0], [1.0, 0.0]])
    val = float(seg_bce_loss(pred, gt))
    assert math.isfinite(val)
    # all four pixels are maximally wrong or right at the clamp boundary
    assert val == pytest.approx(oracles.bce_reference(pred, gt, BCE_EPS), rel=1e-10)


def test_bce_zero_when_correct_and_confident():
    pred = np.array([[1.0, 0.0]])
    gt = np.array([[1.0, 0.0]])
    assert float(seg_bce_loss(pred, gt)) == pytest.approx(0.0, abs=1e-6)


def test_total_loss_composition():
    bd = total_loss(2.0, 3.0, 0.5)
    assert bd.l_total == pytest.approx(3.5)
    assert bd.l_den == 2.0 and bd.l_seg == 3.0
    bd0 = total_loss(2.0, 3.0, 0.0)
    assert bd0.l_total == pytest.approx(2.0)
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.5)


def test_total_loss_keeps_autograd_graph():
    a = torch.tensor(2.0, requires_grad=True)
    b = torch.tensor(3.0, requires_grad=True)
    bd = total_loss(a, b, 2.0)
    bd.l_total.backward()
    assert a.grad.item() == pytest.approx(1.0)
    assert b.grad.item() == pytest.approx(2.0)


def test_evaluate_known_pairs():
    report = evaluate([(10.0, 12.0), (20.0, 17.0)])
    assert report.mae == pytest.approx(2.5, abs=1e-12)
    assert report.mse == pytest.approx(math.sqrt(6.5), abs=1e-12)
    assert report.n == 2


def test_evaluate_matches_loop_oracles():
    rng = np.random.default_rng(23)
    for _ in range(50):
        n = int(rng.integers(1, 30))
        pairs = [(float(g), float(p)) for g, p in rng.uniform(0, 100, size=(n, 2))]
        report = evaluate(pairs)
        assert report.mae == pytest.approx(oracles.mae_reference(pairs), rel=1e-12)
        assert report.mse == pytest.approx(oracles.rmse_reference(pairs), rel=1e-12)
        assert report.mse >= report.mae - 1e-12


def test_evaluate_empty_rejected():
    with pytest.raises(ValueError):
        evaluate([])


def test_report_json_round_trip():
    report = evaluate([(1.0, 2.0), (3.0, 3.0)])
    data = json.loads(report.to_json())
    assert data["n"] == 2
    assert data["mae"] == pytest.approx(report.mae)
    assert data["per_frame"] == [[1.0, 2.0], [3.0, 3.0]]
    assert list(data) == sorted(data)


def test_report_fields():
    report = EvalReport(mae=1.0, mse=2.0, per_frame=[(1.0, 2.0)])
    assert report.to_dict()["mse"] == 2.0
