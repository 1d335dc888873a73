import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rand
from xview.detector import LayerOutput
from xview.objective import (
    COMPONENTS,
    GroundTruthEvent,
    LossConfig,
    dvc_layer_loss,
    dvc_loss,
    focal_loss,
    hungarian,
    imit_fine_loss,
    imit_overall_loss,
    temporal_giou,
    total_loss,
)
from xview.substrate import grad_check


def brute_force_assignment(cost: np.ndarray) -> float:
    n, m = cost.shape
    return min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def output(spans, fg=None, n_count=None):
    spans = torch.as_tensor(spans, dtype=torch.float64)
    n = spans.shape[0]
    return LayerOutput(
        spans=spans,
        fg_logits=torch.zeros(n) if fg is None else torch.logit(torch.as_tensor(fg, dtype=torch.float64)),
        error_logits=torch.zeros(n),
        count_logits=torch.zeros(n if n_count is None else n_count),
        overall_logit=torch.tensor(0.0),
        references=torch.full((n,), 0.5),
    )


def test_giou_examples():
    assert float(temporal_giou([[0.0, 0.4]], [[0.6, 1.0]])) == pytest.approx(-0.2, abs=1e-12)
    assert float(temporal_giou([[0.0, 0.2]], [[0.8, 1.0]])) == pytest.approx(-0.6, abs=1e-12)
    assert float(temporal_giou([[0.0, 0.5]], [[0.4, 0.6]])) == pytest.approx(0.1 / 0.6, abs=1e-12)
    assert float(temporal_giou([[0.2, 0.7]], [[0.2, 0.7]])) == pytest.approx(1.0, abs=1e-12)


def test_giou_nested_equals_iou():
    assert float(temporal_giou([[0.0, 1.0]], [[0.4, 0.6]])) == pytest.approx(0.2, abs=1e-12)


@settings(deadline=None, max_examples=60)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_giou_range_and_symmetry(v):
    a = [[min(v[0], v[1]), max(v[0], v[1])]]
    b = [[min(v[2], v[3]), max(v[2], v[3])]]
    g = float(temporal_giou(a, b))
    assert -1.0 < g <= 1.0 + 1e-12
    assert g == pytest.approx(float(temporal_giou(b, a)), abs=1e-12)


def test_giou_gradcheck():
    def f(c):
        spans = torch.stack([c[:, 0] - c[:, 1], c[:, 0] + c[:, 1]], dim=-1)
        return temporal_giou(spans, torch.tensor([[0.1, 0.5], [0.3, 0.9]]))

    c = torch.tensor([[0.3, 0.1], [0.6, 0.2], [0.5, 0.05]])
    rep = grad_check(f, [c], tol=1e-6)
    assert rep.passed, rep


def test_focal_example():
    v = float(focal_loss(torch.tensor(0.5), torch.tensor(1.0)))
    assert v == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
    assert v == pytest.approx(0.0433, abs=1e-4)
    neg = float(focal_loss(torch.tensor(0.5), torch.tensor(0.0)))
    assert neg == pytest.approx(0.75 * 0.25 * math.log(2), abs=1e-12)


def test_focal_gamma_zero_is_weighted_bce():
    p = torch.tensor([0.2, 0.7])
    t = torch.tensor([1.0, 0.0])
    got = focal_loss(p, t, alpha=0.5, gamma=0.0)
    bce = torch.nn.functional.binary_cross_entropy(p, t, reduction="none")
    assert torch.allclose(got, 0.5 * bce, atol=1e-14)


def test_focal_saturated_probabilities_are_finite():
    assert torch.isfinite(focal_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]))).all()


def test_focal_gradcheck():
    rep = grad_check(lambda x: focal_loss(torch.sigmoid(x), torch.tensor([1.0, 0.0, 1.0])), [rand(3)], tol=1e-6)
    assert rep.passed, rep


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(200):
        m = int(rng.integers(1, 8))
        n = int(rng.integers(m, 8))
        cost = rng.random((n, m)) if trial % 3 else rng.integers(0, 4, (n, m)).astype(float)
        rows, cols = hungarian(cost)
        assert sorted(cols.tolist()) == list(range(m))
        assert len(set(rows.tolist())) == m
        assert cost[rows, cols].sum() == brute_force_assignment(cost)


def test_hungarian_one_by_one_and_empty():
    rows, cols = hungarian(np.array([[3.0]]))
    assert rows.tolist() == [0] and cols.tolist() == [0]
    rows, cols = hungarian(np.zeros((4, 0)))
    assert rows.size == 0


def test_hungarian_too_few_queries():
    with pytest.raises(ValueError, match="n_queries"):
        hungarian(np.zeros((2, 3)))


def test_hungarian_identity_permutation():
    cost = 1.0 - np.eye(5)
    rows, cols = hungarian(cost)
    assert rows.tolist() == cols.tolist() == list(range(5))


def test_ground_truth_validation():
    with pytest.raises(ValueError):
        GroundTruthEvent(0.5, 0.5)
    with pytest.raises(ValueError):
        GroundTruthEvent(-0.1, 0.5)


def test_loss_config_rejects_captioning_and_negatives():
    with pytest.raises(ValueError):
        LossConfig(beta_cap=1.0)
    with pytest.raises(ValueError):
        LossConfig(beta_giou=-1.0)


def test_perfect_prediction_has_zero_giou_term():
    gts = [GroundTruthEvent(0.1, 0.3), GroundTruthEvent(0.5, 0.9)]
    out = output([[0.5, 0.9], [0.0, 1.0], [0.1, 0.3]])
    terms, rows = dvc_layer_loss(out, gts, LossConfig())
    assert float(terms["giou"]) == pytest.approx(0.0, abs=1e-12)
    assert rows.tolist() == [2, 0]


def test_count_term_uniform_logits():
    gts = [GroundTruthEvent(0.1, 0.3)]
    out = output([[0.0, 0.2]] * 10)
    terms, _ = dvc_layer_loss(out, gts, LossConfig())
    assert float(terms["ec"]) == pytest.approx(math.log(10), abs=1e-12)


def test_no_ground_truth_is_all_background():
    out = output([[0.0, 0.2]] * 3, fg=[0.5, 0.5, 0.5])
    terms, rows = dvc_layer_loss(out, [], LossConfig())
    assert rows.size == 0
    assert float(terms["cls"]) == pytest.approx(0.75 * 0.25 * math.log(2), abs=1e-12)
    assert float(terms["giou"]) == 0.0


def test_caption_term_is_zero():
    terms, _ = dvc_layer_loss(output([[0.0, 0.2]] * 3), [GroundTruthEvent(0, 0.2)], LossConfig())
    assert float(terms["cap"]) == 0.0


def test_dvc_loss_sums_layers():
    gts = [GroundTruthEvent(0.1, 0.3)]
    a = output([[0.1, 0.2], [0.5, 0.7]])
    b = output([[0.1, 0.3], [0.5, 0.7]])
    total, _ = dvc_loss([a, b], gts, LossConfig())
    ta, _ = dvc_layer_loss(a, gts, LossConfig())
    tb, _ = dvc_layer_loss(b, gts, LossConfig())
    for k in ("giou", "cls", "ec"):
        assert float(total[k]) == pytest.approx(float(ta[k] + tb[k]), abs=1e-14)


def test_imitation_losses_at_zero_logit():
    assert float(imit_fine_loss(torch.zeros(3), [1, 0, 1])) == pytest.approx(math.log(2), abs=1e-12)
    assert float(imit_overall_loss(torch.tensor(0.0), 1)) == pytest.approx(math.log(2), abs=1e-12)
    assert float(imit_fine_loss(torch.zeros(0), [])) == 0.0


def test_imitation_gradcheck():
    rep = grad_check(lambda x: imit_fine_loss(x, [1, 0, 1]).reshape(1), [rand(3)], tol=1e-6)
    assert rep.passed, rep


def test_total_loss_weights():
    cfg = LossConfig()
    comps = {k: torch.tensor(1.0) for k in COMPONENTS}
    total, report = total_loss(comps, cfg)
    expected = cfg.beta_giou + cfg.beta_cls + cfg.beta_ec + 2 * cfg.lambda_imit + cfg.lambda_sel + cfg.lambda_vic + cfg.lambda_ent + cfg.lambda_div
    assert float(total) == pytest.approx(expected, abs=1e-12)
    assert report.total == pytest.approx(expected)
    assert "giou=1" in report.line()


def test_total_loss_gradient_is_linear():
    x = rand(3).requires_grad_(True)
    comps = {"giou": x.pow(2).sum(), "cls": x.sin().sum()}
    total, _ = total_loss(comps, LossConfig(beta_giou=2.0, beta_cls=3.0))
    (g,) = torch.autograd.grad(total, x)
    assert torch.allclose(g, 4.0 * x + 3.0 * x.cos(), atol=1e-14)
