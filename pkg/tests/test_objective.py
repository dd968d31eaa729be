import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from spin.config import ModelConfig
from spin.model import HeadOutput, Prediction, SpinModel
from spin.objective import (
    LambdaSchedule,
    MaskPlan,
    attribute_loss,
    label_loss,
    lambda_at,
    position_losses,
    sample_masks,
    total_loss,
)
from spin.schema import CATEGORICAL, CONTINUOUS, INPUT, TARGET, Attribute, Schema


def kmer_schema(p=3, k=2, vocab=32):
    attrs = [Attribute(f"x{i}", CATEGORICAL, INPUT, vocab) for i in range(p)]
    attrs += [Attribute(f"y{i}", CATEGORICAL, TARGET, vocab) for i in range(k)]
    return Schema(tuple(attrs))


def categorical_prediction(logits):
    b, d, v = logits.shape
    return Prediction([HeadOutput(torch.arange(d), logits, True)], d)


def test_sample_masks_rate_zero_and_one():
    schema = kmer_schema()
    plan = sample_masks(schema, 7, 0.0, seed=1)
    assert not plan.attr_masked.any()
    assert plan.label_masked[:, schema.target_idx].all()
    assert not plan.label_masked[:, schema.input_idx].any()
    plan = sample_masks(schema, 7, 1.0, seed=1)
    assert plan.attr_masked[:, schema.input_idx].all()
    assert not plan.attr_masked[:, schema.target_idx].any()


def test_sample_masks_empirical_rate():
    schema = Schema((Attribute("x", CATEGORICAL, INPUT, 2), Attribute("y", CATEGORICAL, TARGET, 2)))
    plan = sample_masks(schema, 100_000, 0.3, seed=0)
    freq = plan.attr_masked[:, 0].mean()
    assert 0.295 <= freq <= 0.305


def test_sample_masks_deterministic_and_respects_observed():
    schema = kmer_schema()
    a = sample_masks(schema, 20, 0.5, seed=3)
    b = sample_masks(schema, 20, 0.5, seed=3)
    assert np.array_equal(a.attr_masked, b.attr_masked)
    observed = np.ones((20, schema.d), dtype=bool)
    observed[:, 0] = False
    c = sample_masks(schema, 20, 1.0, seed=3, observed=observed)
    assert not c.attr_masked[:, 0].any()


def test_sample_masks_rejects_bad_rate():
    with pytest.raises(ValueError):
        sample_masks(kmer_schema(), 2, 1.5)


def test_label_loss_uniform_logits_is_log_vocab():
    schema = kmer_schema()
    logits = torch.zeros(4, schema.d, 32, dtype=torch.float64)
    gold = torch.randint(32, (4, schema.d)).double()
    plan = sample_masks(schema, 4, 0.0, seed=0)
    loss = label_loss(categorical_prediction(logits), gold, plan).item()
    assert abs(loss - math.log(32)) <= 1e-9
    assert abs(loss - 3.4657) < 1e-4


def test_label_loss_saturated_correct():
    schema = kmer_schema()
    gold = torch.randint(32, (3, schema.d))
    logits = torch.zeros(3, schema.d, 32, dtype=torch.float64)
    logits.scatter_(-1, gold[..., None], 50.0)
    plan = sample_masks(schema, 3, 0.0, seed=0)
    assert label_loss(categorical_prediction(logits), gold.double(), plan).item() < 1e-20


def test_label_loss_continuous_exact_is_zero():
    schema = Schema((Attribute("x", CONTINUOUS, INPUT), Attribute("y", CONTINUOUS, TARGET)))
    gold = torch.randn(5, 2, dtype=torch.float64)
    pred = Prediction([HeadOutput(torch.arange(2), gold.clone(), False)], 2)
    plan = sample_masks(schema, 5, 0.0, seed=0)
    assert label_loss(pred, gold, plan).item() == 0.0


def test_label_loss_degenerate_batch():
    schema = kmer_schema()
    plan = MaskPlan(np.zeros((2, 5), bool), np.zeros((2, 5), bool), 0.0, 0.5, 0)
    with pytest.raises(ValueError, match="degenerate"):
        label_loss(categorical_prediction(torch.zeros(2, 5, 32)), torch.zeros(2, 5), plan)


def test_attribute_loss_zero_when_nothing_masked():
    schema = kmer_schema()
    plan = sample_masks(schema, 3, 0.0, seed=0)
    out = attribute_loss(categorical_prediction(torch.randn(3, 5, 32)), torch.zeros(3, 5), plan)
    assert out.item() == 0.0


def test_attribute_loss_matches_loop_oracle(rng):
    schema = Schema(
        (Attribute("a", CATEGORICAL, INPUT, 4), Attribute("b", CONTINUOUS, INPUT),
         Attribute("c", CATEGORICAL, INPUT, 3), Attribute("y", CATEGORICAL, TARGET, 4))
    )
    b = 6
    cat4 = torch.from_numpy(rng.standard_normal((b, 2, 4)))
    cat3 = torch.from_numpy(rng.standard_normal((b, 1, 3)))
    cont = torch.from_numpy(rng.standard_normal((b, 1)))
    pred = Prediction(
        [HeadOutput(torch.tensor([0, 3]), cat4, True), HeadOutput(torch.tensor([2]), cat3, True),
         HeadOutput(torch.tensor([1]), cont, False)], 4)
    gold = torch.from_numpy(np.stack([rng.integers(4, size=b), rng.standard_normal(b),
                                      rng.integers(3, size=b), rng.integers(4, size=b)], 1).astype(float))
    plan = sample_masks(schema, b, 0.5, seed=4)
    total, count = 0.0, 0
    for i in range(b):
        for j in range(4):
            if not plan.attr_masked[i, j]:
                continue
            if j == 1:
                loss = (cont[i, 0].item() - gold[i, 1].item()) ** 2
            else:
                z = (cat4[i, 0 if j == 0 else 1] if j in (0, 3) else cat3[i, 0]).numpy()
                t = int(gold[i, j])
                loss = -(z[t] - np.log(np.exp(z).sum()))
            total += loss
            count += 1
    assert abs(attribute_loss(pred, gold, plan).item() - total / count) <= 1e-12


def test_position_losses_shape():
    schema = kmer_schema()
    losses = position_losses(categorical_prediction(torch.zeros(2, 5, 32)), torch.zeros(2, 5))
    assert losses.shape == (2, schema.d)


def test_lambda_schedule_endpoints():
    assert lambda_at(0, 100) == 0.5
    assert lambda_at(100, 100) == 0.0
    assert lambda_at(50, 100) == 0.25
    floor = LambdaSchedule(floor=0.1)
    assert lambda_at(100, 100, floor) == pytest.approx(0.1, abs=1e-15)
    cos = LambdaSchedule(shape="cosine")
    assert lambda_at(0, 10, cos) == 0.5 and lambda_at(10, 10, cos) == pytest.approx(0.0, abs=1e-15)


@given(st.integers(1, 500), st.sampled_from(["linear", "cosine"]), st.floats(0, 0.5))
def test_lambda_monotone_non_increasing(total, shape, floor):
    sched = LambdaSchedule(0.5, floor, shape)
    lams = [lambda_at(t, total, sched) for t in range(total + 1)]
    assert all(a >= b for a, b in zip(lams, lams[1:]))
    assert lams[0] == 0.5


def test_total_loss_examples():
    assert total_loss(2.0, 4.0, 0.5).total == 3.0
    assert total_loss(2.0, 4.0, 0.0).total == 2.0
    assert total_loss(2.0, 4.0, 1.0).total == 4.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 1.5)


def test_total_loss_affine_identity_on_random_triples(rng):
    for l_lab, l_att, lam in rng.random((10_000, 3)) * [10, 10, 1]:
        assert total_loss(l_lab, l_att, lam).total == (1 - lam) * l_lab + lam * l_att


def test_lambda_zero_gradient_equals_label_gradient(double):
    torch.manual_seed(0)
    schema = kmer_schema(vocab=4)
    model = SpinModel(schema, ModelConfig(e=8, h=2, f=2, depth=2, dropout=0.0))
    rows = torch.randint(4, (6, schema.d)).double()
    ctx = model.embed(rows[:3], torch.zeros(3, schema.d, dtype=torch.bool))
    plan = sample_masks(schema, 3, 0.5, seed=2)
    qry = model.embed(rows[3:], plan.input_masked)
    params = list(model.parameters())

    def grads(fn):
        pred = model(ctx, qry)
        return torch.autograd.grad(fn(pred), params, allow_unused=True, retain_graph=True)

    g_tot = grads(lambda p: total_loss(label_loss(p, qry.gold, plan), attribute_loss(p, qry.gold, plan), 0.0).total)
    g_lab = grads(lambda p: label_loss(p, qry.gold, plan))
    for a, b in zip(g_tot, g_lab):
        assert (a is None and b is None) or torch.equal(a, b)


def test_masking_leaves_gold_untouched():
    schema = kmer_schema(vocab=4)
    model = SpinModel(schema, ModelConfig(e=8, h=2, f=2, depth=2))
    rows = torch.randint(4, (3, schema.d)).float()
    keep = rows.clone()
    batch = model.embed(rows, torch.ones(3, schema.d, dtype=torch.bool))
    assert torch.equal(batch.gold, keep) and torch.equal(rows, keep)
