import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patedr.accountant import PrivacyBudget, QueryPlan, calibrate_sigma, compose_epsilon
from patedr.autoencoder import init_params
from patedr.mechanisms import NoiseSeed
from patedr.pca import pca_fit
from patedr.pipeline import (
    AggregationJob,
    AutoencoderCodec,
    DwtAggregation,
    PcaCodec,
    aggregate_codes,
    dwt_budget_split,
    ensemble_labels,
    label_dataset,
    sensitivity_audit,
)
from patedr.dwt import WaveletSpec
from patedr.synthetic import SimulatedTeacher, SyntheticMaskSpec, default_teachers, gen_masks
from patedr.volume import BinaryMask, dice

SPEC = SyntheticMaskSpec(dims=(8, 8, 8), seed=2)


@pytest.fixture(scope="module")
def masks():
    return gen_masks(SPEC, 30)


@pytest.fixture(scope="module")
def full_pca(masks):
    return PcaCodec(pca_fit([m.as_volume() for m in masks], 4))


def test_aggregate_examples():
    z = np.array([0.3, -0.4])
    np.testing.assert_array_equal(aggregate_codes([z] * 4, 0.0, NoiseSeed(0)), z)
    np.testing.assert_array_equal(aggregate_codes([[1.0, 0.0], [0.0, 1.0]], 0.0, NoiseSeed(0)), [0.5, 0.5])


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate_codes([], 0.1, NoiseSeed(0))
    with pytest.raises(ValueError):
        aggregate_codes([[1.0, 0.0], [1.0]], 0.1, NoiseSeed(0))
    with pytest.raises(ValueError):
        aggregate_codes([[1.0, 0.5]], 0.1, NoiseSeed(0))


def test_aggregate_noise_variance():
    codes = [[0.6, 0.0], [0.0, -0.6]]
    out = np.array([aggregate_codes(codes, 0.2, NoiseSeed(1, n)) for n in range(100_000)])
    np.testing.assert_allclose(out.mean(axis=0), [0.3, -0.3], atol=0.003)
    np.testing.assert_allclose(out.var(axis=0), 0.04, rtol=0.05)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 9))
def test_aggregate_permutation_invariant(seed, k):
    rng = np.random.default_rng(seed)
    codes = [c / max(1, np.linalg.norm(c)) for c in rng.normal(size=(k, 5))]
    perm = rng.permutation(k)
    a = aggregate_codes(codes, 0.1, NoiseSeed(seed))
    b = aggregate_codes([codes[i] for i in perm], 0.1, NoiseSeed(seed))
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_identity_pipeline_recovers_truth(masks, full_pca):
    teachers = [SimulatedTeacher()] * 3
    job = AggregationJob(full_pca, QueryPlan(10, 3), sigma=0.0, delta=1e-2)
    labels, report = label_dataset(job, teachers, masks[:10])
    assert all(dice(a, b) == 1.0 for a, b in zip(labels, masks[:10]))
    assert report.epsilon is None and report.sigma == 0.0


def test_report_at_reference_point(masks, full_pca):
    job = AggregationJob(full_pca, QueryPlan(62, 8), sigma=0.075, delta=1e-2, base_seed=3)
    inputs = [masks[i % len(masks)] for i in range(62)]
    _, report = label_dataset(job, default_teachers(8, 0), inputs)
    d = report.to_dict()
    assert d["epsilon"] == pytest.approx(125.94, abs=0.05)
    assert d["alpha_star"] == pytest.approx(1.2313, abs=1e-4)
    assert {k: d[k] for k in ("sigma", "delta", "N", "K", "encoder", "seed")} == {
        "sigma": 0.075, "delta": 0.01, "N": 62, "K": 8, "encoder": "pca", "seed": 3
    }


def test_budget_calibrates_sigma(masks, full_pca):
    budget = PrivacyBudget(5.0, 1e-5)
    plan = QueryPlan(4, 2)
    _, report = label_dataset(AggregationJob(full_pca, plan, budget=budget), default_teachers(2, 1), masks[:4])
    assert report.sigma == pytest.approx(calibrate_sigma(budget, plan))
    assert report.epsilon == pytest.approx(5.0, rel=1e-9)


def test_sigma_wins_over_budget(masks, full_pca):
    job = AggregationJob(full_pca, QueryPlan(2, 2), budget=PrivacyBudget(5.0, 1e-3), sigma=0.5)
    _, report = label_dataset(job, default_teachers(2, 1), masks[:2])
    assert report.sigma == 0.5
    assert report.epsilon == pytest.approx(compose_epsilon(0.5, 1e-3, QueryPlan(2, 2)))


def test_deterministic_and_thread_independent(masks, full_pca):
    teachers = default_teachers(4, 7)
    runs = [
        label_dataset(AggregationJob(full_pca, QueryPlan(12, 4), sigma=0.3, delta=1e-2, base_seed=5, threads=t), teachers, masks[:12])[0]
        for t in (1, 1, 4)
    ]
    for other in runs[1:]:
        assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(runs[0], other))


def test_plan_mismatch_and_teacher_failure(masks, full_pca):
    job = AggregationJob(full_pca, QueryPlan(3, 2), sigma=0.1, delta=1e-2)
    with pytest.raises(ValueError):
        label_dataset(job, default_teachers(2, 0), masks[:4])
    with pytest.raises(ValueError):
        label_dataset(job, default_teachers(3, 0), masks[:3])

    class Broken:
        def predict(self, mask, n):
            raise OSError("disk on fire")

    with pytest.raises(RuntimeError, match="input 0"):
        label_dataset(job, [Broken(), Broken()], masks[:3])
    with pytest.raises(ValueError):
        AggregationJob(full_pca, QueryPlan(3, 2), sigma=0.1)
    with pytest.raises(ValueError):
        AggregationJob(full_pca, QueryPlan(3, 2))


def test_dwt_budget_audit(masks):
    enc = DwtAggregation(WaveletSpec("haar", 2), threshold=0.02, max_selections=16)
    plan = QueryPlan(5, 4)
    budget = PrivacyBudget(20.0, 1e-3)
    job = AggregationJob(enc, plan, budget=budget, base_seed=1)
    eps_sel, sigma = dwt_budget_split(job)
    assert eps_sel * plan.num_queries == pytest.approx(10.0)
    assert compose_epsilon(sigma, 1e-3, plan) == pytest.approx(10.0, rel=1e-9)
    labels, report = label_dataset(job, default_teachers(4, 2), masks[:5])
    d = report.to_dict()
    assert len(labels) == 5
    assert math.fsum(d["epsilon_selection_per_volume"]) + d["epsilon_gaussian"] == pytest.approx(d["epsilon"])
    assert d["epsilon"] == pytest.approx(20.0, rel=1e-9)
    assert d["encoder"] == "dwt"


def test_dwt_noiseless_identical_teachers_are_near_exact(masks):
    enc = DwtAggregation(WaveletSpec("haar", 1), threshold=1e-9, max_selections=512, noiseless=True)
    job = AggregationJob(enc, QueryPlan(4, 3), budget=PrivacyBudget(1.0, 1e-3))
    labels, _ = label_dataset(job, [SimulatedTeacher()] * 3, masks[:4])
    assert all(dice(a, b) == 1.0 for a, b in zip(labels, masks[:4]))


def test_ensemble_of_exact_teachers(masks, full_pca):
    preds = [[m] * 3 for m in masks[:5]]
    assert all(a == b for a, b in zip(ensemble_labels(full_pca, preds), masks[:5]))


def test_sensitivity_audit_small(masks, full_pca):
    dims = SPEC.dims
    assert sensitivity_audit(full_pca.encode, dims, 300) <= 1 + 1e-9
    assert sensitivity_audit(PcaCodec(full_pca.model.truncated(3)).encode, dims, 300) <= 1 + 1e-9
    ae = AutoencoderCodec(init_params(512, 16, 4, seed=0), dims)
    assert sensitivity_audit(ae.encode, dims, 300) <= 1  # saturated inputs round to exactly 1


def test_codec_dims_check():
    with pytest.raises(ValueError):
        AutoencoderCodec(init_params(27, 4, 2, seed=0), (4, 4, 4))


def test_labels_are_binary_masks(masks, full_pca):
    job = AggregationJob(full_pca, QueryPlan(3, 2), sigma=1.0, delta=1e-2)
    labels, _ = label_dataset(job, default_teachers(2, 3), masks[:3])
    assert all(isinstance(l, BinaryMask) and l.dims == SPEC.dims for l in labels)
