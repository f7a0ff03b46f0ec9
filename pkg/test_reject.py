#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Testes do protocolo de rejeição e das impressões digitais de gradiente
"""

import numpy as np
import pytest

from cli import DEFAULT_CORPUS, read_formula_file
from errors import ConfigurationError, MetricUndefinedError
from loss_expr import MultiBranchLoss, parse_formula, parse_loss
from metrics import SEGMENTATION_METRICS
from proxy import generate_detection_task, generate_segmentation_task
from reject import (
    NONFINITE_NORM, BranchSamples, FingerprintCache, RejectionFilter, RejectionOptimizer, branch_correlation,
    branch_scores, cache_lookup, capture_samples, correlation_score, descend_branch, fingerprint,
    measure_fingerprint_collisions, optimize_predictions, passes_rejection, round_significant,
)

CROSS_ENTROPY = 'neg(mul(y, log(yhat)))'
NEGATED_CROSS_ENTROPY = 'mul(y, log(yhat))'
IOU_LOSS = 'neg(mul(i, inv(u)))'


def seg_loss(formula: str) -> MultiBranchLoss:
    return MultiBranchLoss.single(parse_formula(formula, 'seg'))


def seg_context(metric: str, seed: int = 0, **params):
    task = generate_segmentation_task(seed=seed, metric=metric, **params)
    return capture_samples(task, 5, np.random.default_rng(seed))


def corpus_formulas():
    return {label: text for _, label, text in read_formula_file(DEFAULT_CORPUS)}


@pytest.fixture(scope='module')
def miou_ctx():
    return seg_context('miou')


@pytest.fixture(scope='module')
def det_ctx():
    task = generate_detection_task(seed=0)
    return capture_samples(task, 5, np.random.default_rng(0))


# =============================================================================
# Amostras em cache
# =============================================================================

class TestCaptureSamples:
    def test_shapes(self, miou_ctx, det_ctx):
        assert miou_ctx.samples['seg'].yhat.shape == (5, 1, 4, 16, 16)
        assert det_ctx.branch_names == ('cls', 'reg')
        assert det_ctx.samples['reg'].yhat.shape == (5, 8, 4)
        assert det_ctx.samples['cls'].yhat.shape == (5, 8, 4, 1, 1)

    def test_predictions_are_probabilities(self, miou_ctx):
        yhat = miou_ctx.samples['seg'].yhat
        assert np.all(yhat > 0)
        assert np.allclose(yhat.sum(axis=2), 1.0)

    def test_samples_are_read_only(self, miou_ctx):
        with pytest.raises(ValueError):
            miou_ctx.samples['seg'].yhat[0, 0, 0, 0, 0] = 1.0

    def test_too_many_samples(self):
        task = generate_segmentation_task(seed=0, n=20, hw=8)
        with pytest.raises(ConfigurationError) as info:
            capture_samples(task, 17, np.random.default_rng(0))
        assert info.value.key == 'rejection_samples'
        with pytest.raises(ConfigurationError):
            capture_samples(task, 0, np.random.default_rng(0))

    def test_mismatched_shapes(self, miou_ctx):
        spec = miou_ctx.samples['seg'].spec
        with pytest.raises(ConfigurationError):
            BranchSamples(spec, np.ones((2, 1, 2, 2, 2)), np.ones((2, 1, 2, 2, 3)))


# =============================================================================
# Descida e correlação
# =============================================================================

class TestCorrelation:
    @pytest.mark.parametrize('metric', SEGMENTATION_METRICS)
    def test_cross_entropy_passes(self, metric):
        assert passes_rejection(seg_context(metric), seg_loss(CROSS_ENTROPY))

    @pytest.mark.parametrize('metric', SEGMENTATION_METRICS)
    def test_negated_cross_entropy_is_rejected(self, metric):
        assert not passes_rejection(seg_context(metric), seg_loss(NEGATED_CROSS_ENTROPY))

    @pytest.mark.parametrize('metric', SEGMENTATION_METRICS)
    def test_constant_loss_is_rejected(self, metric):
        ctx = seg_context(metric)
        assert correlation_score(ctx, seg_loss('one')) == 0.0
        assert not passes_rejection(ctx, seg_loss('one'))

    def test_negated_cross_entropy_loses_region_accuracy(self, miou_ctx):
        assert correlation_score(miou_ctx, seg_loss(NEGATED_CROSS_ENTROPY)) < 0

    @pytest.mark.parametrize('label, metric', [
        ('Seg/mIoU', 'miou'), ('Seg/FWIoU', 'fwiou'), ('Seg/gAcc', 'gacc'), ('Seg/BIoU', 'biou'),
    ])
    def test_corpus_formula_passes_on_own_metric(self, label, metric):
        assert passes_rejection(seg_context(metric), seg_loss(corpus_formulas()[label]))

    @pytest.mark.parametrize('label, metric', [('Seg/mAcc', 'macc'), ('Seg/BF1', 'bf1')])
    def test_corpus_formula_improves_own_metric(self, label, metric):
        g = correlation_score(seg_context(metric), seg_loss(corpus_formulas()[label]))
        print(f"📊 {label}: g={g:.3f}")
        assert g > 0

    def test_initial_predictions_are_spatially_constant(self, miou_ctx):
        yhat = miou_ctx.samples['seg'].yhat
        assert np.allclose(yhat, yhat[:, :, :, :1, :1])
        assert len(np.unique(yhat[0, 0, :, 0, 0])) == yhat.shape[2]

    def test_constant_loss_has_no_gain(self, miou_ctx):
        report = branch_correlation(parse_formula('one', 'seg'), miou_ctx.samples['seg'], miou_ctx.optimizer)
        assert report.score == 0.0
        assert report.iterations == 0

    def test_descent_stays_on_simplex(self, miou_ctx):
        samples = miou_ctx.samples['seg']
        optimized, _ = descend_branch(parse_formula(CROSS_ENTROPY, 'seg'), samples, RejectionOptimizer(iterations=50))
        assert np.all(optimized > 0)
        assert np.allclose(optimized.sum(axis=2), 1.0)

    def test_optimize_predictions_per_branch(self, det_ctx):
        loss = parse_loss(f'cls: {CROSS_ENTROPY} ; reg: {IOU_LOSS}')
        optimized = optimize_predictions(det_ctx, loss)
        assert set(optimized) == {'cls', 'reg'}
        assert optimized['reg'].shape == det_ctx.samples['reg'].yhat.shape
        # caixas continuam canônicas
        boxes = optimized['reg']
        assert np.all(boxes[..., 2] >= boxes[..., 0]) and np.all(boxes[..., 3] >= boxes[..., 1])

    def test_multi_branch_score_is_minimum(self, det_ctx):
        loss = parse_loss(f'cls: {CROSS_ENTROPY} ; reg: one')
        scores = branch_scores(det_ctx, loss)
        assert scores['reg'] == 0.0
        assert correlation_score(det_ctx, loss) == min(scores.values())

    def test_iou_loss_improves_boxes(self, det_ctx):
        loss = parse_loss(f'cls: {CROSS_ENTROPY} ; reg: {IOU_LOSS}')
        assert branch_scores(det_ctx, loss)['reg'] > 0.0


# =============================================================================
# Impressão digital
# =============================================================================

class TestFingerprint:
    @pytest.mark.parametrize('value, expected', [
        (0.12345, 0.12),
        (1234.0, 1200.0),
        (0.0155, 0.016),
        (-0.0155, -0.016),
        (9.96, 10.0),
        (0.0, 0.0),
    ])
    def test_round_significant(self, value, expected):
        assert round_significant(value) == expected

    def test_non_finite_norm(self):
        assert round_significant(float('inf')) == NONFINITE_NORM
        assert round_significant(float('nan')) == NONFINITE_NORM

    def test_one_norm_per_sample(self, miou_ctx, det_ctx):
        assert len(fingerprint(miou_ctx, seg_loss(CROSS_ENTROPY))) == 5
        assert len(fingerprint(det_ctx, parse_loss(f'cls: {CROSS_ENTROPY} ; reg: {IOU_LOSS}'))) == 10

    def test_equivalent_losses_collide(self, miou_ctx):
        base = fingerprint(miou_ctx, seg_loss(CROSS_ENTROPY))
        assert fingerprint(miou_ctx, seg_loss('neg(mul(log(yhat), y))')) == base
        assert fingerprint(miou_ctx, seg_loss(f'add({CROSS_ENTROPY}, one)')) == base

    def test_different_losses_differ(self, miou_ctx):
        assert fingerprint(miou_ctx, seg_loss(CROSS_ENTROPY)) != \
            fingerprint(miou_ctx, seg_loss('square(add(yhat, neg(y)))'))

    def test_cache(self):
        cache = FingerprintCache()
        fp = (0.12, 3.4)
        assert cache_lookup(cache, fp) is None
        assert cache.put(fp, 0.5) == 0.5
        assert cache.put(fp, 0.9) == 0.5
        assert fp in cache and len(cache) == 1
        assert cache.to_dict() == {'0.12,3.4': 0.5}

    def test_collision_measurement(self, miou_ctx):
        report = measure_fingerprint_collisions(miou_ctx, 20, np.random.default_rng(1), depth=2)
        assert report['pairs'] == 20
        assert 0 <= report['false_collisions'] <= report['collisions'] <= 20
        assert report['collision_rate'] == report['collisions'] / 20


# =============================================================================
# Filtro com memória
# =============================================================================

class TestRejectionFilter:
    def test_memo_by_structure(self, miou_ctx):
        rejection = RejectionFilter(miou_ctx)
        first = rejection.evaluate(seg_loss(CROSS_ENTROPY))
        second = rejection.evaluate(seg_loss(CROSS_ENTROPY))
        assert first == second and first[0]
        assert rejection.branches_tested == 1
        assert rejection.memo_hits == 1

    def test_stops_at_first_failing_branch(self, det_ctx):
        rejection = RejectionFilter(det_ctx)
        passed, g = rejection.evaluate(parse_loss(f'cls: one ; reg: {IOU_LOSS}'))
        assert not passed and g == 0.0
        assert rejection.branches_tested == 1

    def test_accepts_branch(self, miou_ctx):
        rejection = RejectionFilter(miou_ctx)
        assert rejection.accepts_branch(parse_formula(CROSS_ENTROPY, 'seg'))
        assert not rejection.accepts_branch(parse_formula('one', 'seg'))

    def test_counts_undefined_samples(self, miou_ctx, monkeypatch):
        def undefined(spec, prediction, target):
            raise MetricUndefinedError("sem pixels")

        monkeypatch.setattr('reject._sample_metric', undefined)
        rejection = RejectionFilter(miou_ctx)
        passed, g = rejection.evaluate(seg_loss(CROSS_ENTROPY))
        assert not passed and g == 0.0
        assert rejection.undefined_samples == 5


# =============================================================================
# Alvos de borda
# =============================================================================

class TestBoundaryTargets:
    def test_loss_sees_band_and_metric_sees_labels(self):
        ctx = seg_context('bf1', boundary_targets=True)
        samples = ctx.samples['seg']
        assert not np.array_equal(samples.y, samples.reference)
        assert np.allclose(samples.reference.sum(axis=2), 1.0)
        assert np.all(samples.y <= samples.reference)
        assert 0 < samples.y.sum() < samples.reference.sum()

    def test_default_uses_region_labels(self, miou_ctx):
        samples = miou_ctx.samples['seg']
        assert np.array_equal(samples.y, samples.reference)

    def test_cross_entropy_on_band_improves_boundary_f1(self):
        ctx = seg_context('bf1', boundary_targets=True)
        assert correlation_score(ctx, seg_loss(CROSS_ENTROPY)) > 0


@pytest.mark.slow
def test_false_collision_rate_is_reported(miou_ctx):
    report = measure_fingerprint_collisions(miou_ctx, 10000, np.random.default_rng(0))
    print(f"📊 colisões={report['collisions']} falsas={report['false_collisions']} "
          f"taxa={report['false_collision_rate']:.4%}")
    assert report['pairs'] == 10000
    assert report['false_collision_rate'] <= report['collision_rate']
