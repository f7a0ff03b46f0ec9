#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Testes do relatório comparativo da ablação
"""

import json
import os

import pandas as pd
import pytest

from ablation_report import AblationComparison
from evolve import Individual, Population
from loss_expr import MultiBranchLoss, parse_formula
from reject import FingerprintCache
from search import SearchConfig, SearchRun


def fake_run(explored, fitnesses, cache_hits=0, elapsed_s=60.0) -> SearchRun:
    """Execução montada à mão, sem treinar nada."""
    run = SearchRun(SearchConfig(), Population(50), FingerprintCache())
    run.stats.update(explored=explored, proxy_evals=len(fitnesses), cache_hits=cache_hits,
                     inserted=len(fitnesses) + cache_hits)
    best = None
    for index, fitness in enumerate(fitnesses, 1):
        ind = Individual(MultiBranchLoss.single(parse_formula('y', 'seg')), index)
        ind.set_fitness(fitness)
        run.evaluated.append(ind)
        if best is None or fitness > best.fitness:
            best = ind
        run.history.append({'eval_index': index, 'top5_mean': fitness, 'best': best.fitness})
    run.best = best
    run.elapsed_s = elapsed_s
    return run


@pytest.fixture
def runs():
    return {
        'naive': fake_run(10, [0.0, 0.0]),
        '+rejection': fake_run(50, [0.2, 0.4]),
        '+fingerprint': fake_run(80, [0.3, 0.5], cache_hits=4),
        '+earlystop': fake_run(120, [0.3, 0.6]),
    }


class TestAblationComparison:
    def test_variant_statistics(self, runs):
        stats = AblationComparison(runs).calculate_variant_statistics(runs['+rejection'])
        assert stats['explored'] == 50
        assert stats['best_fitness'] == 0.4
        assert stats['top5_mean'] == pytest.approx(0.3)
        assert stats['throughput_per_min'] == pytest.approx(50.0)
        assert stats['positive_fitness_found'] and not stats['aborted']

    def test_empty_run(self):
        stats = AblationComparison({}).calculate_variant_statistics(fake_run(0, []))
        assert stats['best_fitness'] == 0.0 and stats['top5_mean'] == 0.0

    def test_speedups(self, runs):
        comparison = AblationComparison(runs)
        stats = {v: comparison.calculate_variant_statistics(r) for v, r in runs.items()}
        speedups = comparison.calculate_speedups(stats)
        assert speedups['naive'] == 1.0
        assert speedups['+rejection'] == 5.0
        assert speedups['+earlystop'] == 12.0

    def test_speedups_without_naive(self, runs):
        comparison = AblationComparison(runs)
        stats = {'+rejection': comparison.calculate_variant_statistics(runs['+rejection'])}
        assert comparison.calculate_speedups(stats) == {'+rejection': None}

    def test_insights(self, runs):
        report = AblationComparison(runs).generate_comparison_report()
        text = '\n'.join(report['insights'])
        assert 'crescem a cada componente' in text
        assert '5.0x' in text
        assert '+earlystop' in text
        assert 'naive não encontrou' in text
        assert '4 avaliações evitadas' in text

    def test_non_monotone_warning(self, runs):
        runs['+earlystop'] = fake_run(20, [0.1])
        insights = AblationComparison(runs).generate_comparison_report()['insights']
        assert any(insight.startswith('⚠️') for insight in insights)

    def test_report_shape(self, runs):
        report = AblationComparison(runs).generate_comparison_report()
        assert report['variants'] == list(runs)
        assert len(report['curves']['+rejection']) == 2
        assert [row['variant'] for row in report['summary']] == list(runs)

    def test_export(self, runs, tmp_path):
        comparison = AblationComparison(runs)
        report = comparison.generate_comparison_report()
        paths = comparison.export_comparison_report(report, str(tmp_path / 'saida'), 'relatorio.json')
        with open(paths['report'], encoding='utf-8') as f:
            assert json.load(f)['variants'] == list(runs)
        assert os.path.basename(paths['curves']['+rejection']) == 'curva_rejection.csv'
        curve = pd.read_csv(paths['curves']['+rejection'])
        assert list(curve.columns) == ['eval_index', 'top5_mean', 'best']
        assert len(pd.read_csv(paths['summary'])) == 4

    def test_export_failure_returns_none(self, runs, tmp_path):
        blocker = tmp_path / 'arquivo'
        blocker.write_text('x', encoding='utf-8')
        comparison = AblationComparison(runs)
        assert comparison.export_comparison_report(comparison.generate_comparison_report(), str(blocker)) is None
