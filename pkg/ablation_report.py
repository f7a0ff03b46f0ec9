#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import json
import os
from datetime import datetime
from typing import Dict, List, Optional

import pandas as pd

from search import SearchRun

CURVE_COLUMNS = ['eval_index', 'top5_mean', 'best']


class AblationComparison:
    def __init__(self, runs: Dict[str, SearchRun]):
        """
        Inicializa o comparativo entre variantes da busca

        Args:
            runs: Execuções por variante, na ordem naive -> +earlystop
        """
        self.runs = runs

    def calculate_variant_statistics(self, run: SearchRun) -> Dict:
        """
        Calcula as estatísticas de uma variante

        Args:
            run: Execução da variante

        Returns:
            Dict: Contagens, tempo e notas da variante
        """
        top = run.top()
        return {
            'explored': run.stats['explored'],
            'rejected': run.stats['rejected'],
            'cache_hits': run.stats['cache_hits'],
            'proxy_evals': run.stats['proxy_evals'],
            'elapsed_s': run.elapsed_s,
            'throughput_per_min': run.throughput_per_minute(),
            'best_fitness': run.best.fitness if run.best else 0.0,
            'top5_mean': sum(ind.fitness for ind in top) / len(top) if top else 0.0,
            'positive_fitness_found': any(ind.fitness > 0 for ind in run.evaluated),
            'aborted': run.aborted,
        }

    def calculate_speedups(self, variant_stats: Dict) -> Dict:
        """
        Razão de candidatos explorados de cada variante contra a naive

        Returns:
            Dict: Razões por variante (None sem a variante naive)
        """
        base = variant_stats.get('naive', {}).get('explored')
        speedups = {}
        for variant, stats in variant_stats.items():
            if not base:
                speedups[variant] = None
            else:
                speedups[variant] = stats['explored'] / base
        return speedups

    def generate_insights(self, variant_stats: Dict, speedups: Dict) -> List[str]:
        """
        Gera insights a partir das contagens

        Args:
            variant_stats: Estatísticas por variante
            speedups: Razões contra a naive

        Returns:
            List[str]: Lista de insights
        """
        insights = []
        variants = list(variant_stats)

        explored = [variant_stats[v]['explored'] for v in variants]
        if all(a <= b for a, b in zip(explored, explored[1:])):
            insights.append("📈 Candidatos explorados crescem a cada componente adicionado")
        else:
            insights.append("⚠️ Candidatos explorados não crescem de forma monótona entre as variantes")

        if '+rejection' in speedups and speedups['+rejection']:
            insights.append(f"🚀 Rejeição explora {speedups['+rejection']:.1f}x mais candidatos que a busca naive")

        best_variant = max(variants, key=lambda v: variant_stats[v]['best_fitness'])
        insights.append(f"🏆 Melhor nota: {best_variant} ({variant_stats[best_variant]['best_fitness']:.4f})")

        if 'naive' in variant_stats and not variant_stats['naive']['positive_fitness_found']:
            insights.append("❌ A busca naive não encontrou nenhuma perda com nota positiva")

        total_hits = sum(stats['cache_hits'] for stats in variant_stats.values())
        if total_hits:
            insights.append(f"♻️ {total_hits} avaliações evitadas pelo cache de impressões digitais")

        return insights

    def generate_summary(self, variant_stats: Dict) -> List[Dict]:
        """Tabela resumo: uma linha por variante"""
        return [{'variant': variant, **stats} for variant, stats in variant_stats.items()]

    def generate_comparison_report(self) -> Dict:
        """
        Gera o relatório comparativo das variantes

        Returns:
            Dict: Relatório com estatísticas, razões, curvas e insights
        """
        print("📊 Gerando relatório comparativo das variantes...")

        variant_stats = {variant: self.calculate_variant_statistics(run) for variant, run in self.runs.items()}
        speedups = self.calculate_speedups(variant_stats)

        return {
            'generated_at': datetime.now().isoformat(),
            'variants': list(self.runs),
            'variant_data': variant_stats,
            'speedups': speedups,
            'curves': {variant: list(run.history) for variant, run in self.runs.items()},
            'insights': self.generate_insights(variant_stats, speedups),
            'summary': self.generate_summary(variant_stats),
        }

    def export_comparison_report(self, report: Dict, output_dir: str = '.', filename: str = None) -> Optional[Dict]:
        """
        Exporta o relatório (JSON), um CSV de curva por variante e o resumo em CSV

        Args:
            report: Relatório gerado
            output_dir: Diretório de saída
            filename: Nome do JSON (opcional)

        Returns:
            Dict: Caminhos gerados, ou None em caso de erro
        """
        if not filename:
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            filename = f"relatorio_ablacao_{timestamp}.json"

        try:
            os.makedirs(output_dir, exist_ok=True)
            paths = {'report': os.path.join(output_dir, filename), 'curves': {}}
            with open(paths['report'], 'w', encoding='utf-8') as f:
                json.dump(report, f, indent=2, ensure_ascii=False)

            for variant, curve in report['curves'].items():
                safe_name = variant.lstrip('+')
                target = os.path.join(output_dir, f"curva_{safe_name}.csv")
                pd.DataFrame(curve, columns=CURVE_COLUMNS).to_csv(target, index=False, encoding='utf-8')
                paths['curves'][variant] = target

            paths['summary'] = os.path.join(output_dir, 'resumo_ablacao.csv')
            pd.DataFrame(report['summary']).to_csv(paths['summary'], index=False, encoding='utf-8')

            print(f"✅ Relatório exportado para: {paths['report']}")
            return paths

        except OSError as e:
            print(f"❌ Erro ao exportar relatório: {e}")
            return None
