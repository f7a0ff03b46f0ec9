#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Linha de comando

    python cli.py search --config FILE [--task seg|box|det] [--metric M] [--budget N] [--seed S] [--workers W] [--output DIR] [--export-csv FILE]
    python cli.py reject-check FILE [--task seg] [--metric M] [--seed S] [--csv FILE]
    python cli.py ablation --config FILE [--variants naive,+rejection,...] [--time-budget SEC] [--candidate-budget N]
    python cli.py corpus [FILE]

Códigos de saída: 0 sucesso, 2 uso/configuração/fórmula inválida, 3 busca abortada.
"""

import argparse
import os
import re
import sys
from datetime import datetime
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ablation_report import AblationComparison
from config import build_search_config, resolve_settings
from errors import ConfigurationError, FormulaParseError, SearchSetupError
from file_validator import FileValidator, print_validation_error
from loss_expr import BOX_LEAVES, LossGraph, MultiBranchLoss, forward_backward, format_formula, parse_formula, parse_loss
from metrics import SEGMENTATION_METRICS, iue_areas
from proxy import ProxyTask, build_task
from reject import DEFAULT_ETA, RejectionFilter, capture_samples
from run_store import RunStore
from search import ABLATION_VARIANTS, run_ablation, run_search

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORTED = 3

DEFAULT_CORPUS = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'formulas', 'table7.txt')
REJECTION_SAMPLES = 5
CORPUS_BOX_PAIRS = 1000

# "Tarefa/Métrica[/ramo]: fórmula"; o rótulo sempre tem '/'
LABEL_PATTERN = re.compile(r'^\s*([A-Za-z][\w-]*(?:/[\w+-]+)+)\s*:\s*(.+)$')
UNASSIGNED = '__ramo__'


# ---------------------------------------------------------------------------
# Arquivos de fórmulas
# ---------------------------------------------------------------------------

def read_formula_file(path: str) -> List[Tuple[int, Optional[str], str]]:
    """
    Lê um arquivo de fórmulas: uma perda por linha, rótulo opcional.

    Linhas vazias e comentários (#) são ignorados.

    Returns:
        Lista de (número da linha, rótulo ou None, texto da perda)
    """
    entries = []
    with open(path, 'r', encoding='utf-8') as f:
        for number, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            match = LABEL_PATTERN.match(line)
            if match:
                entries.append((number, match.group(1), match.group(2).strip()))
            else:
                entries.append((number, None, line))
    return entries


def label_metric(label: Optional[str]) -> Optional[str]:
    """Métrica de segmentação embutida no rótulo ("Seg/mIoU" -> "miou")."""
    if not label:
        return None
    parts = label.split('/')
    if len(parts) >= 2 and parts[0].lower() == 'seg' and parts[1].lower() in SEGMENTATION_METRICS:
        return parts[1].lower()
    return None


def _uses_box_leaves(graph: LossGraph) -> bool:
    return any(graph.has_leaf(name) for name in BOX_LEAVES if name != 'one')


def fit_loss_to_task(text: str, task: ProxyTask) -> Optional[MultiBranchLoss]:
    """
    Encaixa o texto de uma perda nos ramos da tarefa.

    Fórmulas sem nome de ramo vão para o primeiro ramo livre de tipo
    compatível (caixa se usam i/u/e). Devolve None se a perda não cobre
    todos os ramos ou usa folhas que o ramo não aceita.

    Raises:
        FormulaParseError: texto inválido
    """
    # cada trecho é lido sozinho: vários ramos sem nome não colidem
    graphs = [graph for part in text.split(';') if part.strip() for graph in parse_loss(part, UNASSIGNED).branches]
    if not graphs:
        raise FormulaParseError("Perda vazia", 0, text)
    assigned: Dict[str, LossGraph] = {g.branch_name: g for g in graphs if g.branch_name != UNASSIGNED}
    for graph in graphs:
        if graph.branch_name != UNASSIGNED:
            continue
        wants_box = _uses_box_leaves(graph)
        free = [spec for spec in task.branches
                if spec.name not in assigned and (spec.kind == 'box') == wants_box]
        if not free:
            return None
        assigned[free[0].name] = graph.renamed(free[0].name)

    if set(assigned) != set(task.branch_names):
        return None
    for spec in task.branches:
        if not set(assigned[spec.name].body.leaves()) <= set(spec.leaves):
            return None
    return MultiBranchLoss(tuple(assigned[name] for name in task.branch_names), task.weights)


def check_corpus_graph(graph: LossGraph, rng: np.random.Generator, classes: int = 4, size: int = 8) -> Dict:
    """
    Avalia uma fórmula do corpus em entradas válidas aleatórias.

    Fórmulas de caixa usam 1000 pares de caixas válidas (folhas i, u, e);
    as demais usam probabilidades softmax contra alvos one-hot.

    Returns:
        Dict com 'success', 'message' e o tipo de entrada
    """
    if _uses_box_leaves(graph):
        kind = 'box'
        corners = rng.uniform(0.0, 1.0, size=(2, CORPUS_BOX_PAIRS, 2, 2))
        boxes = np.concatenate([corners.min(axis=2), corners.max(axis=2) + 1e-3], axis=-1)
        inter, union, enclosing = iue_areas(boxes[0], boxes[1])
        shape = (CORPUS_BOX_PAIRS, 1, 1, 1)
        leaves = {'i': inter.reshape(shape), 'u': union.reshape(shape), 'e': enclosing.reshape(shape)}
        wrt = ('i', 'u', 'e')
    else:
        kind = 'seg'
        logits = rng.standard_normal((2, classes, size, size))
        probabilities = np.exp(logits) / np.sum(np.exp(logits), axis=1, keepdims=True)
        labels = rng.integers(classes, size=(2, size, size))
        onehot = np.eye(classes)[labels].transpose(0, 3, 1, 2)
        leaves = {'yhat': probabilities, 'y': onehot}
        wrt = ('yhat',)

    loss, grads = forward_backward(graph, leaves, wrt=wrt)
    finite = bool(np.all(np.isfinite(loss)) and all(np.all(np.isfinite(g)) for g in grads.values()))
    return {
        'success': finite,
        'message': 'valor e gradiente finitos' if finite else 'valor ou gradiente não finito',
        'kind': kind,
    }


# ---------------------------------------------------------------------------
# Comandos
# ---------------------------------------------------------------------------

class LossForgeCLI:
    def __init__(self):
        self.file_validator = FileValidator()

    def _validate(self, path: Optional[str], kind: str) -> bool:
        if not path:
            return True
        validation = self.file_validator.validate(path, kind)
        if not validation['valid']:
            print_validation_error(validation)
            return False
        return True

    def cmd_search(self, args) -> int:
        """Busca completa com artefatos gravados em disco"""
        if not self._validate(args.config, 'config'):
            return EXIT_USAGE
        overrides = {
            'task': args.task, 'metric': args.metric, 'eval_budget': args.budget,
            'seed': args.seed, 'workers': args.workers, 'output_dir': args.output,
        }
        settings = resolve_settings(args.config, overrides)
        cfg = build_search_config(settings)

        store = RunStore(settings['output_dir'], args.run_name)
        store.write_manifest(cfg, {'status': 'running'})
        print(f"📁 Artefatos em: {store.run_dir}")

        task = cfg.build_task()
        if args.export_csv:
            task.export_csv(args.export_csv)

        run = run_search(cfg, task=task, store=store, verbose=not args.quiet)
        result = store.finalize(run)

        print("\n" + "=" * 60)
        print("📊 RESUMO DA BUSCA")
        print("=" * 60)
        for key, value in run.summary().items():
            print(f"   • {key}: {value}")
        print(f"{'✅' if result['success'] else '❌'} {result['message']}")

        if run.aborted or not result['success']:
            return EXIT_ABORTED
        return EXIT_OK

    def cmd_reject_check(self, args) -> int:
        """g e veredito da rejeição para cada fórmula do arquivo"""
        if not self._validate(args.file, 'formulas'):
            return EXIT_USAGE
        contexts: Dict[str, Tuple[ProxyTask, RejectionFilter]] = {}

        def context_for(metric: str):
            if metric not in contexts:
                task = build_task(args.task, metric, args.seed)
                ctx = capture_samples(task, REJECTION_SAMPLES, np.random.default_rng(args.seed), args.eta)
                contexts[metric] = (task, RejectionFilter(ctx))
            return contexts[metric]

        rows = []
        parse_failures = 0
        print(f"🔎 Rejeição: tarefa={args.task} η={args.eta}")
        for number, label, text in read_formula_file(args.file):
            name = label or f"linha {number}"
            metric = args.metric or label_metric(label) or 'miou'
            task, rejection = context_for(metric)
            try:
                loss = fit_loss_to_task(text, task)
            except (FormulaParseError, ConfigurationError) as e:
                parse_failures += 1
                print(f"❌ {name}: {e}")
                rows.append({'line': number, 'label': label, 'metric': metric, 'g': None, 'outcome': 'parse_error'})
                continue
            if loss is None:
                print(f"⚠️ {name}: incompatível com a tarefa {args.task}, ignorada")
                rows.append({'line': number, 'label': label, 'metric': metric, 'g': None, 'outcome': 'skipped'})
                continue
            passed, score = rejection.evaluate(loss)
            print(f"{'✅' if passed else '❌'} {name} [{task.metric}] g={score:.4f} "
                  f"{'aprovada' if passed else 'rejeitada'}")
            rows.append({'line': number, 'label': label, 'metric': task.metric, 'g': score,
                         'outcome': 'pass' if passed else 'fail'})

        if args.csv:
            pd.DataFrame(rows, columns=['line', 'label', 'metric', 'g', 'outcome']).to_csv(
                args.csv, index=False, encoding='utf-8')
            print(f"✅ Resultado exportado para: {args.csv}")
        return EXIT_USAGE if parse_failures else EXIT_OK

    def cmd_ablation(self, args) -> int:
        """Variantes naive -> +earlystop com o mesmo orçamento"""
        if not self._validate(args.config, 'config'):
            return EXIT_USAGE
        variants = [v.strip() for v in args.variants.split(',') if v.strip()]
        settings = resolve_settings(args.config, {
            'task': args.task, 'metric': args.metric, 'eval_budget': args.budget, 'seed': args.seed,
            'output_dir': args.output,
        })
        cfg = build_search_config(settings)
        runs = run_ablation(cfg, variants, time_budget_s=args.time_budget,
                            candidate_budget=args.candidate_budget, verbose=not args.quiet)

        comparison = AblationComparison(runs)
        report = comparison.generate_comparison_report()
        print("\n💡 INSIGHTS:")
        for insight in report['insights']:
            print(f"   {insight}")

        output_dir = os.path.join(settings['output_dir'], f"ablation_{datetime.now().strftime('%Y%m%d_%H%M%S')}")
        paths = comparison.export_comparison_report(report, output_dir)
        if paths is None:
            return EXIT_ABORTED
        if any(run.aborted for run in runs.values()):
            return EXIT_ABORTED
        return EXIT_OK

    def cmd_corpus(self, args) -> int:
        """Interpreta e avalia cada fórmula do corpus"""
        path = args.file or DEFAULT_CORPUS
        if not self._validate(path, 'formulas'):
            return EXIT_USAGE
        rng = np.random.default_rng(args.seed)
        failures = 0
        for number, label, text in read_formula_file(path):
            name = label or f"linha {number}"
            try:
                graph = parse_formula(text)
            except FormulaParseError as e:
                failures += 1
                print(f"❌ {name}: {e}")
                continue
            result = check_corpus_graph(graph, rng)
            failures += 0 if result['success'] else 1
            print(f"{'✅' if result['success'] else '❌'} {name} ({result['kind']}): {result['message']}")
            print(f"     {format_formula(graph)}")
        print(f"\n📊 {failures} fórmula(s) com problema")
        return EXIT_USAGE if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='cli.py', description='Busca de funções de perda a partir de primitivas')
    sub = parser.add_subparsers(dest='command', required=True)

    search = sub.add_parser('search', help='executa uma busca')
    search.add_argument('--config')
    search.add_argument('--task', choices=('seg', 'box', 'det'))
    search.add_argument('--metric')
    search.add_argument('--budget', type=int)
    search.add_argument('--seed', type=int)
    search.add_argument('--workers', type=int)
    search.add_argument('--output')
    search.add_argument('--run-name')
    search.add_argument('--export-csv', help='grava o conjunto da tarefa proxy em CSV')
    search.add_argument('--quiet', action='store_true')

    check = sub.add_parser('reject-check', help='aplica a rejeição às fórmulas de um arquivo')
    check.add_argument('file')
    check.add_argument('--task', choices=('seg', 'box', 'det'), default='seg')
    check.add_argument('--metric')
    check.add_argument('--seed', type=int, default=0)
    check.add_argument('--eta', type=float, default=DEFAULT_ETA)
    check.add_argument('--csv')

    ablation = sub.add_parser('ablation', help='compara as variantes da busca')
    ablation.add_argument('--config')
    ablation.add_argument('--task', choices=('seg', 'box', 'det'))
    ablation.add_argument('--metric')
    ablation.add_argument('--budget', type=int)
    ablation.add_argument('--seed', type=int)
    ablation.add_argument('--variants', default=','.join(ABLATION_VARIANTS))
    ablation.add_argument('--time-budget', type=float)
    ablation.add_argument('--candidate-budget', type=int)
    ablation.add_argument('--output')
    ablation.add_argument('--quiet', action='store_true')

    corpus = sub.add_parser('corpus', help='avalia o corpus de fórmulas descobertas')
    corpus.add_argument('file', nargs='?')
    corpus.add_argument('--seed', type=int, default=0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Função principal"""
    args = build_parser().parse_args(argv)
    app = LossForgeCLI()
    commands = {
        'search': app.cmd_search,
        'reject-check': app.cmd_reject_check,
        'ablation': app.cmd_ablation,
        'corpus': app.cmd_corpus,
    }
    try:
        return commands[args.command](args)
    except ConfigurationError as e:
        print(f"❌ Configuração inválida: {e}")
        return EXIT_USAGE
    except FormulaParseError as e:
        print(f"❌ Fórmula inválida: {e}")
        return EXIT_USAGE
    except SearchSetupError as e:
        print(f"❌ Busca abortada: {e}")
        return EXIT_ABORTED
    except KeyboardInterrupt:
        print("\n👋 Interrompido")
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
