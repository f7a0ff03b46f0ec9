#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Busca evolutiva de funções de perda

Laço principal: população inicial -> torneio -> descendente -> rejeição ->
checagem de impressão digital -> avaliação proxy -> inserção, até o
orçamento de avaliações proxy acabar.
"""

import heapq
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, SearchAbortedError, SearchSetupError
from evolve import Individual, Population, init_population, make_offspring, tournament_select
from loss_expr import LossGraph, MultiBranchLoss, format_formula, format_loss, parse_loss, structural_hash
from proxy import ProxyTask, TrainerConfig, build_task, train_and_score
from reject import (
    FingerprintCache, RejectionContext, RejectionFilter, RejectionOptimizer, capture_samples,
    fingerprint,
)

ABLATION_VARIANTS = {
    'naive': (False, False, False),
    '+rejection': (True, False, False),
    '+fingerprint': (True, True, False),
    '+earlystop': (True, True, True),
}
TOP_K = 5


@dataclass(frozen=True)
class SearchConfig:
    """Parâmetros da busca; os padrões seguem a configuração de referência."""
    task: str = 'seg'
    metric: str = 'miou'
    population_size: int = 20
    recency_window: int = 2500
    tournament_ratio: float = 0.05
    init_depth: int = 3
    rejection_samples: int = 5
    eta: float = 0.6
    eval_budget: int = 500
    rejection_lr: float = 0.001
    rejection_momentum: float = 0.9
    rejection_iterations: int = 500
    seed: int = 0
    workers: int = 1
    node_cap: int = 64
    mutation_attempts: int = 100
    rejection_attempts: int = 10000
    use_rejection: bool = True
    use_fingerprint: bool = True
    use_early_stop: bool = True
    time_budget_s: Optional[float] = None
    candidate_budget: Optional[int] = None
    seed_formulas: Tuple[str, ...] = ()
    task_params: Dict = field(default_factory=dict)
    trainer_iterations: Optional[int] = None
    trainer_batch_size: Optional[int] = None
    trainer_lr: Optional[float] = None
    trainer_momentum: Optional[float] = None

    def validate(self):
        counts = ('population_size', 'recency_window', 'init_depth', 'rejection_samples', 'eval_budget',
                  'rejection_iterations', 'workers', 'node_cap', 'mutation_attempts', 'rejection_attempts',
                  'trainer_iterations', 'trainer_batch_size')
        for name in counts:
            value = getattr(self, name)
            if value is None and name.startswith('trainer_'):
                continue
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigurationError(f"'{name}' precisa ser um inteiro positivo (recebido {value!r})", key=name)
        if not 0 < self.tournament_ratio <= 1:
            raise ConfigurationError("'tournament_ratio' precisa estar em (0, 1]", key='tournament_ratio')
        if self.population_size > self.recency_window:
            raise ConfigurationError("'population_size' maior que 'recency_window'", key='population_size')
        if self.candidate_budget is not None and self.candidate_budget < 1:
            raise ConfigurationError("'candidate_budget' precisa ser positivo", key='candidate_budget')
        if self.time_budget_s is not None and self.time_budget_s <= 0:
            raise ConfigurationError("'time_budget_s' precisa ser positivo", key='time_budget_s')
        if self.trainer_lr is not None and self.trainer_lr <= 0:
            raise ConfigurationError("'trainer_lr' precisa ser positivo", key='trainer_lr')
        return self

    def trainer_overrides(self) -> Dict:
        names = ('iterations', 'batch_size', 'lr', 'momentum')
        return {name: getattr(self, f'trainer_{name}') for name in names
                if getattr(self, f'trainer_{name}') is not None}

    def trainer_for(self, task: ProxyTask) -> TrainerConfig:
        """Treino padrão da tarefa com os campos trainer_* informados por cima."""
        return replace(task.trainer, **self.trainer_overrides())

    def build_task(self, task: Optional[ProxyTask] = None) -> ProxyTask:
        task = task or build_task(self.task, self.metric, self.seed, self.task_params)
        if self.trainer_overrides():
            task = replace(task, trainer=self.trainer_for(task))
        return task

    @property
    def optimizer(self) -> RejectionOptimizer:
        return RejectionOptimizer(self.rejection_lr, self.rejection_momentum, self.rejection_iterations)


@dataclass
class SearchRun:
    """Estado e resultado de uma busca."""
    config: SearchConfig
    population: Population
    cache: FingerprintCache
    stats: Dict[str, int] = field(default_factory=lambda: {
        'explored': 0, 'rejected': 0, 'cache_hits': 0, 'proxy_evals': 0, 'inserted': 0,
        'undefined_samples': 0,
    })
    history: List[Dict] = field(default_factory=list)
    best: Optional[Individual] = None
    abort_reason: Optional[str] = None
    elapsed_s: float = 0.0
    evaluated: List[Individual] = field(default_factory=list)

    @property
    def aborted(self) -> bool:
        return self.abort_reason is not None

    def top(self, k: int = TOP_K) -> List[Individual]:
        """Os k melhores já avaliados (empate -> o mais antigo)."""
        ranked = sorted(enumerate(self.evaluated), key=lambda item: (-item[1].fitness, item[0]))
        return [ind for _, ind in ranked[:k]]

    def throughput_per_minute(self) -> float:
        return 60.0 * self.stats['explored'] / self.elapsed_s if self.elapsed_s > 0 else 0.0

    def summary(self) -> Dict:
        return {
            **self.stats,
            'elapsed_s': round(self.elapsed_s, 3),
            'throughput_per_min': round(self.throughput_per_minute(), 2),
            'best_fitness': self.best.fitness if self.best else None,
            'best_formula': format_loss(self.best.loss) if self.best else None,
            'abort_reason': self.abort_reason,
        }

    def to_dict(self) -> Dict:
        """Snapshot completo (JSON)."""
        return {
            'config': config_echo(self.config),
            'summary': self.summary(),
            'history': list(self.history),
            'evaluated': [individual_record(ind) for ind in self.evaluated],
            'fingerprint_cache': self.cache.to_dict(),
        }


def config_echo(cfg: SearchConfig) -> Dict:
    data = asdict(cfg)
    data['seed_formulas'] = list(cfg.seed_formulas)
    return data


def individual_record(ind: Individual) -> Dict:
    return {
        'hash': f"{ind.loss_hash:016x}",
        'formula': format_loss(ind.loss),
        'fitness': ind.fitness,
        'rejection_score': ind.rejection_score,
        'fingerprint': list(ind.fingerprint) if ind.fingerprint else None,
        'generation': ind.generation,
        'origin': ind.origin,
        'cache_hit': ind.cache_hit,
    }


# ---------------------------------------------------------------------------
# Avaliação em processos separados
# ---------------------------------------------------------------------------

_WORKER_TASK: Optional[ProxyTask] = None


def _init_worker(task: ProxyTask):
    global _WORKER_TASK
    _WORKER_TASK = task


def _worker_train(loss: MultiBranchLoss, seed: int, early_stop: bool) -> Tuple[float, float]:
    start = time.perf_counter()
    fitness = train_and_score(_WORKER_TASK, loss, seed=seed, early_stop=early_stop)
    return fitness, (time.perf_counter() - start) * 1000


class LossSearch:
    """
    Coordenador da busca: dono da população, do cache e dos contadores.

    Args:
        cfg: configuração validada
        task: tarefa proxy (gerada a partir de cfg quando ausente)
        store: RunStore opcional para o log por candidato
        verbose: imprime o progresso no console
    """

    def __init__(self, cfg: SearchConfig, task: Optional[ProxyTask] = None, store=None, verbose: bool = False):
        self.cfg = cfg.validate()
        self.task = self.cfg.build_task(task)
        self.store = store
        self.verbose = verbose
        self.rng = np.random.default_rng(cfg.seed)
        self.ctx: Optional[RejectionContext] = None
        self.filter: Optional[RejectionFilter] = None
        if cfg.use_rejection or cfg.use_fingerprint:
            self.ctx = capture_samples(self.task, cfg.rejection_samples, self.rng, cfg.eta, cfg.optimizer)
            self.filter = RejectionFilter(self.ctx)
        self.run = SearchRun(cfg, Population(cfg.recency_window), FingerprintCache())
        self._top_scores: List[float] = []
        self._generation = 0
        self._start = 0.0

    # -- contadores e log ---------------------------------------------------

    def _elapsed(self) -> float:
        return time.perf_counter() - self._start

    def _budget_left(self) -> bool:
        cfg, stats = self.cfg, self.run.stats
        if stats['proxy_evals'] >= cfg.eval_budget:
            return False
        if cfg.time_budget_s is not None and self._elapsed() >= cfg.time_budget_s:
            return False
        if cfg.candidate_budget is not None and stats['explored'] >= cfg.candidate_budget:
            return False
        return True

    def _log(self, record: Dict):
        if self.store is not None:
            self.store.append_record(record)

    def _say(self, message: str):
        if self.verbose:
            print(message)

    # -- rejeição -----------------------------------------------------------

    def _count_candidate(self):
        self.run.stats['explored'] += 1

    def _accept_branch(self, graph: LossGraph) -> bool:
        start = time.perf_counter()
        score = self.filter.branch_score(graph)
        passed = score >= self.ctx.eta
        if not passed:
            self.run.stats['rejected'] += 1
            self._log({
                'type': 'candidate', 'stage': 'init', 'branch': graph.branch_name,
                'formula': format_formula(graph), 'g': score, 'outcome': 'rejected',
                'time_ms': round((time.perf_counter() - start) * 1000, 3),
            })
        return passed

    def _propose(self) -> Optional[Individual]:
        """Descendente que passou na rejeição; None se o orçamento acabou."""
        parent = tournament_select(self.run.population, self.cfg.tournament_ratio, self.rng)
        for _ in range(self.cfg.rejection_attempts):
            if not self._budget_left():
                return None
            start = time.perf_counter()
            child, path = make_offspring(parent.loss, self.rng, self.task.branches, self.cfg.init_depth,
                                         self.cfg.node_cap, max_attempts=self.cfg.mutation_attempts,
                                         return_path=True)
            self.run.stats['explored'] += 1
            if not self.cfg.use_rejection:
                return self._new_individual(child, path, parent, None)
            passed, score = self.filter.evaluate(child)
            if passed:
                return self._new_individual(child, path, parent, score)
            self.run.stats['rejected'] += 1
            self._log({
                'type': 'candidate', 'stage': 'evolve', 'hash': f"{structural_hash(child):016x}",
                'formula': format_loss(child), 'g': score, 'outcome': 'rejected', 'origin': path,
                'time_ms': round((time.perf_counter() - start) * 1000, 3),
            })
        raise SearchAbortedError(
            f"Nenhum descendente passou na rejeição após {self.cfg.rejection_attempts} tentativas"
        )

    def _new_individual(self, loss, path, parent, score) -> Individual:
        self._generation += 1
        passed = True if self.cfg.use_rejection else None
        return Individual(loss, self._generation, rejection_score=score, passed_rejection=passed,
                          origin=path, parent_hash=parent.loss_hash)

    # -- avaliação ----------------------------------------------------------

    def _fingerprint(self, ind: Individual) -> Optional[float]:
        """Calcula a impressão digital; devolve a nota em cache, se houver."""
        if not self.cfg.use_fingerprint:
            return None
        ind.fingerprint = fingerprint(self.ctx, ind.loss)
        return self.run.cache.get(ind.fingerprint)

    def _insert(self, ind: Individual, outcome: str, time_ms: float):
        run = self.run
        run.population.insert(ind)
        run.evaluated.append(ind)
        run.stats['inserted'] += 1
        if run.best is None or ind.fitness > run.best.fitness:
            run.best = ind
        heapq.heappush(self._top_scores, ind.fitness)
        if len(self._top_scores) > TOP_K:
            heapq.heappop(self._top_scores)
        if outcome == 'evaluated':
            run.history.append({
                'eval_index': run.stats['proxy_evals'],
                'top5_mean': float(np.mean(self._top_scores)),
                'best': float(run.best.fitness),
            })
        record = individual_record(ind)
        record.update({'type': 'candidate', 'stage': 'insert', 'outcome': outcome, 'time_ms': round(time_ms, 3)})
        self._log(record)
        self._say(f"{'♻️' if outcome == 'cache_hit' else '🧪'} [{run.stats['proxy_evals']}/{self.cfg.eval_budget}] "
                  f"fitness={ind.fitness:.4f} melhor={run.best.fitness:.4f}")

    def _cache_hit(self, ind: Individual, fitness: float):
        ind.set_fitness(fitness, cache_hit=True)
        self.run.stats['cache_hits'] += 1
        self._insert(ind, 'cache_hit', 0.0)

    def _finish_proxy(self, ind: Individual, fitness: float, time_ms: float):
        self.run.stats['proxy_evals'] += 1
        ind.set_fitness(fitness)
        if ind.fingerprint is not None:
            self.run.cache.put(ind.fingerprint, fitness)
        self._insert(ind, 'evaluated', time_ms)

    def _evaluate(self, ind: Individual):
        cached = self._fingerprint(ind)
        if cached is not None:
            self._cache_hit(ind, cached)
            return
        start = time.perf_counter()
        fitness = train_and_score(self.task, ind.loss, seed=self.cfg.seed, early_stop=self.cfg.use_early_stop)
        self._finish_proxy(ind, fitness, (time.perf_counter() - start) * 1000)

    # -- laço principal -----------------------------------------------------

    def _seed_loss(self, text: str) -> MultiBranchLoss:
        parsed = parse_loss(text, self.task.branch_names[0])
        missing = [name for name in self.task.branch_names if name not in parsed.names]
        if missing:
            raise ConfigurationError(f"Fórmula inicial sem os ramos {missing}: {text}", key='seed_formulas')
        return MultiBranchLoss(tuple(parsed.branch(name) for name in self.task.branch_names), self.task.weights)

    def _initial_population(self) -> List[Individual]:
        seeds = [self._seed_loss(text) for text in self.cfg.seed_formulas]
        population = init_population(
            self.cfg.population_size, self.task.branches, self.rng,
            self._accept_branch if self.cfg.use_rejection else None,
            depth=self.cfg.init_depth, capacity=self.cfg.recency_window,
            max_attempts=self.cfg.rejection_attempts, weights=self.task.weights, seeds=seeds,
            budget_left=self._budget_left, on_candidate=self._count_candidate,
        )
        members = list(population)
        if self.filter is not None and self.cfg.use_rejection:
            for ind in members:
                ind.rejection_score = self.filter.evaluate(ind.loss)[1]
        return members

    def _run_serial(self, initial: List[Individual]):
        for ind in initial:
            if not self._budget_left():
                return
            self._evaluate(ind)
        while self._budget_left():
            child = self._propose()
            if child is None:
                return
            self._evaluate(child)

    def _run_parallel(self, initial: List[Individual]):
        """
        Avaliações proxy em W processos. A ordem de inserção segue a ordem de
        término, então só W=1 é reprodutível.
        """
        pending = {}
        waiting: Dict[tuple, List[Individual]] = {}
        queue = list(initial)
        submitted = 0
        with ProcessPoolExecutor(max_workers=self.cfg.workers, initializer=_init_worker,
                                 initargs=(self.task,)) as executor:
            while True:
                while len(pending) < self.cfg.workers and submitted < self.cfg.eval_budget and self._budget_left():
                    if queue:
                        ind = queue.pop(0)
                    elif self.run.population.evaluated():
                        ind = self._propose()
                        if ind is None:
                            break
                    else:
                        break
                    cached = self._fingerprint(ind)
                    if cached is not None:
                        self._cache_hit(ind, cached)
                        continue
                    if ind.fingerprint is not None and ind.fingerprint in waiting:
                        waiting[ind.fingerprint].append(ind)
                        continue
                    if ind.fingerprint is not None:
                        waiting[ind.fingerprint] = []
                    future = executor.submit(_worker_train, ind.loss, self.cfg.seed, self.cfg.use_early_stop)
                    pending[future] = ind
                    submitted += 1
                if not pending:
                    return
                done, _ = wait(list(pending), return_when=FIRST_COMPLETED)
                for future in done:
                    ind = pending.pop(future)
                    fitness, time_ms = future.result()
                    self._finish_proxy(ind, fitness, time_ms)
                    for duplicate in waiting.pop(ind.fingerprint, []) if ind.fingerprint is not None else []:
                        self._cache_hit(duplicate, fitness)

    def execute(self) -> SearchRun:
        self._start = time.perf_counter()
        self._say(f"🔎 Iniciando busca: tarefa={self.cfg.task} métrica={self.task.metric} "
                  f"orçamento={self.cfg.eval_budget}")
        try:
            initial = self._initial_population()
            self._say(f"✅ População inicial com {len(initial)} perdas aprovadas")
            if self.cfg.workers > 1:
                self._run_parallel(initial)
            else:
                self._run_serial(initial)
        except (SearchSetupError, SearchAbortedError) as e:
            self.run.abort_reason = str(e)
            self._say(f"❌ Busca abortada: {e}")
        self.run.elapsed_s = self._elapsed()
        if self.filter is not None:
            self.run.stats['undefined_samples'] = self.filter.undefined_samples
            if self.filter.undefined_samples:
                self._say(f"⚠️ {self.filter.undefined_samples} amostras com métrica indefinida contaram como ganho 0")
        self._log({'type': 'stats', **self.run.summary()})
        return self.run


def run_search(cfg: SearchConfig, task: Optional[ProxyTask] = None, store=None, verbose: bool = False) -> SearchRun:
    """
    Executa a busca completa.

    Returns:
        SearchRun: estatísticas, histórico e melhor indivíduo (empate -> o primeiro)
    """
    return LossSearch(cfg, task, store, verbose).execute()


def run_ablation(cfg: SearchConfig, variants: Sequence[str] = tuple(ABLATION_VARIANTS),
                 time_budget_s: Optional[float] = None, candidate_budget: Optional[int] = None,
                 task: Optional[ProxyTask] = None, verbose: bool = False) -> Dict[str, SearchRun]:
    """
    Roda as variantes degeneradas com o mesmo orçamento.

    Variantes cumulativas: naive (sem rejeição nem impressão digital),
    +rejection, +fingerprint, +earlystop.

    Returns:
        Dict[str, SearchRun]: uma execução por variante
    """
    if not variants:
        raise ConfigurationError("Nenhuma variante de ablação informada", key='variants')
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigurationError(f"Variantes desconhecidas: {unknown}", key='variants')
    task = cfg.validate().build_task(task)
    runs = {}
    for variant in variants:
        use_rejection, use_fingerprint, use_early_stop = ABLATION_VARIANTS[variant]
        variant_cfg = replace(
            cfg,
            use_rejection=use_rejection, use_fingerprint=use_fingerprint, use_early_stop=use_early_stop,
            time_budget_s=time_budget_s if time_budget_s is not None else cfg.time_budget_s,
            candidate_budget=candidate_budget if candidate_budget is not None else cfg.candidate_budget,
            workers=1,
        )
        if verbose:
            print(f"\n📊 Variante {variant}")
        runs[variant] = run_search(variant_cfg, task=task, verbose=verbose)
    return runs
