#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Protocolo de rejeição e checagem de equivalência por gradiente

Um candidato é descartado cedo quando a descida de gradiente diretamente
sobre previsões em cache (sem treinar rede nenhuma) não melhora a métrica
alvo em pelo menos η. Candidatos com a mesma impressão digital (normas do
gradiente com dois algarismos significativos) reaproveitam a nota já medida.
"""

import threading
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import ConfigurationError, MetricUndefinedError
from loss_expr import LossGraph, MultiBranchLoss, random_graph, structural_hash
from metrics import box_regression_score, canonical_boxes, score_segmentation
from proxy import BranchSpec, ProxyTask, branch_forward_backward

DEFAULT_ETA = 0.6
SIMPLEX_FLOOR = 1e-6
NONFINITE_NORM = -1.0

GradientFingerprint = Tuple[float, ...]


@dataclass(frozen=True)
class RejectionOptimizer:
    lr: float = 0.001
    momentum: float = 0.9
    iterations: int = 500
    weight_decay: float = 0.0


@dataclass(frozen=True)
class BranchSamples:
    """
    Amostras em cache de um ramo, empilhadas no eixo 0.

    Args:
        spec: ramo (tipo e métrica)
        yhat: previsões iniciais (B, ...)
        y: alvos vistos pela perda (B, ...)
        reference: alvos da métrica; None usa `y`
    """
    spec: BranchSpec
    yhat: np.ndarray
    y: np.ndarray
    reference: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.reference is None:
            object.__setattr__(self, 'reference', self.y)
        for name in ('yhat', 'y', 'reference'):
            array = np.array(getattr(self, name), dtype=np.float64)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        if not self.yhat.shape == self.y.shape == self.reference.shape:
            raise ConfigurationError(f"Amostras com dimensões diferentes: {self.yhat.shape} vs {self.y.shape}")

    @property
    def count(self) -> int:
        return self.yhat.shape[0]


@dataclass(frozen=True)
class RejectionContext:
    """B pares (previsão, alvo) por ramo, limiar η e o otimizador da descida."""
    samples: Dict[str, BranchSamples]
    eta: float = DEFAULT_ETA
    optimizer: RejectionOptimizer = field(default_factory=RejectionOptimizer)

    @property
    def branch_names(self) -> Tuple[str, ...]:
        return tuple(self.samples)


@dataclass
class BranchReport:
    score: float
    undefined_samples: List[int]
    iterations: int


def capture_samples(task: ProxyTask, b: int, rng: np.random.Generator, eta: float = DEFAULT_ETA,
                    optimizer: Optional[RejectionOptimizer] = None) -> RejectionContext:
    """
    Sorteia B amostras do treino e registra as saídas de um preditor recém
    inicializado (probabilidades softmax nos ramos de classificação).

    Raises:
        ConfigurationError: treino menor que B amostras
    """
    needed = b * task.sample_size
    if b < 1 or needed > len(task.train_x):
        raise ConfigurationError(
            f"Conjunto de treino com {len(task.train_x)} itens não comporta B={b} amostras", key='rejection_samples'
        )
    index = rng.choice(len(task.train_x), size=needed, replace=False)
    predictor = task.new_predictor(rng)
    outputs = task.predict(predictor, task.train_x[index])
    references = {name: task.train_y[name][index] for name in task.branch_names}
    targets = task.loss_targets(references)
    samples = {}
    for spec in task.branches:
        prediction = outputs[spec.name]
        shape = (b, task.sample_size) + prediction.shape[1:]
        samples[spec.name] = BranchSamples(
            spec, prediction.reshape(shape), targets[spec.name].reshape(shape),
            references[spec.name].reshape(shape),
        )
    return RejectionContext(samples, eta, optimizer or RejectionOptimizer())


def _project(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == 'box':
        return canonical_boxes(x)
    clipped = np.clip(x, SIMPLEX_FLOOR, 1.0)
    return clipped / np.sum(clipped, axis=-3, keepdims=True)


def _per_sample_finite(array: np.ndarray) -> np.ndarray:
    return np.all(np.isfinite(array.reshape(array.shape[0], -1)), axis=1)


def descend_branch(graph: LossGraph, samples: BranchSamples, optimizer: RejectionOptimizer) -> Tuple[np.ndarray, int]:
    """
    Descida com momento sobre as B previsões de um ramo, em lote.

    A perda aqui é a soma sem normalização. Depois de cada passo as
    previsões voltam ao domínio válido (simplex ou caixa canônica). Uma
    amostra com perda ou gradiente não finito para e mantém o último iterado
    finito.

    Returns:
        (previsões otimizadas, iterações executadas)
    """
    kind = samples.spec.kind
    x = samples.yhat.copy()
    velocity = np.zeros_like(x)
    active = np.ones(samples.count, dtype=bool)
    broadcast = (slice(None),) + (None,) * (x.ndim - 1)

    for iteration in range(optimizer.iterations):
        loss, grad = branch_forward_backward(graph, kind, x, samples.y, normalize=False)
        finite = np.isfinite(loss) & _per_sample_finite(grad)
        active &= finite
        if not active.any():
            return x, iteration
        grad = np.where(active[broadcast], grad, 0.0)
        if optimizer.weight_decay:
            grad = grad + optimizer.weight_decay * x
        if iteration == 0 and not np.any(grad):
            return x, iteration
        with np.errstate(all='ignore'):
            velocity = optimizer.momentum * velocity + grad
            candidate = _project(x - optimizer.lr * velocity, kind)
        moved = active & _per_sample_finite(candidate)
        active &= moved
        x = np.where(moved[broadcast], candidate, x)
    return x, optimizer.iterations


def _sample_metric(spec: BranchSpec, prediction: np.ndarray, target: np.ndarray) -> float:
    if spec.kind == 'box':
        return box_regression_score(prediction, target)
    return score_segmentation(prediction, target, spec.metric)


def branch_correlation(graph: LossGraph, samples: BranchSamples, optimizer: RejectionOptimizer) -> BranchReport:
    """g de um ramo: melhora média da métrica após a descida."""
    optimized, iterations = descend_branch(graph, samples, optimizer)
    gains, undefined = [], []
    for b in range(samples.count):
        try:
            before = _sample_metric(samples.spec, samples.yhat[b], samples.reference[b])
            after = _sample_metric(samples.spec, optimized[b], samples.reference[b])
            gains.append(after - before)
        except MetricUndefinedError:
            gains.append(0.0)
            undefined.append(b)
    return BranchReport(float(np.mean(gains)), undefined, iterations)


def optimize_predictions(ctx: RejectionContext, loss: MultiBranchLoss) -> Dict[str, np.ndarray]:
    """
    ŷ* por ramo: previsões após a descida, empilhadas (B, ...).

    Os ramos são somados na perda total e cada um depende só das próprias
    previsões, então a descida é feita ramo a ramo.
    """
    return {name: descend_branch(loss.branch(name), samples, ctx.optimizer)[0]
            for name, samples in ctx.samples.items()}


def branch_scores(ctx: RejectionContext, loss: MultiBranchLoss) -> Dict[str, float]:
    return {name: branch_correlation(loss.branch(name), samples, ctx.optimizer).score
            for name, samples in ctx.samples.items()}


def correlation_score(ctx: RejectionContext, loss: MultiBranchLoss) -> float:
    """g(L; ξ); para perdas multi-ramo é o menor g entre os ramos."""
    return min(branch_scores(ctx, loss).values())


def passes_rejection(ctx: RejectionContext, loss: MultiBranchLoss) -> bool:
    return correlation_score(ctx, loss) >= ctx.eta


# ---------------------------------------------------------------------------
# Impressão digital
# ---------------------------------------------------------------------------

def round_significant(value: float, digits: int = 2) -> float:
    """Arredonda para `digits` algarismos significativos (meio para longe do zero)."""
    if not np.isfinite(value):
        return NONFINITE_NORM
    if value == 0:
        return 0.0
    number = Decimal(repr(float(value)))
    quantum = Decimal(1).scaleb(number.adjusted() - digits + 1)
    return float(number.quantize(quantum, rounding=ROUND_HALF_UP))


def branch_fingerprint(graph: LossGraph, samples: BranchSamples) -> GradientFingerprint:
    _, grad = branch_forward_backward(graph, samples.spec.kind, samples.yhat, samples.y, normalize=True)
    with np.errstate(all='ignore'):
        norms = np.sqrt(np.sum(np.square(grad.reshape(samples.count, -1)), axis=1))
    return tuple(round_significant(norm) for norm in norms)


def fingerprint(ctx: RejectionContext, loss: MultiBranchLoss) -> GradientFingerprint:
    """Normas L2 de ∂L/∂ŷ_b em cada amostra, concatenadas na ordem dos ramos."""
    norms = ()
    for name, samples in ctx.samples.items():
        norms += branch_fingerprint(loss.branch(name), samples)
    return norms


class FingerprintCache:
    """Mapa impressão digital -> nota, seguro para acesso concorrente."""

    def __init__(self):
        self._scores: Dict[GradientFingerprint, float] = {}
        self._lock = threading.Lock()

    def get(self, fp: GradientFingerprint) -> Optional[float]:
        with self._lock:
            return self._scores.get(fp)

    def put(self, fp: GradientFingerprint, fitness: float) -> float:
        """Insere se ausente e devolve o valor guardado."""
        with self._lock:
            return self._scores.setdefault(fp, float(fitness))

    def __len__(self):
        return len(self._scores)

    def __contains__(self, fp):
        return fp in self._scores

    def to_dict(self) -> Dict[str, float]:
        with self._lock:
            return {','.join(repr(v) for v in fp): score for fp, score in self._scores.items()}


def cache_lookup(cache: FingerprintCache, fp: GradientFingerprint) -> Optional[float]:
    return cache.get(fp)


class RejectionFilter:
    """
    Aplica o protocolo com memória por ramo.

    O veredito de cada ramo fica guardado pelo hash estrutural, então ramos
    herdados intactos do pai não são refeitos. `undefined_samples` soma as
    amostras cuja métrica ficou indefinida (contam como ganho 0).
    """

    def __init__(self, ctx: RejectionContext):
        self.ctx = ctx
        self._memo: Dict[Tuple[str, int], float] = {}
        self.branches_tested = 0
        self.memo_hits = 0
        self.undefined_samples = 0

    def branch_score(self, graph: LossGraph) -> float:
        key = (graph.branch_name, structural_hash(graph))
        if key in self._memo:
            self.memo_hits += 1
            return self._memo[key]
        self.branches_tested += 1
        report = branch_correlation(graph, self.ctx.samples[graph.branch_name], self.ctx.optimizer)
        self.undefined_samples += len(report.undefined_samples)
        self._memo[key] = report.score
        return report.score

    def accepts_branch(self, graph: LossGraph) -> bool:
        return self.branch_score(graph) >= self.ctx.eta

    def evaluate(self, loss: MultiBranchLoss) -> Tuple[bool, float]:
        """(passou, g) com g = menor g dos ramos; para no primeiro ramo reprovado."""
        lowest = float('inf')
        for name in self.ctx.branch_names:
            score = self.branch_score(loss.branch(name))
            lowest = min(lowest, score)
            if score < self.ctx.eta:
                return False, lowest
        return True, lowest


def measure_fingerprint_collisions(ctx: RejectionContext, n_pairs: int, rng: np.random.Generator,
                                   depth: int = 3) -> Dict:
    """
    Mede colisões de impressão digital entre pares de perdas aleatórias.

    Uma colisão é falsa quando as duas perdas têm a mesma impressão digital
    mas valores diferentes nas amostras em cache (comportamento distinto).

    Returns:
        Dict: pares, colisões, colisões falsas e as taxas
    """
    name = ctx.branch_names[0]
    samples = ctx.samples[name]
    collisions = false_collisions = 0

    def sample_values(graph):
        loss, _ = branch_forward_backward(graph, samples.spec.kind, samples.yhat, samples.y)
        return loss

    for _ in range(n_pairs):
        first = random_graph(depth, rng, samples.spec.leaves, name)
        second = random_graph(depth, rng, samples.spec.leaves, name)
        if branch_fingerprint(first, samples) != branch_fingerprint(second, samples):
            continue
        collisions += 1
        with np.errstate(all='ignore'):
            same = np.allclose(sample_values(first), sample_values(second), rtol=1e-9, atol=0.0, equal_nan=True)
        if not same:
            false_collisions += 1

    return {
        'pairs': n_pairs,
        'collisions': collisions,
        'false_collisions': false_collisions,
        'collision_rate': collisions / n_pairs if n_pairs else 0.0,
        'false_collision_rate': false_collisions / n_pairs if n_pairs else 0.0,
    }
