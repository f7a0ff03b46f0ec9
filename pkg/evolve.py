#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
População e variação

Seleção por torneio, janela de recência (apenas os P indivíduos mais
recentes são mantidos) e as três mutações (inserção, remoção, troca) usadas
pelo pipeline cópia / reinicialização / mutação.
"""

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import NodeCapExceeded, SearchSetupError, SelectionError
from loss_expr import (
    ARITY, NODE_CAP, PREDICTION_LEAVES, ExprNode, LossGraph, MultiBranchLoss,
    random_graph, random_leaf, random_operator, structural_hash,
)

Path = Tuple[int, ...]

COPY_PROBABILITY = 0.10
REINIT_PROBABILITY = 0.50
MUTATIONS_PER_OFFSPRING = 2
MUTATION_ATTEMPTS = 100
REJECTION_ATTEMPTS = 10000


@dataclass
class Individual:
    """
    Candidato multi-ramo com nota, impressão digital e linhagem.

    A nota (fitness) só pode ser definida uma vez: após a avaliação proxy ou
    após um acerto no cache de impressões digitais. passed_rejection fica
    None quando nenhum filtro rodou.
    """
    loss: MultiBranchLoss
    generation: int = 0
    fitness: Optional[float] = None
    fingerprint: Optional[tuple] = None
    rejection_score: Optional[float] = None
    passed_rejection: Optional[bool] = None
    origin: str = 'init'
    parent_hash: Optional[int] = None
    cache_hit: bool = False

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None

    @property
    def loss_hash(self) -> int:
        return structural_hash(self.loss)

    def set_fitness(self, value: float, cache_hit: bool = False):
        if self.fitness is not None:
            raise ValueError("Fitness já definida para este indivíduo")
        self.fitness = float(value)
        self.cache_hit = cache_hit


class Population:
    """Fila dos P indivíduos mais recentes; o mais antigo sai primeiro."""

    def __init__(self, capacity: int, members: Iterable[Individual] = ()):
        if capacity < 1:
            raise ValueError("Capacidade da população precisa ser >= 1")
        self.capacity = capacity
        self.members = deque(members, maxlen=capacity)

    def insert(self, individual: Individual):
        self.members.append(individual)

    def evaluated(self) -> List[Individual]:
        return [ind for ind in self.members if ind.evaluated]

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


# ---------------------------------------------------------------------------
# Navegação na árvore
# ---------------------------------------------------------------------------

def node_paths(body: ExprNode) -> List[Path]:
    """Caminhos (índices de filhos) de todos os nós abaixo da saída, em pré-ordem."""
    paths = []

    def walk(node, path):
        paths.append(path)
        for index, child in enumerate(node.children):
            walk(child, path + (index,))

    walk(body, ())
    return paths


def get_node(body: ExprNode, path: Path) -> ExprNode:
    node = body
    for index in path:
        node = node.children[index]
    return node


def replace_node(body: ExprNode, path: Path, new: ExprNode) -> ExprNode:
    if not path:
        return new
    head, rest = path[0], path[1:]
    children = list(body.children)
    children[head] = replace_node(children[head], rest, new)
    return ExprNode(body.kind, tuple(children))


def is_valid_graph(g: LossGraph, node_cap: int = NODE_CAP) -> bool:
    """Aridade consistente em todos os nós e contagem dentro do limite."""
    def valid(node):
        if node.is_leaf:
            return node.kind in ('y', 'yhat', 'one', 'i', 'u', 'e')
        return len(node.children) == ARITY.get(node.kind, -1) and all(valid(c) for c in node.children)

    return valid(g.body) and g.node_count() <= node_cap


def _pick_path(g: LossGraph, rng: np.random.Generator, path: Optional[Path]) -> Path:
    if path is not None:
        return tuple(path)
    paths = node_paths(g.body)
    return paths[int(rng.integers(len(paths)))]


def _checked(body: ExprNode, g: LossGraph, node_cap: int) -> LossGraph:
    result = LossGraph(body, g.branch_name)
    if result.node_count() > node_cap:
        raise NodeCapExceeded(f"Grafo com {result.node_count()} nós excede o limite de {node_cap}")
    return result


# ---------------------------------------------------------------------------
# Mutações
# ---------------------------------------------------------------------------

def mutate_insert(g: LossGraph, rng: np.random.Generator, leaves: Sequence[str] = PREDICTION_LEAVES,
                  node_cap: int = NODE_CAP, op: Optional[str] = None, path: Optional[Path] = None) -> LossGraph:
    """
    Insere um operador entre um nó não-raiz e o seu pai.

    Com operador binário, o segundo filho é uma folha nova.

    Raises:
        NodeCapExceeded: resultado acima do limite de nós
    """
    path = _pick_path(g, rng, path)
    target = get_node(g.body, path)
    kind = op or random_operator(rng)
    if ARITY[kind] == 1:
        inserted = ExprNode(kind, (target,))
    else:
        inserted = ExprNode(kind, (target, random_leaf(rng, leaves)))
    return _checked(replace_node(g.body, path, inserted), g, node_cap)


def mutate_delete(g: LossGraph, rng: np.random.Generator, path: Optional[Path] = None) -> LossGraph:
    """
    Remove um operador intermediário e promove um dos seus filhos.

    Sem operadores (grafo só com folha) devolve uma cópia estrutural.
    """
    if path is None:
        candidates = [p for p in node_paths(g.body) if not get_node(g.body, p).is_leaf]
        if not candidates:
            return LossGraph(g.body, g.branch_name)
        path = candidates[int(rng.integers(len(candidates)))]
    node = get_node(g.body, tuple(path))
    if node.is_leaf:
        return LossGraph(g.body, g.branch_name)
    promoted = node.children[int(rng.integers(len(node.children)))]
    return LossGraph(replace_node(g.body, tuple(path), promoted), g.branch_name)


def mutate_replace(g: LossGraph, rng: np.random.Generator, leaves: Sequence[str] = PREDICTION_LEAVES,
                   node_cap: int = NODE_CAP, op: Optional[str] = None, path: Optional[Path] = None) -> LossGraph:
    """
    Troca um nó não-raiz por um operador aleatório.

    Filhos em excesso são descartados ao acaso (mantendo a ordem dos
    restantes); faltando filhos, completa com folhas novas. Uma folha
    escolhida vira operador sobre folhas novas.

    Raises:
        NodeCapExceeded: resultado acima do limite de nós
    """
    path = _pick_path(g, rng, path)
    target = get_node(g.body, path)
    kind = op or random_operator(rng)
    arity = ARITY[kind]
    children = list(target.children)
    if len(children) > arity:
        keep = np.sort(rng.choice(len(children), size=arity, replace=False))
        children = [children[int(i)] for i in keep]
    while len(children) < arity:
        children.append(random_leaf(rng, leaves))
    return _checked(replace_node(g.body, path, ExprNode(kind, tuple(children))), g, node_cap)


MUTATIONS = ('insert', 'delete', 'replace')


def apply_mutation(name: str, g: LossGraph, rng: np.random.Generator,
                   leaves: Sequence[str] = PREDICTION_LEAVES, node_cap: int = NODE_CAP) -> LossGraph:
    if name == 'insert':
        return mutate_insert(g, rng, leaves, node_cap)
    if name == 'delete':
        return mutate_delete(g, rng)
    if name == 'replace':
        return mutate_replace(g, rng, leaves, node_cap)
    raise ValueError(f"Mutação desconhecida: {name}")


# ---------------------------------------------------------------------------
# Geração de descendentes
# ---------------------------------------------------------------------------

def _leaf_sets(branches) -> Dict[str, Sequence[str]]:
    return {spec.name: tuple(spec.leaves) for spec in branches} if branches else {}


def random_loss(branches, rng: np.random.Generator, depth: int, weights=None) -> MultiBranchLoss:
    """Uma perda nova com um grafo aleatório de profundidade D por ramo."""
    graphs = tuple(random_graph(depth, rng, tuple(spec.leaves), spec.name) for spec in branches)
    return MultiBranchLoss(graphs, weights)


def make_offspring(parent: MultiBranchLoss, rng: np.random.Generator, branches=None,
                   depth: int = 3, node_cap: int = NODE_CAP, copy_probability: float = COPY_PROBABILITY,
                   reinit_probability: float = REINIT_PROBABILITY, max_attempts: int = MUTATION_ATTEMPTS,
                   return_path: bool = False):
    """
    Gera um descendente: cópia (10%), reinicialização (metade do resto) ou
    duas mutações, cada uma num ramo sorteado.

    Mutação que estoura o limite de nós é repetida até `max_attempts` vezes;
    depois disso o ramo é reinicializado.

    Args:
        parent: perda do pai
        rng: gerador do chamador
        branches: especificação dos ramos (nome e folhas); padrão = folhas de previsão
        depth: profundidade D da reinicialização
        node_cap: limite de nós por ramo
        return_path: se True devolve também 'copy', 'reinit' ou 'mutate'

    Returns:
        MultiBranchLoss (ou tupla (perda, caminho))
    """
    leaf_sets = _leaf_sets(branches)

    def leaves_of(name):
        return leaf_sets.get(name, PREDICTION_LEAVES)

    def fresh(graph):
        return random_graph(depth, rng, leaves_of(graph.branch_name), graph.branch_name)

    if rng.random() < copy_probability:
        child, path = MultiBranchLoss(parent.branches, parent.weights), 'copy'
    elif rng.random() < reinit_probability:
        child = MultiBranchLoss(tuple(fresh(g) for g in parent.branches), parent.weights)
        path = 'reinit'
    else:
        graphs = list(parent.branches)
        for _ in range(MUTATIONS_PER_OFFSPRING):
            index = int(rng.integers(len(graphs)))
            name = MUTATIONS[int(rng.integers(len(MUTATIONS)))]
            graph = graphs[index]
            for _attempt in range(max_attempts):
                try:
                    graphs[index] = apply_mutation(name, graph, rng, leaves_of(graph.branch_name), node_cap)
                    break
                except NodeCapExceeded:
                    continue
            else:
                graphs[index] = fresh(graph)
        child, path = MultiBranchLoss(tuple(graphs), parent.weights), 'mutate'

    return (child, path) if return_path else child


# ---------------------------------------------------------------------------
# População inicial e seleção
# ---------------------------------------------------------------------------

def init_population(k: int, branches, rng: np.random.Generator,
                    accept: Callable[[LossGraph], bool] = None, depth: int = 3,
                    capacity: int = 2500, max_attempts: int = REJECTION_ATTEMPTS,
                    weights=None, seeds: Sequence[MultiBranchLoss] = (),
                    budget_left: Optional[Callable[[], bool]] = None,
                    on_candidate: Optional[Callable[[], None]] = None) -> Population:
    """
    Monta K indivíduos aleatórios que passaram pela rejeição.

    Cada ramo é sorteado até ser aceito pelo predicado; uma perda multi-ramo
    passa quando todos os ramos passam. Um ramo reprovado conta como uma
    perda candidata descartada e uma perda completa conta como uma aceita.

    Args:
        k: tamanho da população inicial
        branches: especificação dos ramos (nome e folhas)
        rng: gerador do chamador
        accept: predicado de rejeição por ramo (None: sem rejeição, os
            indivíduos ficam com passed_rejection=None)
        depth: profundidade D
        capacity: janela de recência P
        max_attempts: tentativas por vaga antes de desistir
        seeds: perdas fornecidas pelo usuário, entram primeiro se aceitas
        budget_left: consultado antes de cada sorteio; False encerra e
            devolve a população parcial
        on_candidate: chamado uma vez por perda candidata examinada

    Raises:
        SearchSetupError: vaga sem candidato aceito após max_attempts
    """
    if k < 1:
        raise SearchSetupError("População inicial precisa de K >= 1")
    passed = True if accept is not None else None
    accept = accept or (lambda graph: True)
    budget_left = budget_left or (lambda: True)
    on_candidate = on_candidate or (lambda: None)
    population = Population(capacity)

    for loss in seeds:
        if len(population) >= k or not budget_left():
            break
        on_candidate()
        if all(accept(graph) for graph in loss.branches):
            population.insert(Individual(loss, 0, passed_rejection=passed, origin='seed'))
        else:
            print(f"⚠️ Fórmula inicial rejeitada, ignorando: {loss.names}")

    while len(population) < k:
        attempts = 0
        graphs = []
        for spec in branches:
            while True:
                if not budget_left():
                    return population
                attempts += 1
                if attempts > max_attempts:
                    raise SearchSetupError(
                        f"Nenhuma perda aceita após {max_attempts} tentativas (ramo '{spec.name}')"
                    )
                graph = random_graph(depth, rng, tuple(spec.leaves), spec.name)
                if accept(graph):
                    graphs.append(graph)
                    break
                on_candidate()
        on_candidate()
        population.insert(Individual(MultiBranchLoss(tuple(graphs), weights), 0, passed_rejection=passed))
    return population


def tournament_select(p: Population, t_ratio: float, rng: np.random.Generator) -> Individual:
    """
    Sorteia ceil(T * |população|) indivíduos avaliados e devolve o melhor.

    Empates: geração mais recente, depois posição mais recente na fila.

    Raises:
        SelectionError: nenhum indivíduo avaliado
    """
    members = list(p.members)
    eligible = [index for index, ind in enumerate(members) if ind.evaluated]
    if not eligible:
        raise SelectionError("Nenhum indivíduo avaliado para o torneio")
    size = min(len(eligible), max(1, math.ceil(t_ratio * len(members))))
    sampled = rng.choice(len(eligible), size=size, replace=False)
    best = max((eligible[int(i)] for i in sampled),
               key=lambda index: (members[index].fitness, members[index].generation, index))
    return members[best]
