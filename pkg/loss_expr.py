#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Espaço de busca de funções de perda

Cada ramo de perda é uma árvore de operadores primitivos sobre as folhas
{y, yhat, one} (ramos de caixa usam {i, u, e, one}). O nó raiz é apenas a
saída e tem um único filho, guardado em LossGraph.body. O módulo cobre
avaliação, gradiente reverso em relação às previsões, geração aleatória,
hash estrutural, simplificação e o formato texto das fórmulas.
"""

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigurationError, FormulaParseError, ShapeError
from tensor4 import (
    AggregateMode, BinaryKind, PoolMode, Tensor4, UnaryKind,
    aggregate_backward, aggregate_forward, binary_forward, pool_backward,
    pool_forward, unary_backward, unary_forward,
)

BINARY_OPS = ('add', 'mul')
ELEMENTWISE_OPS = ('neg', 'abs', 'inv', 'log', 'exp', 'tanh', 'square', 'sqrt')
AGGREGATE_OPS = ('mean_nhw', 'mean_c', 'maxpool', 'minpool')
OPERATORS = BINARY_OPS + ELEMENTWISE_OPS + AGGREGATE_OPS
ARITY = {op: (2 if op in BINARY_OPS else 1) for op in OPERATORS}

PREDICTION_LEAVES = ('y', 'yhat', 'one')
BOX_LEAVES = ('i', 'u', 'e', 'one')
LEAVES = ('y', 'yhat', 'one', 'i', 'u', 'e')
# folhas em relação às quais o gradiente é calculado
DIFFERENTIABLE_LEAVES = ('yhat', 'i', 'u', 'e')

NODE_CAP = 64


@dataclass(frozen=True)
class ExprNode:
    """Nó da árvore: folha (sem filhos) ou operador com filhos = aridade."""
    kind: str
    children: Tuple['ExprNode', ...] = ()

    def __post_init__(self):
        if self.kind in LEAVES:
            if self.children:
                raise ValueError(f"Folha '{self.kind}' não pode ter filhos")
        elif self.kind in ARITY:
            if len(self.children) != ARITY[self.kind]:
                raise ValueError(
                    f"'{self.kind}' exige {ARITY[self.kind]} filho(s), recebeu {len(self.children)}"
                )
        else:
            raise ValueError(f"Tipo de nó desconhecido: {self.kind}")
        object.__setattr__(self, 'children', tuple(self.children))

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def size(self) -> int:
        return 1 + sum(child.size() for child in self.children)

    def leaves(self) -> List[str]:
        if self.is_leaf:
            return [self.kind]
        return [leaf for child in self.children for leaf in child.leaves()]


def leaf(kind: str) -> ExprNode:
    return ExprNode(kind)


def op(kind: str, *children: ExprNode) -> ExprNode:
    return ExprNode(kind, tuple(children))


@dataclass(frozen=True)
class LossGraph:
    """
    Grafo de um ramo de perda.

    Args:
        body: único filho do nó de saída
        branch_name: rótulo do ramo (ex.: "cls_rpn")
    """
    body: ExprNode
    branch_name: str = 'main'

    def node_count(self) -> int:
        """Nós abaixo da saída (a raiz de saída não conta para o limite)."""
        return self.body.size()

    def path_depths(self) -> List[int]:
        """Número de operadores em cada caminho raiz-folha."""
        depths = []

        def walk(node, count):
            if node.is_leaf:
                depths.append(count)
                return
            for child in node.children:
                walk(child, count + 1)

        walk(self.body, 0)
        return depths

    def depth(self) -> int:
        return max(self.path_depths())

    def has_leaf(self, kind: str) -> bool:
        return kind in self.body.leaves()

    def renamed(self, branch_name: str) -> 'LossGraph':
        return LossGraph(self.body, branch_name)


@dataclass(frozen=True)
class MultiBranchLoss:
    """
    Perda com M ramos, somados (com pesos opcionais) no valor final.

    Args:
        branches: grafos de cada ramo, nomes únicos
        weights: peso por ramo (padrão 1.0)
    """
    branches: Tuple[LossGraph, ...]
    weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        branches = tuple(self.branches)
        if not branches:
            raise ConfigurationError("MultiBranchLoss exige ao menos um ramo")
        names = [b.branch_name for b in branches]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Nomes de ramos repetidos: {names}")
        object.__setattr__(self, 'branches', branches)
        if self.weights is not None:
            weights = tuple(float(w) for w in self.weights)
            if len(weights) != len(branches):
                raise ConfigurationError("Número de pesos diferente do número de ramos")
            object.__setattr__(self, 'weights', weights)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(b.branch_name for b in self.branches)

    def branch(self, name: str) -> LossGraph:
        for graph in self.branches:
            if graph.branch_name == name:
                return graph
        raise KeyError(name)

    def weight(self, name: str) -> float:
        if self.weights is None:
            return 1.0
        return self.weights[self.names.index(name)]

    def with_branch(self, graph: LossGraph) -> 'MultiBranchLoss':
        branches = tuple(graph if b.branch_name == graph.branch_name else b for b in self.branches)
        return MultiBranchLoss(branches, self.weights)

    @classmethod
    def single(cls, graph: LossGraph) -> 'MultiBranchLoss':
        return cls((graph,))


# ---------------------------------------------------------------------------
# Avaliação e gradiente
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8192)
def _compile(body: ExprNode) -> Tuple[Tuple[str, Tuple[int, ...], bool], ...]:
    """
    Lineariza a árvore em pós-ordem.

    Cada instrução é (tipo, slots dos filhos, depende de folha diferenciável).
    """
    program = []

    def emit(node):
        slots = tuple(emit(child) for child in node.children)
        if node.is_leaf:
            needs_grad = node.kind in DIFFERENTIABLE_LEAVES
        else:
            needs_grad = any(program[s][2] for s in slots)
        program.append((node.kind, slots, needs_grad))
        return len(program) - 1

    emit(body)
    return tuple(program)


def _forward(program, leaves: Mapping[str, np.ndarray], shape):
    values, selections = [], {}
    for index, (kind, slots, _) in enumerate(program):
        if kind == 'one':
            value = np.ones(shape)
        elif kind in LEAVES:
            if kind not in leaves:
                raise ConfigurationError(f"Folha '{kind}' sem valor de entrada")
            value = leaves[kind]
        elif kind in BINARY_OPS:
            value = binary_forward(values[slots[0]], values[slots[1]], BinaryKind(kind))
        elif kind in ELEMENTWISE_OPS:
            value = unary_forward(values[slots[0]], UnaryKind(kind))
        elif kind in ('maxpool', 'minpool'):
            value, selections[index] = pool_forward(values[slots[0]], PoolMode(kind))
        else:
            value = aggregate_forward(values[slots[0]], AggregateMode(kind))
        values.append(value)
    return values, selections


def _backward(program, values, selections, seed: np.ndarray) -> Dict[str, np.ndarray]:
    grads: List[Optional[np.ndarray]] = [None] * len(program)
    grads[-1] = seed
    leaf_grads: Dict[str, np.ndarray] = {}
    with np.errstate(all='ignore'):
        for index in range(len(program) - 1, -1, -1):
            kind, slots, needs_grad = program[index]
            grad = grads[index]
            if grad is None or not needs_grad:
                continue
            if kind in LEAVES:
                leaf_grads[kind] = leaf_grads[kind] + grad if kind in leaf_grads else grad
                continue
            if kind == 'add':
                contributions = (grad, grad)
            elif kind == 'mul':
                a, b = values[slots[0]], values[slots[1]]
                contributions = (grad * b, grad * a)
            elif kind in ELEMENTWISE_OPS:
                contributions = (unary_backward(values[slots[0]], values[index], grad, UnaryKind(kind)),)
            elif kind in ('maxpool', 'minpool'):
                contributions = (pool_backward(grad, selections[index]),)
            else:
                contributions = (aggregate_backward(grad, AggregateMode(kind)),)
            for slot, contribution in zip(slots, contributions):
                if not program[slot][2]:
                    continue
                grads[slot] = contribution if grads[slot] is None else grads[slot] + contribution
    return leaf_grads


def _reference_shape(leaves: Mapping[str, np.ndarray]) -> Tuple[int, ...]:
    shapes = {np.shape(v) for v in leaves.values()}
    if len(shapes) != 1:
        raise ShapeError(f"Entradas com dimensões diferentes: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) < 4:
        raise ShapeError(f"Entradas precisam de 4 eixos (N, C, H, W), recebido {shape}")
    return shape


def forward_backward(graph: LossGraph, leaves: Mapping[str, np.ndarray],
                     wrt: Sequence[str] = ('yhat',), normalize: bool = True,
                     with_grad: bool = True) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Avalia o ramo e, opcionalmente, o gradiente reverso.

    Args:
        graph: ramo de perda
        leaves: valores das folhas; eixos finais (N, C, H, W), eixos extras à
            esquerda são amostras independentes
        wrt: folhas cujo gradiente deve ser devolvido (zeros se ausentes no grafo)
        normalize: divide a soma por N*H*W; False soma tudo
        with_grad: se False devolve apenas o valor

    Returns:
        (valor da perda por amostra, dict folha -> gradiente)
    """
    shape = _reference_shape(leaves)
    program = _compile(graph.body)
    values, selections = _forward(program, leaves, shape)
    output = values[-1]
    n, h, w = shape[-4], shape[-2], shape[-1]
    scale = 1.0 / (n * h * w) if normalize else 1.0
    with np.errstate(all='ignore'):
        loss = np.sum(output, axis=(-4, -3, -2, -1)) * scale
    if not with_grad:
        return loss, {}
    seed = np.full(shape, scale)
    leaf_grads = _backward(program, values, selections, seed)
    grads = {name: leaf_grads.get(name, np.zeros(shape)) for name in wrt}
    return loss, grads


def _leaf_inputs(yhat, y) -> Dict[str, np.ndarray]:
    yhat = yhat.data if isinstance(yhat, Tensor4) else np.asarray(yhat, dtype=np.float64)
    y = y.data if isinstance(y, Tensor4) else np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ShapeError(f"yhat {yhat.shape} e y {y.shape} com dimensões diferentes")
    return {'yhat': yhat, 'y': y}


def eval_output(g: LossGraph, yhat, y) -> Tensor4:
    leaves = _leaf_inputs(yhat, y)
    values, _ = _forward(_compile(g.body), leaves, leaves['y'].shape)
    return Tensor4(values[-1])


def loss_value(g: LossGraph, yhat, y) -> float:
    loss, _ = forward_backward(g, _leaf_inputs(yhat, y), with_grad=False)
    return float(loss)


def grad_wrt_prediction(g: LossGraph, yhat, y) -> Tensor4:
    _, grads = forward_backward(g, _leaf_inputs(yhat, y), wrt=('yhat',))
    return Tensor4(grads['yhat'])


def total_loss(m: MultiBranchLoss, inputs: Mapping[str, Union[tuple, Mapping[str, np.ndarray]]],
               weights: Optional[Mapping[str, float]] = None) -> float:
    """
    Soma ponderada das perdas dos ramos.

    Args:
        m: perda multi-ramo
        inputs: por ramo, um par (yhat, y) ou um dict de folhas (ex.: i, u, e)
        weights: pesos por nome de ramo; na ausência usa m.weights ou 1.0

    Returns:
        float: valor total
    """
    total = 0.0
    for graph in m.branches:
        name = graph.branch_name
        if name not in inputs:
            raise ConfigurationError(f"Entrada ausente para o ramo '{name}'", key=name)
        entry = inputs[name]
        if isinstance(entry, Mapping):
            leaves = {k: np.asarray(v.data if isinstance(v, Tensor4) else v, dtype=np.float64)
                      for k, v in entry.items()}
        else:
            leaves = _leaf_inputs(*entry)
        weight = weights[name] if weights and name in weights else m.weight(name)
        value, _ = forward_backward(graph, leaves, with_grad=False)
        total += weight * float(value)
    return total


# ---------------------------------------------------------------------------
# Geração aleatória
# ---------------------------------------------------------------------------

def random_leaf(rng: np.random.Generator, leaves: Sequence[str] = PREDICTION_LEAVES) -> ExprNode:
    return ExprNode(leaves[int(rng.integers(len(leaves)))])


def random_operator(rng: np.random.Generator) -> str:
    return OPERATORS[int(rng.integers(len(OPERATORS)))]


def random_graph(depth: int, rng: np.random.Generator, leaves: Sequence[str] = PREDICTION_LEAVES,
                 branch_name: str = 'main') -> LossGraph:
    """
    Gera um grafo com exatamente `depth` operadores em todo caminho raiz-folha.

    Args:
        depth: D >= 1
        rng: gerador numpy do chamador
        leaves: conjunto de folhas do ramo
        branch_name: rótulo do ramo

    Returns:
        LossGraph: grafo de profundidade D + 1 contando a saída
    """
    if depth < 1:
        raise ConfigurationError("Profundidade inicial precisa ser >= 1", key='init_depth')

    def grow(level):
        if level > depth:
            return random_leaf(rng, leaves)
        kind = random_operator(rng)
        return ExprNode(kind, tuple(grow(level + 1) for _ in range(ARITY[kind])))

    return LossGraph(grow(1), branch_name)


# ---------------------------------------------------------------------------
# Formato texto
# ---------------------------------------------------------------------------

def _format_node(node: ExprNode) -> str:
    if node.is_leaf:
        return node.kind
    return f"{node.kind}({', '.join(_format_node(c) for c in node.children)})"


def format_formula(g: Union[LossGraph, ExprNode]) -> str:
    return _format_node(g.body if isinstance(g, LossGraph) else g)


_TOKEN = re.compile(r'\s*(?:([A-Za-z_][A-Za-z0-9_]*)|(\()|(\))|(,))')


def _tokenize(text: str) -> List[Tuple[str, int]]:
    tokens, pos = [], 0
    while pos < len(text):
        if text[pos:].strip() == '':
            break
        match = _TOKEN.match(text, pos)
        if not match:
            stripped = len(text[pos:]) - len(text[pos:].lstrip())
            raise FormulaParseError(f"Caractere inesperado '{text[pos + stripped]}'", pos + stripped, text)
        value = match.group(1) or match.group(2) or match.group(3) or match.group(4)
        tokens.append((value, match.start(match.lastindex)))
        pos = match.end()
    return tokens


def parse_formula(text: str, branch_name: str = 'main') -> LossGraph:
    """
    Lê uma fórmula prefixada, ex.: "mul(neg(y), log(yhat))".

    Raises:
        FormulaParseError: símbolo desconhecido, aridade errada ou parênteses
            desbalanceados, sempre com a posição do problema
    """
    tokens = _tokenize(text)
    if not tokens:
        raise FormulaParseError("Fórmula vazia", 0, text)
    position = [0]

    def peek():
        return tokens[position[0]] if position[0] < len(tokens) else (None, len(text))

    def take(expected=None):
        token, pos = peek()
        if token is None:
            raise FormulaParseError("Fim inesperado da fórmula (parênteses desbalanceados?)", pos, text)
        if expected is not None and token != expected:
            raise FormulaParseError(f"Esperado '{expected}', encontrado '{token}'", pos, text)
        position[0] += 1
        return token, pos

    def expression():
        name, pos = take()
        if name in LEAVES:
            if peek()[0] == '(':
                raise FormulaParseError(f"Folha '{name}' não aceita argumentos", peek()[1], text)
            return ExprNode(name)
        if name not in ARITY:
            raise FormulaParseError(f"Símbolo desconhecido '{name}'", pos, text)
        take('(')
        children = [expression()]
        while peek()[0] == ',':
            take(',')
            children.append(expression())
        close_token, close_pos = peek()
        if close_token != ')':
            raise FormulaParseError("Parêntese ')' ausente", close_pos, text)
        if len(children) != ARITY[name]:
            raise FormulaParseError(
                f"'{name}' exige {ARITY[name]} argumento(s), recebeu {len(children)}", pos, text
            )
        take(')')
        return ExprNode(name, tuple(children))

    body = expression()
    if position[0] != len(tokens):
        token, pos = tokens[position[0]]
        raise FormulaParseError(f"Texto extra após a fórmula: '{token}'", pos, text)
    return LossGraph(body, branch_name)


def format_loss(m: MultiBranchLoss) -> str:
    """Multi-ramo: "nome: fórmula ; nome: fórmula"."""
    return ' ; '.join(f"{g.branch_name}: {format_formula(g)}" for g in m.branches)


def parse_loss(text: str, default_branch: str = 'main', weights=None) -> MultiBranchLoss:
    branches = []
    for part in text.split(';'):
        part = part.strip()
        if not part:
            continue
        name, sep, formula = part.partition(':')
        if sep and '(' not in name:
            branches.append(parse_formula(formula.strip(), name.strip()))
        else:
            branches.append(parse_formula(part, default_branch))
    if not branches:
        raise FormulaParseError("Perda vazia", 0, text)
    return MultiBranchLoss(tuple(branches), weights)


def structural_hash(g: Union[LossGraph, MultiBranchLoss]) -> int:
    """Digest de 64 bits da estrutura (sensível à ordem dos filhos)."""
    text = format_loss(g) if isinstance(g, MultiBranchLoss) else format_formula(g)
    return int.from_bytes(hashlib.blake2b(text.encode('utf-8'), digest_size=8).digest(), 'big')


# ---------------------------------------------------------------------------
# Simplificação
# ---------------------------------------------------------------------------

_NONNEGATIVE_ROOTS = ('one', 'abs', 'square', 'exp')
_NONNEGATIVE_PRESERVING = ('add', 'mul', 'tanh', 'inv', 'sqrt', 'mean_nhw', 'mean_c', 'maxpool', 'minpool')


def is_nonnegative(node: ExprNode) -> bool:
    """Não negativo por construção (independente dos valores de y e yhat)."""
    if node.kind in _NONNEGATIVE_ROOTS:
        return True
    if node.kind in _NONNEGATIVE_PRESERVING:
        return all(is_nonnegative(child) for child in node.children)
    return False


def _rewrite(node: ExprNode) -> ExprNode:
    if node.is_leaf:
        return node
    node = ExprNode(node.kind, tuple(_rewrite(c) for c in node.children))
    kind, children = node.kind, node.children
    if kind == 'square' and children[0].kind == 'one':
        return children[0]
    if kind == 'abs' and children[0].kind == 'abs':
        return children[0]
    if kind == 'neg' and children[0].kind == 'neg':
        return children[0].children[0]
    if kind == 'abs' and is_nonnegative(children[0]):
        return children[0]
    if kind == 'mul' and children[1].kind == 'one':
        return children[0]
    if kind == 'mul' and children[0].kind == 'one':
        return children[1]
    return node


def simplify(g: LossGraph) -> LossGraph:
    """Aplica as regras locais de reescrita até o ponto fixo."""
    body = g.body
    while True:
        rewritten = _rewrite(body)
        if rewritten == body:
            return LossGraph(body, g.branch_name)
        body = rewritten
