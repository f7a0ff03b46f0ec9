#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Motor mínimo de tensores (N, C, H, W)

Fornece apenas as operações exigidas pelo conjunto de operadores primitivos.
Todas preservam o formato da entrada. Os kernels (funções *_forward e
*_backward) aceitam eixos extras à esquerda, o que permite avaliar várias
amostras empilhadas de uma vez; a API pública trabalha com Tensor4.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ShapeError

EPS = 1e-12


class UnaryKind(Enum):
    NEG = 'neg'
    ABS = 'abs'
    INV = 'inv'
    LOG = 'log'
    EXP = 'exp'
    TANH = 'tanh'
    SQUARE = 'square'
    SQRT = 'sqrt'


class BinaryKind(Enum):
    ADD = 'add'
    MUL = 'mul'


class PoolMode(Enum):
    MAX = 'maxpool'
    MIN = 'minpool'


class AggregateMode(Enum):
    MEAN_NHW = 'mean_nhw'
    MEAN_C = 'mean_c'


@dataclass(frozen=True, eq=False)
class Tensor4:
    """
    Tensor denso de ordem 4 no layout (N, C, H, W), float64, imutável.

    Args:
        data: array com exatamente 4 eixos, todos com extensão >= 1
    """
    data: np.ndarray

    def __post_init__(self):
        array = np.array(self.data, dtype=np.float64)
        if array.ndim != 4 or min(array.shape) < 1:
            raise ShapeError(f"Tensor4 exige 4 eixos positivos, recebido {array.shape}")
        array.setflags(write=False)
        object.__setattr__(self, 'data', array)

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @classmethod
    def full(cls, dims, value: float) -> 'Tensor4':
        return cls(np.full(tuple(dims), float(value)))

    @classmethod
    def ones(cls, dims) -> 'Tensor4':
        return cls.full(dims, 1.0)

    def __repr__(self):
        return f"Tensor4(dims={self.dims})"


# ---------------------------------------------------------------------------
# Kernels sobre ndarrays (eixos finais = N, C, H, W)
# ---------------------------------------------------------------------------

def unary_forward(x: np.ndarray, kind: UnaryKind) -> np.ndarray:
    with np.errstate(all='ignore'):
        if kind is UnaryKind.NEG:
            return -x
        if kind is UnaryKind.ABS:
            return np.abs(x)
        if kind is UnaryKind.INV:
            return 1.0 / (x + EPS)
        if kind is UnaryKind.LOG:
            return np.sign(x) * np.log(np.abs(x) + EPS)
        if kind is UnaryKind.EXP:
            return np.exp(x)
        if kind is UnaryKind.TANH:
            return np.tanh(x)
        if kind is UnaryKind.SQUARE:
            return x * x
        if kind is UnaryKind.SQRT:
            return np.sign(x) * np.sqrt(np.abs(x) + EPS)
    raise ValueError(f"Operador unário desconhecido: {kind}")


def unary_backward(x: np.ndarray, out: np.ndarray, grad: np.ndarray, kind: UnaryKind) -> np.ndarray:
    """
    Gradiente de um operador unário em relação à entrada.

    Log e Sqrt usam a derivada da própria forma com epsilon, tratando sign(x)
    como constante por partes: o fator sign(x)^2 zera a derivada em x = 0.
    """
    with np.errstate(all='ignore'):
        if kind is UnaryKind.NEG:
            return -grad
        if kind is UnaryKind.ABS:
            return grad * np.sign(x)
        if kind is UnaryKind.INV:
            return -grad / np.square(x + EPS)
        if kind is UnaryKind.LOG:
            return grad * np.square(np.sign(x)) / (np.abs(x) + EPS)
        if kind is UnaryKind.EXP:
            return grad * out
        if kind is UnaryKind.TANH:
            return grad * (1.0 - out * out)
        if kind is UnaryKind.SQUARE:
            return grad * 2.0 * x
        if kind is UnaryKind.SQRT:
            return grad * np.square(np.sign(x)) / (2.0 * np.sqrt(np.abs(x) + EPS))
    raise ValueError(f"Operador unário desconhecido: {kind}")


def binary_forward(a: np.ndarray, b: np.ndarray, kind: BinaryKind) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"Dimensões diferentes: {a.shape} vs {b.shape}")
    with np.errstate(all='ignore'):
        if kind is BinaryKind.ADD:
            return a + b
        if kind is BinaryKind.MUL:
            return a * b
    raise ValueError(f"Operador binário desconhecido: {kind}")


def pool_forward(x: np.ndarray, mode: PoolMode) -> Tuple[np.ndarray, np.ndarray]:
    """
    Max/Min-pooling 3x3, stride 1, com janelas que encolhem na borda.

    Args:
        x: array (..., H, W)
        mode: PoolMode.MAX ou PoolMode.MIN

    Returns:
        (saída, índice plano no plano H*W do elemento escolhido). Empates vão
        para o primeiro índice da varredura da janela em ordem de linhas.
    """
    fill = -np.inf if mode is PoolMode.MAX else np.inf
    height, width = x.shape[-2], x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(x, pad, mode='constant', constant_values=fill)
    windows = sliding_window_view(padded, (3, 3), axis=(-2, -1)).reshape(*x.shape, 9)

    pick = np.argmax(windows, axis=-1) if mode is PoolMode.MAX else np.argmin(windows, axis=-1)
    out = np.take_along_axis(windows, pick[..., None], axis=-1)[..., 0]

    rows = np.arange(height).reshape(height, 1) + pick // 3 - 1
    cols = np.arange(width).reshape(1, width) + pick % 3 - 1
    # só acontece com entradas +-inf empatadas com o preenchimento
    rows = np.clip(rows, 0, height - 1)
    cols = np.clip(cols, 0, width - 1)
    return out, rows * width + cols


def pool_backward(grad: np.ndarray, selected: np.ndarray) -> np.ndarray:
    """Roteia cada gradiente de saída para o elemento escolhido na janela."""
    plane = grad.shape[-2] * grad.shape[-1]
    planes = grad.size // plane
    offsets = (np.arange(planes) * plane).reshape(planes, 1)
    flat = (selected.reshape(planes, plane) + offsets).ravel()
    routed = np.bincount(flat, weights=grad.ravel(), minlength=grad.size)
    return routed.reshape(grad.shape)


def aggregate_forward(x: np.ndarray, mode: AggregateMode) -> np.ndarray:
    axes = (-4, -2, -1) if mode is AggregateMode.MEAN_NHW else (-3,)
    with np.errstate(all='ignore'):
        mean = np.mean(x, axis=axes, keepdims=True)
    return np.broadcast_to(mean, x.shape).copy()


def aggregate_backward(grad: np.ndarray, mode: AggregateMode) -> np.ndarray:
    # a média é autoadjunta: cada entrada recebe a média dos gradientes do grupo
    return aggregate_forward(grad, mode)


# ---------------------------------------------------------------------------
# API pública sobre Tensor4
# ---------------------------------------------------------------------------

def map_unary(t: Tensor4, op: Union[UnaryKind, str]) -> Tensor4:
    return Tensor4(unary_forward(t.data, UnaryKind(op)))


def map_binary(a: Tensor4, b: Tensor4, op: Union[BinaryKind, str]) -> Tensor4:
    if a.dims != b.dims:
        raise ShapeError(f"Dimensões diferentes: {a.dims} vs {b.dims}")
    return Tensor4(binary_forward(a.data, b.data, BinaryKind(op)))


def pool3x3(t: Tensor4, mode: Union[PoolMode, str]) -> Tensor4:
    mode = PoolMode({'max': 'maxpool', 'min': 'minpool'}.get(mode, mode)) if isinstance(mode, str) else mode
    out, _ = pool_forward(t.data, mode)
    return Tensor4(out)


def aggregate(t: Tensor4, mode: Union[AggregateMode, str]) -> Tensor4:
    return Tensor4(aggregate_forward(t.data, AggregateMode(mode)))
