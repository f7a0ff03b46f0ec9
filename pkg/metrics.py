#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Métricas de avaliação (ξ)

Usadas tanto no protocolo de rejeição (por amostra) quanto na nota final da
tarefa proxy. Todas ficam em [0, 1] e valem 1 para previsões perfeitas.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from errors import ConfigurationError, MetricUndefinedError, ShapeError
from tensor4 import Tensor4

REGION_METRICS = ('miou', 'fwiou', 'gacc', 'macc')
BOUNDARY_METRICS = ('biou', 'bf1')
SEGMENTATION_METRICS = REGION_METRICS + BOUNDARY_METRICS

BOUNDARY_WIDTH = 1
BF1_TOLERANCE = 2.0


def _array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor4) else np.asarray(value)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Contagens C x C: linhas = classe verdadeira, colunas = classe prevista."""
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_labels(cls, target: np.ndarray, pred: np.ndarray, num_classes: int) -> 'ConfusionMatrix':
        target = np.asarray(target, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        flat = np.bincount(target * num_classes + pred, minlength=num_classes * num_classes)
        return cls(flat.reshape(num_classes, num_classes))


@dataclass(frozen=True)
class BoundaryMask:
    mask: np.ndarray
    width: int

    @property
    def pixels(self) -> int:
        return int(self.mask.sum())


def labels_of(t) -> np.ndarray:
    """Argmax por pixel no eixo de canais (empate -> menor índice)."""
    return np.argmax(_array(t), axis=-3)


def confusion(pred, target) -> ConfusionMatrix:
    """
    Matriz de confusão entre probabilidades previstas e alvo one-hot.

    Args:
        pred: Tensor4 (N, C, H, W) com probabilidades por classe
        target: Tensor4 (N, C, H, W) one-hot

    Returns:
        ConfusionMatrix: counts[g][p] = pixels da classe g previstos como p
    """
    pred, target = _array(pred), _array(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} e target {target.shape} com dimensões diferentes")
    return ConfusionMatrix.from_labels(labels_of(target), labels_of(pred), pred.shape[-3])


def _class_iou(counts: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(counts).astype(np.float64)
    gt = counts.sum(axis=1).astype(np.float64)
    predicted = counts.sum(axis=0).astype(np.float64)
    union = gt + predicted - tp
    with np.errstate(all='ignore'):
        iou = np.where(union > 0, tp / union, 0.0)
    return iou, gt, union


def seg_metric(cm: ConfusionMatrix, kind: str) -> float:
    """
    Métricas de acurácia de segmentação.

    Classes ausentes tanto do alvo quanto da previsão ficam fora das médias;
    mAcc considera apenas classes presentes no alvo.

    Args:
        cm: matriz de confusão
        kind: 'miou', 'fwiou', 'gacc' ou 'macc'

    Returns:
        float: valor em [0, 1]
    """
    counts = np.asarray(cm.counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise MetricUndefinedError("Matriz de confusão vazia")
    iou, gt, union = _class_iou(counts)

    if kind == 'miou':
        return float(iou[union > 0].mean())
    if kind == 'fwiou':
        return float(np.sum((gt / total) * iou))
    if kind == 'gacc':
        return float(np.trace(counts) / total)
    if kind == 'macc':
        present = gt > 0
        return float((np.diag(counts)[present] / gt[present]).mean())
    raise ConfigurationError(f"Métrica de segmentação desconhecida: {kind}", key='metric')


def boundary_mask(labels, d: int = BOUNDARY_WIDTH) -> BoundaryMask:
    """
    Pixels de borda: algum vizinho a distância de Chebyshev <= d tem rótulo
    diferente. A borda da imagem não conta como borda por si só.

    Args:
        labels: mapa de classes (..., H, W)
        d: largura da faixa (>= 1)
    """
    if d < 1:
        raise ConfigurationError("Largura de borda precisa ser >= 1", key='d')
    labels = np.asarray(labels)
    size = (1,) * (labels.ndim - 2) + (2 * d + 1, 2 * d + 1)
    highest = ndimage.maximum_filter(labels, size=size, mode='nearest')
    lowest = ndimage.minimum_filter(labels, size=size, mode='nearest')
    return BoundaryMask(highest != lowest, d)


def boundary_onehot(onehot, d: int = BOUNDARY_WIDTH) -> np.ndarray:
    """One-hot (N, C, H, W) zerado fora da faixa de borda de largura d."""
    onehot = _array(onehot)
    band = boundary_mask(labels_of(onehot), d).mask
    return onehot * np.expand_dims(band, axis=-3)


def _matched(source: np.ndarray, reference: np.ndarray, theta: float) -> int:
    """Pixels de `source` com algum pixel de `reference` a distância <= theta."""
    if not source.any() or not reference.any():
        return 0
    distance = ndimage.distance_transform_edt(~reference)
    return int(np.count_nonzero(source & (distance <= theta)))


def boundary_f1(pred_labels, target_labels, d: int = BOUNDARY_WIDTH, theta: float = BF1_TOLERANCE) -> float:
    pred_labels = np.asarray(pred_labels).reshape(-1, *np.shape(pred_labels)[-2:])
    target_labels = np.asarray(target_labels).reshape(pred_labels.shape)
    pred_edges = boundary_mask(pred_labels, d).mask
    target_edges = boundary_mask(target_labels, d).mask
    if not pred_edges.any() and not target_edges.any():
        return 1.0

    hits_pred = hits_target = 0
    classes = np.union1d(np.unique(pred_labels), np.unique(target_labels))
    for image in range(pred_labels.shape[0]):
        for k in classes:
            pb = pred_edges[image] & (pred_labels[image] == k)
            tb = target_edges[image] & (target_labels[image] == k)
            hits_pred += _matched(pb, tb, theta)
            hits_target += _matched(tb, pb, theta)

    precision = hits_pred / pred_edges.sum() if pred_edges.any() else 0.0
    recall = hits_target / target_edges.sum() if target_edges.any() else 0.0
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def boundary_iou(pred_labels, target_labels, num_classes: int, d: int = BOUNDARY_WIDTH) -> float:
    band = boundary_mask(pred_labels, d).mask | boundary_mask(target_labels, d).mask
    if not band.any():
        return 1.0
    cm = ConfusionMatrix.from_labels(np.asarray(target_labels)[band], np.asarray(pred_labels)[band], num_classes)
    return seg_metric(cm, 'miou')


def boundary_metric(pred_labels, target_labels, kind: str, d: int = BOUNDARY_WIDTH,
                    theta: float = BF1_TOLERANCE, num_classes: int = None) -> float:
    """
    Métricas de borda.

    BIoU é o mIoU restrito à união das faixas de borda (largura d) da previsão
    e do alvo. BF1 é o F1 dos pixels de borda casados: um pixel de borda
    previsto casa se houver pixel de borda do alvo da mesma classe a
    distância euclidiana <= theta (e simetricamente para o recall). Sem borda
    em nenhum dos dois mapas o valor é 1.0.
    """
    if kind == 'biou':
        if num_classes is None:
            num_classes = int(max(np.max(pred_labels), np.max(target_labels))) + 1
        return boundary_iou(pred_labels, target_labels, num_classes, d)
    if kind == 'bf1':
        return boundary_f1(pred_labels, target_labels, d, theta)
    raise ConfigurationError(f"Métrica de borda desconhecida: {kind}", key='metric')


def score_segmentation(pred, target, kind: str) -> float:
    """ξ de segmentação sobre um par (probabilidades, one-hot)."""
    pred, target = _array(pred), _array(target)
    if kind in REGION_METRICS:
        return seg_metric(confusion(pred, target), kind)
    if kind in BOUNDARY_METRICS:
        return boundary_metric(labels_of(pred), labels_of(target), kind, num_classes=pred.shape[-3])
    raise ConfigurationError(f"Métrica desconhecida: {kind}", key='metric')


# ---------------------------------------------------------------------------
# Caixas
# ---------------------------------------------------------------------------

def canonical_boxes(boxes) -> np.ndarray:
    """Ordena as coordenadas para garantir x1 <= x2 e y1 <= y2."""
    boxes = np.asarray(boxes, dtype=np.float64)
    xs = np.sort(boxes[..., [0, 2]], axis=-1)
    ys = np.sort(boxes[..., [1, 3]], axis=-1)
    return np.stack([xs[..., 0], ys[..., 0], xs[..., 1], ys[..., 1]], axis=-1)


def _box_area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iue_areas(pred, target) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Áreas de interseção, união e da menor caixa envolvente.

    Args:
        pred: caixas previstas (..., 4) no formato (x1, y1, x2, y2)
        target: caixas alvo, mesmo formato

    Returns:
        (i, u, e) com i <= u <= e
    """
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    iw = np.maximum(np.minimum(pred[..., 2], target[..., 2]) - np.maximum(pred[..., 0], target[..., 0]), 0.0)
    ih = np.maximum(np.minimum(pred[..., 3], target[..., 3]) - np.maximum(pred[..., 1], target[..., 1]), 0.0)
    inter = iw * ih
    union = _box_area(pred) + _box_area(target) - inter
    ew = np.maximum(pred[..., 2], target[..., 2]) - np.minimum(pred[..., 0], target[..., 0])
    eh = np.maximum(pred[..., 3], target[..., 3]) - np.minimum(pred[..., 1], target[..., 1])
    return inter, union, ew * eh


def _step(condition: np.ndarray) -> np.ndarray:
    return np.asarray(condition, dtype=np.float64)


def iue_backward(pred, target, grad_i, grad_u, grad_e) -> np.ndarray:
    """
    Propaga gradientes de (i, u, e) para as coordenadas previstas.

    Nos pontos de quebra (max/min empatados, largura de interseção nula) usa a
    derivada lateral: max(a, b) segue `a` quando a >= b e a interseção só tem
    gradiente com largura e altura positivas.

    Returns:
        np.ndarray: gradiente (..., 4) em relação a (x1, y1, x2, y2)
    """
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    px1, py1, px2, py2 = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    tx1, ty1, tx2, ty2 = t[..., 0], t[..., 1], t[..., 2], t[..., 3]

    iw_raw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    ih_raw = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    w_on, h_on = (iw_raw > 0).astype(np.float64), (ih_raw > 0).astype(np.float64)

    di = np.stack([
        -_step(px1 >= tx1) * w_on * ih,
        -_step(py1 >= ty1) * h_on * iw,
        _step(px2 <= tx2) * w_on * ih,
        _step(py2 <= ty2) * h_on * iw,
    ], axis=-1)

    pw, ph = px2 - px1, py2 - py1
    da = np.stack([-ph, -pw, ph, pw], axis=-1)

    ew = np.maximum(px2, tx2) - np.minimum(px1, tx1)
    eh = np.maximum(py2, ty2) - np.minimum(py1, ty1)
    de = np.stack([
        -_step(px1 <= tx1) * eh,
        -_step(py1 <= ty1) * ew,
        _step(px2 >= tx2) * eh,
        _step(py2 >= ty2) * ew,
    ], axis=-1)

    gi, gu, ge = (np.asarray(g, dtype=np.float64)[..., None] for g in (grad_i, grad_u, grad_e))
    with np.errstate(all='ignore'):
        return gi * di + gu * (da - di) + ge * de


def box_iou(pred, target) -> np.ndarray:
    inter, union, _ = iue_areas(pred, target)
    with np.errstate(all='ignore'):
        return np.where(union > 0, inter / union, 0.0)


def box_regression_score(pred, target) -> float:
    """
    IoU médio entre caixas previstas e alvo (ξ da tarefa de caixas).

    Raises:
        ConfigurationError: caixa alvo degenerada (largura ou altura <= 0)
    """
    target = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    if np.any(target[:, 2] <= target[:, 0]) or np.any(target[:, 3] <= target[:, 1]):
        raise ConfigurationError("Caixa alvo degenerada", key='target')
    pred = canonical_boxes(np.asarray(pred, dtype=np.float64).reshape(-1, 4))
    if not np.all(np.isfinite(pred)):
        return 0.0
    return float(np.mean(box_iou(pred, target)))


def hit_rate(pred_classes, target_classes, pred_boxes, target_boxes, iou_threshold: float = 0.5) -> float:
    """Fração de amostras com classe correta e IoU >= limiar."""
    pred_boxes = canonical_boxes(np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4))
    ious = box_iou(pred_boxes, np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4))
    correct = np.asarray(pred_classes).ravel() == np.asarray(target_classes).ravel()
    return float(np.mean(correct & (ious >= iou_threshold)))
