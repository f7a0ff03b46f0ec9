#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tarefas proxy

Cada tarefa reúne um conjunto sintético (treino/avaliação), um preditor
pequeno com retropropagação manual e a métrica alvo. A nota de uma perda é a
métrica do preditor treinado com ela no conjunto de avaliação.

Tarefas disponíveis:
    seg: segmentação por pixel (ramo 'seg')
    box: regressão de caixas (ramo 'reg', folhas i/u/e)
    det: classificação + caixa por objeto (ramos 'cls' e 'reg')
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from errors import ConfigurationError
from loss_expr import BOX_LEAVES, PREDICTION_LEAVES, LossGraph, MultiBranchLoss, forward_backward
from metrics import (
    SEGMENTATION_METRICS, boundary_onehot, box_regression_score, hit_rate,
    iue_areas, iue_backward, labels_of, score_segmentation,
)

TASK_KINDS = ('seg', 'box', 'det')
TRAIN_FRACTION = 0.8

# Caixa de referência (lado 0.25 centrada em 0.5) para codificar caixas
BOX_ANCHOR = 0.25
MAX_LOG_SCALE = 3.0
HEAD_BIAS_JITTER = 1e-3


@dataclass(frozen=True)
class TrainerConfig:
    """
    SGD com momento.

    clip_norm limita a norma global do gradiente a cada passo (None desliga).
    """
    iterations: int = 300
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: Optional[float] = None


# Regressão de caixas: lote cheio e passo curto, a perda é quase L1 nos offsets
BOX_TRAINER = TrainerConfig(iterations=300, batch_size=512, lr=0.01, momentum=0.9, clip_norm=5.0)
# Detecção: o ramo 'reg' pesa 10x, o passo cai na mesma proporção
DETECTION_TRAINER = TrainerConfig(iterations=300, batch_size=512, lr=0.002, momentum=0.9, clip_norm=5.0)


@dataclass(frozen=True)
class BranchSpec:
    """
    Um ramo da perda.

    Args:
        name: rótulo do ramo
        kind: 'seg' (mapa de probabilidades), 'cls' (probabilidades por objeto)
            ou 'box' (coordenadas de caixa, perda sobre i/u/e)
        metric: métrica usada na rejeição deste ramo
        weight: peso do ramo na soma final
    """
    name: str
    kind: str
    metric: str
    weight: float = 1.0

    @property
    def leaves(self) -> Tuple[str, ...]:
        return BOX_LEAVES if self.kind == 'box' else PREDICTION_LEAVES


# ---------------------------------------------------------------------------
# Perda por ramo
# ---------------------------------------------------------------------------

def branch_forward_backward(graph: LossGraph, kind: str, pred: np.ndarray, target: np.ndarray,
                            normalize: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    Valor da perda de um ramo e gradiente em relação às previsões do ramo.

    Ramos de caixa recebem coordenadas (..., R, 4): as áreas (i, u, e) viram
    folhas (..., R, 1, 1, 1) e o gradiente volta para as coordenadas.
    Eixos extras à esquerda são amostras independentes.
    """
    if kind != 'box':
        loss, grads = forward_backward(graph, {'yhat': pred, 'y': target}, wrt=('yhat',), normalize=normalize)
        return loss, grads['yhat']
    inter, union, enclosing = iue_areas(pred, target)
    shape = inter.shape + (1, 1, 1)
    leaves = {'i': inter.reshape(shape), 'u': union.reshape(shape), 'e': enclosing.reshape(shape)}
    loss, grads = forward_backward(graph, leaves, wrt=('i', 'u', 'e'), normalize=normalize)
    grad = iue_backward(pred, target, *(grads[name].reshape(inter.shape) for name in ('i', 'u', 'e')))
    return loss, grad


# ---------------------------------------------------------------------------
# Preditores
# ---------------------------------------------------------------------------

def _softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = z - np.max(z, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def _softmax_backward(p: np.ndarray, grad: np.ndarray, axis: int = 1) -> np.ndarray:
    return p * (grad - np.sum(grad * p, axis=axis, keepdims=True))


class Predictor:
    """Base: parâmetros em dict, forward devolve (saídas por ramo, cache)."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, cache, grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


class SegmentationPredictor(Predictor):
    """
    Conv 1x1 -> tanh -> conv 1x1 -> softmax, por pixel.

    A camada de saída começa nula e o viés recebe um ruído pequeno: a
    previsão inicial é a mesma em todos os pixels, sem empates exatos.
    """

    def __init__(self, in_channels: int, classes: int, rng: np.random.Generator, hidden: int = 16):
        super().__init__()
        self.params = {
            'w1': rng.normal(0.0, 1.0 / np.sqrt(in_channels), (hidden, in_channels)),
            'b1': np.zeros(hidden),
            'w2': np.zeros((classes, hidden)),
            'b2': rng.normal(0.0, HEAD_BIAS_JITTER, classes),
        }

    def forward(self, x):
        p = self.params
        h = np.tanh(np.einsum('hk,nkyx->nhyx', p['w1'], x) + p['b1'][None, :, None, None])
        z = np.einsum('ch,nhyx->ncyx', p['w2'], h) + p['b2'][None, :, None, None]
        probs = _softmax(z)
        return {'seg': probs}, (x, h, probs)

    def backward(self, cache, grads):
        x, h, probs = cache
        p = self.params
        gz = _softmax_backward(probs, grads['seg'])
        gh = np.einsum('ch,ncyx->nhyx', p['w2'], gz)
        ga = gh * (1.0 - h * h)
        return {
            'w1': np.einsum('nhyx,nkyx->hk', ga, x),
            'b1': ga.sum(axis=(0, 2, 3)),
            'w2': np.einsum('ncyx,nhyx->ch', gz, h),
            'b2': gz.sum(axis=(0, 2, 3)),
        }


def _decode_boxes(o: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Offsets -> caixa (x1, y1, x2, y2) relativa à caixa de referência.

    centro = 0.5 + BOX_ANCHOR * o[:2], lado = BOX_ANCHOR * exp(o[2:]) com o
    expoente limitado a ±MAX_LOG_SCALE.

    Returns:
        (caixas, lados (w, h), máscara dos expoentes fora do limite)
    """
    log_scale = np.clip(o[:, 2:], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    centers = 0.5 + BOX_ANCHOR * o[:, :2]
    sizes = BOX_ANCHOR * np.exp(log_scale)
    boxes = np.concatenate([centers - sizes / 2, centers + sizes / 2], axis=1)
    return boxes, sizes, (log_scale == o[:, 2:]).astype(np.float64)


def _encode_box_grad(grad: np.ndarray, sizes: np.ndarray, active: np.ndarray) -> np.ndarray:
    gx1, gy1, gx2, gy2 = grad[:, 0], grad[:, 1], grad[:, 2], grad[:, 3]
    return np.stack([
        BOX_ANCHOR * (gx1 + gx2),
        BOX_ANCHOR * (gy1 + gy2),
        0.5 * (gx2 - gx1) * sizes[:, 0] * active[:, 0],
        0.5 * (gy2 - gy1) * sizes[:, 1] * active[:, 1],
    ], axis=1)


class DetectionPredictor(Predictor):
    """
    Camada oculta compartilhada com cabeça de classe (softmax) e de caixa.

    A cabeça de caixa soma um atalho linear da entrada (wx, começa nulo) ao
    caminho oculto. Com `classes=0` só existe a cabeça de caixa (tarefa box).
    """

    def __init__(self, in_dim: int, classes: int, rng: np.random.Generator, hidden: int = 16):
        super().__init__()
        self.classes = classes
        self.params = {
            'w1': rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, hidden)),
            'b1': np.zeros(hidden),
            'wb': rng.normal(0.0, 0.01, (hidden, 4)),
            'wx': np.zeros((in_dim, 4)),
            'bb': np.zeros(4),
        }
        if classes:
            self.params['wc'] = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, classes))
            self.params['bc'] = np.zeros(classes)

    def forward(self, x):
        p = self.params
        h = np.tanh(x @ p['w1'] + p['b1'])
        boxes, sizes, active = _decode_boxes(h @ p['wb'] + x @ p['wx'] + p['bb'])
        outputs = {'reg': boxes}
        probs = None
        if self.classes:
            probs = _softmax(h @ p['wc'] + p['bc'])
            outputs['cls'] = probs[:, :, None, None]
        return outputs, (x, h, sizes, active, probs)

    def backward(self, cache, grads):
        x, h, sizes, active, probs = cache
        p = self.params
        go = _encode_box_grad(grads['reg'], sizes, active)
        out = {'wb': h.T @ go, 'wx': x.T @ go, 'bb': go.sum(axis=0)}
        gh = go @ p['wb'].T
        if self.classes:
            gz = _softmax_backward(probs, grads['cls'][:, :, 0, 0])
            out['wc'] = h.T @ gz
            out['bc'] = gz.sum(axis=0)
            gh = gh + gz @ p['wc'].T
        ga = gh * (1.0 - h * h)
        out['w1'] = x.T @ ga
        out['b1'] = ga.sum(axis=0)
        return out


# ---------------------------------------------------------------------------
# Tarefa
# ---------------------------------------------------------------------------

@dataclass
class ProxyTask:
    """
    Conjunto sintético + preditor + métrica: a nota f(L; ξ) de uma perda.

    Args:
        kind: 'seg', 'box' ou 'det'
        branches: ramos da perda que a tarefa espera
        train_x, eval_x: entradas
        train_y, eval_y: alvos por ramo
        metric: métrica de avaliação da tarefa
        num_classes: classes (0 para box)
        trainer: configuração do treino
        sample_size: objetos por amostra de rejeição (1 imagem em seg)
        seed: semente da geração
        boundary_targets: a perda de 'seg' vê só a faixa de borda do alvo;
            métricas e nota continuam sobre o rótulo completo
    """
    kind: str
    branches: Tuple[BranchSpec, ...]
    train_x: np.ndarray
    train_y: Dict[str, np.ndarray]
    eval_x: np.ndarray
    eval_y: Dict[str, np.ndarray]
    metric: str
    num_classes: int = 0
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    sample_size: int = 1
    seed: int = 0
    boundary_targets: bool = False

    @property
    def branch_names(self) -> Tuple[str, ...]:
        return tuple(spec.name for spec in self.branches)

    @property
    def weights(self) -> Tuple[float, ...]:
        return tuple(spec.weight for spec in self.branches)

    def branch(self, name: str) -> BranchSpec:
        for spec in self.branches:
            if spec.name == name:
                return spec
        raise ConfigurationError(f"Ramo '{name}' não existe na tarefa {self.kind}", key='branch')

    def new_predictor(self, rng: np.random.Generator) -> Predictor:
        if self.kind == 'seg':
            return SegmentationPredictor(self.train_x.shape[1], self.num_classes, rng)
        return DetectionPredictor(self.train_x.shape[1], self.num_classes, rng)

    def loss_targets(self, targets: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Alvos entregues à perda (faixa de borda quando boundary_targets)."""
        targets = dict(targets)
        if self.boundary_targets and 'seg' in targets:
            targets['seg'] = boundary_onehot(targets['seg'])
        return targets

    def predict(self, predictor: Predictor, x: np.ndarray) -> Dict[str, np.ndarray]:
        outputs, _ = predictor.forward(x)
        return {name: outputs[name] for name in self.branch_names}

    def score(self, predictor: Predictor) -> float:
        """Métrica da tarefa no conjunto de avaliação."""
        with np.errstate(all='ignore'):
            outputs = self.predict(predictor, self.eval_x)
        if not all(np.all(np.isfinite(v)) for v in outputs.values()):
            return 0.0
        if self.kind == 'seg':
            return score_segmentation(outputs['seg'], self.eval_y['seg'], self.metric)
        if self.kind == 'box':
            return box_regression_score(outputs['reg'], self.eval_y['reg'])
        return hit_rate(labels_of(outputs['cls']).ravel(), labels_of(self.eval_y['cls']).ravel(),
                        outputs['reg'], self.eval_y['reg'])

    def export_csv(self, path: str) -> str:
        """Exporta o conjunto (treino e avaliação) em CSV para depuração."""
        frames = []
        for split, x, y in (('train', self.train_x, self.train_y), ('eval', self.eval_x, self.eval_y)):
            if self.kind == 'seg':
                n, k, height, width = x.shape
                grid_n, grid_r, grid_c = np.meshgrid(np.arange(n), np.arange(height), np.arange(width), indexing='ij')
                frame = pd.DataFrame({
                    'split': split,
                    'image': grid_n.ravel(),
                    'row': grid_r.ravel(),
                    'col': grid_c.ravel(),
                    'label': labels_of(y['seg']).ravel(),
                })
                features = x.transpose(0, 2, 3, 1).reshape(-1, k)
            else:
                frame = pd.DataFrame(y['reg'], columns=['x1', 'y1', 'x2', 'y2'])
                frame.insert(0, 'split', split)
                frame.insert(1, 'index', np.arange(len(x)))
                if 'cls' in y:
                    frame['label'] = labels_of(y['cls']).ravel()
                features = x
            for j in range(features.shape[1]):
                frame[f'f{j}'] = features[:, j]
            frames.append(frame)
        pd.concat(frames, ignore_index=True).to_csv(path, index=False, encoding='utf-8')
        print(f"✅ Conjunto exportado para: {path}")
        return path


def _split(n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    cut = int(round(TRAIN_FRACTION * n))
    return order[:cut], order[cut:]


def generate_segmentation_task(c: int = 4, n: int = 64, hw: int = 16, seed: int = 0,
                               metric: str = 'miou', noise: float = 0.2, boundary_targets: bool = False,
                               trainer: Optional[TrainerConfig] = None) -> ProxyTask:
    """
    Segmentação sintética: partições de Voronoi em c classes.

    Entrada com 2c canais: c campos indicadores suavizados com ruído e c
    canais de ruído puro.

    Raises:
        ConfigurationError: c < 2, n < 20 ou hw < 8
    """
    if c < 2 or n < 20 or hw < 8:
        raise ConfigurationError(f"Tamanhos inválidos para segmentação: c={c}, n={n}, hw={hw}", key='task')
    if metric not in SEGMENTATION_METRICS:
        raise ConfigurationError(f"Métrica de segmentação desconhecida: {metric}", key='metric')
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:hw, 0:hw]

    labels = np.empty((n, hw, hw), dtype=np.int64)
    for image in range(n):
        centers = rng.uniform(0, hw, size=(2 * c, 2))
        owners = np.repeat(np.arange(c), 2)
        distance = (rows[None] - centers[:, 0, None, None]) ** 2 + (cols[None] - centers[:, 1, None, None]) ** 2
        labels[image] = owners[np.argmin(distance, axis=0)]

    onehot = np.eye(c)[labels].transpose(0, 3, 1, 2)
    smooth = ndimage.gaussian_filter(onehot, sigma=(0, 0, 1.0, 1.0))
    signal = smooth + noise * rng.standard_normal(onehot.shape)
    nuisance = rng.standard_normal((n, c, hw, hw))
    features = np.concatenate([signal, nuisance], axis=1)

    train, held = _split(n, rng)
    return ProxyTask(
        kind='seg',
        branches=(BranchSpec('seg', 'seg', metric),),
        train_x=features[train], train_y={'seg': onehot[train]},
        eval_x=features[held], eval_y={'seg': onehot[held]},
        metric=metric, num_classes=c, trainer=trainer or TrainerConfig(), sample_size=1, seed=seed,
        boundary_targets=boundary_targets,
    )


def _random_boxes(n: int, rng: np.random.Generator) -> np.ndarray:
    centers = rng.uniform(0.35, 0.65, size=(n, 2))
    sizes = rng.uniform(0.15, 0.35, size=(n, 2))
    return np.concatenate([centers - sizes / 2, centers + sizes / 2], axis=1)


def _box_codes(boxes: np.ndarray) -> np.ndarray:
    centers = (boxes[:, :2] + boxes[:, 2:]) / 2
    sizes = boxes[:, 2:] - boxes[:, :2]
    return np.concatenate([(centers - 0.5) / BOX_ANCHOR, np.log(sizes / BOX_ANCHOR)], axis=1)


def generate_box_task(n: int = 400, seed: int = 0, noise: float = 0.05, distractors: int = 4,
                      trainer: Optional[TrainerConfig] = None) -> ProxyTask:
    """
    Regressão de caixas: a entrada é uma visão ruidosa do código da caixa
    alvo mais dimensões de distração. O código inverte `_decode_boxes`.

    Raises:
        ConfigurationError: n < 20
    """
    if n < 20:
        raise ConfigurationError(f"Tarefa de caixas exige n >= 20, recebido {n}", key='task')
    rng = np.random.default_rng(seed)
    boxes = _random_boxes(n, rng)
    features = np.concatenate([
        _box_codes(boxes) + noise * rng.standard_normal((n, 4)),
        rng.standard_normal((n, distractors)),
    ], axis=1)
    train, held = _split(n, rng)
    return ProxyTask(
        kind='box',
        branches=(BranchSpec('reg', 'box', 'iou'),),
        train_x=features[train], train_y={'reg': boxes[train]},
        eval_x=features[held], eval_y={'reg': boxes[held]},
        metric='iou', trainer=trainer or BOX_TRAINER, sample_size=8, seed=seed,
    )


def generate_detection_task(c: int = 4, n: int = 200, seed: int = 0, noise: float = 0.05,
                            class_noise: float = 0.5, distractors: int = 4,
                            trainer: Optional[TrainerConfig] = None) -> ProxyTask:
    """
    Detecção simplificada: um objeto por amostra com classe e caixa.

    Ramos 'cls' (peso 1.0) e 'reg' (peso 10.0). A nota é a taxa de acerto:
    classe correta e IoU >= 0.5.
    """
    if c < 2 or n < 20:
        raise ConfigurationError(f"Tamanhos inválidos para detecção: c={c}, n={n}", key='task')
    rng = np.random.default_rng(seed)
    classes = rng.integers(c, size=n)
    boxes = _random_boxes(n, rng)
    onehot = np.eye(c)[classes]
    features = np.concatenate([
        onehot + class_noise * rng.standard_normal((n, c)),
        _box_codes(boxes) + noise * rng.standard_normal((n, 4)),
        rng.standard_normal((n, distractors)),
    ], axis=1)
    targets = onehot[:, :, None, None]
    train, held = _split(n, rng)
    return ProxyTask(
        kind='det',
        branches=(BranchSpec('cls', 'cls', 'gacc', 1.0), BranchSpec('reg', 'box', 'iou', 10.0)),
        train_x=features[train], train_y={'cls': targets[train], 'reg': boxes[train]},
        eval_x=features[held], eval_y={'cls': targets[held], 'reg': boxes[held]},
        metric='hit', num_classes=c, trainer=trainer or DETECTION_TRAINER, sample_size=8, seed=seed,
    )


def build_task(kind: str, metric: str = 'miou', seed: int = 0, params: Optional[Mapping] = None,
               trainer: Optional[TrainerConfig] = None) -> ProxyTask:
    """Fábrica usada pela busca e pela CLI."""
    params = dict(params or {})
    if kind == 'seg':
        return generate_segmentation_task(seed=seed, metric=metric, trainer=trainer, **params)
    if kind == 'box':
        return generate_box_task(seed=seed, trainer=trainer, **params)
    if kind == 'det':
        return generate_detection_task(seed=seed, trainer=trainer, **params)
    raise ConfigurationError(f"Tarefa desconhecida: {kind} (use {', '.join(TASK_KINDS)})", key='task')


# ---------------------------------------------------------------------------
# Treino
# ---------------------------------------------------------------------------

def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    """Reescala o conjunto de gradientes para norma global <= max_norm."""
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def compute_loss_and_grads(task: ProxyTask, predictor: Predictor, loss: MultiBranchLoss,
                           x: np.ndarray, targets: Mapping[str, np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Perda total ponderada e gradiente em relação aos parâmetros do preditor.

    Returns:
        (valor da perda, dict parâmetro -> gradiente)
    """
    with np.errstate(all='ignore'):
        outputs, cache = predictor.forward(x)
        total = 0.0
        output_grads = {}
        for spec in task.branches:
            graph = loss.branch(spec.name)
            weight = loss.weight(spec.name) if loss.weights is not None else spec.weight
            value, grad = branch_forward_backward(graph, spec.kind, outputs[spec.name], targets[spec.name])
            total += weight * float(value)
            output_grads[spec.name] = weight * grad
        for name in outputs:
            output_grads.setdefault(name, np.zeros_like(outputs[name]))
        return total, predictor.backward(cache, output_grads)


def train_and_score(task: ProxyTask, loss: MultiBranchLoss, seed: int = 0,
                    config: Optional[TrainerConfig] = None, early_stop: bool = True) -> float:
    """
    Treina um preditor novo com a perda e devolve a métrica de avaliação.

    Qualquer valor não finito de perda ou gradiente zera a nota. Com
    early_stop o treino é interrompido na hora; sem ele o treino segue até o
    fim (custo integral) e a nota final é 0.

    Returns:
        float: nota em [0, 1]
    """
    config = config or task.trainer
    for name in task.branch_names:
        if name not in loss.names:
            raise ConfigurationError(f"Perda sem o ramo '{name}' exigido pela tarefa", key=name)
    rng = np.random.default_rng(seed)
    predictor = task.new_predictor(rng)
    velocity = {name: np.zeros_like(value) for name, value in predictor.params.items()}
    n_train = len(task.train_x)
    batch = min(config.batch_size, n_train)
    invalid = False

    for _ in range(config.iterations):
        index = rng.choice(n_train, size=batch, replace=False)
        value, grads = compute_loss_and_grads(
            task, predictor, loss, task.train_x[index],
            task.loss_targets({k: v[index] for k, v in task.train_y.items()}),
        )
        finite = np.isfinite(value) and all(np.all(np.isfinite(g)) for g in grads.values())
        if not finite:
            invalid = True
            if early_stop:
                return 0.0
            continue
        if config.clip_norm:
            grads = clip_gradients(grads, config.clip_norm)
        for name, grad in grads.items():
            velocity[name] = config.momentum * velocity[name] + grad
            predictor.params[name] = predictor.params[name] - config.lr * velocity[name]

    if invalid:
        return 0.0
    score = task.score(predictor)
    if not np.isfinite(score):
        return 0.0
    return float(np.clip(score, 0.0, 1.0))
