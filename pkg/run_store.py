#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Artefatos de uma execução: manifesto, log JSON lines, histórico CSV,
fórmulas vencedoras e snapshot final.
"""

import json
import os
import platform
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import scipy

from config import config_to_dict
from loss_expr import format_loss
from search import SearchConfig

MANIFEST_FILE = 'manifest.json'
RUN_LOG_FILE = 'run_log.jsonl'
HISTORY_FILE = 'history.csv'
BEST_FILE = 'best_formulas.txt'
SNAPSHOT_FILE = 'snapshot.json'
HISTORY_COLUMNS = ['eval_index', 'top5_mean', 'best']


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, tuple)):
        return list(value)
    raise TypeError(f"Tipo não serializável: {type(value).__name__}")


class RunStore:
    def __init__(self, output_dir: str, run_name: Optional[str] = None):
        """
        Inicializa o diretório da execução

        Args:
            output_dir: Diretório base dos artefatos
            run_name: Nome da execução (padrão: run_<timestamp>)
        """
        if not run_name:
            run_name = f"run_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
            base, suffix = run_name, 1
            while os.path.exists(os.path.join(output_dir, run_name)):
                suffix += 1
                run_name = f"{base}_{suffix}"
        self.run_dir = os.path.join(output_dir, run_name)
        os.makedirs(self.run_dir, exist_ok=True)
        self.files: List[str] = []
        self.records_written = 0
        self._manifest: Dict = {}

    def path(self, filename: str) -> str:
        return os.path.join(self.run_dir, filename)

    def _register(self, filename: str) -> str:
        if filename not in self.files:
            self.files.append(filename)
        return self.path(filename)

    def _write_json(self, filename: str, payload) -> str:
        target = self._register(filename)
        with open(target, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, ensure_ascii=False, default=_json_default)
        return target

    def write_manifest(self, cfg: SearchConfig, extra: Optional[Dict] = None) -> str:
        """
        Grava o manifesto (antes da busca e de novo no final)

        Args:
            cfg: Configuração da busca
            extra: Campos adicionais (status, timestamps, resumo)

        Returns:
            str: Caminho do manifesto
        """
        if not self._manifest:
            self._manifest = {
                'config': config_to_dict(cfg),
                'seeds': {'search': cfg.seed, 'task': cfg.seed, 'trainer': cfg.seed},
                'started_at': datetime.now().isoformat(),
                'versions': {
                    'python': platform.python_version(),
                    'numpy': np.__version__,
                    'scipy': scipy.__version__,
                    'pandas': pd.__version__,
                },
            }
        self._manifest.update(extra or {})
        self._register(MANIFEST_FILE)
        self._manifest['files'] = list(self.files)
        return self._write_json(MANIFEST_FILE, self._manifest)

    def append_record(self, record: Dict):
        """Acrescenta um registro estruturado ao log (uma linha JSON)"""
        target = self._register(RUN_LOG_FILE)
        with open(target, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, ensure_ascii=False, default=_json_default) + '\n')
        self.records_written += 1

    def write_history(self, history: List[Dict]) -> str:
        """Histórico (eval_index, top5_mean, best) em CSV via pandas"""
        target = self._register(HISTORY_FILE)
        frame = pd.DataFrame(history, columns=HISTORY_COLUMNS)
        frame.to_csv(target, index=False, encoding='utf-8', float_format='%.10g')
        return target

    def write_best(self, formulas: List[str], scores: Optional[List[float]] = None) -> str:
        """Fórmulas vencedoras, uma por linha, no formato texto de perdas"""
        target = self._register(BEST_FILE)
        with open(target, 'w', encoding='utf-8') as f:
            for index, formula in enumerate(formulas):
                if scores is not None:
                    f.write(f"# fitness={scores[index]:.6f}\n")
                f.write(formula + '\n')
        return target

    def write_snapshot(self, run) -> str:
        return self._write_json(SNAPSHOT_FILE, run.to_dict())

    def finalize(self, run) -> Dict:
        """
        Grava todos os artefatos finais de uma busca

        Returns:
            Dict: Resultado com 'success', 'message' e a lista de arquivos
        """
        try:
            self.write_history(run.history)
            self.write_best([format_loss(ind.loss) for ind in run.top()], [ind.fitness for ind in run.top()])
            self.write_snapshot(run)
            self.write_manifest(run.config, {
                'finished_at': datetime.now().isoformat(),
                'status': 'aborted' if run.aborted else 'completed',
                'summary': run.summary(),
            })
            return {
                'success': True,
                'message': f'Artefatos gravados em {self.run_dir}',
                'files': list(self.files),
            }
        except OSError as e:
            return {
                'success': False,
                'message': f'Erro ao gravar artefatos: {e}',
                'files': list(self.files),
            }
