#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Validador de Arquivos - Confere os arquivos de entrada da CLI antes de qualquer leitura:
configurações de busca (.json em configs/) e listas de fórmulas (.txt em formulas/)
"""

import difflib
import os
from pathlib import Path
from typing import Dict, List, Optional

# tipo -> (extensão, pasta padrão)
INPUT_KINDS = {
    'config': ('.json', 'configs'),
    'formulas': ('.txt', 'formulas'),
}
MAX_INPUT_BYTES = 1024 * 1024


class FileValidator:
    def __init__(self, base_dir: Optional[str] = None, max_bytes: int = MAX_INPUT_BYTES):
        self.base_dir = Path(base_dir) if base_dir else None
        self.max_bytes = max_bytes

    @property
    def root(self) -> Path:
        return self.base_dir or Path.cwd()

    def validate(self, file_path: str, kind: str) -> Dict:
        """
        Valida um arquivo de entrada do tipo `kind` ('config' ou 'formulas')

        Returns:
            Dict com 'valid'; em caso de falha traz 'error' e 'suggestions',
            em caso de sucesso traz 'file_path', 'file_name', 'file_size' e,
            para fórmulas, 'formula_lines'
        """
        if kind not in INPUT_KINDS:
            raise ValueError(f"Tipo de arquivo desconhecido: {kind}")
        extension, folder = INPUT_KINDS[kind]
        path = Path(file_path)

        if not path.exists():
            return self._invalid(f'Arquivo não encontrado: {file_path}', self._suggest(path, kind))
        if not path.is_file():
            return self._invalid(f'Caminho não é um arquivo: {file_path}')
        if path.suffix.lower() != extension:
            return self._invalid(
                f'Extensão {path.suffix or "(nenhuma)"} inválida para {kind}: use {extension}',
                [f"Exemplos em {folder}/"],
            )
        if not os.access(path, os.R_OK):
            return self._invalid(f'Sem permissão de leitura: {file_path}')

        size = path.stat().st_size
        if size == 0:
            return self._invalid('Arquivo está vazio')
        if size > self.max_bytes:
            return self._invalid(f'Arquivo grande demais para uma entrada: {size / 1024:.0f}KB '
                                 f'(máximo {self.max_bytes / 1024:.0f}KB)')

        result = {
            'valid': True,
            'file_path': str(path.resolve()),
            'file_name': path.name,
            'file_size': size,
        }
        if kind == 'formulas':
            try:
                lines = count_formula_lines(path)
            except UnicodeDecodeError:
                return self._invalid('Arquivo de fórmulas não está em UTF-8')
            if lines == 0:
                return self._invalid('Nenhuma fórmula no arquivo (só comentários ou linhas vazias)')
            result['formula_lines'] = lines
        return result

    @staticmethod
    def _invalid(error: str, suggestions: Optional[List[str]] = None) -> Dict:
        return {'valid': False, 'error': error, 'suggestions': suggestions or []}

    def _suggest(self, path: Path, kind: str) -> List[str]:
        extension, folder = INPUT_KINDS[kind]
        suggestions = []

        candidate = self.root / folder / path.name
        if candidate.is_file():
            suggestions.append(f"Arquivo encontrado na pasta {folder}: {candidate}")

        names = [entry['name'] for entry in self.list_available_files(kind)]
        close = difflib.get_close_matches(path.name, names, n=3, cutoff=0.5)
        if close:
            suggestions.append("Arquivos parecidos:")
            suggestions.extend(f"  - {folder}/{name}" for name in close)
        elif names:
            suggestions.append(f"Disponíveis em {folder}/: {', '.join(names)}")

        suggestions.append(f"Informe um arquivo {extension} existente")
        return suggestions

    def list_available_files(self, kind: str) -> List[Dict]:
        """Arquivos do tipo `kind` na pasta padrão, em ordem alfabética"""
        extension, folder = INPUT_KINDS[kind]
        directory = self.root / folder
        if not directory.is_dir():
            return []
        return [
            {'name': entry.name, 'path': str(entry.resolve()), 'size': entry.stat().st_size}
            for entry in sorted(directory.glob(f'*{extension}'))
            if entry.is_file()
        ]


def count_formula_lines(path: Path) -> int:
    with open(path, encoding='utf-8') as f:
        return sum(1 for line in f if line.strip() and not line.lstrip().startswith('#'))


def print_validation_error(validation: Dict):
    print(f"❌ {validation['error']}")
    if validation.get('suggestions'):
        print("💡 Sugestões:")
        for suggestion in validation['suggestions']:
            print(f"   - {suggestion}")
