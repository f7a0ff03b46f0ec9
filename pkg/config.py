#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Configuração da busca

Ordem de precedência: flags da CLI > arquivo JSON > variáveis de ambiente >
padrões. LOSSFORGE_SEED só vale quando nem flag nem arquivo definem a
semente.
"""

import json
import os
from dataclasses import fields
from typing import Dict, Optional

from dotenv import load_dotenv

from errors import ConfigurationError
from search import SearchConfig, config_echo

REQUIRED_KEYS = ('task', 'metric', 'eval_budget', 'seed')
SEARCH_KEYS = tuple(f.name for f in fields(SearchConfig))
EXTRA_KEYS = ('output_dir',)

# chave do ambiente -> (campo, conversor)
ENVIRONMENT = {
    'LOSSFORGE_WORKERS': ('workers', int),
    'LOSSFORGE_OUTPUT_DIR': ('output_dir', str),
}
DEFAULT_OUTPUT_DIR = 'runs'


def read_config_file(path: str) -> Dict:
    """
    Lê o arquivo de configuração JSON.

    Raises:
        ConfigurationError: arquivo ausente, JSON inválido ou raiz que não é objeto
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"Arquivo de configuração não encontrado: {path}", key='config')
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"JSON inválido em {path}: {e}", key='config')
    if not isinstance(data, dict):
        raise ConfigurationError(f"A configuração em {path} precisa ser um objeto JSON", key='config')
    return data


def _environment() -> Dict:
    load_dotenv()
    values = {}
    for variable, (key, convert) in ENVIRONMENT.items():
        raw = os.environ.get(variable)
        if raw:
            try:
                values[key] = convert(raw)
            except ValueError:
                raise ConfigurationError(f"Valor inválido em {variable}: {raw!r}", key=key)
    return values


def _environment_seed() -> Optional[int]:
    raw = os.environ.get('LOSSFORGE_SEED')
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"Valor inválido em LOSSFORGE_SEED: {raw!r}", key='seed')


def resolve_settings(path: Optional[str] = None, overrides: Optional[Dict] = None) -> Dict:
    """
    Junta ambiente, arquivo e flags num único dict já validado.

    Args:
        path: arquivo JSON (opcional)
        overrides: valores vindos da CLI; None significa "não informado"

    Raises:
        ConfigurationError: chave desconhecida ou chave obrigatória ausente
    """
    file_values = read_config_file(path) if path else {}
    flag_values = {k: v for k, v in (overrides or {}).items() if v is not None}

    for source in (file_values, flag_values):
        unknown = sorted(set(source) - set(SEARCH_KEYS) - set(EXTRA_KEYS))
        if unknown:
            raise ConfigurationError(f"Chave de configuração desconhecida: '{unknown[0]}'", key=unknown[0])

    settings = {'output_dir': DEFAULT_OUTPUT_DIR}
    settings.update(_environment())
    settings.update(file_values)
    settings.update(flag_values)
    if 'seed' not in settings:
        seed = _environment_seed()
        if seed is not None:
            settings['seed'] = seed

    for key in REQUIRED_KEYS:
        if key not in settings:
            raise ConfigurationError(f"Chave obrigatória ausente na configuração: '{key}'", key=key)
    return settings


def build_search_config(settings: Dict) -> SearchConfig:
    values = {k: v for k, v in settings.items() if k in SEARCH_KEYS}
    if 'seed_formulas' in values:
        values['seed_formulas'] = tuple(values['seed_formulas'])
    try:
        return SearchConfig(**values).validate()
    except TypeError as e:
        raise ConfigurationError(f"Configuração inválida: {e}", key='config')


def load_config(path: Optional[str] = None, overrides: Optional[Dict] = None) -> SearchConfig:
    """
    Carrega a SearchConfig a partir do arquivo e das flags.

    Returns:
        SearchConfig validada
    """
    return build_search_config(resolve_settings(path, overrides))


def config_to_dict(cfg: SearchConfig) -> Dict:
    """Eco serializável em JSON (usado no manifesto)."""
    return config_echo(cfg)
