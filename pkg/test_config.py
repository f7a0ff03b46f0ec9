#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Testes de carga e precedência da configuração
"""

import json
import os

import pytest

from config import build_search_config, config_to_dict, load_config, read_config_file, resolve_settings
from errors import ConfigurationError

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'configs')
BASE = {'task': 'seg', 'metric': 'miou', 'eval_budget': 10, 'seed': 1}


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for variable in ('LOSSFORGE_WORKERS', 'LOSSFORGE_OUTPUT_DIR', 'LOSSFORGE_SEED'):
        monkeypatch.delenv(variable, raising=False)


@pytest.fixture
def write_config(tmp_path):
    def write(payload, name='config.json'):
        path = tmp_path / name
        path.write_text(payload if isinstance(payload, str) else json.dumps(payload), encoding='utf-8')
        return str(path)
    return write


class TestPrecedence:
    def test_flag_beats_file(self, write_config):
        settings = resolve_settings(write_config(BASE), {'seed': 2, 'metric': None})
        assert settings['seed'] == 2
        assert settings['metric'] == 'miou'

    def test_file_beats_environment(self, write_config, monkeypatch):
        monkeypatch.setenv('LOSSFORGE_WORKERS', '3')
        assert resolve_settings(write_config(BASE))['workers'] == 3
        assert resolve_settings(write_config({**BASE, 'workers': 2}))['workers'] == 2

    def test_environment_seed_is_last_resort(self, write_config, monkeypatch):
        monkeypatch.setenv('LOSSFORGE_SEED', '7')
        without_seed = {k: v for k, v in BASE.items() if k != 'seed'}
        assert resolve_settings(write_config(without_seed))['seed'] == 7
        assert resolve_settings(write_config(BASE))['seed'] == 1

    def test_output_dir_default_and_environment(self, monkeypatch):
        assert resolve_settings(overrides=BASE)['output_dir'] == 'runs'
        monkeypatch.setenv('LOSSFORGE_OUTPUT_DIR', '/tmp/lossforge')
        assert resolve_settings(overrides=BASE)['output_dir'] == '/tmp/lossforge'

    def test_flags_only(self):
        cfg = load_config(overrides={**BASE, 'task': 'box'})
        assert cfg.task == 'box' and cfg.eval_budget == 10


class TestErrors:
    @pytest.mark.parametrize('missing', ['task', 'metric', 'eval_budget', 'seed'])
    def test_missing_required_key(self, write_config, missing):
        payload = {k: v for k, v in BASE.items() if k != missing}
        with pytest.raises(ConfigurationError) as info:
            resolve_settings(write_config(payload))
        assert info.value.key == missing

    def test_unknown_key_in_file(self, write_config):
        with pytest.raises(ConfigurationError) as info:
            resolve_settings(write_config({**BASE, 'mutation_rate': 0.3}))
        assert info.value.key == 'mutation_rate'

    def test_unknown_flag(self):
        with pytest.raises(ConfigurationError) as info:
            resolve_settings(overrides={**BASE, 'epochs': 3})
        assert info.value.key == 'epochs'

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError) as info:
            read_config_file(str(tmp_path / 'nada.json'))
        assert info.value.key == 'config'

    def test_invalid_json(self, write_config):
        with pytest.raises(ConfigurationError):
            read_config_file(write_config('{"task": '))

    def test_root_must_be_object(self, write_config):
        with pytest.raises(ConfigurationError):
            read_config_file(write_config('[1, 2]'))

    def test_invalid_environment_value(self, monkeypatch):
        monkeypatch.setenv('LOSSFORGE_WORKERS', 'muitos')
        with pytest.raises(ConfigurationError) as info:
            resolve_settings(overrides=BASE)
        assert info.value.key == 'workers'

    def test_invalid_value_is_validated(self):
        with pytest.raises(ConfigurationError) as info:
            load_config(overrides={**BASE, 'eval_budget': 0})
        assert info.value.key == 'eval_budget'


class TestBuild:
    def test_seed_formulas_become_tuple(self):
        cfg = build_search_config({**BASE, 'seed_formulas': ['y'], 'output_dir': 'runs'})
        assert cfg.seed_formulas == ('y',)

    def test_echo_is_json(self):
        cfg = build_search_config({**BASE, 'seed_formulas': ['y']})
        echo = config_to_dict(cfg)
        assert echo['seed_formulas'] == ['y']
        json.dumps(echo)

    @pytest.mark.parametrize('name', ['search_seg.json', 'search_box.json', 'search_det.json', 'ablation_seg.json'])
    def test_shipped_configs_load(self, name):
        cfg = load_config(os.path.join(CONFIG_DIR, name))
        assert cfg.task in ('seg', 'box', 'det')
