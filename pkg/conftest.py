#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Configuração do pytest: testes marcados como `slow` só rodam com
LOSSFORGE_SLOW_TESTS=1.
"""

import os

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: busca completa, ablação ou medição de vazão")


def pytest_collection_modifyitems(config, items):
    if os.environ.get('LOSSFORGE_SLOW_TESTS') == '1':
        return
    skip_slow = pytest.mark.skip(reason="defina LOSSFORGE_SLOW_TESTS=1 para rodar")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)
