#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Exceções do LossForge

Toda falha de biblioteca herda de LossForgeError; a CLI converte essas
exceções em códigos de saída (2 para uso/configuração, 3 para abortos).
"""


class LossForgeError(Exception):
    """Erro base do projeto"""


class ShapeError(LossForgeError, ValueError):
    """Tensores com dimensões incompatíveis"""


class FormulaParseError(LossForgeError, ValueError):
    """Erro de leitura de fórmula, com a posição (coluna, base 0) do problema"""

    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} (posição {position})")


class ConfigurationError(LossForgeError):
    """Configuração inválida ou incompleta"""

    def __init__(self, message: str, key: str = None):
        self.key = key
        super().__init__(message)


class SelectionError(LossForgeError):
    """Nenhum indivíduo avaliado disponível para o torneio"""


class NodeCapExceeded(LossForgeError):
    """Mutação produziu um grafo acima do limite de nós"""


class SearchSetupError(LossForgeError):
    """Falha ao montar a população inicial (limite de tentativas excedido)"""


class SearchAbortedError(LossForgeError):
    """Busca abortada durante a evolução"""


class MetricUndefinedError(LossForgeError):
    """Métrica sem definição para a entrada (ex.: matriz de confusão vazia)"""
