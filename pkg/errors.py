# Error hierarchy shared by the library and the CLI
from __future__ import annotations

import json


class HexFieldError(Exception):
    """Base error; `code` is the machine-readable name printed by the CLI."""

    code = 'HexFieldError'

    def machine_line(self) -> str:
        payload = {'code': self.code, 'message': str(self)}
        return f"error: {json.dumps(payload, sort_keys=True)}"


class InvalidParameters(HexFieldError, ValueError):
    code = 'InvalidParameters'


class ConfigError(HexFieldError, ValueError):
    code = 'ConfigError'


class NotInnerNode(HexFieldError, ValueError):
    code = 'NotInnerNode'


class IrregularNeighborhood(HexFieldError, ValueError):
    code = 'IrregularNeighborhood'


class InversionError(HexFieldError, ValueError):
    code = 'InversionError'


class NonPositiveMeasurement(InversionError):
    code = 'NonPositiveMeasurement'


class WidthDegenerate(InversionError):
    code = 'WidthDegenerate'


class NonFiniteEstimate(InversionError):
    code = 'NonFiniteEstimate'


class SingularJacobian(HexFieldError, ArithmeticError):
    code = 'SingularJacobian'


class TooFewValidSamples(HexFieldError, RuntimeError):
    code = 'TooFewValidSamples'


class NoFiniteValue(HexFieldError, ValueError):
    code = 'NoFiniteValue'


class NotStochastic(HexFieldError, ValueError):
    code = 'NotStochastic'


class SparsityViolation(HexFieldError, ValueError):
    code = 'SparsityViolation'


class DisconnectedGraph(HexFieldError, ValueError):
    code = 'DisconnectedGraph'


class AllWeightsZero(HexFieldError, ValueError):
    code = 'AllWeightsZero'


class NeedTwoMethods(HexFieldError, ValueError):
    code = 'NeedTwoMethods'
