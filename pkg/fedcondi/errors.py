#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    errors.py

"""Exceptions raised across fedcondi. Every class also derives from the
closest builtin so callers catching ValueError / RuntimeError keep working.
"""


class FedCondiError(Exception):
    """Base class for all fedcondi errors"""


class ShapeError(FedCondiError, ValueError):
    """Operands of an operation have inconsistent shapes"""


class NumericOverflowError(FedCondiError, ArithmeticError):
    """An operation produced NaN or Inf from finite inputs"""


class GraphStateError(FedCondiError, RuntimeError):
    """Graph used out of order (e.g. backward before forward)"""


class ConfigError(FedCondiError, ValueError):
    """Invalid configuration value or unknown configuration key"""


class UnsatisfiableMaskError(FedCondiError, ValueError):
    """Missingness settings leave a sample with no fully observed modality"""


class PartitionError(FedCondiError, RuntimeError):
    """Could not produce a partition with every client non-empty"""


class RoutingError(FedCondiError, ValueError):
    """Condition routing requested with no observed modality"""


class ProtocolError(FedCondiError, RuntimeError):
    """Client and server parameter schemas diverged"""


class UntrainedModelError(FedCondiError, RuntimeError):
    """Evaluation requested on a bundle that has not been trained"""


class ParseError(FedCondiError, ValueError):
    """Malformed input file. Carries the offending (1-based) line number.

    Attributes:
        line (int): line of the input file the error refers to, None if the
            error concerns the file as a whole
    """

    def __init__(self, message: str, line: int = None):
        self.line = line
        if line is not None:
            message = f'line {line}: {message}'
        super().__init__(message)
