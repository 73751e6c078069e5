"""Exceptions carrying the command-line exit status."""


class MonoUNetError(Exception):
    exit_code = 1


class UsageError(MonoUNetError):
    exit_code = 2


class DataError(MonoUNetError):
    exit_code = 3


class NumericError(MonoUNetError):
    exit_code = 4
