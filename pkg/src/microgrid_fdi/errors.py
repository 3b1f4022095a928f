"""Exception types raised across the package."""


class MicrogridFdiError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(MicrogridFdiError):
    pass


class NonHurwitz(MicrogridFdiError):
    pass


class NonFinite(MicrogridFdiError):
    pass


class Infeasible(MicrogridFdiError):
    pass


class IllConditioned(MicrogridFdiError):
    pass


class VoltageCollapse(MicrogridFdiError):
    def __init__(self, msg, t=None, dg=None):
        super().__init__(msg)
        self.t = t
        self.dg = dg


class RankDeficient(MicrogridFdiError):
    pass


class SingularPsi(MicrogridFdiError):
    pass


class NegativeVariance(MicrogridFdiError):
    pass


class SingularK(MicrogridFdiError):
    pass


class ZeroZbar(MicrogridFdiError):
    pass


class ConfigError(MicrogridFdiError):
    def __init__(self, msg, field=None):
        super().__init__(f"{field}: {msg}" if field else msg)
        self.field = field
