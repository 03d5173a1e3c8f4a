"""Exception hierarchy shared by all beamlab modules."""


class BeamlabError(Exception):
    """Base class for every error raised by beamlab."""


class ArgumentError(BeamlabError, ValueError):
    pass


class DomainError(BeamlabError, ValueError):
    """A point lies outside the chart on which the metric is defined."""


class GeometryError(BeamlabError):
    pass


class ClassificationError(BeamlabError):
    pass


class UnsupportedGeometryError(GeometryError):
    """Self-intersecting geodesics would need quasimode gluing."""


class TubeTooWideError(GeometryError):
    pass


class NumericalFailure(BeamlabError):
    """Failures that map to CLI exit status 3."""


class RiccatiBlowupError(NumericalFailure):
    def __init__(self, tau, min_eig):
        self.tau = float(tau)
        self.min_eig = float(min_eig)
        super().__init__(
            f"Im H lost positivity at tau={self.tau:.6g} (min eigenvalue {self.min_eig:.3e})"
        )


class ConditioningError(NumericalFailure):
    def __init__(self, message, tag=None):
        self.tag = tag
        if tag is not None:
            message = f"{message} [{tag}]"
        super().__init__(message)


class ResolutionError(BeamlabError):
    pass


class ConfigurationError(BeamlabError, ValueError):
    pass


class DataError(BeamlabError, ValueError):
    pass
