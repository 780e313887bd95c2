"""Exception types shared across the package."""


class Error(Exception):
    """Base class for all latentlab errors."""


# tensor engine

class ShapeMismatch(Error):
    pass


class NonFiniteResult(Error):
    pass


class NotScalarLoss(Error):
    pass


class DetachedTape(Error):
    pass


# models and serialization

class InvalidArchitecture(Error):
    pass


class CorruptFile(Error):
    pass


class VersionMismatch(Error):
    pass


class ChecksumMismatch(Error):
    pass


class MissingHead(Error):
    pass


# losses

class NotOneHot(Error):
    pass


class DegenerateMargin(Error):
    pass


class TargetIsTruth(Error):
    pass


# attacks and training

class InvalidConfig(Error):
    pass


class NoIntermediateLayers(Error):
    pass


# data

class BadMagic(Error):
    pass


class DimensionMismatch(Error):
    pass


class TruncatedFile(Error):
    pass


class EmptyDataset(Error):
    pass
