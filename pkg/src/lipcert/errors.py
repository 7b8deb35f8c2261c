"""Exception types raised across lipcert."""


class LipcertError(Exception):
    pass


class NotPositiveDefinite(LipcertError):
    pass


class SingularTriangular(LipcertError):
    pass


class SingularMatrix(LipcertError):
    pass


class RankDeficient(LipcertError):
    pass


class NonConvergence(LipcertError):
    pass


class ShapeMismatch(LipcertError, ValueError):
    pass


class OddWidth(LipcertError, ValueError):
    pass


class EmptyDataset(LipcertError):
    pass


class EmptySet(LipcertError):
    pass


class EmptyPool(LipcertError):
    pass


class ConfigError(LipcertError):
    pass


class DivergedLoss(LipcertError):
    """Training produced a non-finite loss; ``epoch`` records where."""

    def __init__(self, epoch, log=None):
        super().__init__(f"loss diverged (non-finite) during epoch {epoch}")
        self.epoch = epoch
        self.log = log
