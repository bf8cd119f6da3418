"""Exception types shared across the package."""


class ConceptVoteError(Exception):
    """Base class for every error raised by this package."""


class BoundsError(ConceptVoteError, ValueError):
    """A lattice point lies outside its owning grid."""


class FormatError(ConceptVoteError, ValueError):
    """A serialized file is malformed.

    The byte offset at which parsing failed is kept in ``offset``.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class GenerationError(ConceptVoteError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""


class OcclusionInfeasibleError(GenerationError):
    """No occluder placement reached the requested coverage range."""


class EmptyClusterError(ConceptVoteError, ValueError):
    """A cluster statistic is undefined because the cluster has no members."""


class TrainingDataError(ConceptVoteError, ValueError):
    """A model cannot be fit from the provided samples."""


class ConfigError(ConceptVoteError, ValueError):
    """A pipeline configuration value is missing or out of range."""


class StaleModelError(ConfigError):
    """Saved models do not match the configuration used to request them."""
