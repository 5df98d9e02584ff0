"""Exception hierarchy. Every domain failure raised by the package derives
from :class:`VeinmatchError` so the CLI can map it to exit code 1."""


class VeinmatchError(Exception):
    """Base class for all domain errors."""


class DimensionError(VeinmatchError, ValueError):
    pass


class ParameterError(VeinmatchError, ValueError):
    pass


class ContractError(VeinmatchError):
    """A caller broke an operation's precondition (e.g. non-scalar gradient root)."""


class SpecError(VeinmatchError, ValueError):
    pass


class MaskError(VeinmatchError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DataError(VeinmatchError):
    pass


class IngestionError(DataError):
    pass


class ConstraintError(VeinmatchError):
    """A batch or record set lacks a required same/different pair class."""


class DegenerateEmbeddingError(VeinmatchError):
    """An embedding with zero norm reached cosine matching."""


class GalleryError(VeinmatchError):
    pass


class ModelHashMismatch(GalleryError):
    pass


class UnknownSubject(GalleryError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class CheckpointError(VeinmatchError):
    pass
