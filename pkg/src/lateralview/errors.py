"""Exception types shared across the package.

Each carries an ``exit_code`` used by the command-line front end:
data problems map to 2 and numerical failures to 3.
"""


class LateralViewError(Exception):
    exit_code = 1


class DataError(LateralViewError):
    exit_code = 2


class UnknownLabel(DataError, KeyError):
    def __init__(self, label, row=None):
        self.label = label
        self.row = row
        where = f" (manifest line {row})" if row is not None else ""
        super().__init__(f"label {label!r} is not in the hierarchy{where}")

    def __str__(self):
        return self.args[0]


class EmptyVocabulary(DataError):
    pass


class InvalidImage(DataError, ValueError):
    pass


class DuplicatePatient(DataError):
    pass


class ManifestError(DataError):
    pass


class EmptyManifest(DataError):
    pass


class VocabularyMismatch(DataError):
    pass


class NoRuns(DataError):
    pass


class BothViewsMissing(LateralViewError, ValueError):
    pass


class MixedAvailability(LateralViewError, ValueError):
    pass


class AmbiguousOutput(LateralViewError, ValueError):
    pass


class MissingHead(LateralViewError, ValueError):
    pass


class RegimeUnsupported(LateralViewError):
    pass


class DegenerateLabel(LateralViewError, ValueError):
    pass


class NumericalError(LateralViewError):
    exit_code = 3


class NonFiniteLoss(NumericalError):
    def __init__(self, batch_index=None, epoch=None):
        self.batch_index = batch_index
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")


class ZeroVariance(NumericalError):
    pass
