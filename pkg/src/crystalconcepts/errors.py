"""Exception types raised across the package."""


class CrystalConceptsError(Exception):
    """Base class for all package errors."""


class DegenerateLattice(CrystalConceptsError):
    pass


class InvalidSpecies(CrystalConceptsError):
    pass


class TooManyAtoms(CrystalConceptsError):
    pass


class ConfigError(CrystalConceptsError):
    pass


class NumericalError(CrystalConceptsError):
    pass


class InsufficientData(CrystalConceptsError):
    pass


class DecodeFailed(CrystalConceptsError):
    pass


class RefinementSkipped(CrystalConceptsError):
    """No qualified compositions were available to refine on."""


class TrainingDiverged(CrystalConceptsError):
    def __init__(self, stage, step, message="loss became non-finite"):
        super().__init__(f"{stage}: {message} at step {step}")
        self.stage = stage
        self.step = step


class SamplingDiverged(CrystalConceptsError):
    def __init__(self, step, sample_index=None):
        where = f" (sample {sample_index})" if sample_index is not None else ""
        super().__init__(f"non-finite values in reverse chain at step {step}{where}")
        self.step = step
        self.sample_index = sample_index


class StageFailed(CrystalConceptsError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
