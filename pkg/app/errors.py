class DonaldsonError(Exception):
    module = "app"
    exit_code = 4


# group_rep


class GroupRepError(DonaldsonError):
    module = "group_rep"


class NonUnitaryGenerator(GroupRepError):
    pass


class GroupSizeCapExceeded(GroupRepError):
    pass


class NotASubgroup(GroupRepError):
    pass


# strata


class StrataError(DonaldsonError):
    module = "strata"


class LatticeNotPreserved(StrataError):
    pass


class PointNotInAnyStratum(StrataError):
    pass


# lattice


class LatticeError(DonaldsonError):
    module = "lattice"


class DegenerateRadius(LatticeError):
    pass


class DimensionMismatch(LatticeError):
    pass


class IncompatibleRegions(LatticeError):
    pass


class EmptyStratumRegion(LatticeError):
    pass


# bundle_sections


class SectionError(DonaldsonError):
    module = "bundle_sections"


class CenterOutsideDomain(SectionError):
    pass


class ActionDoesNotPreserveDomain(SectionError):
    pass


# transversality


class TransversalityError(DonaldsonError):
    module = "transversality"


class EmptyRegion(TransversalityError):
    pass


class NoAdmissibleValue(TransversalityError):
    pass


class ScheduleInfeasible(TransversalityError):
    def __init__(self, message: str, clause: str | None = None):
        super().__init__(message)
        self.clause = clause


class TransversalityNotAchieved(TransversalityError):
    exit_code = 3


# divisor_analysis


class DivisorError(DonaldsonError):
    module = "divisor_analysis"


class NewtonDivergence(DivisorError):
    pass


class NotCertified(DivisorError):
    exit_code = 3


class ResolutionTooCoarse(DivisorError):
    pass


class NoCriticalPointFound(DivisorError):
    pass


class DegenerateHessian(DivisorError):
    pass


# cli


class CliError(DonaldsonError):
    module = "cli"


class ConfigInvalid(CliError):
    exit_code = 2


class MissingUpstreamArtifact(CliError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, DonaldsonError):
        return exc.exit_code
    return 4
