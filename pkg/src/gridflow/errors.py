"""Exception hierarchy shared across the package."""


class GridflowError(Exception):
    """Base class for all package errors."""


# --- case parsing / file formats ---

class MalformedBlock(GridflowError):
    """A case-file matrix block is missing, ragged, or unparseable."""


class UnsupportedCost(GridflowError):
    """Cost model is not a polynomial of degree <= 2."""


class DisconnectedCase(GridflowError):
    """The live topology of a parsed case is not connected."""


class NoRefBus(GridflowError):
    """The case declares no (or more than one) reference bus."""


class HeaderMismatch(GridflowError):
    """Dataset header is inconsistent with the row contents."""


class NonFiniteValue(GridflowError):
    """A NaN or infinity was found where finite data is required."""


class VersionMismatch(GridflowError):
    """Checkpoint file version is not supported."""


class ShapeMismatch(GridflowError):
    """Array shapes disagree with the declared or expected layout."""


# --- topology / linear algebra ---

class Disconnected(GridflowError):
    """Live graph is not connected; reduced susceptance matrix is singular."""


class SingularB(GridflowError):
    """Factorization of the reduced susceptance matrix failed."""


class WouldDisconnect(GridflowError):
    """Removing the requested lines splits the network."""

    def __init__(self, msg, islands=None):
        super().__init__(msg)
        self.islands = islands


class BridgeLine(GridflowError):
    """Single-line outage of a bridge: rank-one update denominator vanishes."""


# --- spectral analysis ---

class NotSymmetric(GridflowError):
    """Matrix is not symmetric within tolerance."""


class NotPositiveDefinite(GridflowError):
    """Matrix has a non-positive eigenvalue."""


class NoConvergence(GridflowError):
    """Eigenvalue iteration failed to converge."""


class NotOrthonormal(GridflowError):
    """Subspace basis columns are not orthonormal within tolerance."""


class DegenerateSpectrum(GridflowError):
    """Eigenvalue separation below tolerance; perturbation bounds meaningless."""


# --- optimization ---

class Infeasible(GridflowError):
    """The instance admits no feasible point (balance or flow inconsistency)."""


class MaxIterations(GridflowError):
    """Solver hit the iteration cap before meeting tolerances."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class TooManyRejections(GridflowError):
    """More than the allowed fraction of sampled instances were infeasible."""


# --- neural models / training ---

class MissingChannel(GridflowError):
    """Loss configuration references a prediction channel not produced."""


class GraphNotRecorded(GridflowError):
    """backward() called without a recorded forward pass."""


class DimensionMismatch(GridflowError):
    """Dataset, grid, and model dimensions disagree."""


class Diverged(GridflowError):
    """Training loss became non-finite."""


class EmptyTestSet(GridflowError):
    """Evaluation requested on an empty split."""


class NoBindingEvents(GridflowError):
    """A selected active line never binds in the training data."""


# --- CLI ---

class UnknownSubcommand(GridflowError):
    """Unrecognized CLI subcommand."""


class BadConfig(GridflowError):
    """Run configuration file is invalid (unknown keys, missing paths)."""
