"""Exception types shared across the package."""


class NeuroevoError(Exception):
    """Base class for all package-specific errors."""


# --- flight data ---

class MissingColumn(NeuroevoError):
    """A requested channel name is absent from a file header."""


class ParseError(NeuroevoError):
    """A data cell could not be parsed as a finite float."""


class EmptyFile(NeuroevoError):
    """A data file contains a header but no rows, or nothing at all."""


class LengthMismatch(NeuroevoError):
    """Arrays that must share a length do not."""


class DegenerateRange(NeuroevoError):
    """A channel is constant, so min-max scaling is undefined."""


class NoFlights(NeuroevoError):
    """An operation over a flight collection received none."""


class FlightTooShort(NeuroevoError):
    """A flight has fewer seconds than one window plus the horizon."""


# --- networks and serialization ---

class DimensionMismatch(NeuroevoError):
    """Array shapes disagree with the declared network dimensions."""


class BadMagic(NeuroevoError):
    """A model file does not start with the expected magic bytes."""


class VersionMismatch(NeuroevoError):
    """A model file was written by an unsupported format version."""


class TruncatedFile(NeuroevoError):
    """A model file ends before its declared content does."""


class ChecksumMismatch(NeuroevoError):
    """Stored CRC-32 does not match the recomputed one."""


# --- training ---

class EmptyDataset(NeuroevoError):
    """Training or evaluation was asked to run over zero samples."""


class NonFiniteGradient(NeuroevoError):
    """A gradient update produced NaN or infinity."""


# --- distributed protocol ---

class TruncatedFrame(NeuroevoError):
    """A wire frame is shorter than its length field claims."""


class UnknownKind(NeuroevoError):
    """A wire frame carries an unrecognized message kind byte."""


class ProtocolError(NeuroevoError):
    """A peer sent a well-formed frame that violates the protocol state."""


# --- configuration ---

class ConfigError(NeuroevoError):
    """A run configuration file is missing, malformed, or inconsistent."""
