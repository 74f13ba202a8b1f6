"""Exception hierarchy for the cloud overlay QoS library."""

from typing import Iterable, List, Sequence, Tuple


class CloudQosError(Exception):
    """Base class for every error raised by this package."""


# Codec

class CodecError(CloudQosError):
    """Erasure codec failure."""


class SymbolSizeError(CodecError):
    """Symbols handed to the codec do not share one length."""


class CodecParameterError(CodecError):
    """k/m outside the supported bounds."""


class InsufficientSymbolsError(CodecError):
    """Fewer than k symbols are present in a block."""

    def __init__(self, present: int, needed: int):
        super().__init__(f"need {needed} symbols to decode, only {present} present")
        self.present = present
        self.needed = needed

    def __reduce__(self):
        return type(self), (self.present, self.needed)


# Protocol

class ProtocolError(CloudQosError):
    """Misuse of an endpoint or data-center service."""


class UnknownFlowError(ProtocolError):
    def __init__(self, flow_id: str):
        super().__init__(f"flow '{flow_id}' is not registered")
        self.flow_id = flow_id

    def __reduce__(self):
        return type(self), (self.flow_id,)


class DuplicateFlowError(ProtocolError):
    def __init__(self, flow_id: str):
        super().__init__(f"flow '{flow_id}' is already registered")
        self.flow_id = flow_id

    def __reduce__(self):
        return type(self), (self.flow_id,)


class PolicyError(ProtocolError):
    """Duplication policy incompatible with the selected service."""


# Simulation

class SimulationError(CloudQosError):
    """Simulator misuse (causality violations, bad wiring)."""


class UnknownLinkError(SimulationError):
    def __init__(self, src: str, dst: str):
        super().__init__(f"no link {src} -> {dst}")
        self.src = src
        self.dst = dst

    def __reduce__(self):
        return type(self), (self.src, self.dst)


# Inputs

class ScenarioError(CloudQosError):
    """Scenario file failed schema or reference validation."""

    def __init__(self, problems: Iterable[str], source: str = ""):
        self.problems: List[str] = list(problems)
        self.source = source
        prefix = f"{source}: " if source else ""
        super().__init__(prefix + "; ".join(self.problems))

    def __reduce__(self):
        return type(self), (self.problems, self.source)


class DatasetError(CloudQosError):
    """Latency dataset rows that failed validation, with 1-based file line numbers."""

    def __init__(self, problems: Sequence[Tuple[int, str]], source: str = ""):
        self.problems = list(problems)
        self.source = source
        details = "; ".join(f"line {line}: {msg}" for line, msg in self.problems[:20])
        more = f" (+{len(self.problems) - 20} more)" if len(self.problems) > 20 else ""
        super().__init__(f"{source or 'dataset'}: {details}{more}")

    def __reduce__(self):
        return type(self), (self.problems, self.source)


class TraceError(CloudQosError):
    """Direct-path trace unusable for the FEC comparison."""
