"""Moment-matrix SDP hierarchy for prepare-and-measure networks
with sequential receivers."""

from . import cli, momentbuilder, scenarios, sdpcore, seqalgebra  # noqa: F401

__all__ = ["seqalgebra", "momentbuilder", "sdpcore", "scenarios", "cli"]
__version__ = "0.1.0"
