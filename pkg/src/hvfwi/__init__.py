"""HV transport metric for signed signals and a time-domain acoustic FWI toolkit."""

__version__ = "0.1.0"
