"""Decode heard speech from intracranial EEG: features, mel targets, regressors, resynthesis."""

__version__ = "0.1.0"
