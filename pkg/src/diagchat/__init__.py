"""Diagnostic-reasoning dialogue engine.

Per patient turn: extract SOAP-structured clinical findings, retrieve and
vote-refine candidate diseases against a knowledge base, relate findings to
candidates (support / oppose / irrelevant), re-rank by learned clinician
preference, and generate a thought-process-grounded doctor response.
"""

__version__ = "0.1.0"
