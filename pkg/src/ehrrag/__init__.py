"""Evaluation harness for retrieval-augmented context selection over
longitudinal clinical records.

Three extraction tasks (imaging procedures, antibiotic timelines, key
diagnoses) are scored under three context strategies: retrieved chunks,
the most recent notes under a token budget, and the full record. A
seeded synthetic corpus plus an oracle responder make the whole pipeline
verifiable offline, end to end.
"""

from ._kernels import IMPLEMENTATION as KERNEL_IMPLEMENTATION

__version__ = "0.1.0"

__all__ = ["KERNEL_IMPLEMENTATION", "__version__"]
