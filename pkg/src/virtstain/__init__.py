"""Virtual IHC staining from H&E histology.

Conditional image-to-image translation with frozen-backbone spatial
conditioning, a misalignment-tolerant loss suite, stain-chemistry metrics,
and tissue-stratified failure analysis.
"""

__version__ = "0.1.0"
