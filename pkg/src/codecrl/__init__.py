"""GRPO alignment of a codec-token TTS policy, scaled down to a synthetic world.

The numeric modules import numpy on first use of each submodule; importing
the package itself stays cheap so the command line can set thread limits
before any BLAS library loads.
"""

__version__ = "0.1.0"
