"""Crosscoder model diffing on synthetic paired-activation worlds.

Thin wrapper around the compiled extension; see the project README for the
pipeline overview and the `xdiff` CLI for file-based workflows.
"""

from ._xdiff import *  # noqa: F401,F403
from ._xdiff import __version__  # noqa: F401
