"""lcnmt: larger-context neural machine translation on a small autodiff core.

A gated two-encoder transformer translates a source sentence while
attending to its preceding context sentence; training adds a multilevel
pairwise margin loss that rewards scoring the reference higher with the
true context than with a mismatched one.
"""

__version__ = "0.1.0"

from . import kernels  # noqa: F401  (import selects the kernel backend)
from .autodiff import Tape, Tensor  # noqa: F401
