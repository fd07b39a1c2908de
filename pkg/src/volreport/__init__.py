"""volreport: desk-scale volumetric report generation.

NIfTI ingestion, a 3D vision transformer with spatial pooling, a frozen
decoder LM with trainable LoRA adapters, masked cross-entropy training,
lexicon-based report harmonization, a synthetic scan corpus with exact
ground truth, and evaluation for report generation and VQA.
"""

__version__ = "0.1.0"

from .backend import USE_NUMBA, backend_name
from .errors import VolreportError
from .tensor import Tape, Tensor

__all__ = ["Tape", "Tensor", "USE_NUMBA", "VolreportError", "backend_name", "__version__"]
