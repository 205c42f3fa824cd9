"""packptq: pack-wise post-training quantization at desk scale.

Pipeline: score blocks (Hessian-mean estimates at block outputs), pack
consecutive blocks guided by the scores, allocate per-pack bit-widths under
a memory budget, fake-quantize, reconstruct pack by pack, evaluate.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, finite_diff_gradient  # noqa: F401
