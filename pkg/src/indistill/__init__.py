"""indistill: CPU toolkit for intermediate-layer knowledge distillation.

A compact training stack built on a deterministic numpy autodiff engine:
channel pruning aligns a wide teacher's feature maps with a narrow student
so intermediate layers can be transferred directly, one layer at a time,
under a curriculum of epoch windows.
"""

from .tensor import Tensor, GradTape, backward, no_grad, float64_mode

__version__ = "0.1.0"

__all__ = ["Tensor", "GradTape", "backward", "no_grad", "float64_mode", "__version__"]
