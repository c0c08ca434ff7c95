"""3D pulmonary nodule detection with a dilated high-resolution backbone, on numpy."""
from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"
