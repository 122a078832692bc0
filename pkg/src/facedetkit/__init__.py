"""Detection-geometry toolkit for anchor-based face detectors.

Anchors, max-IoU assignment, DIoU/focal/IoU-head losses with analytic
gradients, score fusion, NMS, box voting, test-time augmentation, WIDER FACE
I/O and AP evaluation, plus a synthetic end-to-end training demo.
"""

from .geometry import Box, diou_loss, diou_loss_grad, iou

__version__ = "0.1.0"

__all__ = ["Box", "diou_loss", "diou_loss_grad", "iou", "__version__"]
