"""Segmentation metrics on hand-made masks.

Dice and IoU count pixels; HD95 and ASSD measure boundary distances in
pixels. Shifting a square by two pixels shows how the two families react.

    python demos/05_metrics.py
"""
import numpy as np

from fedst.metrics import assd, boundary, dice, hd95, iou

gt = np.zeros((16, 16), dtype=np.uint8)
gt[4:10, 4:10] = 1
print("boundary of a 6x6 square has", int(boundary(gt == 1).sum()), "pixels")

for shift in (0, 1, 2, 4):
    pred = np.roll(gt, shift, axis=1)
    print(f"shift {shift}: dice {dice(pred, gt, 1):.3f}  iou {iou(pred, gt, 1):.3f}  "
          f"hd95 {hd95(pred, gt, 1):.2f}  assd {assd(pred, gt, 1):.3f}")

# a missed class: overlap scores drop to zero and distances are undefined
print("empty prediction:", dice(np.zeros_like(gt), gt, 1), hd95(np.zeros_like(gt), gt, 1))
# neither mask has the class: a perfect, vacuous match
print("both empty:", dice(gt, gt, 2), hd95(gt, gt, 2))
