from .anchors import Anchor, AnchorSet, Assignment, assign, generate_anchors
from .boxes import Box3, Detection, decode, encode, iou3d, iou_matrix, nms, nms_detections
from .cascade import DetectConfig, Detector, cascade_detect, cascade_loss
from .loss import LossConfig, cls_loss, reg_loss, smooth_l1, total_loss, weighted_bce
from .postprocess import filter_small, read_detections_csv, to_world, write_detections_csv
from .roi import roi_align
