from .fusion import (FUSION_COLUMNS, FusionMetricsReport, en, fusion_report, mi, qabf, scd, sd, sf,
                     ssim, vif)
from .seg import SEG_COLUMNS, SegMetricsReport, boundary, dice, hd95, iou, miou, seg_report

__all__ = [
    "FUSION_COLUMNS", "FusionMetricsReport", "en", "fusion_report", "mi", "qabf", "scd", "sd", "sf",
    "ssim", "vif", "SEG_COLUMNS", "SegMetricsReport", "boundary", "dice", "hd95", "iou", "miou",
    "seg_report",
]
