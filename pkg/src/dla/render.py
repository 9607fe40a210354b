"""MIP comparison images and residual bone-artifact counts."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from dla.errors import ShapeMismatchError
from dla.labelgen import LabelGenConfig
from dla.volume import BONE, ROI, VESSEL, Image2D, Volume, mip, subtract

__all__ = ["ArtifactReport", "artifact_report", "render_mip_pair", "to_pgm", "write_pgm"]


def to_pgm(image: Image2D) -> bytes:
    """Binary graymap with intensities mapped linearly from [0, max] to [0, 255].

    Negative values clip to black; an image with no positive value is black.
    """
    a = np.asarray(image.intensities, dtype=np.float64)
    top = a.max() if a.size else 0.0
    if top > 0:
        pix = np.rint(np.clip(a, 0.0, top) * (255.0 / top)).astype(np.uint8)
    else:
        pix = np.zeros(a.shape, dtype=np.uint8)
    return f"P5\n{image.width} {image.height}\n255\n".encode("ascii") + pix.tobytes()


def write_pgm(image: Image2D, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_pgm(image))


def render_mip_pair(dsa: Volume, dla: Volume, axis: str = "z", out_dir=None) -> Tuple[Image2D, Image2D]:
    """MIPs of the subtraction and DLA volumes along ``axis``.

    With ``out_dir`` set, writes ``dsa_mip_<axis>.pgm`` and ``dla_mip_<axis>.pgm``.
    """
    if dsa.shape != dla.shape:
        raise ShapeMismatchError(f"DSA {dsa.dims} vs DLA {dla.dims}")
    images = mip(dsa, axis), mip(dla, axis)
    if out_dir is not None:
        for prefix, img in zip(("dsa", "dla"), images):
            write_pgm(img, os.path.join(out_dir, f"{prefix}_mip_{axis}.pgm"))
    return images


@dataclass(frozen=True)
class ArtifactReport:
    case_id: str
    residual_bone_voxels_dsa: int
    residual_bone_voxels_dla: int

    @property
    def ratio_defined(self) -> bool:
        return self.residual_bone_voxels_dsa > 0

    @property
    def ratio(self) -> float:
        """DLA over DSA residual count; NaN when the DSA count is zero."""
        if not self.ratio_defined:
            return float("nan")
        return self.residual_bone_voxels_dla / self.residual_bone_voxels_dsa

    def to_tsv(self) -> str:
        ratio = f"{self.ratio:.6f}" if self.ratio_defined else "undefined"
        return (
            "case\tresidual_bone_voxels_dsa\tresidual_bone_voxels_dla\tratio\n"
            f"{self.case_id}\t{self.residual_bone_voxels_dsa}\t{self.residual_bone_voxels_dla}\t{ratio}\n"
        )


def artifact_report(case, dla_labels: np.ndarray, cfg: LabelGenConfig = LabelGenConfig(),
                    roi: Optional[ROI] = None, case_id: str = "") -> ArtifactReport:
    """Count bone-truth voxels that survive as vessel signal.

    DSA side: subtraction value at or above the vessel threshold.  DLA side:
    labeled vessel by the classifier.  Counting is limited to ``roi`` when given.
    """
    dla_labels = np.asarray(dla_labels)
    if dla_labels.shape != case.truth.shape:
        raise ShapeMismatchError(f"labels {dla_labels.shape} vs case {case.truth.shape}")
    bone = case.truth == BONE
    if roi is not None:
        bone &= roi.mask(case.truth.shape)
    dsa_hot = subtract(case.fill, case.mask).values >= cfg.vessel_threshold_hu
    return ArtifactReport(
        case_id,
        int(np.count_nonzero(bone & dsa_hot)),
        int(np.count_nonzero(bone & (dla_labels == VESSEL))),
    )
