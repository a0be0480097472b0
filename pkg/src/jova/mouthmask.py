"""Pixel-space mouth boxes mapped into latent-space boolean masks.

Pipeline: per-frame pixel boxes -> floor/ceil spatial scaling by the codec's
spatial factor -> min/max merging over non-overlapping temporal windows ->
rasterization into a (latent frames, latent height, latent width) mask.
Latent boxes are half-open on the right/bottom edge: a box (x1, y1, x2, y2)
covers columns x1..x2-1 and rows y1..y2-1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

SIDECAR_HEADER = "frame_index,present,x1,y1,x2,y2"


@dataclass(frozen=True)
class MouthBoxPx:
    """One detected mouth bounding box in pixel coordinates.

    present=False means no face was found in that frame; coordinates are
    then ignored.
    """

    frame_index: int
    x1: int = 0
    y1: int = 0
    x2: int = 0
    y2: int = 0
    present: bool = True

    def __post_init__(self):
        if self.present and (self.x1 > self.x2 or self.y1 > self.y2
                             or self.x1 < 0 or self.y1 < 0):
            raise ValueError(f"invalid box {self}")


@dataclass(frozen=True)
class LatentBox:
    """Half-open box on the latent grid; None stands for an absent box."""

    x1: int
    y1: int
    x2: int
    y2: int


@dataclass(frozen=True)
class DownsampleSpec:
    """Spatial factor s and temporal window size t_s of the codec."""

    s: int
    t_s: int

    def __post_init__(self):
        if self.s < 1 or self.t_s < 1:
            raise ValueError(f"factors must be >= 1, got {self}")


def map_box_spatial(box, s, grid_hw=None):
    """Scale one pixel box to the latent grid: floors the near corner,
    ceils the far corner, optionally clamps to (H_l, W_l).

    Absent boxes propagate as None.
    """
    if not box.present:
        return None
    x1, y1 = box.x1 // s, box.y1 // s
    x2 = -(-box.x2 // s)
    y2 = -(-box.y2 // s)
    if grid_hw is not None:
        h, w = grid_hw
        x1, x2 = min(x1, w), min(x2, w)
        y1, y2 = min(y1, h), min(y2, h)
    return LatentBox(x1, y1, x2, y2)


def merge_boxes_temporal(boxes, t_s):
    """Merge per-frame latent boxes over non-overlapping windows of t_s.

    Each window yields the min/max envelope of its present boxes; a window
    with no present boxes yields None. A trailing partial window is merged
    over the frames it has.
    """
    merged = []
    for lo in range(0, len(boxes), t_s):
        window = [b for b in boxes[lo:lo + t_s] if b is not None]
        if not window:
            merged.append(None)
            continue
        merged.append(LatentBox(
            min(b.x1 for b in window),
            min(b.y1 for b in window),
            max(b.x2 for b in window),
            max(b.y2 for b in window),
        ))
    return merged


def build_mask(latent_shape, merged_boxes):
    """Rasterize merged boxes into a boolean (T_l, H_l, W_l) grid.

    Boxes poking past the latent extents are clamped with a warning.
    """
    t_l, h_l, w_l = latent_shape
    if len(merged_boxes) != t_l:
        raise ValueError(
            f"{len(merged_boxes)} merged boxes for {t_l} latent frames"
        )
    mask = np.zeros((t_l, h_l, w_l), dtype=bool)
    for f, box in enumerate(merged_boxes):
        if box is None:
            continue
        if box.x2 > w_l or box.y2 > h_l:
            log.warning("box %s exceeds latent grid (%d, %d); clamping",
                        box, h_l, w_l)
        x1, x2 = max(box.x1, 0), min(box.x2, w_l)
        y1, y2 = max(box.y1, 0), min(box.y2, h_l)
        if x1 < x2 and y1 < y2:
            mask[f, y1:y2, x1:x2] = True
    return mask


def mask_from_boxes(boxes, spec, latent_shape):
    """Full pipeline: pixel boxes -> spatial map -> temporal merge -> mask."""
    latent = [map_box_spatial(b, spec.s, latent_shape[1:]) for b in boxes]
    merged = merge_boxes_temporal(latent, spec.t_s)
    return build_mask(latent_shape, merged)


# ---------------------------------------------------------------------------
# zero-mask locality validation
# ---------------------------------------------------------------------------

@dataclass
class LocalityReport:
    """Outcome of zeroing masked latent cells and diffing the decodes."""

    passed: bool
    advisory: bool
    changed_pixels: int
    contained_pixels: int
    masked_cells: int

    @property
    def coverage(self):
        if self.changed_pixels == 0:
            return 1.0
        return self.contained_pixels / self.changed_pixels


def zero_mask_validate(video_px, boxes, codec):
    """Encode, zero the masked latent cells, decode, and check that every
    changed pixel lies inside the masked cells' pixel footprint.

    `codec` must expose encode_video/decode_video, integer factors s and
    t_s, and an `exactly_local` flag. With an exactly local codec the
    containment check is a hard PASS/FAIL; otherwise the report is marked
    advisory and carries the coverage fraction instead.
    """
    spec = DownsampleSpec(codec.s, codec.t_s)
    latent = codec.encode_video(video_px)
    t_l, h_l, w_l = latent.shape[:3]
    mask = mask_from_boxes(boxes, spec, (t_l, h_l, w_l))

    baseline = codec.decode_video(latent)
    zeroed = latent.copy()
    zeroed[mask] = 0.0
    recon = codec.decode_video(zeroed)

    changed = np.abs(recon - baseline) > 0.0
    footprint = np.zeros_like(changed)
    for f, y, x in zip(*np.nonzero(mask)):
        footprint[f * spec.t_s:(f + 1) * spec.t_s,
                  y * spec.s:(y + 1) * spec.s,
                  x * spec.s:(x + 1) * spec.s] = True

    advisory = not getattr(codec, "exactly_local", False)
    n_changed = int(changed.sum())
    n_contained = int((changed & footprint).sum())
    passed = n_contained == n_changed if not advisory else True
    return LocalityReport(
        passed=passed,
        advisory=advisory,
        changed_pixels=n_changed,
        contained_pixels=n_contained,
        masked_cells=int(mask.sum()),
    )


# ---------------------------------------------------------------------------
# sidecar file I/O
# ---------------------------------------------------------------------------

def write_box_sidecar(path, boxes):
    """One CSV record per frame: frame_index,present,x1,y1,x2,y2."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SIDECAR_HEADER + "\n")
        for b in boxes:
            fh.write(f"{b.frame_index},{int(b.present)},"
                     f"{b.x1},{b.y1},{b.x2},{b.y2}\n")


def read_box_sidecar(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != SIDECAR_HEADER:
            raise ValueError(f"unexpected sidecar header: {header!r}")
        boxes = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            frame, present, x1, y1, x2, y2 = (int(v) for v in line.split(","))
            boxes.append(MouthBoxPx(frame, x1, y1, x2, y2, present=bool(present)))
    return boxes
