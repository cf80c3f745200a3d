"""The fixed transformation group, its canonical enumeration and inverses.

Descriptors combine horizontal flip (a), horizontal/vertical translation
(b, c with +1 meaning left/up), 90-degree rotations (d) and a luma
graying step. Color mode has 54 members, grayscale mode the 42 without
the graying step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ValidationError

TRANSLATE_RATIO = 0.15
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class TransformDescriptor:
    """One group element: index plus its flip/translate/rotate/gray parts."""

    index: int
    flip: int = 0
    tx: int = 0
    ty: int = 0
    rot: int = 0
    gray: bool = False

    @property
    def is_identity(self) -> bool:
        return self.flip == 0 and self.tx == 0 and self.ty == 0 and self.rot == 0 and not self.gray


def enumerate_transforms(color_mode: bool) -> list[TransformDescriptor]:
    """The canonical ordered transform list (54 in color, 42 in gray).

    Loop order fixes the indices: 1-32 nest flip, tx, ty, rotation
    (innermost); 33-38 combine flips with tx in {-1, 1, 0} at ty=-1;
    39-42 combine flips with tx=-1 and ty in {0, 1}; 43-50 gray copies
    of the flip/rotation block; 51-54 gray single-axis translations.
    """
    out: list[TransformDescriptor] = []

    def add(**kw) -> None:
        out.append(TransformDescriptor(index=len(out) + 1, **kw))

    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                for d in (0, 90, 180, 270):
                    add(flip=a, tx=b, ty=c, rot=d)
    for a in (0, 1):
        for b in (-1, 1, 0):
            add(flip=a, tx=b, ty=-1)
    for a in (0, 1):
        for c in (0, 1):
            add(flip=a, tx=-1, ty=c)
    if color_mode:
        for a in (0, 1):
            for d in (0, 90, 180, 270):
                add(flip=a, rot=d, gray=True)
        for b in (-1, 1):
            add(tx=b, gray=True)
        for c in (-1, 1):
            add(ty=c, gray=True)
    return out


def identity_transform() -> TransformDescriptor:
    return TransformDescriptor(index=1)


def shift_amount(dim: int) -> int:
    """Translation magnitude: round-half-up of 0.15 * dim."""
    return int(math.floor(TRANSLATE_RATIO * dim + 0.5))


def _translate(img: torch.Tensor, tx: int, ty: int) -> torch.Tensor:
    """Shift with reflection padding (no edge repetition) filling borders."""
    c, h, w = img.shape
    x = img.unsqueeze(0)
    if ty != 0:
        s = shift_amount(h)
        if s > 0:
            if ty > 0:
                x = F.pad(x, (0, 0, 0, s), mode="reflect")[:, :, s : s + h, :]
            else:
                x = F.pad(x, (0, 0, s, 0), mode="reflect")[:, :, :h, :]
    if tx != 0:
        s = shift_amount(w)
        if s > 0:
            if tx > 0:
                x = F.pad(x, (0, s, 0, 0), mode="reflect")[:, :, :, s : s + w]
            else:
                x = F.pad(x, (s, 0, 0, 0), mode="reflect")[:, :, :, :w]
    return x.squeeze(0)


def to_luma(img: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of an RGB image, replicated back into 3 channels."""
    if img.shape[0] != 3:
        raise ValidationError("luma graying requires a 3-channel image")
    weights = img.new_tensor(LUMA_WEIGHTS).view(3, 1, 1)
    return (img * weights).sum(dim=0, keepdim=True).expand(3, -1, -1).contiguous()


def apply_transform(img: torch.Tensor, t: TransformDescriptor) -> torch.Tensor:
    """Apply one group element: rotate, translate y, translate x, flip, gray.

    Shape-preserving and differentiable in the pixel values (pure index
    remapping plus fixed luma weights).
    """
    if t.gray and img.shape[0] == 1:
        raise ValidationError("gray transform is undefined for 1-channel images")
    out = img
    if t.rot != 0:
        if img.shape[1] != img.shape[2]:
            raise ValidationError("90-degree rotations require square images")
        out = torch.rot90(out, k=t.rot // 90, dims=(1, 2))
    if t.tx != 0 or t.ty != 0:
        out = _translate(out, t.tx, t.ty)
    if t.flip:
        out = torch.flip(out, dims=(2,))
    if t.gray:
        out = to_luma(out)
    return out.contiguous()


def apply_transform_batch(imgs: torch.Tensor, t: TransformDescriptor) -> torch.Tensor:
    """apply_transform over a (B, C, H, W) batch."""
    return torch.stack([apply_transform(im, t) for im in imgs])


def invert_response_map(m: torch.Tensor, t: TransformDescriptor) -> torch.Tensor:
    """Undo the spatial action of t on an H x W map.

    Components are inverted in reverse application order; cells exposed
    by undoing a translation carry no vote and are filled with 0. The
    gray component has no spatial action.
    """
    if m.dim() != 2:
        raise ValidationError(f"expected an H x W map, got shape {tuple(m.shape)}")
    out = m
    if t.flip:
        out = torch.flip(out, dims=(1,))
    if t.tx != 0:
        h, w = out.shape
        s = shift_amount(w)
        if s > 0:
            shifted = out.new_zeros(h, w)
            if t.tx > 0:
                shifted[:, s:] = out[:, : w - s]
            else:
                shifted[:, : w - s] = out[:, s:]
            out = shifted
    if t.ty != 0:
        h, w = out.shape
        s = shift_amount(h)
        if s > 0:
            shifted = out.new_zeros(h, w)
            if t.ty > 0:
                shifted[s:, :] = out[: h - s, :]
            else:
                shifted[: h - s, :] = out[s:, :]
            out = shifted
    if t.rot != 0:
        if out.shape[0] != out.shape[1]:
            raise ValidationError("90-degree rotations require square maps")
        out = torch.rot90(out, k=(4 - t.rot // 90) % 4, dims=(0, 1))
    return out.contiguous()
