"""2D affine transforms mapping slide coordinates into a reference frame."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidGeometryError


@dataclass(frozen=True)
class AffineTransform2D:
    """``(x, y) -> (a*x + b*y + tx, c*x + d*y + ty)``."""

    a: float = 1.0
    b: float = 0.0
    c: float = 0.0
    d: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls()

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform2D":
        return cls(tx=float(tx), ty=float(ty))

    @classmethod
    def rotation(cls, theta: float, scale: float = 1.0) -> "AffineTransform2D":
        """Counter-clockwise rotation by ``theta`` radians about the origin."""
        cos, sin = math.cos(theta) * scale, math.sin(theta) * scale
        return cls(a=cos, b=-sin, c=sin, d=cos)

    @classmethod
    def from_matrix(cls, m) -> "AffineTransform2D":
        """Build from a 2x3 or 3x3 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2])

    @property
    def determinant(self) -> float:
        return self.a * self.d - self.b * self.c

    @property
    def is_invertible(self) -> bool:
        det = self.determinant
        return math.isfinite(det) and det != 0.0

    @property
    def is_identity(self) -> bool:
        return self == AffineTransform2D()

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix."""
        return np.array(
            [[self.a, self.b, self.tx], [self.c, self.d, self.ty], [0.0, 0.0, 1.0]]
        )

    def coefficients(self) -> tuple:
        return (self.a, self.b, self.c, self.d, self.tx, self.ty)

    def apply(self, points) -> np.ndarray:
        """Apply to an ``(n, 2)`` array (or a single point)."""
        p = np.asarray(points, dtype=np.float64)
        x, y = p[..., 0], p[..., 1]
        out = np.empty(p.shape, dtype=np.float64)
        out[..., 0] = self.a * x + self.b * y + self.tx
        out[..., 1] = self.c * x + self.d * y + self.ty
        return out

    def inverse(self) -> "AffineTransform2D":
        det = self.determinant
        if not self.is_invertible:
            raise InvalidGeometryError(f"affine transform is singular (det={det})")
        ia, ib = self.d / det, -self.b / det
        ic, id_ = -self.c / det, self.a / det
        return AffineTransform2D(
            ia, ib, ic, id_,
            -(ia * self.tx + ib * self.ty),
            -(ic * self.tx + id_ * self.ty),
        )

    def __matmul__(self, inner: "AffineTransform2D") -> "AffineTransform2D":
        return compose_transforms(self, inner)


def apply_transform(t: AffineTransform2D, p) -> tuple:
    x, y = float(p[0]), float(p[1])
    return (t.a * x + t.b * y + t.tx, t.c * x + t.d * y + t.ty)


def compose_transforms(outer: AffineTransform2D, inner: AffineTransform2D) -> AffineTransform2D:
    """Transform applying ``inner`` first, then ``outer``."""
    o, i = outer, inner
    return AffineTransform2D(
        o.a * i.a + o.b * i.c,
        o.a * i.b + o.b * i.d,
        o.c * i.a + o.d * i.c,
        o.c * i.b + o.d * i.d,
        o.a * i.tx + o.b * i.ty + o.tx,
        o.c * i.tx + o.d * i.ty + o.ty,
    )


def invert(t: AffineTransform2D) -> AffineTransform2D:
    return t.inverse()
