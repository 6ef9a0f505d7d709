//! Axis-aligned box algebra and planar affine transforms.
//!
//! Boxes are continuous closed-open rectangles in pixel space with the origin
//! at the top-left corner, x to the right and y downward. Two boxes that only
//! share an edge do not intersect.

use std::cmp::Ordering;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]: min must be strictly below max")]
    Degenerate {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("box coordinates must be finite")]
    NonFinite,
    #[error("affine transform is not invertible (determinant {0})")]
    NonInvertibleTransform(f64),
}

/// Axis-aligned bounding box `[x_min, x_max) × [y_min, y_max)`.
#[derive(Clone, Copy, PartialEq)]
pub struct BoundingBox<T> {
    x_min: T,
    y_min: T,
    x_max: T,
    y_max: T,
}

impl<T: Scalar> BoundingBox<T> {
    /// Builds a box, rejecting non-finite and zero-area input.
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self, GeometryError> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::Degenerate {
                x_min: x_min.as_f64(),
                y_min: y_min.as_f64(),
                x_max: x_max.as_f64(),
                y_max: y_max.as_f64(),
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box from an origin and a size.
    pub fn from_xywh(x: T, y: T, width: T, height: T) -> Result<Self, GeometryError> {
        Self::new(x, y, x + width, y + height)
    }

    #[inline]
    pub fn x_min(&self) -> T {
        self.x_min
    }

    #[inline]
    pub fn y_min(&self) -> T {
        self.y_min
    }

    #[inline]
    pub fn x_max(&self) -> T {
        self.x_max
    }

    #[inline]
    pub fn y_max(&self) -> T {
        self.y_max
    }

    #[inline]
    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn coords(&self) -> [T; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Overlap rectangle, or `None` when the interiors are disjoint.
    pub fn intersect(&self, other: &Self) -> Option<Self> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        if x_min < x_max && y_min < y_max {
            Some(Self {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        } else {
            None
        }
    }

    /// Area of the overlap; zero when disjoint.
    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w > T::zero() && h > T::zero() {
            w * h
        } else {
            T::zero()
        }
    }

    /// Intersection over union.
    pub fn iou(&self, other: &Self) -> T {
        let inter = self.intersection_area(other);
        if inter <= T::zero() {
            return T::zero();
        }
        let union = self.area() + other.area() - inter;
        inter / union
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &Self) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Lexicographic order on `(x_min, y_min, x_max, y_max)` under IEEE total ordering.
    pub fn lexicographic_cmp(&self, other: &Self) -> Ordering {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| a.as_f64().total_cmp(&b.as_f64()))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }

    pub fn cast<U: Scalar>(&self) -> BoundingBox<U> {
        BoundingBox {
            x_min: U::lit(self.x_min.as_f64()),
            y_min: U::lit(self.y_min.as_f64()),
            x_max: U::lit(self.x_max.as_f64()),
            y_max: U::lit(self.y_max.as_f64()),
        }
    }
}

impl<T: Scalar> fmt::Debug for BoundingBox<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

impl<T: Scalar + Serialize> Serialize for BoundingBox<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for BoundingBox<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x_min, y_min, x_max, y_max] = <[T; 4]>::deserialize(d)?;
        Self::new(x_min, y_min, x_max, y_max).map_err(D::Error::custom)
    }
}

/// Intersection over union of two boxes.
pub fn iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    a.iou(b)
}

/// Overlap rectangle of two boxes.
pub fn intersect<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> Option<BoundingBox<T>> {
    a.intersect(b)
}

/// Planar affine map `(x, y) ↦ (a·x + b·y + c, d·x + e·y + f)`.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
    pub e: T,
    pub f: T,
}

impl<T: Scalar> AffineTransform<T> {
    pub fn new(a: T, b: T, c: T, d: T, e: T, f: T) -> Self {
        Self { a, b, c, d, e, f }
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self::new(o, z, z, z, o, z)
    }

    pub fn translation(dx: T, dy: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self::new(o, z, dx, z, o, dy)
    }

    pub fn scaling(sx: T, sy: T) -> Self {
        let z = T::zero();
        Self::new(sx, z, z, z, sy, z)
    }

    /// Left-right reflection of a frame `width` pixels wide: `x ↦ width − x`.
    pub fn mirror_horizontal(width: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self::new(-o, z, width, z, o, z)
    }

    /// Top-bottom reflection of a frame `height` pixels tall: `y ↦ height − y`.
    pub fn mirror_vertical(height: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self::new(o, z, z, z, -o, height)
    }

    /// Clockwise quarter turn of a frame `height` pixels tall (y down):
    /// `(x, y) ↦ (height − y, x)`. A `w × h` frame becomes `h × w`.
    pub fn rotate_90_cw(height: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self::new(z, -o, height, o, z, z)
    }

    pub fn determinant(&self) -> T {
        self.a * self.e - self.b * self.d
    }

    pub fn is_invertible(&self) -> bool {
        let det = self.determinant();
        det.is_finite() && det != T::zero()
    }

    /// True when the linear part maps axes onto axes (no shear, no free rotation).
    pub fn is_axis_preserving(&self) -> bool {
        let z = T::zero();
        (self.b == z && self.d == z) || (self.a == z && self.e == z)
    }

    pub fn apply_point(&self, x: T, y: T) -> (T, T) {
        (
            self.a * x + self.b * y + self.c,
            self.d * x + self.e * y + self.f,
        )
    }

    /// `self` after `first`: the result maps `p ↦ self(first(p))`.
    pub fn after(&self, first: &Self) -> Self {
        Self {
            a: self.a * first.a + self.b * first.d,
            b: self.a * first.b + self.b * first.e,
            c: self.a * first.c + self.b * first.f + self.c,
            d: self.d * first.a + self.e * first.d,
            e: self.d * first.b + self.e * first.e,
            f: self.d * first.c + self.e * first.f + self.f,
        }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Self) -> Self {
        next.after(self)
    }

    pub fn invert(&self) -> Result<Self, GeometryError> {
        let det = self.determinant();
        if !(det.is_finite() && det != T::zero()) {
            return Err(GeometryError::NonInvertibleTransform(det.as_f64()));
        }
        let a = self.e / det;
        let b = -self.b / det;
        let d = -self.d / det;
        let e = self.a / det;
        let c = -(a * self.c + b * self.f);
        let f = -(d * self.c + e * self.f);
        Ok(Self { a, b, c, d, e, f })
    }

    /// Maps the four corners of `bbox` and returns their axis-aligned hull.
    ///
    /// For axis-preserving transforms this is the exact image of the box.
    pub fn apply_box(&self, bbox: &BoundingBox<T>) -> Result<BoundingBox<T>, GeometryError> {
        if !self.is_invertible() {
            return Err(GeometryError::NonInvertibleTransform(
                self.determinant().as_f64(),
            ));
        }
        let corners = [
            self.apply_point(bbox.x_min, bbox.y_min),
            self.apply_point(bbox.x_max, bbox.y_min),
            self.apply_point(bbox.x_min, bbox.y_max),
            self.apply_point(bbox.x_max, bbox.y_max),
        ];
        let (mut x0, mut y0) = corners[0];
        let (mut x1, mut y1) = corners[0];
        for &(x, y) in &corners[1..] {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        BoundingBox::new(x0, y0, x1, y1)
    }

    pub fn cast<U: Scalar>(&self) -> AffineTransform<U> {
        AffineTransform {
            a: U::lit(self.a.as_f64()),
            b: U::lit(self.b.as_f64()),
            c: U::lit(self.c.as_f64()),
            d: U::lit(self.d.as_f64()),
            e: U::lit(self.e.as_f64()),
            f: U::lit(self.f.as_f64()),
        }
    }
}

impl<T: Scalar> Default for AffineTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> fmt::Debug for AffineTransform<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Affine[{}, {}, {}; {}, {}, {}]",
            self.a, self.b, self.c, self.d, self.e, self.f
        )
    }
}

/// Image of `bbox` under `t`, renormalized so min/max ordering holds.
pub fn apply_transform<T: Scalar>(
    t: &AffineTransform<T>,
    bbox: &BoundingBox<T>,
) -> Result<BoundingBox<T>, GeometryError> {
    t.apply_box(bbox)
}

pub fn invert<T: Scalar>(t: &AffineTransform<T>) -> Result<AffineTransform<T>, GeometryError> {
    t.invert()
}
