//! Normalized axis-aligned boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in normalized image coordinates, `0 <= x1 < x2 <= 1` and likewise
/// for `y`. The y axis points down: smaller `y` is higher in the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Numeric(format!("invalid bbox {b:?}")))
        }
    }

    pub fn full() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        let c = [self.x1, self.y1, self.x2, self.y2];
        c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }

    /// Generalized IoU, in `(-1, 1]`.
    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let hull = (self.x2.max(other.x2) - self.x1.min(other.x1))
            * (self.y2.max(other.y2) - self.y1.min(other.y1));
        inter / union - (hull - union) / hull
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validity() {
        assert!(BBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
        assert!(BBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(BBox::new(-0.1, 0.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn disjoint_giou() {
        let a = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let b = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(a.iou(&b), 0.0);
        assert!((a.giou(&b) + 0.5).abs() < 1e-15);
        assert_eq!(a.giou(&a), 1.0);
    }
}
