//! Axis-aligned boxes in normalized image coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box with corners in [0,1], strictly ordered on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let all_finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        let in_range = [x1, y1, x2, y2].iter().all(|v| (0.0..=1.0).contains(v));
        if !all_finite || !in_range || x1 >= x2 || y1 >= y2 {
            return Err(Error::Data(format!(
                "degenerate bounding box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection-over-union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Coordinate-wise min/max hull of both boxes.
pub fn union_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    BoundingBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn construction_rejects_degenerate_boxes() {
        assert!(BoundingBox::new(0.5, 0.1, 0.5, 0.2).is_err());
        assert!(BoundingBox::new(0.6, 0.1, 0.5, 0.2).is_err());
        assert!(BoundingBox::new(-0.1, 0.1, 0.5, 0.2).is_err());
        assert!(BoundingBox::new(0.1, 0.1, 1.5, 0.2).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.1, 0.5, 0.2).is_err());
    }

    #[test]
    fn iou_fixtures() {
        let a = bb(0.0, 0.0, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        let far = bb(0.5, 0.5, 0.7, 0.7);
        assert_eq!(iou(&a, &far), 0.0);
        // inter 0.1·0.2 = 0.02, union 0.04 + 0.04 − 0.02 = 0.06
        let b = bb(0.1, 0.0, 0.3, 0.2);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn union_box_fixtures() {
        let a = bb(0.0, 0.0, 0.1, 0.1);
        let b = bb(0.5, 0.5, 0.6, 0.6);
        assert_eq!(union_box(&a, &a), a);
        assert_eq!(union_box(&a, &b), bb(0.0, 0.0, 0.6, 0.6));
        let outer = bb(0.0, 0.0, 0.9, 0.9);
        let inner = bb(0.2, 0.2, 0.3, 0.3);
        assert_eq!(union_box(&outer, &inner), outer);
    }

    fn box_strategy() -> impl Strategy<Value = BoundingBox> {
        (0.0..0.8f64, 0.0..0.8f64, 0.01..0.2f64, 0.01..0.2f64)
            .prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in box_strategy(), b in box_strategy()) {
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, ba);
            let differs = (a.x1 - b.x1).abs().max((a.y1 - b.y1).abs())
                .max((a.x2 - b.x2).abs()).max((a.y2 - b.y2).abs()) > 1e-9;
            if differs {
                prop_assert!(ab < 1.0);
            } else {
                prop_assert!((ab - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn union_box_is_commutative_associative_idempotent(
            a in box_strategy(), b in box_strategy(), c in box_strategy()
        ) {
            prop_assert_eq!(union_box(&a, &a), a);
            prop_assert_eq!(union_box(&a, &b), union_box(&b, &a));
            prop_assert_eq!(
                union_box(&union_box(&a, &b), &c),
                union_box(&a, &union_box(&b, &c))
            );
            let u = union_box(&a, &b);
            prop_assert!(iou(&u, &a) > 0.0 && iou(&u, &b) > 0.0);
        }
    }
}
