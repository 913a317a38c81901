use alloc::format;

use num_traits::Zero;

use crate::error::{Error, Result};
use crate::rational::Rational;

/// Axis-aligned box with exact corner coordinates, `x_min < x_max` and
/// `y_min < y_max`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BBox {
    x_min: Rational,
    y_min: Rational,
    x_max: Rational,
    y_max: Rational,
}

impl BBox {
    pub fn new(x_min: Rational, y_min: Rational, x_max: Rational, y_max: Rational) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Integrity(format!(
                "box [{x_min}, {y_min}, {x_max}, {y_max}] has no area"
            )));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// Integer-corner convenience constructor.
    pub fn from_ints(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Result<Self> {
        use crate::rational::int;
        Self::new(int(x_min), int(y_min), int(x_max), int(y_max))
    }

    /// COCO `[x, y, w, h]` layout.
    pub fn from_xywh(x: Rational, y: Rational, w: Rational, h: Rational) -> Result<Self> {
        let x_max = &x + w;
        let y_max = &y + h;
        Self::new(x, y, x_max, y_max)
    }

    pub fn x_min(&self) -> &Rational {
        &self.x_min
    }
    pub fn y_min(&self) -> &Rational {
        &self.y_min
    }
    pub fn x_max(&self) -> &Rational {
        &self.x_max
    }
    pub fn y_max(&self) -> &Rational {
        &self.y_max
    }

    pub fn width(&self) -> Rational {
        &self.x_max - &self.x_min
    }

    pub fn height(&self) -> Rational {
        &self.y_max - &self.y_min
    }

    pub fn area(&self) -> Rational {
        self.width() * self.height()
    }

    /// Edges as `[x_min, y_min, x_max, y_max]`.
    pub fn edges(&self) -> [&Rational; 4] {
        [&self.x_min, &self.y_min, &self.x_max, &self.y_max]
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x_min = (&self.x_min).max(&other.x_min).clone();
        let y_min = (&self.y_min).max(&other.y_min).clone();
        let x_max = (&self.x_max).min(&other.x_max).clone();
        let y_max = (&self.y_max).min(&other.y_max).clone();
        BBox::new(x_min, y_min, x_max, y_max).ok()
    }

    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox {
            x_min: (&self.x_min).min(&other.x_min).clone(),
            y_min: (&self.y_min).min(&other.y_min).clone(),
            x_max: (&self.x_max).max(&other.x_max).clone(),
            y_max: (&self.y_max).max(&other.y_max).clone(),
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Clips to `[0, width] × [0, height]`; `None` when nothing remains.
    pub fn clip(&self, width: u32, height: u32) -> Option<BBox> {
        use crate::rational::int;
        let canvas = BBox::new(Rational::zero(), Rational::zero(), int(width.into()), int(height.into())).ok()?;
        self.intersection(&canvas)
    }

    pub fn within_canvas(&self, width: u32, height: u32) -> bool {
        use crate::rational::int;
        self.x_min >= Rational::zero()
            && self.y_min >= Rational::zero()
            && self.x_max <= int(width.into())
            && self.y_max <= int(height.into())
    }
}
