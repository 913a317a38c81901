//! Binary instance masks.
//!
//! [`Mask`] stores a canvas-sized bitmap as column-major run lengths
//! (the COCO RLE convention: the first run counts background pixels).
//! [`Bitmap`] is the row-major working form used by set operations,
//! morphology and polygon rasterization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{ToPrimitive, Zero};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::rational::{int, ratio, Rational};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    counts: Vec<u32>,
}

impl Mask {
    /// Builds a mask from COCO run lengths; zero-length interior runs are
    /// merged away so equal bitmaps always compare equal.
    pub fn from_counts(width: u32, height: u32, counts: &[u32]) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        if total != u64::from(width) * u64::from(height) {
            return Err(Error::Integrity(format!(
                "run lengths cover {total} pixels, canvas {width}x{height} has {}",
                u64::from(width) * u64::from(height)
            )));
        }
        let mut runs: Vec<u32> = Vec::with_capacity(counts.len());
        let mut value = false;
        for (i, &c) in counts.iter().enumerate() {
            let run_value = i % 2 == 1;
            if c == 0 {
                continue;
            }
            if runs.is_empty() {
                if run_value {
                    runs.push(0);
                }
                runs.push(c);
                value = run_value;
            } else if run_value == value {
                *runs.last_mut().unwrap() += c;
            } else {
                runs.push(c);
                value = run_value;
            }
        }
        Ok(Self { width, height, counts: runs })
    }

    pub fn from_bitmap(bitmap: &Bitmap) -> Self {
        let (w, h) = (bitmap.width as usize, bitmap.height as usize);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..w {
            for y in 0..h {
                let bit = bitmap.bits[y * w + x];
                if bit != current {
                    counts.push(run);
                    run = 0;
                    current = bit;
                }
                run += 1;
            }
        }
        if run > 0 || counts.is_empty() {
            counts.push(run);
        }
        Self { width: bitmap.width, height: bitmap.height, counts }
    }

    pub fn to_bitmap(&self) -> Bitmap {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut bits = vec![false; w * h];
        let mut pos = 0usize;
        for (i, &c) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for idx in pos..pos + c as usize {
                    let (x, y) = (idx / h, idx % h);
                    bits[y * w + x] = true;
                }
            }
            pos += c as usize;
        }
        Bitmap { width: self.width, height: self.height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Foreground runs as `(start, len)` in column-major pixel order.
    fn foreground_runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += u64::from(c);
            (i % 2 == 1 && c > 0).then_some((start, u64::from(c)))
        })
    }

    pub fn area(&self) -> u64 {
        self.foreground_runs().map(|(_, len)| len).sum()
    }

    /// Mean pixel-centre position `(x, y)`, `None` for an empty mask.
    pub fn centroid(&self) -> Option<(Rational, Rational)> {
        let h = u64::from(self.height);
        let mut sum_x = BigInt::zero();
        let mut sum_y = BigInt::zero();
        let mut area = 0u64;
        for (start, len) in self.foreground_runs() {
            let mut idx = start;
            let end = start + len;
            while idx < end {
                let (col, row) = idx.div_rem(&h);
                let take = (h - row).min(end - idx);
                sum_x += BigInt::from(col) * BigInt::from(take);
                // rows row..row+take
                sum_y += BigInt::from(take) * BigInt::from(2 * row + take - 1) / BigInt::from(2u8);
                area += take;
                idx += take;
            }
        }
        if area == 0 {
            return None;
        }
        let area = BigInt::from(area);
        let half = ratio(1, 2);
        Some((
            Rational::new(sum_x, area.clone()) + &half,
            Rational::new(sum_y, area) + half,
        ))
    }

    /// Tight pixel bounding rectangle.
    pub fn bbox(&self) -> Option<BBox> {
        let h = u64::from(self.height);
        let mut bounds: Option<(u64, u64, u64, u64)> = None;
        for (start, len) in self.foreground_runs() {
            let end = start + len - 1;
            let (c0, r0) = start.div_rem(&h);
            let (c1, r1) = end.div_rem(&h);
            // a run spilling into the next column touches both the last and first row
            let (rmin, rmax) = if c0 == c1 { (r0, r1) } else { (0, h - 1) };
            bounds = Some(match bounds {
                None => (c0, rmin, c1, rmax),
                Some((x0, y0, x1, y1)) => (x0.min(c0), y0.min(rmin), x1.max(c1), y1.max(rmax)),
            });
        }
        bounds.map(|(x0, y0, x1, y1)| {
            BBox::new(int(x0 as i64), int(y0 as i64), int(x1 as i64 + 1), int(y1 as i64 + 1))
                .expect("non-empty pixel bounds")
        })
    }

    pub fn same_canvas(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Row-major boolean canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    /// Fills the integer rectangle `[x0, x1) × [y0, y1)`, clipped to the canvas.
    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64) {
        let (w, h) = (i64::from(self.width), i64::from(self.height));
        for y in y0.max(0)..y1.min(h) {
            for x in x0.max(0)..x1.min(w) {
                self.bits[(y * w + x) as usize] = true;
            }
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|b| **b).count() as u64
    }

    pub fn and(&self, other: &Bitmap) -> Bitmap {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Bitmap) -> Bitmap {
        self.zip(other, |a, b| a || b)
    }

    fn zip(&self, other: &Bitmap, f: impl Fn(bool, bool) -> bool) -> Bitmap {
        assert_eq!((self.width, self.height), (other.width, other.height), "canvas mismatch");
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| f(*a, *b)).collect();
        Bitmap { width: self.width, height: self.height, bits }
    }

    /// One dilation with the 3×3 cross; the result is clipped to the canvas.
    pub fn dilate_cross(&self) -> Bitmap {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut out = self.bits.clone();
        for y in 0..h {
            for x in 0..w {
                if !self.bits[y * w + x] {
                    continue;
                }
                if x > 0 {
                    out[y * w + x - 1] = true;
                }
                if x + 1 < w {
                    out[y * w + x + 1] = true;
                }
                if y > 0 {
                    out[(y - 1) * w + x] = true;
                }
                if y + 1 < h {
                    out[(y + 1) * w + x] = true;
                }
            }
        }
        Bitmap { width: self.width, height: self.height, bits: out }
    }

    /// One erosion with the 3×3 cross; pixels outside the canvas count as
    /// background.
    pub fn erode_cross(&self) -> Bitmap {
        let (w, h) = (self.width as usize, self.height as usize);
        let at = |x: usize, y: usize| self.bits[y * w + x];
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = at(x, y)
                    && x > 0
                    && at(x - 1, y)
                    && x + 1 < w
                    && at(x + 1, y)
                    && y > 0
                    && at(x, y - 1)
                    && y + 1 < h
                    && at(x, y + 1);
            }
        }
        Bitmap { width: self.width, height: self.height, bits: out }
    }

    /// Rasterizes polygons (flat `[x0, y0, x1, y1, ...]` vertex lists, as in
    /// COCO) onto a canvas. A pixel belongs to a polygon when its centre lies
    /// inside under the even-odd rule; the result is the union over polygons.
    pub fn from_polygons(width: u32, height: u32, polygons: &[Vec<Rational>]) -> Result<Bitmap> {
        let mut canvas = Bitmap::new(width, height);
        let half = ratio(1, 2);
        for poly in polygons {
            if poly.len() < 6 || poly.len() % 2 != 0 {
                return Err(Error::Integrity(format!(
                    "polygon needs at least 3 vertices as x/y pairs, got {} coordinates",
                    poly.len()
                )));
            }
            let pts: Vec<(&Rational, &Rational)> = poly.chunks(2).map(|c| (&c[0], &c[1])).collect();
            let y_lo = pts.iter().map(|p| p.1).min().unwrap();
            let y_hi = pts.iter().map(|p| p.1).max().unwrap();
            let row_start = (y_lo - &half).ceil().to_integer().to_i64().unwrap_or(0).max(0);
            let row_end = (y_hi - &half).floor().to_integer().to_i64().unwrap_or(-1).min(i64::from(height) - 1);
            let mut crossings: Vec<Rational> = Vec::new();
            for row in row_start..=row_end {
                let yc = int(row) + &half;
                crossings.clear();
                for i in 0..pts.len() {
                    let (x1, y1) = pts[i];
                    let (x2, y2) = pts[(i + 1) % pts.len()];
                    if (*y1 <= yc) != (*y2 <= yc) {
                        crossings.push(x1 + (&yc - y1) * (x2 - x1) / (y2 - y1));
                    }
                }
                crossings.sort();
                for pair in crossings.chunks_exact(2) {
                    // centres x + 1/2 in [a, b)
                    let first = (&pair[0] - &half).ceil().to_integer().to_i64().unwrap_or(i64::MIN);
                    let last = (&pair[1] - &half).ceil().to_integer().to_i64().unwrap_or(i64::MAX);
                    canvas.fill_rect(first, row, last, row + 1);
                }
            }
        }
        Ok(canvas)
    }
}
