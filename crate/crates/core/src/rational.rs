//! Exact rational helpers.
//!
//! Coordinates, areas and fusion weights are carried as arbitrary-precision
//! rationals so that overlap ratios and weighted means can be compared
//! against integer oracles without tolerance.

use alloc::string::String;
use core::fmt::Write;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};

pub type Rational = BigRational;

pub fn int(v: i64) -> Rational {
    Rational::from_integer(BigInt::from(v))
}

pub fn ratio(numer: i64, denom: i64) -> Rational {
    Rational::new(BigInt::from(numer), BigInt::from(denom))
}

pub fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Exact binary value of a finite float.
pub fn from_f64(v: f64) -> Option<Rational> {
    Rational::from_f64(v)
}

/// Parses a JSON-style decimal literal (`-12.5`, `3`, `1e-3`, `2.5E+2`) exactly.
pub fn parse_decimal(text: &str) -> Option<Rational> {
    let text = text.trim();
    let (mantissa, exponent) = match text.find(['e', 'E']) {
        Some(pos) => (&text[..pos], text[pos + 1..].parse::<i32>().ok()?),
        None => (text, 0),
    };
    let (negative, digits) = match mantissa.as_bytes().first()? {
        b'-' => (true, &mantissa[1..]),
        b'+' => (false, &mantissa[1..]),
        _ => (false, mantissa),
    };
    let (int_part, frac_part) = match digits.find('.') {
        Some(pos) => (&digits[..pos], &digits[pos + 1..]),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mut all = String::with_capacity(int_part.len() + frac_part.len());
    all.push_str(int_part);
    all.push_str(frac_part);
    let numer: BigInt = if all.is_empty() { BigInt::zero() } else { all.parse().ok()? };
    let scale = exponent - frac_part.len() as i32;
    let ten = BigInt::from(10u8);
    let mut value = if scale >= 0 {
        Rational::from_integer(numer * num_traits::pow(ten, scale as usize))
    } else {
        Rational::new(numer, num_traits::pow(ten, (-scale) as usize))
    };
    if negative {
        value = -value;
    }
    Some(value)
}

/// Rounds half away from zero to `places` decimal digits.
pub fn round_to(r: &Rational, places: u32) -> Rational {
    let scale = num_traits::pow(BigInt::from(10u8), places as usize);
    let scaled = r * Rational::from_integer(scale.clone());
    Rational::new(round_half_away(&scaled), scale)
}

fn round_half_away(r: &Rational) -> BigInt {
    let two = BigInt::from(2u8);
    let (q, rem) = r.numer().abs().div_rem(r.denom());
    let q = if rem * &two >= *r.denom() { q + BigInt::one() } else { q };
    if r.is_negative() {
        -q
    } else {
        q
    }
}

/// Fixed-point text with exactly `places` digits after the decimal point.
pub fn to_fixed(r: &Rational, places: u32) -> String {
    let scale = num_traits::pow(BigInt::from(10u8), places as usize);
    let scaled = round_half_away(&(r * Rational::from_integer(scale.clone())));
    let negative = scaled.is_negative();
    let (whole, frac) = scaled.abs().div_rem(&scale);
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    let _ = write!(out, "{whole}");
    if places > 0 {
        let _ = write!(out, ".{:0>width$}", frac.to_str_radix(10), width = places as usize);
    }
    out
}

/// Smallest integer not below `r`.
pub fn ceil_int(r: &Rational) -> BigInt {
    r.ceil().to_integer()
}
