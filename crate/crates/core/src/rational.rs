//! Exact decimal arithmetic helpers over `Ratio<i128>`.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive, Zero};
use thiserror::Error;

pub type Q = Ratio<i128>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("not a decimal number: {0:?}")]
pub struct ParseDecimalError(pub String);

pub fn int(n: i128) -> Q {
    Q::from_integer(n)
}

/// Parses `"30.43"`, `"-1.5"`, `"3.62%"` or `"7"` without going through floats.
pub fn parse_decimal(s: &str) -> Result<Q, ParseDecimalError> {
    let err = || ParseDecimalError(s.to_string());
    let t = s.trim();
    let (t, scale) = match t.strip_suffix('%') {
        Some(rest) => (rest.trim(), 100),
        None => (t, 1),
    };
    let (neg, t) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t),
    };
    let (whole, frac) = t.split_once('.').unwrap_or((t, ""));
    if (whole.is_empty() && frac.is_empty())
        || !whole.chars().all(|c| c.is_ascii_digit() || c == '_' || c == ',')
        || !frac.chars().all(|c| c.is_ascii_digit())
    {
        return Err(err());
    }
    let whole: String = whole.chars().filter(|c| c.is_ascii_digit()).collect();
    let digits = format!("{whole}{frac}");
    let numer = i128::from_str(if digits.is_empty() { "0" } else { &digits }).map_err(|_| err())?;
    let denom = 10i128.checked_pow(frac.len() as u32).ok_or_else(err)? * scale;
    let q = Q::new(numer, denom);
    Ok(if neg { -q } else { q })
}

/// Rounds half away from zero to `places` decimals.
pub fn round_half_up(q: &Q, places: u32) -> Q {
    let scale = 10i128.pow(places);
    let scaled = q * int(scale);
    let half = Q::new(1, 2);
    let rounded = if scaled.is_negative() {
        -(-scaled + half).floor()
    } else {
        (scaled + half).floor()
    };
    rounded / int(scale)
}

pub fn ceil_int(q: &Q) -> i128 {
    q.ceil().to_integer()
}

pub fn floor_int(q: &Q) -> i128 {
    q.floor().to_integer()
}

pub fn to_f64(q: &Q) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

/// A rational shown with a fixed number of decimals (half-up).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fixed(pub Q, pub u32);

impl fmt::Display for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Fixed(q, places) = *self;
        let r = round_half_up(&q, places);
        let scale = 10i128.pow(places);
        let scaled = (r * int(scale)).to_integer();
        let sign = if scaled < 0 { "-" } else { "" };
        let abs = scaled.abs();
        if places == 0 {
            write!(f, "{sign}{abs}")
        } else {
            write!(
                f,
                "{sign}{}.{:0width$}",
                abs / scale,
                abs % scale,
                width = places as usize
            )
        }
    }
}

pub fn fixed(q: &Q, places: u32) -> String {
    Fixed(*q, places).to_string()
}

/// Integer with thousands separators, e.g. `306,600`.
pub fn grouped(n: i128) -> String {
    let digits = n.abs().to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    if n < 0 {
        format!("-{out}")
    } else {
        out
    }
}

pub fn is_zero(q: &Q) -> bool {
    q.is_zero()
}
