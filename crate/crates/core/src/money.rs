//! Fixed-point currency with six fractional digits.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const SCALE: i64 = 1_000_000;

/// An amount of money in millionths of a currency unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(i64);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid amount {0:?}: expected a decimal with at most 6 fractional digits")]
pub struct MoneyParseError(pub String);

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn from_micros(micros: i64) -> Self {
        Money(micros)
    }

    pub const fn micros(self) -> i64 {
        self.0
    }

    /// Cost of `tokens` at `price_per_1k`, rounded half-up to the micro.
    pub fn for_tokens(tokens: u64, price_per_1k: Money) -> Money {
        Money::cost(&[(tokens, price_per_1k)])
    }

    /// Sum of several token charges, rounded once at the end.
    pub fn cost(charges: &[(u64, Money)]) -> Money {
        let scaled: i128 = charges
            .iter()
            .map(|&(tokens, price)| i128::from(tokens) * i128::from(price.0))
            .sum();
        let rounded = if scaled >= 0 {
            (scaled + 500) / 1000
        } else {
            (scaled - 500) / 1000
        };
        Money(i64::try_from(rounded).expect("cost fits in i64 micros"))
    }

    pub fn checked_add(self, other: Money) -> Option<Money> {
        self.0.checked_add(other.0).map(Money)
    }

    /// Rendered with `digits` fractional digits (half-up), e.g. `34.58`.
    pub fn format_fixed(self, digits: u32) -> String {
        assert!(digits <= 6, "at most 6 fractional digits");
        let step = 10i64.pow(6 - digits);
        let abs = self.0.unsigned_abs() as i128;
        let rounded = (abs + i128::from(step / 2)) / i128::from(step);
        let sign = if self.0 < 0 && rounded != 0 { "-" } else { "" };
        let unit = 10i128.pow(digits);
        if digits == 0 {
            format!("{sign}{rounded}")
        } else {
            format!(
                "{sign}{}.{:0width$}",
                rounded / unit,
                rounded % unit,
                width = digits as usize
            )
        }
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.format_fixed(6))
    }
}

impl FromStr for Money {
    type Err = MoneyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || MoneyParseError(s.to_string());
        let t = s.trim();
        let (negative, t) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t),
        };
        let (whole, frac) = t.split_once('.').unwrap_or((t, ""));
        if whole.is_empty() && frac.is_empty() {
            return Err(err());
        }
        if !whole.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        if frac.len() > 6 {
            return Err(err());
        }
        let whole: i64 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| err())? };
        let frac_micros: i64 = format!("{frac:0<6}").parse().map_err(|_| err())?;
        let micros = whole
            .checked_mul(SCALE)
            .and_then(|w| w.checked_add(frac_micros))
            .ok_or_else(err)?;
        Ok(Money(if negative { -micros } else { micros }))
    }
}

impl Add for Money {
    type Output = Money;

    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a Money> for Money {
    fn sum<I: Iterator<Item = &'a Money>>(iter: I) -> Money {
        iter.copied().sum()
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}
