//! Rational resolution ratios such as `10/3` (RGB extent over IR extent).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScaleFactor {
    pub num: u32,
    pub den: u32,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl ScaleFactor {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidArgument(format!("scale factor {num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_identity(self) -> bool {
        self.num == self.den
    }

    /// Extent after dividing by the factor, rounded to nearest (ties up).
    pub fn shrink(self, len: usize) -> usize {
        let n = len as u64 * self.den as u64;
        ((2 * n + self.num as u64) / (2 * self.num as u64)) as usize
    }

    /// Whether `len / factor` is an integer.
    pub fn divides(self, len: usize) -> bool {
        (len as u64 * self.den as u64).is_multiple_of(self.num as u64)
    }

    /// Smallest extent `>= 1` that the factor maps to an integer.
    pub fn exact_step(self) -> usize {
        self.num as usize
    }
}

impl fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for ScaleFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("scale factor {s:?}: expected N or N/D"));
        let (n, d) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        let n: u32 = n.parse().map_err(|_| bad())?;
        let d: u32 = d.parse().map_err(|_| bad())?;
        Self::new(n, d)
    }
}

impl Serialize for ScaleFactor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScaleFactor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_shrink() {
        let f: ScaleFactor = "10/3".parse().unwrap();
        assert_eq!((f.shrink(384), f.shrink(288)), (115, 86));
        assert_eq!(f.shrink(96), 29);
        assert_eq!(f.shrink(120), 36);
        assert!(f.divides(30) && !f.divides(29));
        let two: ScaleFactor = "2".parse().unwrap();
        assert_eq!(two.shrink(64), 32);
        assert_eq!("4/2".parse::<ScaleFactor>().unwrap(), two);
        assert!("0/3".parse::<ScaleFactor>().is_err());
        assert!("x".parse::<ScaleFactor>().is_err());
        assert_eq!(serde_json::to_string(&f).unwrap(), "\"10/3\"");
        assert_eq!(serde_json::from_str::<ScaleFactor>("\"10/3\"").unwrap(), f);
    }
}
