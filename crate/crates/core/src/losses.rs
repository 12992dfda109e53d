//! Pointwise losses over cosine scores and their derivatives.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Interaction class of a (query, product) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label3 {
    Purchased,
    /// Shown for the query but not purchased.
    Impressed,
    /// Sampled from the catalog; never logged.
    Random,
}

impl Label3 {
    /// Binary target: purchased is 1, everything else 0.
    pub fn binary(self) -> f64 {
        match self {
            Label3::Purchased => 1.0,
            Label3::Impressed | Label3::Random => 0.0,
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Label3::Purchased => 0,
            Label3::Impressed => 1,
            Label3::Random => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Label3::Purchased),
            1 => Ok(Label3::Impressed),
            2 => Ok(Label3::Random),
            _ => Err(Error::Format(format!("invalid label byte {b}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Mse,
    Mae,
    Bce,
    Hinge2,
    Hinge3,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Bce => "bce",
            LossKind::Hinge2 => "hinge2",
            LossKind::Hinge3 => "hinge3",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            "bce" => Ok(LossKind::Bce),
            "hinge2" => Ok(LossKind::Hinge2),
            "hinge3" => Ok(LossKind::Hinge3),
            _ => Err(Error::Config(format!("unknown loss kind {s:?}"))),
        }
    }
}

/// Loss selection and hinge thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Hinge exponent, 1 (L1) or 2 (L2).
    pub m: u8,
    pub eps_plus: f64,
    pub eps_minus: f64,
    pub eps_zero: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::hinge3(2)
    }
}

const BCE_CLAMP: f64 = 1e-7;

impl LossSpec {
    pub fn new(kind: LossKind, m: u8) -> Self {
        LossSpec {
            kind,
            m,
            eps_plus: 0.9,
            eps_minus: 0.2,
            eps_zero: 0.55,
        }
    }

    pub fn hinge3(m: u8) -> Self {
        Self::new(LossKind::Hinge3, m)
    }

    pub fn hinge2(m: u8) -> Self {
        Self::new(LossKind::Hinge2, m)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |e: f64| (-1.0..=1.0).contains(&e);
        match self.kind {
            LossKind::Hinge2 | LossKind::Hinge3 => {
                if self.m != 1 && self.m != 2 {
                    return Err(Error::Config(format!("hinge exponent must be 1 or 2, got {}", self.m)));
                }
                if !in_range(self.eps_minus) || !in_range(self.eps_plus) || self.eps_minus >= self.eps_plus {
                    return Err(Error::Config("need -1 <= eps_minus < eps_plus <= 1".into()));
                }
                if self.kind == LossKind::Hinge3
                    && !(self.eps_minus < self.eps_zero && self.eps_zero < self.eps_plus)
                {
                    return Err(Error::Config("need eps_minus < eps_zero < eps_plus".into()));
                }
            }
            LossKind::Mse | LossKind::Mae | LossKind::Bce => {}
        }
        Ok(())
    }

    /// Loss of score `score` for an example with the given label.
    pub fn loss(&self, score: f64, label: Label3) -> f64 {
        match self.kind {
            LossKind::Hinge3 => hinge3(score, label, self),
            LossKind::Hinge2 => hinge2(score, label.binary(), self),
            _ => pointwise(score, label.binary(), self),
        }
    }

    /// dL/dŷ. Returns the flat-side value at kinks.
    pub fn grad(&self, score: f64, label: Label3) -> f64 {
        let m = i32::from(self.m);
        let rising = |t: f64| {
            if score > t {
                f64::from(m) * (score - t).powi(m - 1)
            } else {
                0.0
            }
        };
        let falling = |t: f64| {
            if score < t {
                -f64::from(m) * (t - score).powi(m - 1)
            } else {
                0.0
            }
        };
        let y = label.binary();
        match self.kind {
            LossKind::Hinge3 => match label {
                Label3::Purchased => falling(self.eps_plus),
                Label3::Impressed => rising(self.eps_zero),
                Label3::Random => rising(self.eps_minus),
            },
            LossKind::Hinge2 => {
                if y == 1.0 {
                    falling(self.eps_plus)
                } else {
                    rising(self.eps_minus)
                }
            }
            LossKind::Mse => 2.0 * (score - y),
            LossKind::Mae => {
                if score > y {
                    1.0
                } else if score < y {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::Bce => {
                let raw = (score + 1.0) / 2.0;
                if raw <= BCE_CLAMP || raw >= 1.0 - BCE_CLAMP {
                    return 0.0;
                }
                0.5 * (-y / raw + (1.0 - y) / (1.0 - raw))
            }
        }
    }
}

fn below(score: f64, threshold: f64, m: u8) -> f64 {
    (-(score - threshold).min(0.0)).powi(i32::from(m))
}

fn above(score: f64, threshold: f64, m: u8) -> f64 {
    (score - threshold).max(0.0).powi(i32::from(m))
}

/// Two-part hinge: purchased pulled above `eps_plus`, everything else pushed
/// below `eps_minus`.
pub fn hinge2(score: f64, y: f64, spec: &LossSpec) -> f64 {
    y * below(score, spec.eps_plus, spec.m) + (1.0 - y) * above(score, spec.eps_minus, spec.m)
}

/// Three-part hinge: impressed products get their own, looser ceiling
/// `eps_zero`.
pub fn hinge3(score: f64, label: Label3, spec: &LossSpec) -> f64 {
    match label {
        Label3::Purchased => below(score, spec.eps_plus, spec.m),
        Label3::Impressed => above(score, spec.eps_zero, spec.m),
        Label3::Random => above(score, spec.eps_minus, spec.m),
    }
}

/// MSE, MAE or BCE against a binary target. BCE maps the cosine to a
/// probability with `p = (ŷ + 1) / 2`.
pub fn pointwise(score: f64, y: f64, spec: &LossSpec) -> f64 {
    match spec.kind {
        LossKind::Mse => (score - y).powi(2),
        LossKind::Mae => (score - y).abs(),
        LossKind::Bce => {
            let p = ((score + 1.0) / 2.0).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
        LossKind::Hinge2 => hinge2(score, y, spec),
        LossKind::Hinge3 => {
            let label = if y == 1.0 { Label3::Purchased } else { Label3::Random };
            hinge3(score, label, spec)
        }
    }
}
