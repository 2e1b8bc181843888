use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::types::{Real, TargetVector};

/// How per-position losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Reduction {
    /// Average over non-ignored positions.
    #[default]
    Mean,
    Sum,
    /// Keep the per-position vector.
    None,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
            Reduction::None => "none",
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            "none" => Ok(Reduction::None),
            other => Err(Error::InvalidConfig(format!("unknown reduction '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossValue<T> {
    Reduced(T),
    PerPosition(Vec<T>),
}

impl<T: Real> LossValue<T> {
    pub fn reduced(&self) -> Option<T> {
        match self {
            LossValue::Reduced(v) => Some(*v),
            LossValue::PerPosition(_) => None,
        }
    }

    pub fn per_position(&self) -> Option<&[T]> {
        match self {
            LossValue::Reduced(_) => None,
            LossValue::PerPosition(v) => Some(v),
        }
    }

    /// Single number for reporting: the reduced value, or the sum of the vector.
    pub fn total(&self) -> T {
        match self {
            LossValue::Reduced(v) => *v,
            LossValue::PerPosition(v) => v.iter().fold(T::zero(), |acc, &x| acc + x),
        }
    }
}

/// Reduce per-position losses in ascending position order. Ignored positions
/// must already hold zero.
pub(crate) fn reduce_losses<T: Real>(
    losses: Vec<T>,
    targets: &TargetVector,
    reduction: Reduction,
) -> LossValue<T> {
    match reduction {
        Reduction::None => LossValue::PerPosition(losses),
        Reduction::Sum => LossValue::Reduced(losses.iter().fold(T::zero(), |acc, &x| acc + x)),
        Reduction::Mean => {
            let valid = targets.valid_count();
            if valid == 0 {
                return LossValue::Reduced(T::zero());
            }
            let sum = losses.iter().fold(T::zero(), |acc, &x| acc + x);
            LossValue::Reduced(sum / T::cast(valid as f64))
        }
    }
}
