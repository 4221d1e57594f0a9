use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-constant learning rate keyed by epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    segments: Vec<(usize, f64)>,
}

impl LrSchedule {
    /// `segments` are `(first_epoch, rate)` pairs; thresholds must strictly
    /// increase and rates strictly decrease.
    pub fn new(segments: Vec<(usize, f64)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Config("learning-rate schedule is empty".into()));
        }
        for &(_, r) in &segments {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::Config(format!("invalid learning rate {r}")));
            }
        }
        for w in segments.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(format!(
                    "schedule thresholds must increase: {} then {}",
                    w[0].0, w[1].0
                )));
            }
            if w[1].1 >= w[0].1 {
                return Err(Error::Config(format!(
                    "schedule rates must decrease: {} then {}",
                    w[0].1, w[1].1
                )));
            }
        }
        Ok(LrSchedule { segments })
    }

    pub fn constant(rate: f64) -> Result<Self> {
        Self::new(vec![(0, rate)])
    }

    /// 0.001 for five epochs, then 0.0005, 0.0001 and 0.00001 for ten epochs each;
    /// the last rate persists.
    pub fn stepwise_default() -> Self {
        LrSchedule {
            segments: vec![(0, 1e-3), (5, 5e-4), (15, 1e-4), (25, 1e-5)],
        }
    }

    pub fn segments(&self) -> &[(usize, f64)] {
        &self.segments
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.segments
            .iter()
            .rev()
            .find(|(start, _)| *start <= epoch)
            .unwrap_or(&self.segments[0])
            .1
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::stepwise_default()
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .segments
            .iter()
            .map(|(e, r)| format!("{e}:{r:e}"))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `epoch:rate` pairs separated by commas, e.g. `0:1e-3,5:5e-4`.
impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut segments = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (e, r) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad schedule segment '{part}'")))?;
            let e: usize = e
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad schedule epoch '{e}'")))?;
            let r: f64 = r
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad schedule rate '{r}'")))?;
            segments.push((e, r));
        }
        Self::new(segments)
    }
}
