//! Nested season calendars.
//!
//! A calendar is a strictly increasing list of periods `T_1 < T_2 < … < T_S`
//! where each period divides the next (and therefore all of them divide the
//! master period `T = T_S`). Time `t` is mapped to the season tuple
//! `(t mod T_1, …, t mod T_S)`.
//!
//! Because every component of the tuple is determined by `t mod T`, the tuple
//! is in bijection with the master phase. Everything downstream therefore
//! stores per-phase data indexed by `t mod T` and treats the tuple as a
//! derived view.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A nested calendar of periods, e.g. `[24, 168, 8760]` for hour-of-day,
/// hour-of-week and hour-of-year structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonCalendar {
    periods: Vec<u64>,
}

impl SeasonCalendar {
    /// Builds a calendar from strictly increasing periods where each period
    /// divides the next.
    pub fn new(periods: Vec<u64>) -> Result<Self> {
        if periods.is_empty() {
            return Err(Error::invalid("calendar needs at least one period"));
        }
        for (i, &p) in periods.iter().enumerate() {
            if p == 0 {
                return Err(Error::invalid("calendar periods must be positive"));
            }
            if i > 0 {
                let prev = periods[i - 1];
                if p <= prev {
                    return Err(Error::invalid(format!(
                        "calendar periods must be strictly increasing, got {prev} then {p}"
                    )));
                }
                if p % prev != 0 {
                    return Err(Error::invalid(format!(
                        "each calendar period must divide the next, {prev} does not divide {p}"
                    )));
                }
            }
        }
        Ok(SeasonCalendar { periods })
    }

    /// Calendar with a single period.
    pub fn single(period: u64) -> Result<Self> {
        SeasonCalendar::new(vec![period])
    }

    /// The nested periods, shortest first.
    pub fn periods(&self) -> &[u64] {
        &self.periods
    }

    /// The master period `T` (the longest one).
    pub fn master_period(&self) -> u64 {
        *self.periods.last().expect("calendar is never empty")
    }

    /// Number of nested components.
    pub fn components(&self) -> usize {
        self.periods.len()
    }

    /// The season tuple `(t mod T_1, …, t mod T_S)` for time `t`.
    pub fn season_index(&self, t: u64) -> Vec<u64> {
        self.periods.iter().map(|&p| t % p).collect()
    }

    /// The master phase `t mod T`, which determines the whole tuple.
    pub fn phase(&self, t: u64) -> usize {
        (t % self.master_period()) as usize
    }
}
