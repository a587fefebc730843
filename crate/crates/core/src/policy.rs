//! Read/write schedules for prefix-to-prefix decoding.
//!
//! A schedule maps a target step `t >= 1` to `g(t)`, the number of source
//! tokens read before emitting target token `t`. All schedules here are
//! monotone non-decreasing in `t` and clamped to `[0, src_len]`. `g(0)` is
//! taken to be 0.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;

use crate::error::{Error, Result};

/// Catchup frequency, in catchups per target step.
pub type Catchup = Ratio<i64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    WaitK,
    WaitKCatchup,
    FullSentence,
    /// Oracle that never reads any source; used to show the source is ignored.
    ZeroSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PolicySchedule {
    pub kind: PolicyKind,
    pub k: u32,
    pub c: Catchup,
}

/// `g(t) = min(k + t - 1, src_len)`.
pub fn wait_k_g(k: u32, t: usize, src_len: usize) -> usize {
    debug_assert!(t >= 1);
    (k as usize + t - 1).min(src_len)
}

fn catchup_raw(k: u32, c: Catchup, t: usize, src_len: usize) -> usize {
    let t = t as i64;
    let caught = (c * t).floor().to_integer();
    let raw = k as i64 + t - 1 - caught;
    raw.clamp(0, src_len as i64) as usize
}

/// `g(t) = min(k + t - 1 - floor(c t), src_len)`, floored at 0 and clamped
/// to the running maximum over `1..=t` so the schedule stays monotone for
/// large `c`.
pub fn wait_k_catchup_g(k: u32, c: Catchup, t: usize, src_len: usize) -> usize {
    debug_assert!(t >= 1);
    if c <= Ratio::from_integer(1) {
        // floor(c t) grows by at most one per step, so the raw value is
        // already non-decreasing.
        return catchup_raw(k, c, t, src_len);
    }
    (1..=t)
        .map(|s| catchup_raw(k, c, s, src_len))
        .max()
        .unwrap_or(0)
}

impl PolicySchedule {
    pub fn wait_k(k: u32) -> Self {
        Self {
            kind: PolicyKind::WaitK,
            k,
            c: Ratio::from_integer(0),
        }
    }

    pub fn wait_k_catchup(k: u32, c: Catchup) -> Self {
        Self {
            kind: PolicyKind::WaitKCatchup,
            k,
            c,
        }
    }

    pub fn full_sentence() -> Self {
        Self {
            kind: PolicyKind::FullSentence,
            k: 0,
            c: Ratio::from_integer(0),
        }
    }

    pub fn zero_source() -> Self {
        Self {
            kind: PolicyKind::ZeroSource,
            k: 0,
            c: Ratio::from_integer(0),
        }
    }

    pub fn is_full_sentence(&self) -> bool {
        self.kind == PolicyKind::FullSentence
    }

    pub fn is_zero_source(&self) -> bool {
        self.kind == PolicyKind::ZeroSource
    }

    /// Number of source tokens available when emitting target step `t` (1-based).
    pub fn g(&self, t: usize, src_len: usize) -> usize {
        match self.kind {
            PolicyKind::WaitK => wait_k_g(self.k, t, src_len),
            PolicyKind::WaitKCatchup => wait_k_catchup_g(self.k, self.c, t, src_len),
            PolicyKind::FullSentence => src_len,
            PolicyKind::ZeroSource => 0,
        }
    }

    /// `g(1..=tgt_len)`.
    pub fn g_values(&self, src_len: usize, tgt_len: usize) -> Vec<usize> {
        if self.kind == PolicyKind::WaitKCatchup && self.c > Ratio::from_integer(1) {
            let mut best = 0;
            return (1..=tgt_len)
                .map(|t| {
                    best = best.max(catchup_raw(self.k, self.c, t, src_len));
                    best
                })
                .collect();
        }
        (1..=tgt_len).map(|t| self.g(t, src_len)).collect()
    }
}

impl fmt::Display for PolicySchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::WaitK => write!(f, "{}", self.k),
            PolicyKind::WaitKCatchup => write!(f, "{}+c{}", self.k, self.c),
            PolicyKind::FullSentence => f.write_str("inf"),
            PolicyKind::ZeroSource => f.write_str("zero"),
        }
    }
}

impl FromStr for PolicySchedule {
    type Err = Error;

    /// Parses the labels produced by `Display`: `3`, `3+c1/4`, `3+c0.25`,
    /// `inf`, `zero`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "inf" | "full" => return Ok(Self::full_sentence()),
            "zero" => return Ok(Self::zero_source()),
            _ => {}
        }
        let bad = || Error::Config(format!("bad policy label `{s}`"));
        match s.split_once("+c") {
            Some((k, c)) => Ok(Self::wait_k_catchup(
                k.parse().map_err(|_| bad())?,
                parse_ratio(c)?,
            )),
            None => Ok(Self::wait_k(s.parse().map_err(|_| bad())?)),
        }
    }
}

/// Parses `0.25`, `-0.2`, `1/4` or `3` into an exact rational.
pub fn parse_ratio(s: &str) -> Result<Catchup> {
    let bad = || Error::Config(format!("bad rational `{s}`"));
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: i64 = n.trim().parse().map_err(|_| bad())?;
        let d: i64 = d.trim().parse().map_err(|_| bad())?;
        if d == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(n, d));
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if (int.is_empty() && frac.is_empty())
        || !int.chars().all(|c| c.is_ascii_digit())
        || !frac.chars().all(|c| c.is_ascii_digit())
        || frac.len() > 15
    {
        return Err(bad());
    }
    let denom = 10i64.pow(frac.len() as u32);
    let int: i64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
    let frac_v: i64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    let num = int
        .checked_mul(denom)
        .and_then(|v| v.checked_add(frac_v))
        .ok_or_else(bad)?;
    Ok(Ratio::new(if neg { -num } else { num }, denom))
}

/// Smallest `t` with `g(t) = src_len`.
pub fn cutoff_step(schedule: &PolicySchedule, src_len: usize) -> Result<usize> {
    match schedule.kind {
        PolicyKind::ZeroSource => Err(Error::NoCutoff),
        PolicyKind::FullSentence => Ok(1),
        PolicyKind::WaitK => Ok((src_len + 1).saturating_sub(schedule.k as usize).max(1)),
        PolicyKind::WaitKCatchup => {
            let one = Ratio::from_integer(1);
            let bound = if schedule.c < one {
                // k + t - 1 - c t >= src_len is sufficient.
                let need = Ratio::from_integer(src_len as i64 + 1) / (one - schedule.c);
                need.ceil().to_integer() as usize + 1
            } else {
                // With c >= 1 the raw value peaks within one period of floor(c t).
                2 * (*schedule.c.denom() as usize) + 2
            };
            let mut best = 0;
            for t in 1..=bound {
                best = best.max(catchup_raw(schedule.k, schedule.c, t, src_len));
                if best == src_len {
                    return Ok(t);
                }
            }
            Err(Error::NoCutoff)
        }
    }
}

/// Serializes `g(1..=tgt_len)` as interleaved reads (`R`) and writes (`W`).
/// Unread source at the end is appended as trailing reads.
pub fn g_to_actions(g_values: &[usize], src_len: usize) -> Result<String> {
    let mut out = String::with_capacity(src_len + g_values.len());
    let mut read = 0usize;
    for (i, &g) in g_values.iter().enumerate() {
        if g < read {
            return Err(Error::NonMonotone { step: i + 1 });
        }
        if g > src_len {
            return Err(Error::InvalidTrace(format!(
                "g({}) = {g} exceeds source length {src_len}",
                i + 1
            )));
        }
        out.extend(std::iter::repeat('R').take(g - read));
        out.push('W');
        read = g;
    }
    out.extend(std::iter::repeat('R').take(src_len - read));
    Ok(out)
}

pub fn schedule_to_actions(
    schedule: &PolicySchedule,
    src_len: usize,
    tgt_len: usize,
) -> Result<String> {
    g_to_actions(&schedule.g_values(src_len, tgt_len), src_len)
}

/// Inverse of [`g_to_actions`]: returns `(src_len, g(1..=tgt_len))`.
pub fn trace_to_g(actions: &str) -> Result<(usize, Vec<usize>)> {
    let mut read = 0usize;
    let mut g = Vec::new();
    for (i, ch) in actions.chars().enumerate() {
        match ch {
            'R' => read += 1,
            'W' => g.push(read),
            other => {
                return Err(Error::InvalidTrace(format!(
                    "unexpected action `{other}` at offset {i}"
                )))
            }
        }
    }
    Ok((read, g))
}
