//! Consecutive Wait (CW), Average Proportion (AP) and Average Lagging (AL)
//! over decoding traces.

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::policy::{g_to_actions, trace_to_g};

/// Realized read/write history of one decoded sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodingTrace {
    pub src_len: usize,
    /// `g(t)` for `t = 1..=tgt_len`.
    pub g_values: Vec<usize>,
}

impl DecodingTrace {
    pub fn new(src_len: usize, g_values: Vec<usize>) -> Result<Self> {
        if src_len == 0 {
            return Err(Error::InvalidTrace("empty source".into()));
        }
        if g_values.is_empty() {
            return Err(Error::InvalidTrace("no target emissions".into()));
        }
        let mut prev = 0;
        for (i, &g) in g_values.iter().enumerate() {
            if g < prev {
                return Err(Error::NonMonotone { step: i + 1 });
            }
            if g > src_len {
                return Err(Error::InvalidTrace(format!(
                    "g({}) = {g} exceeds source length {src_len}",
                    i + 1
                )));
            }
            prev = g;
        }
        Ok(Self { src_len, g_values })
    }

    pub fn from_actions(actions: &str) -> Result<Self> {
        let (src_len, g) = trace_to_g(actions)?;
        Self::new(src_len, g)
    }

    pub fn tgt_len(&self) -> usize {
        self.g_values.len()
    }

    pub fn actions(&self) -> String {
        g_to_actions(&self.g_values, self.src_len).expect("validated trace")
    }

    /// First step at which the whole source has been read, if any.
    pub fn cutoff(&self) -> Option<usize> {
        self.g_values
            .iter()
            .position(|&g| g == self.src_len)
            .map(|i| i + 1)
    }

    pub fn incomplete_read(&self) -> bool {
        self.cutoff().is_none()
    }

    fn without_last(&self) -> Option<Self> {
        (self.g_values.len() > 1).then(|| Self {
            src_len: self.src_len,
            g_values: self.g_values[..self.g_values.len() - 1].to_vec(),
        })
    }
}

fn positive_wait_steps(trace: &DecodingTrace) -> usize {
    let mut prev = 0;
    trace
        .g_values
        .iter()
        .filter(|&&g| {
            let wait = g > prev;
            prev = g;
            wait
        })
        .count()
}

/// CW as an exact ratio `src_len / #{t : g(t) > g(t-1)}`.
pub fn consecutive_wait_exact(trace: &DecodingTrace) -> Result<Ratio<i64>> {
    match positive_wait_steps(trace) {
        0 => Err(Error::DegenerateTrace),
        n => Ok(Ratio::new(trace.src_len as i64, n as i64)),
    }
}

pub fn consecutive_wait(trace: &DecodingTrace) -> Result<f64> {
    match positive_wait_steps(trace) {
        0 => Err(Error::DegenerateTrace),
        n => Ok(trace.src_len as f64 / n as f64),
    }
}

/// AP as an exact ratio `sum g(t) / (|x| |y|)`.
pub fn average_proportion_exact(trace: &DecodingTrace) -> Ratio<i64> {
    let sum: usize = trace.g_values.iter().sum();
    Ratio::new(sum as i64, (trace.src_len * trace.tgt_len()) as i64)
}

pub fn average_proportion(trace: &DecodingTrace) -> f64 {
    let sum: usize = trace.g_values.iter().sum();
    sum as f64 / (trace.src_len * trace.tgt_len()) as f64
}

/// AL = (1/tau) sum_{t=1}^{tau} [g(t) - (t-1)/r], where tau is the cutoff
/// step. A trace that never reads the whole source uses tau = tgt_len.
pub fn average_lagging(trace: &DecodingTrace, r: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidRatio(r));
    }
    let tau = trace.cutoff().unwrap_or(trace.tgt_len());
    let sum_g: usize = trace.g_values[..tau].iter().sum();
    // sum_{t=1}^{tau} (t-1) = tau (tau-1) / 2
    let mean_g = sum_g as f64 / tau as f64;
    Ok(mean_g - (tau - 1) as f64 / (2.0 * r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioMode {
    /// `r = |y| / |x|` for each sentence.
    PerSentence,
    /// One `r = sum |y| / sum |x|` for the whole corpus.
    Corpus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub cw: f64,
    pub ap: f64,
    pub al: f64,
    /// AL recomputed with the final emission (the `<eos>` step) dropped.
    pub al_excl_eos: Option<f64>,
    pub r: f64,
    pub incomplete_read: bool,
    pub tgt_len: usize,
    pub tgt_len_excl_eos: usize,
}

pub fn latency_report(trace: &DecodingTrace, r: f64) -> Result<LatencyReport> {
    let shorter = trace.without_last();
    let al_excl_eos = match &shorter {
        Some(t) => Some(average_lagging(
            t,
            r * t.tgt_len() as f64 / trace.tgt_len() as f64,
        )?),
        None => None,
    };
    Ok(LatencyReport {
        cw: consecutive_wait(trace)?,
        ap: average_proportion(trace),
        al: average_lagging(trace, r)?,
        al_excl_eos,
        r,
        incomplete_read: trace.incomplete_read(),
        tgt_len: trace.tgt_len(),
        tgt_len_excl_eos: trace.tgt_len() - 1,
    })
}

/// Neumaier-compensated sum.
pub(crate) fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub(crate) fn stable_mean(values: &[f64]) -> f64 {
    stable_sum(values.iter().copied()) / values.len() as f64
}

/// Mean of per-sentence metrics.
pub fn corpus_latency(traces: &[DecodingTrace], mode: RatioMode) -> Result<LatencyReport> {
    if traces.is_empty() {
        return Err(Error::Empty("trace set"));
    }
    let total_src: usize = traces.iter().map(|t| t.src_len).sum();
    let total_tgt: usize = traces.iter().map(|t| t.tgt_len()).sum();
    let corpus_r = total_tgt as f64 / total_src as f64;
    let reports = traces
        .iter()
        .map(|t| {
            let r = match mode {
                RatioMode::PerSentence => t.tgt_len() as f64 / t.src_len as f64,
                RatioMode::Corpus => corpus_r,
            };
            latency_report(t, r)
        })
        .collect::<Result<Vec<_>>>()?;

    let col = |f: fn(&LatencyReport) -> f64| -> f64 {
        stable_mean(&reports.iter().map(f).collect::<Vec<_>>())
    };
    let excl: Vec<f64> = reports.iter().filter_map(|r| r.al_excl_eos).collect();
    Ok(LatencyReport {
        cw: col(|r| r.cw),
        ap: col(|r| r.ap),
        al: col(|r| r.al),
        al_excl_eos: (!excl.is_empty()).then(|| stable_mean(&excl)),
        r: match mode {
            RatioMode::PerSentence => col(|r| r.r),
            RatioMode::Corpus => corpus_r,
        },
        incomplete_read: reports.iter().any(|r| r.incomplete_read),
        tgt_len: total_tgt,
        tgt_len_excl_eos: reports.iter().map(|r| r.tgt_len_excl_eos).sum(),
    })
}
