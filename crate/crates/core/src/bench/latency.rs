//! Generation latency protocol: `T_avg = T_overall / repeats`,
//! `N_avg = n_tokens / T_avg`, with prompt prefill counted in `T_overall`.

use std::fmt::Write as _;
use std::time::Instant;

use crate::bench::generation::{argmax, GenerationState};
use crate::error::{Error, Result};
use crate::mllm::EmmaModel;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_PROMPT: &str = "Describe this image in detail";
pub const PROBE_POSITIONS: [usize; 2] = [16, 256];
/// Per-token times are averaged over this many steps ending at a probe
/// position, then the median is taken across repeats.
pub const PROBE_WINDOW: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub t_overall: f64,
    pub repeats: usize,
    pub n_tokens: usize,
    pub t_avg: f64,
    pub n_avg: f64,
    /// `(position, seconds)` for each probe position within `n_tokens`.
    pub per_token: Vec<(usize, f64)>,
}

impl LatencyReport {
    pub fn from_timing(t_overall: f64, repeats: usize, n_tokens: usize) -> Result<Self> {
        if repeats == 0 || n_tokens == 0 {
            return Err(Error::InvalidArgument("repeats and n_tokens must be positive".into()));
        }
        if !(t_overall > 0.0 && t_overall.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "T_overall must be positive, got {t_overall}"
            )));
        }
        let t_avg = t_overall / repeats as f64;
        Ok(Self {
            t_overall,
            repeats,
            n_tokens,
            t_avg,
            n_avg: n_tokens as f64 / t_avg,
            per_token: Vec::new(),
        })
    }

    pub fn per_token_at(&self, position: usize) -> Option<f64> {
        self.per_token.iter().find(|(p, _)| *p == position).map(|&(_, t)| t)
    }

    pub fn summary_line(&self) -> String {
        format!("T_overall={} T_avg={} N_avg={}", self.t_overall, self.t_avg, self.n_avg)
    }

    pub const CSV_HEADER: &'static str = "t_overall,repeats,n_tokens,t_avg,n_avg,per_token_16,per_token_256";

    pub fn csv_row(&self) -> String {
        let probe = |p| self.per_token_at(p).map_or(String::new(), |t| t.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.t_overall,
            self.repeats,
            self.n_tokens,
            self.t_avg,
            self.n_avg,
            probe(16),
            probe(256)
        )
    }

    pub fn render(&self) -> String {
        let mut s = self.summary_line();
        s.push('\n');
        for (p, t) in &self.per_token {
            writeln!(s, "per_token[{p}]={t}").expect("string write");
        }
        writeln!(s, "{}\n{}", Self::CSV_HEADER, self.csv_row()).expect("string write");
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One forced-length greedy generation; returns per-token step times.
fn timed_generation<T: Scalar>(
    model: &EmmaModel<T>,
    features: &Tensor<T>,
    prompt: &[usize],
    n_tokens: usize,
) -> Result<Vec<f64>> {
    let mut state = GenerationState::new(model);
    let mut logits = state.prefill(model, features, prompt)?.pop().expect("non-empty prompt");
    let mut times = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let t0 = Instant::now();
        let next = argmax(&logits);
        logits = state.step_token(model, next)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(times)
}

/// Times `repeats` forced generations of `n_tokens` after one untimed
/// warm-up. Runs on the calling thread only.
pub fn latency_bench<T: Scalar>(
    model: &EmmaModel<T>,
    features: &Tensor<T>,
    prompt: &[usize],
    n_tokens: usize,
    repeats: usize,
) -> Result<LatencyReport> {
    if repeats == 0 || n_tokens == 0 || prompt.is_empty() {
        return Err(Error::InvalidArgument(
            "repeats, n_tokens and prompt must be non-empty".into(),
        ));
    }
    timed_generation(model, features, prompt, n_tokens)?;
    let mut per_run = Vec::with_capacity(repeats);
    let start = Instant::now();
    for _ in 0..repeats {
        per_run.push(timed_generation(model, features, prompt, n_tokens)?);
    }
    let t_overall = start.elapsed().as_secs_f64();
    let mut report = LatencyReport::from_timing(t_overall, repeats, n_tokens)?;
    for p in PROBE_POSITIONS.into_iter().filter(|&p| p <= n_tokens) {
        let lo = p.saturating_sub(PROBE_WINDOW);
        let per: Vec<f64> = per_run
            .iter()
            .map(|times| times[lo..p].iter().sum::<f64>() / (p - lo) as f64)
            .collect();
        report.per_token.push((p, median(per)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        let r = LatencyReport::from_timing(2.0, 1, 256).unwrap();
        assert_eq!((r.t_avg, r.n_avg), (2.0, 128.0));
        let r = LatencyReport::from_timing(342.0, 200, 256).unwrap();
        assert!((r.t_avg - 1.71).abs() < 1e-12);
        assert!((r.n_avg - 149.707).abs() < 1e-3);
        assert!(r.summary_line().starts_with("T_overall=342 T_avg=1.71 N_avg=149.7"));
        assert!(LatencyReport::from_timing(1.0, 0, 1).is_err());
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
