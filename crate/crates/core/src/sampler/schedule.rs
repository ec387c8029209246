use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("cumulative alphas must start at 1 and decrease within (0, 1]")]
    Alphas,
    #[error("sample steps must be strictly increasing within 1..={0}")]
    Steps(usize),
    #[error("betas must satisfy 0 < start <= end < 1")]
    Betas,
}

/// Cumulative signal levels `ᾱ_t` for `t = 0..=T_train` (with `ᾱ_0 = 1`)
/// and the subsampled DDIM steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    alpha_bars: Vec<f64>,
    pub sample_steps: Vec<usize>,
}

/// On-disk form of a linear schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleJson {
    #[serde(rename = "T_train")]
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: Vec<usize>,
}

impl Default for NoiseSchedule {
    /// Linear β from 1e-4 to 0.02 over 1000 steps, sampled at 50 evenly spaced steps.
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02, 50).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64, t_sample: usize) -> Result<Self, ScheduleError> {
        if t_sample == 0 || t_sample > t_train {
            return Err(ScheduleError::Steps(t_train));
        }
        let stride = t_train / t_sample;
        let steps = (1..=t_sample).map(|i| i * stride).collect();
        Self::linear_with_steps(t_train, beta_start, beta_end, steps)
    }

    fn linear_with_steps(t_train: usize, beta_start: f64, beta_end: f64, sample_steps: Vec<usize>) -> Result<Self, ScheduleError> {
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::Betas);
        }
        let mut alpha_bars = Vec::with_capacity(t_train + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for s in 1..=t_train {
            let frac = if t_train > 1 { (s - 1) as f64 / (t_train - 1) as f64 } else { 0.0 };
            acc *= 1.0 - (beta_start + frac * (beta_end - beta_start));
            alpha_bars.push(acc);
        }
        let mut schedule = Self::from_alpha_bars(alpha_bars, sample_steps)?;
        schedule.beta_start = beta_start;
        schedule.beta_end = beta_end;
        Ok(schedule)
    }

    /// Schedule from explicit cumulative alphas (index 0 must be 1).
    pub fn from_alpha_bars(alpha_bars: Vec<f64>, sample_steps: Vec<usize>) -> Result<Self, ScheduleError> {
        let t_train = alpha_bars.len().saturating_sub(1);
        let alphas_ok = alpha_bars.first() == Some(&1.0)
            && alpha_bars.iter().all(|a| *a > 0.0 && *a <= 1.0)
            && alpha_bars.windows(2).all(|w| w[1] <= w[0]);
        if !alphas_ok {
            return Err(ScheduleError::Alphas);
        }
        let steps_ok = !sample_steps.is_empty()
            && sample_steps[0] >= 1
            && *sample_steps.last().expect("non-empty") <= t_train
            && sample_steps.windows(2).all(|w| w[1] > w[0]);
        if !steps_ok {
            return Err(ScheduleError::Steps(t_train));
        }
        Ok(Self {
            t_train,
            beta_start: 0.0,
            beta_end: 0.0,
            alpha_bars,
            sample_steps,
        })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `(a, b)` such that one DDIM step is `z_prev = a·z_t + b·eps_hat`.
    ///
    /// Panics if `t` is not one of the sampled steps.
    pub fn step_coefficients(&self, t: usize) -> (f64, f64) {
        let pos = self.sample_steps.iter().position(|&s| s == t).unwrap_or_else(|| panic!("{t} is not a sampled step"));
        let prev = if pos == 0 { 0 } else { self.sample_steps[pos - 1] };
        let (at, ap) = (self.alpha_bars[t], self.alpha_bars[prev]);
        let a = (ap / at).sqrt();
        let b = (1.0 - ap).sqrt() - (ap * (1.0 - at) / at).sqrt();
        (a, b)
    }

    pub fn to_json(&self) -> ScheduleJson {
        ScheduleJson {
            t_train: self.t_train,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            sample_steps: self.sample_steps.clone(),
        }
    }

    pub fn from_json(json: &ScheduleJson) -> Result<Self, ScheduleError> {
        Self::linear_with_steps(json.t_train, json.beta_start, json.beta_end, json.sample_steps.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.sample_steps.len(), 50);
        assert_eq!(s.sample_steps[0], 20);
        assert_eq!(*s.sample_steps.last().unwrap(), 1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((0..1000).all(|t| s.alpha_bar(t + 1) < s.alpha_bar(t)));
    }

    #[test]
    fn json_round_trip() {
        let s = NoiseSchedule::default();
        let text = serde_json::to_string(&s.to_json()).unwrap();
        assert!(text.contains("\"T_train\":1000"));
        let back = NoiseSchedule::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert_eq!(NoiseSchedule::linear(10, 1e-4, 0.02, 11), Err(ScheduleError::Steps(10)));
        assert_eq!(NoiseSchedule::linear(10, 0.5, 0.2, 5), Err(ScheduleError::Betas));
        assert_eq!(NoiseSchedule::from_alpha_bars(vec![1.0, 0.5, 0.7], vec![1, 2]), Err(ScheduleError::Alphas));
        assert_eq!(NoiseSchedule::from_alpha_bars(vec![1.0, 0.5], vec![2]), Err(ScheduleError::Steps(1)));
    }
}
