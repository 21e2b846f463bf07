//! Step-to-task scheduling across the AT, SAT and NAT phases.
//!
//! With a task window of one, the SAT phase walks the ladder's intermediate
//! tasks at the pace set by a pacing function. With a wider window, training
//! runs through overlapping stages of `w` consecutive ladder tasks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pacing {
    Linear,
    Logarithmic,
    Exponential,
}

impl fmt::Display for Pacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pacing::Linear => "linear",
            Pacing::Logarithmic => "logarithmic",
            Pacing::Exponential => "exponential",
        })
    }
}

impl FromStr for Pacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Pacing::Linear),
            "logarithmic" | "log" => Ok(Pacing::Logarithmic),
            "exponential" | "exp" => Ok(Pacing::Exponential),
            other => Err(Error::InvalidArgument(format!("unknown pacing function {other:?}"))),
        }
    }
}

/// Stage index in `0..levels` reached at step `i` of a span of `span` steps.
///
/// With `levels = 4` this is the exponent offset of the pacing formulas:
/// linear `floor(4i/S)`, logarithmic `floor(log_1.5(4i/S + 1))`, exponential
/// `floor(1.5^(4i/S)) - 1`, each capped at `levels - 1`.
pub fn pacing_level(pacing: Pacing, i: u64, span: u64, levels: usize) -> Result<usize> {
    if span == 0 || i >= span {
        return Err(Error::InvalidArgument(format!("pacing step {i} outside span of {span}")));
    }
    if levels == 0 {
        return Err(Error::InvalidArgument("pacing needs at least one level".into()));
    }
    let top = levels - 1;
    let (s, l, i) = (span as u128, levels as u128, i as u128);
    let level = match pacing {
        Pacing::Linear => ((l * i) / s) as usize,
        Pacing::Logarithmic => {
            // Largest n with 1.5^n <= (S + L i) / S, i.e. 3^n S <= 2^n (S + L i).
            let mut n = 0;
            while n < top && 3u128.pow(n as u32 + 1) * s <= 2u128.pow(n as u32 + 1) * (s + l * i) {
                n += 1;
            }
            n
        }
        Pacing::Exponential => {
            // floor(1.5^(L i / S)) >= m  <=>  L i ln 1.5 >= S ln m.
            let lhs = (l * i) as f64 * 1.5f64.ln();
            let mut m = 1;
            while m <= top && lhs >= s as f64 * ((m + 1) as f64).ln() {
                m += 1;
            }
            m - 1
        }
    };
    Ok(level.min(top))
}

/// Scheduled `k` in `{2, 4, 8, 16}` at SAT-local step `i` of `s_sat`.
pub fn pacing_k(pacing: Pacing, i: u64, s_sat: u64) -> Result<usize> {
    Ok(2usize << pacing_level(pacing, i, s_sat, 4)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhaseTag {
    #[serde(rename = "AT")]
    At,
    #[serde(rename = "SAT")]
    Sat,
    #[serde(rename = "NAT")]
    Nat,
}

impl fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseTag::At => "AT",
            PhaseTag::Sat => "SAT",
            PhaseTag::Nat => "NAT",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub tag: PhaseTag,
    pub local_step: u64,
}

pub fn default_ladder() -> Vec<TaskK> {
    vec![
        TaskK::Fixed(1),
        TaskK::Fixed(2),
        TaskK::Fixed(4),
        TaskK::Fixed(8),
        TaskK::Fixed(16),
        TaskK::Full,
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub steps_at: u64,
    pub steps_sat: u64,
    pub steps_nat: u64,
    pub pacing: Pacing,
    pub window: usize,
    pub ladder: Vec<TaskK>,
}

impl CurriculumSchedule {
    pub fn new(steps_at: u64, steps_sat: u64, steps_nat: u64, pacing: Pacing, window: usize) -> Result<Self> {
        let s = CurriculumSchedule {
            steps_at,
            steps_sat,
            steps_nat,
            pacing,
            window,
            ladder: default_ladder(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Same total budget with the SAT phase folded into NAT training.
    pub fn direct_transfer(&self) -> Self {
        CurriculumSchedule {
            steps_sat: 0,
            steps_nat: self.steps_nat + self.steps_sat,
            window: 1,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.ladder;
        if l.len() < 2 || l.first() != Some(&TaskK::Fixed(1)) || l.last() != Some(&TaskK::Full) {
            return Err(Error::Config("ladder must start at 1 and end at N".into()));
        }
        if l.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config("ladder must be strictly increasing".into()));
        }
        if self.window == 0 || self.window > l.len() {
            return Err(Error::Config(format!("window {} outside 1..={}", self.window, l.len())));
        }
        if self.steps_sat > 0 && l.len() < 3 {
            return Err(Error::Config("a SAT phase needs an intermediate ladder task".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_at + self.steps_sat + self.steps_nat
    }

    fn sat_tasks(&self) -> &[TaskK] {
        &self.ladder[1..self.ladder.len() - 1]
    }

    pub fn phase_of(&self, step: u64) -> Phase {
        if step < self.steps_at {
            Phase { tag: PhaseTag::At, local_step: step }
        } else if step < self.steps_at + self.steps_sat {
            Phase { tag: PhaseTag::Sat, local_step: step - self.steps_at }
        } else {
            Phase {
                tag: PhaseTag::Nat,
                local_step: step - self.steps_at - self.steps_sat,
            }
        }
    }

    /// Steps covered by windowed stages when `window > 1`: AT, SAT, and one
    /// mean SAT-stage length of the NAT phase for the final `(.., N)` stage.
    pub fn window_span(&self) -> u64 {
        let n_sat = self.sat_tasks().len().max(1) as u64;
        let tail = (self.steps_sat / n_sat).min(self.steps_nat);
        self.steps_at + self.steps_sat + tail
    }

    /// Tasks trained at `step`.
    pub fn stage_tasks(&self, step: u64) -> Vec<TaskK> {
        let w = self.window;
        if w == 1 {
            let phase = self.phase_of(step);
            return vec![match phase.tag {
                PhaseTag::At => TaskK::Fixed(1),
                PhaseTag::Nat => TaskK::Full,
                PhaseTag::Sat => {
                    let sat = self.sat_tasks();
                    let level = pacing_level(self.pacing, phase.local_step, self.steps_sat, sat.len())
                        .expect("local step inside SAT phase");
                    sat[level]
                }
            }];
        }
        let span = self.window_span();
        if step >= span {
            return vec![TaskK::Full];
        }
        let stages = self.ladder.len() - w + 1;
        let s = pacing_level(self.pacing, step, span, stages).expect("step inside window span");
        self.ladder[s..s + w].to_vec()
    }

    /// Uniform draw among the tasks of the current stage.
    pub fn sample_task<R: Rng + ?Sized>(&self, step: u64, rng: &mut R) -> TaskK {
        let tasks = self.stage_tasks(step);
        if tasks.len() == 1 {
            tasks[0]
        } else {
            tasks[rng.random_range(0..tasks.len())]
        }
    }

    /// Every step at which the stage changes, with the stage that starts there.
    pub fn stage_starts(&self) -> Vec<(u64, Vec<TaskK>)> {
        let total = self.total_steps().max(self.window_span());
        let mut out: Vec<(u64, Vec<TaskK>)> = Vec::new();
        for step in 0..total {
            let tasks = self.stage_tasks(step);
            if out.last().map(|(_, t)| t != &tasks).unwrap_or(true) {
                out.push((step, tasks));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Floating-point evaluation of the pacing formulas as written.
    fn reference_k(pacing: Pacing, i: u64, s: u64) -> usize {
        let x = 4.0 * i as f64 / s as f64;
        let e = match pacing {
            Pacing::Linear => x.floor() + 1.0,
            Pacing::Logarithmic => ((x + 1.0).ln() / 1.5f64.ln()).floor() + 1.0,
            Pacing::Exponential => 1.5f64.powf(x).floor(),
        };
        (2f64.powf(e) as usize).min(16)
    }

    fn k(ks: &[usize]) -> Vec<TaskK> {
        ks.iter().map(|&k| TaskK::Fixed(k)).collect()
    }

    #[test]
    fn pacing_examples() {
        let lin: Vec<usize> = [0, 249, 250, 500, 750].iter().map(|&i| pacing_k(Pacing::Linear, i, 1000).unwrap()).collect();
        assert_eq!(lin, [2, 2, 4, 8, 16]);
        let log: Vec<usize> =
            [0, 124, 125, 313, 594].iter().map(|&i| pacing_k(Pacing::Logarithmic, i, 1000).unwrap()).collect();
        assert_eq!(log, [2, 2, 4, 8, 16]);
        let exp: Vec<usize> =
            [427, 428, 678, 855].iter().map(|&i| pacing_k(Pacing::Exponential, i, 1000).unwrap()).collect();
        assert_eq!(exp, [2, 4, 8, 16]);
    }

    #[test]
    fn pacing_agrees_with_formula_and_is_monotone() {
        for pacing in [Pacing::Linear, Pacing::Logarithmic, Pacing::Exponential] {
            for s in [1000, 997, 64] {
                let mut prev = 2;
                for i in 0..s {
                    let got = pacing_k(pacing, i, s).unwrap();
                    assert_eq!(got, reference_k(pacing, i, s), "{pacing} i={i} S={s}");
                    assert!(got >= prev);
                    prev = got;
                }
                assert_eq!(pacing_k(pacing, 0, s).unwrap(), 2);
            }
        }
    }

    #[test]
    fn pacing_rejects_step_past_phase() {
        assert!(pacing_k(Pacing::Linear, 1000, 1000).is_err());
    }

    #[test]
    fn dwell_at_sixteen() {
        let dwell = |p| (0..1000).filter(|&i| pacing_k(p, i, 1000).unwrap() == 16).count();
        assert_eq!(dwell(Pacing::Linear), 250);
        assert_eq!(dwell(Pacing::Logarithmic), 406);
        assert_eq!(dwell(Pacing::Exponential), 145);
    }

    #[test]
    fn phases_follow_budgets() {
        let s = CurriculumSchedule::new(80_000, 160_000, 80_000, Pacing::Linear, 1).unwrap();
        assert_eq!(s.phase_of(50_000).tag, PhaseTag::At);
        assert_eq!(s.phase_of(100_000), Phase { tag: PhaseTag::Sat, local_step: 20_000 });
        assert_eq!(s.phase_of(300_000).tag, PhaseTag::Nat);
        assert_eq!(s.phase_of(10_000_000).tag, PhaseTag::Nat);
    }

    #[test]
    fn single_window_stages() {
        let s = CurriculumSchedule::new(100, 1000, 100, Pacing::Linear, 1).unwrap();
        let stages: Vec<Vec<TaskK>> = s.stage_starts().into_iter().map(|(_, t)| t).collect();
        let expect: Vec<Vec<TaskK>> = vec![k(&[1]), k(&[2]), k(&[4]), k(&[8]), k(&[16]), vec![TaskK::Full]];
        assert_eq!(stages, expect);
        let starts: Vec<u64> = s.stage_starts().into_iter().map(|(st, _)| st).collect();
        assert_eq!(starts, [0, 100, 350, 600, 850, 1100]);
    }

    #[test]
    fn window_two_stages() {
        let s = CurriculumSchedule::new(100, 1000, 1000, Pacing::Linear, 2).unwrap();
        let stages: Vec<Vec<TaskK>> = s.stage_starts().into_iter().map(|(_, t)| t).collect();
        assert_eq!(
            stages,
            vec![
                k(&[1, 2]),
                k(&[2, 4]),
                k(&[4, 8]),
                k(&[8, 16]),
                vec![TaskK::Fixed(16), TaskK::Full],
                vec![TaskK::Full]
            ]
        );
        for w in stages.windows(2).take(4) {
            let overlap = w[0].iter().filter(|t| w[1].contains(t)).count();
            assert_eq!(overlap, 1);
        }
    }

    #[test]
    fn window_three_first_stage() {
        let s = CurriculumSchedule::new(100, 1000, 1000, Pacing::Exponential, 3).unwrap();
        assert_eq!(s.stage_tasks(0), k(&[1, 2, 4]));
        let stages = s.stage_starts();
        for w in stages.windows(2).take(stages.len() - 2) {
            let overlap = w[0].1.iter().filter(|t| w[1].1.contains(t)).count();
            assert_eq!(overlap, 2);
        }
    }

    #[test]
    fn window_linear_stages_are_equal_slices() {
        let s = CurriculumSchedule::new(200, 600, 800, Pacing::Linear, 2).unwrap();
        assert_eq!(s.window_span(), 950);
        let starts: Vec<u64> = s.stage_starts().into_iter().map(|(st, _)| st).collect();
        assert_eq!(starts, [0, 190, 380, 570, 760, 950]);
    }

    #[test]
    fn sampling_single_task_is_deterministic() {
        let s = CurriculumSchedule::new(10, 100, 10, Pacing::Exponential, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..50).all(|_| s.sample_task(10, &mut rng) == TaskK::Fixed(2)));
        assert!((0..50).all(|_| s.sample_task(115, &mut rng) == TaskK::Full));
    }

    #[test]
    fn sampling_window_is_uniform() {
        let s = CurriculumSchedule::new(100, 1000, 1000, Pacing::Linear, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let ones = (0..10_000).filter(|_| s.sample_task(0, &mut rng) == TaskK::Fixed(1)).count();
        let freq = ones as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn every_task_is_on_the_ladder() {
        for w in 1..=3 {
            for pacing in [Pacing::Linear, Pacing::Logarithmic, Pacing::Exponential] {
                let s = CurriculumSchedule::new(50, 300, 200, pacing, w).unwrap();
                for step in 0..s.total_steps() + 10 {
                    assert!(s.stage_tasks(step).iter().all(|t| s.ladder.contains(t)));
                    assert_eq!(s.stage_tasks(step).len(), if step < s.window_span() { w } else { 1 });
                }
            }
        }
    }

    #[test]
    fn direct_transfer_drops_sat() {
        let s = CurriculumSchedule::new(200, 600, 800, Pacing::Exponential, 2).unwrap();
        let dt = s.direct_transfer();
        assert_eq!(dt.total_steps(), s.total_steps());
        assert_eq!(dt.stage_tasks(199), k(&[1]));
        assert_eq!(dt.stage_tasks(200), vec![TaskK::Full]);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(CurriculumSchedule::new(1, 1, 1, Pacing::Linear, 0).is_err());
        assert!(CurriculumSchedule::new(1, 1, 1, Pacing::Linear, 7).is_err());
        let mut s = CurriculumSchedule::new(1, 1, 1, Pacing::Linear, 1).unwrap();
        s.ladder = k(&[1, 4, 2]);
        s.ladder.push(TaskK::Full);
        assert!(s.validate().is_err());
    }
}
