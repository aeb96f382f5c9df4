//! Episode traces and summary metrics.

use super::{EnvError, StepOutcome};
use serde::{Deserialize, Serialize};

/// One CSV row per agent and step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub agent: usize,
    pub action: usize,
    pub reward: f32,
    /// Arrivals, blocks and drops of the whole step (all agents).
    pub arrivals: usize,
    pub blocks: usize,
    pub drops: usize,
}

/// Running record of an episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub packets: usize,
    pub steps: usize,
    pub arrivals: usize,
    pub blocks: usize,
    pub drops: usize,
    pub total_reward: f64,
    pub arrival_delays: Vec<usize>,
    /// Per-agent rows, kept only when requested.
    pub rows: Option<Vec<TraceRow>>,
}

impl EpisodeTrace {
    pub fn new(packets: usize, keep_rows: bool) -> Self {
        EpisodeTrace {
            packets,
            rows: keep_rows.then(Vec::new),
            ..Default::default()
        }
    }

    pub fn record(&mut self, actions: &[usize], out: &StepOutcome) {
        let arrivals = out.arrived.iter().filter(|&&a| a).count();
        let blocks = out.blocked.iter().filter(|&&b| b).count();
        let drops = out.dropped.iter().filter(|&&d| d).count();
        if let Some(rows) = &mut self.rows {
            for (agent, (&action, &reward)) in actions.iter().zip(&out.rewards).enumerate() {
                rows.push(TraceRow {
                    step: self.steps,
                    agent,
                    action,
                    reward,
                    arrivals,
                    blocks,
                    drops,
                });
            }
        }
        self.steps += 1;
        self.arrivals += arrivals;
        self.blocks += blocks;
        self.drops += drops;
        self.total_reward += out.rewards.iter().map(|&r| r as f64).sum::<f64>();
        self.arrival_delays.extend_from_slice(&out.arrival_delays);
    }

    /// Writes the per-agent rows as CSV with a header.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        for row in self.rows.iter().flatten() {
            wr.serialize(row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Total reward divided by `N·T`.
    pub mean_reward: f64,
    /// Arrivals per step.
    pub throughput: f64,
    /// Mean spawn-to-arrival time; `None` without arrivals.
    pub mean_delay: Option<f64>,
    pub drops_per_step: f64,
}

pub fn episode_metrics(trace: &EpisodeTrace) -> Result<EpisodeMetrics, EnvError> {
    if trace.steps == 0 || trace.packets == 0 {
        return Err(EnvError::Config("empty episode trace".into()));
    }
    let t = trace.steps as f64;
    let mean_delay = (!trace.arrival_delays.is_empty()).then(|| {
        trace.arrival_delays.iter().sum::<usize>() as f64 / trace.arrival_delays.len() as f64
    });
    Ok(EpisodeMetrics {
        mean_reward: trace.total_reward / (trace.packets as f64 * t),
        throughput: trace.arrivals as f64 / t,
        mean_delay,
        drops_per_step: trace.drops as f64 / t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(rewards: Vec<f32>, arrived: Vec<bool>, blocked: Vec<bool>) -> StepOutcome {
        let n = rewards.len();
        StepOutcome {
            rewards,
            arrival_delays: arrived.iter().filter(|&&a| a).map(|_| 4).collect(),
            arrived,
            blocked,
            dropped: vec![false; n],
            acted: vec![true; n],
            truncated: false,
        }
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(episode_metrics(&EpisodeTrace::new(3, false)).is_err());
    }

    #[test]
    fn no_arrivals_means_absent_delay() {
        let mut tr = EpisodeTrace::new(2, false);
        tr.record(
            &[0, 0],
            &outcome(vec![0.0; 2], vec![false; 2], vec![false; 2]),
        );
        let m = episode_metrics(&tr).unwrap();
        assert_eq!(m.throughput, 0.0);
        assert_eq!(m.mean_delay, None);
    }

    #[test]
    fn blocked_only_reward_identity() {
        let mut tr = EpisodeTrace::new(2, false);
        for _ in 0..4 {
            tr.record(
                &[1, 1],
                &outcome(vec![-0.2, 0.0], vec![false; 2], vec![true, false]),
            );
        }
        let m = episode_metrics(&tr).unwrap();
        let expected = -0.2 * 4.0 / (2.0 * 4.0);
        assert!((m.mean_reward - expected).abs() < 1e-7);
        assert_eq!(tr.blocks, 4);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut tr = EpisodeTrace::new(2, true);
        tr.record(
            &[1, 0],
            &outcome(vec![10.0, 0.0], vec![true, false], vec![false; 2]),
        );
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,agent,action,reward,arrivals,blocks,drops");
        assert_eq!(lines[1], "0,0,1,10.0,1,0,0");
        assert_eq!(lines.len(), 3);
    }
}
