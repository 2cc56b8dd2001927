//! One-directional simulated link with latency, uniform jitter and loss.
//!
//! Time is a caller-supplied simulated clock in microseconds. All randomness
//! comes from a seeded ChaCha stream, so a (params, send trace) pair fully
//! determines what is delivered and when.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid channel parameters: {0}")]
    InvalidParams(&'static str),
    #[error("unknown channel preset '{0}'")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    /// Seconds.
    pub base_delay: f64,
    /// Half-width of the uniform jitter, seconds.
    pub jitter: f64,
    pub loss_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ChannelParams {
    pub const PRESETS: [&'static str; 3] = ["vthd", "dsl", "satellite"];

    /// Shipped presets. Only "vthd" loosely reflects a real link (a 1 Gb/s
    /// research network, latency assumed); the others are illustrative.
    pub fn preset(name: &str) -> Result<Self, ChannelError> {
        let (base_delay, jitter, loss_prob) = match name {
            "vthd" => (0.005, 0.0, 0.0),
            "dsl" => (0.040, 0.010, 0.005),
            "satellite" => (0.300, 0.020, 0.01),
            // Zero-latency direct connection.
            "direct" => (0.0, 0.0, 0.0),
            other => return Err(ChannelError::UnknownPreset(other.to_string())),
        };
        Ok(ChannelParams { base_delay, jitter, loss_prob, seed: 0 })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.base_delay >= 0.0) || !self.base_delay.is_finite() {
            return Err(ChannelError::InvalidParams("base_delay must be finite and >= 0"));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(ChannelError::InvalidParams("jitter must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(ChannelError::InvalidParams("loss_prob must be in [0, 1]"));
        }
        Ok(())
    }

    fn base_us(&self) -> i64 {
        (self.base_delay * 1e6).round() as i64
    }

    fn jitter_us(&self) -> i64 {
        (self.jitter * 1e6).round() as i64
    }

    /// Earliest possible delivery after a send, µs.
    pub fn min_delay_us(&self) -> u64 {
        (self.base_us() - self.jitter_us()).max(0) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InTransit {
    pub sent_at: u64,
    pub deliver_at: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ChannelStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub bytes_sent: u64,
    pub bytes_delivered: u64,
}

#[derive(Debug, Clone)]
pub struct Channel {
    params: ChannelParams,
    rng: ChaCha8Rng,
    /// Keyed by (deliver_at, send order).
    queue: BTreeMap<(u64, u64), InTransit>,
    stats: ChannelStats,
}

impl Channel {
    pub fn new(params: ChannelParams) -> Result<Self, ChannelError> {
        params.validate()?;
        Ok(Channel {
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            params,
            queue: BTreeMap::new(),
            stats: ChannelStats::default(),
        })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    /// Changes delay and loss for subsequent sends; the random stream and
    /// messages already in flight are untouched.
    pub fn set_conditions(&mut self, base_delay: f64, jitter: f64, loss_prob: f64) -> Result<(), ChannelError> {
        let next = ChannelParams { base_delay, jitter, loss_prob, seed: self.params.seed };
        next.validate()?;
        self.params = next;
        Ok(())
    }

    pub fn send(&mut self, bytes: Vec<u8>, now: u64) {
        // Both draws happen for every message so the stream stays aligned
        // regardless of outcomes.
        let j = self.params.jitter_us();
        let offset = if j > 0 { self.rng.gen_range(-j..=j) } else { 0 };
        let lost = self.rng.gen::<f64>() < self.params.loss_prob;
        let order = self.stats.sent;
        self.stats.sent += 1;
        self.stats.bytes_sent += bytes.len() as u64;
        if lost {
            self.stats.dropped += 1;
            return;
        }
        let delay = (self.params.base_us() + offset).max(0) as u64;
        let deliver_at = now + delay;
        self.queue.insert((deliver_at, order), InTransit { sent_at: now, deliver_at, payload: bytes });
    }

    /// Everything due by `now`, in delivery order (send order breaks ties).
    pub fn poll(&mut self, now: u64) -> Vec<Vec<u8>> {
        let later = self.queue.split_off(&(now.saturating_add(1), 0));
        let due = std::mem::replace(&mut self.queue, later);
        self.stats.delivered += due.len() as u64;
        due.into_values()
            .map(|m| {
                self.stats.bytes_delivered += m.payload.len() as u64;
                m.payload
            })
            .collect()
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn peek_schedule(&self) -> impl Iterator<Item = &InTransit> {
        self.queue.values()
    }
}
