//! Cross-instance KV transfer channel.
//!
//! One channel per source instance models its outbound link. Chunks queue
//! FIFO behind `busy_until`; the source never blocks on a push. Completed
//! chunks are immutable (the KV cache is append-only), so shipping them
//! while later tokens are still being computed is safe.

use crate::costmodel::{transfer_time, HardwareProfile};
use serde::Serialize;

/// Transfer granularity of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Ship fixed-size chunks as soon as their tokens are computed.
    Chunked,
    /// Ship the whole span in one message after the producer finishes.
    Whole,
}

/// Outbound link of one instance.
#[derive(Debug, Clone, Default)]
pub struct TransferChannel {
    pub busy_until_ms: f64,
    pub chunks_sent: u64,
    pub tokens_sent: u64,
    pub busy_ms_total: f64,
}

impl TransferChannel {
    /// Enqueue a chunk that became ready at `ready_at`; returns its delivery
    /// time. Back-to-back chunks serialize on the link.
    pub fn push(&mut self, tokens: u64, ready_at_ms: f64, hw: &HardwareProfile) -> f64 {
        let start = ready_at_ms.max(self.busy_until_ms);
        let cost = transfer_time(tokens, hw);
        let delivered = start + cost;
        self.busy_until_ms = delivered;
        self.chunks_sent += 1;
        self.tokens_sent += tokens;
        self.busy_ms_total += cost;
        delivered
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_chunk_on_idle_channel() {
        let hw = HardwareProfile::default();
        let mut ch = TransferChannel::default();
        let d = ch.push(16, 100.0, &hw);
        assert_relative_eq!(d, 100.0 + transfer_time(16, &hw), max_relative = 1e-12);
    }

    #[test]
    fn back_to_back_chunks_serialize() {
        let hw = HardwareProfile::default();
        let mut ch = TransferChannel::default();
        let d1 = ch.push(256, 0.0, &hw);
        let d2 = ch.push(256, 0.0, &hw);
        assert_relative_eq!(d2 - d1, transfer_time(256, &hw), max_relative = 1e-12);
        assert_eq!(ch.chunks_sent, 2);
        assert_eq!(ch.tokens_sent, 512);
    }

    #[test]
    fn idle_gap_resets_queueing() {
        let hw = HardwareProfile::default();
        let mut ch = TransferChannel::default();
        let _ = ch.push(64, 0.0, &hw);
        let d = ch.push(64, 1000.0, &hw);
        assert_relative_eq!(d, 1000.0 + transfer_time(64, &hw), max_relative = 1e-12);
    }
}
