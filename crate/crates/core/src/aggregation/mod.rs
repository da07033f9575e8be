//! Integer all-reduce: clipping, the wire codec, and the transports that sum
//! worker payloads.
//!
//! Every transport funnels frames through [`RoundAccumulator`], so the
//! validation and the i64 summation are shared between the in-process
//! group and the TCP aggregator.

mod frame;
mod inprocess;
mod tcp;

use std::time::Duration;

use thiserror::Error;

use crate::rounding::{IntVector, IntWidth, RoundingError};

pub use frame::{
    decode_frame, encode_frame, read_frame, write_frame, Frame, FrameError, Payload, AGGREGATOR_ID, HEADER_LEN, MAGIC,
    VERSION,
};
pub use inprocess::{in_process_group, InProcessEndpoint};
pub use tcp::{serve_session, spawn_loopback_aggregator, SessionStats, TcpEndpoint};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("aggregated value {value} overflows {width}-bit integers at coordinate {index}")]
    Overflow { index: usize, value: i64, width: u8 },
    #[error("peer disconnected: {0}")]
    Disconnected(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Rounding(#[from] RoundingError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-coordinate clipping bound: `floor((2^(w-1) - 1) / n)`.
pub fn clip_bound(width: IntWidth, n: usize) -> i64 {
    width.max_value() / n.max(1) as i64
}

/// Clips `v` to `[-B, B]` with `B = clip_bound(width, n)`, so that the sum of
/// `n` clipped vectors always fits in `width` bits. Returns the clipped vector
/// and how many coordinates were changed.
pub fn clip_for_width(v: &[i64], width: IntWidth, n: usize) -> Result<(IntVector, usize), RoundingError> {
    if n == 0 {
        return Err(RoundingError::NoWorkers);
    }
    let b = clip_bound(width, n);
    let mut clipped = 0;
    let out = v
        .iter()
        .map(|&x| {
            let c = x.clamp(-b, b);
            clipped += usize::from(c != x);
            c
        })
        .collect();
    Ok((IntVector::new(width, out)?, clipped))
}

/// Sums integer vectors elementwise in i64 and narrows to `width`, failing
/// if any coordinate does not fit.
pub fn sum_int_vectors(vectors: &[&IntVector], width: IntWidth) -> Result<IntVector, TransportError> {
    let len = vectors.first().map_or(0, |v| v.len());
    let mut acc = vec![0i64; len];
    for v in vectors {
        if v.len() != len {
            return Err(TransportError::Protocol(format!("payload length {} differs from {}", v.len(), len)));
        }
        for (a, &x) in acc.iter_mut().zip(v.values()) {
            *a += x as i64;
        }
    }
    if let Some((index, &value)) = acc.iter().enumerate().find(|(_, &x)| !width.fits(x)) {
        return Err(TransportError::Overflow { index, value, width: width.bits() });
    }
    Ok(IntVector::new(width, acc)?)
}

/// A worker's view of the collective.
pub trait Endpoint: Send {
    fn worker_id(&self) -> u32;

    fn workers(&self) -> usize;

    /// Elementwise integer sum over all workers. Every worker receives the
    /// same vector.
    fn allreduce_sum(&mut self, iteration: u64, block_count: u32, q: IntVector) -> Result<IntVector, TransportError>;

    /// Collects every worker's float vector, returned in worker-id order. Used
    /// for uncompressed steps; the aggregator only relays bytes.
    fn allgather(&mut self, iteration: u64, v: Vec<f64>) -> Result<Vec<Vec<f64>>, TransportError>;
}

/// Outcome of a completed round.
#[derive(Debug, Clone, PartialEq)]
pub enum RoundOutput {
    Sum(Frame),
    Gather(Vec<Frame>),
}

impl RoundOutput {
    /// Frames to deliver to every worker, in order.
    pub fn frames(&self) -> &[Frame] {
        match self {
            RoundOutput::Sum(f) => std::slice::from_ref(f),
            RoundOutput::Gather(fs) => fs,
        }
    }
}

/// Collects one frame per worker for a single round and combines them.
#[derive(Debug)]
pub struct RoundAccumulator {
    workers: usize,
    width: IntWidth,
    last_iteration: Option<u64>,
    slots: Vec<Option<Frame>>,
    filled: usize,
}

impl RoundAccumulator {
    pub fn new(workers: usize, width: IntWidth) -> Self {
        Self { workers, width, last_iteration: None, slots: vec![None; workers], filled: 0 }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn is_complete(&self) -> bool {
        self.filled == self.workers
    }

    /// Worker ids that have not contributed to the current round.
    pub fn missing(&self) -> Vec<u32> {
        (0..self.workers as u32).filter(|&i| self.slots[i as usize].is_none()).collect()
    }

    pub fn push(&mut self, frame: Frame) -> Result<(), TransportError> {
        let id = frame.worker_id as usize;
        if id >= self.workers {
            return Err(TransportError::Protocol(format!(
                "worker id {} out of range for {} workers",
                frame.worker_id, self.workers
            )));
        }
        if self.slots[id].is_some() {
            return Err(TransportError::Protocol(format!("duplicate frame from worker {id}")));
        }
        if let Some(last) = self.last_iteration {
            if frame.iteration < last {
                return Err(TransportError::Protocol(format!(
                    "worker {id} sent iteration {} after round {last}",
                    frame.iteration
                )));
            }
        }
        if let Payload::Int(v) = &frame.payload {
            if v.width() != self.width {
                return Err(TransportError::Protocol(format!(
                    "worker {id} sent {}-bit integers, session width is {}",
                    v.width().bits(),
                    self.width.bits()
                )));
            }
        }
        if let Some(first) = self.slots.iter().flatten().next() {
            if first.iteration != frame.iteration {
                return Err(TransportError::Protocol(format!(
                    "worker {id} is at iteration {}, round is at {}",
                    frame.iteration, first.iteration
                )));
            }
            if first.payload.width_code() != frame.payload.width_code() || first.block_count != frame.block_count {
                return Err(TransportError::Protocol(format!("worker {id} sent a frame of a different kind")));
            }
            if first.payload.len() != frame.payload.len() {
                return Err(TransportError::Protocol(format!(
                    "worker {id} sent {} values, expected {}",
                    frame.payload.len(),
                    first.payload.len()
                )));
            }
        }
        self.slots[id] = Some(frame);
        self.filled += 1;
        Ok(())
    }

    /// Combines a complete round and resets for the next one.
    pub fn finish(&mut self) -> Result<RoundOutput, TransportError> {
        if !self.is_complete() {
            return Err(TransportError::Protocol(format!("round incomplete, missing {:?}", self.missing())));
        }
        let frames: Vec<Frame> = self.slots.iter_mut().map(|s| s.take().expect("complete round")).collect();
        self.filled = 0;
        let iteration = frames[0].iteration;
        self.last_iteration = Some(iteration);
        match &frames[0].payload {
            Payload::Float(_) => Ok(RoundOutput::Gather(frames)),
            Payload::Int(_) => {
                let ints: Vec<&IntVector> = frames
                    .iter()
                    .map(|f| match &f.payload {
                        Payload::Int(v) => v,
                        Payload::Float(_) => unreachable!("kinds checked on push"),
                    })
                    .collect();
                let sum = sum_int_vectors(&ints, self.width)?;
                Ok(RoundOutput::Sum(Frame::int(iteration, AGGREGATOR_ID, frames[0].block_count, sum)))
            }
        }
    }
}

/// Checks a reply to an all-reduce request and extracts the sum.
fn expect_sum(reply: Frame, iteration: u64, len: usize) -> Result<IntVector, TransportError> {
    match reply.payload {
        Payload::Int(v) if reply.iteration == iteration && v.len() == len => Ok(v),
        _ => Err(TransportError::Protocol(format!(
            "unexpected reply for iteration {iteration}: iteration {}, {} values",
            reply.iteration,
            reply.payload.len()
        ))),
    }
}

/// Checks a gather reply and extracts the per-worker vectors.
fn expect_gather(replies: Vec<Frame>, iteration: u64, len: usize) -> Result<Vec<Vec<f64>>, TransportError> {
    replies
        .into_iter()
        .enumerate()
        .map(|(i, f)| match f.payload {
            Payload::Float(v) if f.iteration == iteration && f.worker_id as usize == i && v.len() == len => Ok(v),
            _ => Err(TransportError::Protocol(format!("unexpected gather reply {i} for iteration {iteration}"))),
        })
        .collect()
}
