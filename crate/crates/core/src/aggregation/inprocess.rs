//! In-process transport: one aggregator thread, one channel pair per worker.

use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use log::debug;

use super::{expect_gather, expect_sum, Endpoint, Frame, RoundAccumulator, TransportError};
use crate::rounding::{IntVector, IntWidth};

pub struct InProcessEndpoint {
    worker_id: u32,
    workers: usize,
    timeout: Duration,
    to_agg: Sender<Frame>,
    from_agg: Receiver<Frame>,
}

/// Creates `n` connected endpoints and starts the aggregator thread. The
/// thread exits when all endpoints are dropped or a round fails; in the
/// latter case every endpoint sees a disconnect instead of blocking.
pub fn in_process_group(n: usize, width: IntWidth, timeout: Duration) -> Vec<InProcessEndpoint> {
    let mut ups = Vec::with_capacity(n);
    let mut endpoints = Vec::with_capacity(n);
    let mut downs = Vec::with_capacity(n);
    for id in 0..n {
        let (up_tx, up_rx) = channel();
        let (down_tx, down_rx) = channel();
        ups.push(up_rx);
        downs.push(down_tx);
        endpoints.push(InProcessEndpoint {
            worker_id: id as u32,
            workers: n,
            timeout,
            to_agg: up_tx,
            from_agg: down_rx,
        });
    }
    thread::Builder::new()
        .name("intsgd-aggregator".into())
        .spawn(move || {
            if let Err(e) = aggregate(ups, downs, width) {
                debug!("in-process aggregator stopped: {e}");
            }
        })
        .expect("spawn aggregator thread");
    endpoints
}

fn aggregate(ups: Vec<Receiver<Frame>>, downs: Vec<Sender<Frame>>, width: IntWidth) -> Result<(), TransportError> {
    let mut acc = RoundAccumulator::new(ups.len(), width);
    loop {
        for (id, rx) in ups.iter().enumerate() {
            let frame = rx.recv().map_err(|_| TransportError::Disconnected(format!("worker {id}")))?;
            // The channel identifies the sender; the header must agree.
            if frame.worker_id as usize != id {
                return Err(TransportError::Protocol(format!(
                    "channel {id} carried a frame for worker {}",
                    frame.worker_id
                )));
            }
            acc.push(frame)?;
        }
        let out = acc.finish()?;
        for tx in &downs {
            for f in out.frames() {
                tx.send(f.clone()).map_err(|_| TransportError::Disconnected("worker".into()))?;
            }
        }
    }
}

impl InProcessEndpoint {
    fn send(&self, frame: Frame) -> Result<(), TransportError> {
        self.to_agg.send(frame).map_err(|_| TransportError::Disconnected("aggregator".into()))
    }

    fn recv(&self) -> Result<Frame, TransportError> {
        self.from_agg.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout(format!("aggregator reply to worker {}", self.worker_id)),
            RecvTimeoutError::Disconnected => TransportError::Disconnected("aggregator".into()),
        })
    }
}

impl Endpoint for InProcessEndpoint {
    fn worker_id(&self) -> u32 {
        self.worker_id
    }

    fn workers(&self) -> usize {
        self.workers
    }

    fn allreduce_sum(&mut self, iteration: u64, block_count: u32, q: IntVector) -> Result<IntVector, TransportError> {
        let len = q.len();
        self.send(Frame::int(iteration, self.worker_id, block_count, q))?;
        expect_sum(self.recv()?, iteration, len)
    }

    fn allgather(&mut self, iteration: u64, v: Vec<f64>) -> Result<Vec<Vec<f64>>, TransportError> {
        let len = v.len();
        self.send(Frame::float(iteration, self.worker_id, v))?;
        let replies = (0..self.workers).map(|_| self.recv()).collect::<Result<Vec<_>, _>>()?;
        expect_gather(replies, iteration, len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_across_threads() {
        let eps = in_process_group(3, IntWidth::W32, Duration::from_secs(5));
        let results: Vec<_> = thread::scope(|s| {
            let hs: Vec<_> = eps
                .into_iter()
                .map(|mut ep| {
                    s.spawn(move || {
                        let id = ep.worker_id() as i64;
                        let q = IntVector::new(IntWidth::W32, vec![id, 10 * id]).unwrap();
                        let sum = ep.allreduce_sum(0, 1, q).unwrap();
                        let g = ep.allgather(1, vec![id as f64]).unwrap();
                        (sum, g)
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (sum, g) in results {
            assert_eq!(sum.values(), &[3, 30]);
            assert_eq!(g, vec![vec![0.0], vec![1.0], vec![2.0]]);
        }
    }

    #[test]
    fn dropped_worker_does_not_hang_others() {
        let mut eps = in_process_group(2, IntWidth::W8, Duration::from_secs(5));
        let dead = eps.pop().unwrap();
        drop(dead);
        let mut ep = eps.pop().unwrap();
        let err = ep.allreduce_sum(0, 1, IntVector::zeros(IntWidth::W8, 1)).unwrap_err();
        assert!(matches!(err, TransportError::Disconnected(_)), "{err}");
    }

    #[test]
    fn overflow_disconnects_everyone() {
        let eps = in_process_group(2, IntWidth::W8, Duration::from_secs(5));
        thread::scope(|s| {
            for mut ep in eps {
                s.spawn(move || {
                    let q = IntVector::new(IntWidth::W8, vec![100]).unwrap();
                    assert!(ep.allreduce_sum(0, 1, q).is_err());
                });
            }
        });
    }
}
