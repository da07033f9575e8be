//! TCP transport: a star-topology aggregator and the matching worker client.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::{expect_gather, expect_sum, read_frame, write_frame, Endpoint, Frame, FrameError, RoundAccumulator, TransportError};
use crate::rounding::{IntVector, IntWidth};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub rounds: u64,
    pub frames_in: u64,
    pub frames_out: u64,
}

enum Event {
    Frame(Frame),
    Closed,
    Failed(FrameError),
}

fn accept_all(listener: &TcpListener, n: usize, timeout: Duration) -> Result<Vec<TcpStream>, TransportError> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + timeout;
    let mut streams = Vec::with_capacity(n);
    while streams.len() < n {
        match listener.accept() {
            Ok((s, peer)) => {
                debug!("aggregator accepted {peer}");
                s.set_nonblocking(false)?;
                s.set_nodelay(true)?;
                streams.push(s);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(TransportError::Timeout(format!(
                        "{} of {n} workers to connect",
                        n - streams.len()
                    )));
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
    listener.set_nonblocking(false)?;
    Ok(streams)
}

/// Runs one aggregation session: accepts `n` workers, then sums or relays
/// one frame per worker per round until every worker disconnects cleanly.
/// Any protocol violation, overflow or timeout ends the session with an
/// error and closes every connection so no worker stays blocked.
pub fn serve_session(
    listener: &TcpListener,
    n: usize,
    width: IntWidth,
    timeout: Duration,
) -> Result<SessionStats, TransportError> {
    if n == 0 {
        return Err(TransportError::Protocol("session needs at least one worker".into()));
    }
    let streams = accept_all(listener, n, timeout)?;
    let result = run_rounds(&streams, n, width, timeout);
    if let Err(e) = &result {
        warn!("aggregation session failed: {e}");
    }
    for s in &streams {
        let _ = s.shutdown(Shutdown::Both);
    }
    result
}

fn run_rounds(streams: &[TcpStream], n: usize, width: IntWidth, timeout: Duration) -> Result<SessionStats, TransportError> {
    let (tx, rx) = channel();
    for (conn, s) in streams.iter().enumerate() {
        let mut reader = BufReader::new(s.try_clone()?);
        let tx = tx.clone();
        thread::Builder::new().name(format!("intsgd-conn-{conn}")).spawn(move || loop {
            let ev = match read_frame(&mut reader) {
                Ok(Some(f)) => Event::Frame(f),
                Ok(None) => Event::Closed,
                Err(e) => Event::Failed(e),
            };
            let last = !matches!(ev, Event::Frame(_));
            if tx.send((conn, ev)).is_err() || last {
                break;
            }
        })?;
    }
    drop(tx);

    let mut writers: Vec<BufWriter<TcpStream>> =
        streams.iter().map(|s| s.try_clone().map(BufWriter::new)).collect::<Result<_, _>>()?;
    // worker id -> connection index, fixed by the first frame on each connection.
    let mut conn_of: HashMap<u32, usize> = HashMap::new();
    let mut closed = vec![false; n];
    let mut acc = RoundAccumulator::new(n, width);
    let mut stats = SessionStats::default();
    let mut received_in_round = 0usize;

    loop {
        let (conn, ev) = match rx.recv_timeout(timeout) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout) => {
                return Err(TransportError::Timeout(format!("frames from workers {:?}", acc.missing())));
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(TransportError::Disconnected("all connection readers stopped".into()));
            }
        };
        match ev {
            Event::Frame(frame) => {
                match conn_of.get(&frame.worker_id) {
                    Some(&c) if c != conn => {
                        return Err(TransportError::Protocol(format!(
                            "worker id {} claimed by two connections",
                            frame.worker_id
                        )));
                    }
                    None => {
                        if conn_of.values().any(|&c| c == conn) {
                            return Err(TransportError::Protocol(format!(
                                "connection {conn} changed its worker id to {}",
                                frame.worker_id
                            )));
                        }
                        conn_of.insert(frame.worker_id, conn);
                    }
                    _ => {}
                }
                stats.frames_in += 1;
                received_in_round += 1;
                acc.push(frame)?;
                if acc.is_complete() {
                    let out = acc.finish()?;
                    received_in_round = 0;
                    stats.rounds += 1;
                    for id in 0..n as u32 {
                        let w = &mut writers[conn_of[&id]];
                        for f in out.frames() {
                            write_frame(w, f)?;
                            stats.frames_out += 1;
                        }
                        w.flush()?;
                    }
                }
            }
            Event::Closed => {
                if received_in_round > 0 {
                    return Err(TransportError::Disconnected(format!("connection {conn} closed mid-round")));
                }
                closed[conn] = true;
                if closed.iter().all(|&c| c) {
                    info!("aggregation session finished after {} rounds", stats.rounds);
                    return Ok(stats);
                }
            }
            Event::Failed(e) => return Err(e.into()),
        }
    }
}

/// Binds an ephemeral loopback port and serves a single session on a
/// background thread.
pub fn spawn_loopback_aggregator(
    n: usize,
    width: IntWidth,
    timeout: Duration,
) -> Result<(SocketAddr, JoinHandle<Result<SessionStats, TransportError>>), TransportError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handle = thread::Builder::new()
        .name("intsgd-tcp-aggregator".into())
        .spawn(move || serve_session(&listener, n, width, timeout))?;
    Ok((addr, handle))
}

pub struct TcpEndpoint {
    worker_id: u32,
    workers: usize,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

fn map_io(e: FrameError, what: &str) -> TransportError {
    match e {
        FrameError::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
            TransportError::Timeout(what.to_string())
        }
        FrameError::Io(io)
            if matches!(
                io.kind(),
                io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted | io::ErrorKind::BrokenPipe
            ) =>
        {
            TransportError::Disconnected(format!("{what}: {io}"))
        }
        other => TransportError::Frame(other),
    }
}

impl TcpEndpoint {
    /// Connects to an aggregator, retrying until `timeout` elapses so
    /// workers may start before the aggregator is listening.
    pub fn connect<A: ToSocketAddrs>(addr: A, worker_id: u32, workers: usize, timeout: Duration) -> Result<Self, TransportError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let deadline = Instant::now() + timeout;
        let stream = loop {
            let attempt = addrs.iter().find_map(|a| TcpStream::connect_timeout(a, timeout).ok());
            match attempt {
                Some(s) => break s,
                None if Instant::now() >= deadline => {
                    return Err(TransportError::Timeout(format!("connection to aggregator at {addrs:?}")));
                }
                None => thread::sleep(Duration::from_millis(20)),
            }
        };
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Self { worker_id, workers, reader: BufReader::new(stream.try_clone()?), writer: stream })
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        match read_frame(&mut self.reader) {
            Ok(Some(f)) => Ok(f),
            Ok(None) => Err(TransportError::Disconnected("aggregator closed the connection".into())),
            Err(e) => Err(map_io(e, &format!("aggregator reply to worker {}", self.worker_id))),
        }
    }

    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        write_frame(&mut self.writer, frame).map_err(|e| map_io(e.into(), "sending to aggregator"))
    }
}

impl Endpoint for TcpEndpoint {
    fn worker_id(&self) -> u32 {
        self.worker_id
    }

    fn workers(&self) -> usize {
        self.workers
    }

    fn allreduce_sum(&mut self, iteration: u64, block_count: u32, q: IntVector) -> Result<IntVector, TransportError> {
        let len = q.len();
        self.send(&Frame::int(iteration, self.worker_id, block_count, q))?;
        let reply = self.recv()?;
        expect_sum(reply, iteration, len)
    }

    fn allgather(&mut self, iteration: u64, v: Vec<f64>) -> Result<Vec<Vec<f64>>, TransportError> {
        let len = v.len();
        self.send(&Frame::float(iteration, self.worker_id, v))?;
        let replies = (0..self.workers).map(|_| self.recv()).collect::<Result<Vec<_>, _>>()?;
        expect_gather(replies, iteration, len)
    }
}
