//! TCP front end for a [`Shard`].
//!
//! One reader thread per connection parses frames and queues them for a
//! fixed pool of workers; each call runs to completion on one worker, which
//! writes the response back on the originating connection. Responses on one
//! connection may therefore leave in a different order than requests came in.

use std::io::{BufReader, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

use crate::error::{Error, Result};
use crate::transport::frame::Frame;
use crate::transport::message::{Request, Response};

use super::Shard;

const POLL: Duration = Duration::from_millis(20);
const DRAIN_LIMIT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    /// Worker threads; 0 means one per available core.
    pub workers: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: "127.0.0.1:0".into(),
            workers: 0,
        }
    }
}

/// Serves one request frame. The flag is set when the frame asks the
/// server to shut down.
pub fn handle_frame(shard: &Shard, frame: &Frame) -> (Frame, bool) {
    let id = frame.call_id;
    let request = match Request::from_frame(frame) {
        Ok(r) => r,
        Err(e) => return (Response::Error(e.to_string()).to_frame(id), false),
    };
    let result = match request {
        Request::Hello => Ok(Response::Hello(shard.info())),
        Request::Dotprod(req) => shard.dotprod(&req).map(Response::Dotprod),
        Request::Adjust(req) => shard.adjust(&req).map(|()| Response::Adjust),
        Request::Export {
            matrix,
            start,
            count,
        } => shard
            .export_rows(matrix, start, count)
            .map(|values| Response::Export {
                matrix,
                start,
                count,
                width: shard.store().width() as u32,
                values,
            }),
        Request::Shutdown => return (Response::Shutdown.to_frame(id), true),
    };
    let response = result.unwrap_or_else(|e| Response::Error(e.to_string()));
    (response.to_frame(id), false)
}

struct Job {
    frame: Frame,
    out: Arc<Mutex<TcpStream>>,
}

struct Shared {
    shard: Arc<Shard>,
    stop: AtomicBool,
    in_flight: AtomicUsize,
    connections: Mutex<Vec<TcpStream>>,
}

pub struct ShardServer;

impl ShardServer {
    /// Binds the listen address and starts serving in background threads.
    pub fn bind(shard: Arc<Shard>, config: &ServerConfig) -> Result<ServerHandle> {
        let listener = TcpListener::bind(&config.listen)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let workers = if config.workers == 0 {
            thread::available_parallelism().map_or(4, |n| n.get())
        } else {
            config.workers
        };
        let shared = Arc::new(Shared {
            shard,
            stop: AtomicBool::new(false),
            in_flight: AtomicUsize::new(0),
            connections: Mutex::new(Vec::new()),
        });
        let (tx, rx) = unbounded::<Job>();
        let pool = (0..workers)
            .map(|i| {
                let rx = rx.clone();
                let shared = Arc::clone(&shared);
                thread::Builder::new()
                    .name(format!("shard-worker-{i}"))
                    .spawn(move || worker(&shared, &rx))
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        let acceptor = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("shard-accept".into())
                .spawn(move || accept_loop(&listener, &shared, tx))?
        };
        log::info!(
            "shard {} listening on {local_addr} with {workers} workers",
            shared.shard.info().shard_id
        );
        Ok(ServerHandle {
            local_addr,
            shared,
            acceptor: Some(acceptor),
            pool,
        })
    }
}

fn worker(shared: &Shared, rx: &Receiver<Job>) {
    for job in rx {
        let (response, shutdown) = handle_frame(&shared.shard, &job.frame);
        if let Err(e) = job
            .out
            .lock()
            .expect("connection writer")
            .write_all(&response.encode())
        {
            log::debug!("dropping response to call {}: {e}", job.frame.call_id);
        }
        if shutdown {
            shared.stop.store(true, Ordering::SeqCst);
        }
        shared.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn accept_loop(listener: &TcpListener, shared: &Arc<Shared>, jobs: Sender<Job>) {
    let mut readers: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("connection from {peer}");
                match stream.try_clone() {
                    Ok(s) => shared.connections.lock().expect("connection list").push(s),
                    Err(e) => {
                        log::error!("cannot register connection from {peer}: {e}");
                        continue;
                    }
                }
                let shared = Arc::clone(shared);
                let jobs = jobs.clone();
                match thread::Builder::new()
                    .name(format!("shard-conn-{peer}"))
                    .spawn(move || connection(stream, &shared, &jobs))
                {
                    Ok(h) => readers.push(h),
                    Err(e) => log::error!("cannot spawn connection thread: {e}"),
                }
                readers.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::error!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    // Let queued and running calls finish before closing connections.
    let deadline = Instant::now() + DRAIN_LIMIT;
    while shared.in_flight.load(Ordering::SeqCst) > 0 && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(1));
    }
    for s in shared
        .connections
        .lock()
        .expect("connection list")
        .drain(..)
    {
        let _ = s.shutdown(Shutdown::Both);
    }
    for h in readers {
        let _ = h.join();
    }
    // Dropping the last sender lets the workers finish queued jobs and exit.
    drop(jobs);
}

fn connection(stream: TcpStream, shared: &Shared, jobs: &Sender<Job>) {
    if let Err(e) = serve_connection(stream, shared, jobs) {
        log::debug!("connection closed: {e}");
    }
}

fn serve_connection(stream: TcpStream, shared: &Shared, jobs: &Sender<Job>) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let out = Arc::new(Mutex::new(stream.try_clone()?));
    let mut input = BufReader::new(stream);
    loop {
        match Frame::read_from(&mut input) {
            Ok(Some(frame)) => {
                if !frame.op.is_request() {
                    let reply = Response::Error(format!("{:?} is not a request op", frame.op))
                        .to_frame(frame.call_id);
                    out.lock()
                        .expect("connection writer")
                        .write_all(&reply.encode())?;
                    continue;
                }
                shared.in_flight.fetch_add(1, Ordering::SeqCst);
                let job = Job {
                    frame,
                    out: Arc::clone(&out),
                };
                if jobs.send(job).is_err() {
                    shared.in_flight.fetch_sub(1, Ordering::SeqCst);
                    return Err(Error::Unavailable {
                        shard: shared.shard.info().shard_id as usize,
                        reason: "worker pool stopped".into(),
                    });
                }
            }
            Ok(None) => return Ok(()),
            Err(e @ Error::Frame(_)) => {
                // The stream cannot be resynchronized after a bad header.
                let reply = Response::Error(e.to_string()).to_frame(0);
                let _ = out
                    .lock()
                    .expect("connection writer")
                    .write_all(&reply.encode());
                let _ = out
                    .lock()
                    .expect("connection writer")
                    .shutdown(Shutdown::Both);
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
}

/// A running server. Dropping the handle stops it.
pub struct ServerHandle {
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
    pool: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn shard(&self) -> &Arc<Shard> {
        &self.shared.shard
    }

    pub fn is_stopping(&self) -> bool {
        self.shared.stop.load(Ordering::SeqCst)
    }

    /// Requests in-flight calls currently queued or running.
    pub fn in_flight(&self) -> usize {
        self.shared.in_flight.load(Ordering::SeqCst)
    }

    /// Stops accepting work, drains queued calls and joins every thread.
    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.join();
    }

    /// Blocks until a client sends SHUTDOWN (or [`shutdown`](Self::shutdown)
    /// is called elsewhere), then drains.
    pub fn wait(mut self) {
        self.join();
    }

    fn join(&mut self) {
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        for w in self.pool.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.join();
    }
}
