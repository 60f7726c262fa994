//! Client-side connections to shards.
//!
//! A link sends request frames and hands back a [`PendingCall`] so a caller
//! can broadcast to every shard before waiting on any reply. Every frame in
//! either direction is recorded on the link's [`BandwidthMeter`].

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::shard::{handle_frame, Shard, ShardInfo};

use super::frame::Frame;
use super::message::{Request, Response};
use super::meter::BandwidthMeter;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

/// A decoded reply and its size on the wire.
#[derive(Debug)]
pub struct Reply {
    pub response: Response,
    pub wire_bytes: usize,
}

enum Pending {
    Ready(Result<Frame>),
    Waiting {
        rx: Receiver<Result<Frame>>,
        pending: Arc<PendingMap>,
        timeout: Duration,
    },
}

/// An issued call whose reply has not been consumed yet.
pub struct PendingCall {
    shard: usize,
    call_id: u64,
    request_bytes: usize,
    state: Pending,
}

impl PendingCall {
    pub fn request_bytes(&self) -> usize {
        self.request_bytes
    }

    pub fn call_id(&self) -> u64 {
        self.call_id
    }

    /// Blocks for the reply. Remote errors become [`Error::Remote`].
    pub fn wait(self) -> Result<Reply> {
        let shard = self.shard;
        let frame = match self.state {
            Pending::Ready(frame) => frame?,
            Pending::Waiting {
                rx,
                pending,
                timeout,
            } => match rx.recv_timeout(timeout) {
                Ok(frame) => frame?,
                Err(RecvTimeoutError::Timeout) => {
                    pending.lock().expect("pending lock").remove(&self.call_id);
                    return Err(Error::Unavailable {
                        shard,
                        reason: format!("no reply within {timeout:?}"),
                    });
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Unavailable {
                        shard,
                        reason: "connection closed".into(),
                    })
                }
            },
        };
        let wire_bytes = frame.wire_len();
        match Response::from_frame(&frame)? {
            Response::Error(message) => Err(Error::Remote { shard, message }),
            response => Ok(Reply {
                response,
                wire_bytes,
            }),
        }
    }
}

pub trait ShardLink: Send + Sync {
    /// Encodes and sends `request`, returning a handle to its reply.
    fn submit(&self, request: &Request) -> Result<PendingCall>;

    fn info(&self) -> ShardInfo;

    fn call(&self, request: &Request) -> Result<Reply> {
        self.submit(request)?.wait()
    }
}

/// In-process link. Requests are encoded to bytes, decoded and served on the
/// calling thread, and the reply travels back the same way, so the exact
/// wire frames are produced and metered.
pub struct LocalLink {
    index: usize,
    shard: Arc<Shard>,
    meter: Arc<BandwidthMeter>,
    next_call: AtomicU64,
}

impl LocalLink {
    pub fn new(index: usize, shard: Arc<Shard>, meter: Arc<BandwidthMeter>) -> Self {
        LocalLink {
            index,
            shard,
            meter,
            next_call: AtomicU64::new(1),
        }
    }
}

impl ShardLink for LocalLink {
    fn submit(&self, request: &Request) -> Result<PendingCall> {
        let call_id = self.next_call.fetch_add(1, Ordering::Relaxed);
        let out = request.to_frame(call_id);
        let bytes = out.encode();
        self.meter.record_sent(&out);
        let served = Frame::decode(&bytes).map(|f| handle_frame(&self.shard, &f).0);
        let reply = served.and_then(|resp| {
            let bytes = resp.encode();
            self.meter.record_received(&resp);
            Frame::decode(&bytes)
        });
        Ok(PendingCall {
            shard: self.index,
            call_id,
            request_bytes: bytes.len(),
            state: Pending::Ready(reply),
        })
    }

    fn info(&self) -> ShardInfo {
        self.shard.info()
    }
}

type PendingMap = Mutex<HashMap<u64, Sender<Result<Frame>>>>;

/// TCP link with request pipelining: any number of threads may have calls
/// outstanding on one connection; a reader thread routes replies by call id.
pub struct TcpLink {
    index: usize,
    info: ShardInfo,
    stream: TcpStream,
    writer: Mutex<TcpStream>,
    pending: Arc<PendingMap>,
    closed: Arc<AtomicBool>,
    meter: Arc<BandwidthMeter>,
    next_call: AtomicU64,
    timeout: Duration,
    reader: Option<JoinHandle<()>>,
}

impl TcpLink {
    /// Connects and performs the hello handshake.
    pub fn connect(
        addr: impl ToSocketAddrs,
        index: usize,
        meter: Arc<BandwidthMeter>,
        timeout: Duration,
    ) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Unavailable {
            shard: index,
            reason: e.to_string(),
        })?;
        stream.set_nodelay(true)?;
        let pending: Arc<PendingMap> = Arc::new(Mutex::new(HashMap::new()));
        let closed = Arc::new(AtomicBool::new(false));
        let reader = {
            let mut input = BufReader::new(stream.try_clone()?);
            let pending = Arc::clone(&pending);
            let closed = Arc::clone(&closed);
            let meter = Arc::clone(&meter);
            std::thread::Builder::new()
                .name(format!("shard-link-{index}"))
                .spawn(move || {
                    let reason = loop {
                        match Frame::read_from(&mut input) {
                            Ok(Some(frame)) => {
                                meter.record_received(&frame);
                                let waiter =
                                    pending.lock().expect("pending lock").remove(&frame.call_id);
                                match waiter {
                                    Some(tx) => {
                                        let _ = tx.send(Ok(frame));
                                    }
                                    None => log::warn!(
                                        "shard {index}: reply for unknown call {}",
                                        frame.call_id
                                    ),
                                }
                            }
                            Ok(None) => break "connection closed by shard".to_string(),
                            Err(e) => break e.to_string(),
                        }
                    };
                    closed.store(true, Ordering::SeqCst);
                    for (_, tx) in pending.lock().expect("pending lock").drain() {
                        let _ = tx.send(Err(Error::Unavailable {
                            shard: index,
                            reason: reason.clone(),
                        }));
                    }
                })?
        };
        let mut link = TcpLink {
            index,
            info: ShardInfo {
                shard_id: 0,
                num_shards: 0,
                dim: 0,
                lo: 0,
                hi: 0,
                vocab_size: 0,
            },
            writer: Mutex::new(stream.try_clone()?),
            stream,
            pending,
            closed,
            meter,
            next_call: AtomicU64::new(1),
            timeout,
            reader: Some(reader),
        };
        match link.call(&Request::Hello)?.response {
            Response::Hello(info) => link.info = info,
            other => {
                return Err(Error::Protocol(format!(
                    "expected hello reply, got {:?}",
                    other.kind()
                )))
            }
        }
        Ok(link)
    }
}

impl ShardLink for TcpLink {
    fn submit(&self, request: &Request) -> Result<PendingCall> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(Error::Unavailable {
                shard: self.index,
                reason: "connection closed".into(),
            });
        }
        let call_id = self.next_call.fetch_add(1, Ordering::Relaxed);
        let frame = request.to_frame(call_id);
        let bytes = frame.encode();
        let (tx, rx) = mpsc::channel();
        self.pending
            .lock()
            .expect("pending lock")
            .insert(call_id, tx);
        let written = self.writer.lock().expect("writer lock").write_all(&bytes);
        if let Err(e) = written {
            self.pending.lock().expect("pending lock").remove(&call_id);
            return Err(Error::Unavailable {
                shard: self.index,
                reason: e.to_string(),
            });
        }
        self.meter.record_sent(&frame);
        Ok(PendingCall {
            shard: self.index,
            call_id,
            request_bytes: bytes.len(),
            state: Pending::Waiting {
                rx,
                pending: Arc::clone(&self.pending),
                timeout: self.timeout,
            },
        })
    }

    fn info(&self) -> ShardInfo {
        self.info
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(reader) = self.reader.take() {
            let _ = reader.join();
        }
    }
}
