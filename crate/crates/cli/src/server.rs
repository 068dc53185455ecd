//! TCP front end. Each connection gets a reader thread; decoded requests
//! funnel through one channel into the scheduler loop, which owns the
//! [`Service`] and is the event log's only writer.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use metasched_core::Timestamp;

use crate::config::ServiceConfig;
use crate::service::{Service, ServiceError};
use crate::wire::{decode_message, encode_message, salvage_request_id, WireError, WireMessage, MAX_LINE};

struct Request {
    msg: WireMessage,
    reply: Sender<WireMessage>,
}

/// Seconds since the Unix epoch.
pub fn wall_clock() -> Timestamp {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// A running server. Dropping the handle does not stop it; call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    scheduler: JoinHandle<Result<(), ServiceError>>,
    acceptor: JoinHandle<()>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, lets the loop finish its current command and
    /// returns the loop's final result.
    pub fn shutdown(self) -> Result<(), ServiceError> {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        let _ = self.acceptor.join();
        self.scheduler.join().expect("scheduler thread panicked")
    }

    /// Blocks until the scheduler loop ends.
    pub fn wait(self) -> Result<(), ServiceError> {
        self.scheduler.join().expect("scheduler thread panicked")
    }
}

/// Restores state, binds and starts serving in background threads.
pub fn spawn(config: ServiceConfig) -> Result<ServerHandle, ServiceError> {
    let service = Service::open(config.clone(), wall_clock())?;
    let listener = TcpListener::bind(&config.listen).map_err(|source| ServiceError::BindFailed {
        addr: config.listen.clone(),
        source,
    })?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();

    let period = Duration::from_secs(config.tick_period_s);
    let loop_stop = stop.clone();
    let scheduler = thread::Builder::new()
        .name("scheduler".into())
        .spawn(move || scheduler_loop(service, rx, period, loop_stop))?;

    let accept_stop = stop.clone();
    let acceptor = thread::Builder::new()
        .name("acceptor".into())
        .spawn(move || {
            for stream in listener.incoming() {
                if accept_stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let tx = tx.clone();
                let _ = thread::Builder::new()
                    .name("connection".into())
                    .spawn(move || connection(stream, tx));
            }
        })?;
    Ok(ServerHandle {
        addr,
        stop,
        scheduler,
        acceptor,
    })
}

/// Runs until the process is killed. The log is flushed after every
/// command and snapshots are atomic, so an abrupt stop loses nothing
/// that was acknowledged.
pub fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let handle = spawn(config)?;
    eprintln!("listening on {}", handle.local_addr());
    handle.wait()
}

fn scheduler_loop(
    mut service: Service,
    rx: Receiver<Request>,
    period: Duration,
    stop: Arc<AtomicBool>,
) -> Result<(), ServiceError> {
    let mut next_tick = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        let wait = next_tick.saturating_duration_since(Instant::now());
        match rx.recv_timeout(wait.min(Duration::from_millis(200))) {
            Ok(req) => match service.handle(&req.msg, wall_clock()) {
                Ok(reply) => {
                    let _ = req.reply.send(reply);
                }
                Err(e) => {
                    let _ = req.reply.send(WireMessage::error(&req.msg.request_id, "internal", &e));
                    return Err(e);
                }
            },
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        if Instant::now() >= next_tick {
            service.tick(wall_clock())?;
            next_tick += period;
        }
    }
    Ok(())
}

/// Serves one client: one reply per line, in order.
fn connection(stream: TcpStream, tx: Sender<Request>) {
    let Ok(write_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut writer = io::BufWriter::new(write_half);
    loop {
        let line = match read_line(&mut reader) {
            Ok(Some(line)) => line,
            Ok(None) | Err(_) => return,
        };
        if matches!(&line, Line::Full(b) if b.iter().all(u8::is_ascii_whitespace)) {
            continue;
        }
        let reply = match line.decode() {
            Ok(msg) if msg.kind.is_reply() => {
                WireMessage::error(&msg.request_id, "bad_request", format!("{} is a reply, not a request", msg.kind))
            }
            Ok(msg) => {
                let (reply_tx, reply_rx) = mpsc::channel();
                if tx.send(Request { msg: msg.clone(), reply: reply_tx }).is_err() {
                    return;
                }
                match reply_rx.recv() {
                    Ok(r) => r,
                    Err(_) => WireMessage::error(&msg.request_id, "internal", "service stopped"),
                }
            }
            Err(e) => WireMessage::error(&line.request_id(), "bad_request", e),
        };
        if writer.write_all(&encode_message(&reply)).and_then(|_| writer.flush()).is_err() {
            return;
        }
    }
}

enum Line {
    Full(Vec<u8>),
    /// Too long; only the length was kept.
    Oversize(usize),
}

impl Line {
    fn decode(&self) -> Result<WireMessage, WireError> {
        match self {
            Line::Full(b) => decode_message(b),
            Line::Oversize(len) => Err(WireError::OversizeLine { len: *len }),
        }
    }

    fn request_id(&self) -> String {
        match self {
            Line::Full(b) => salvage_request_id(b),
            Line::Oversize(_) => String::new(),
        }
    }
}

/// Reads up to LF without buffering more than the line cap. `None` at EOF.
fn read_line(reader: &mut impl BufRead) -> io::Result<Option<Line>> {
    let mut buf = Vec::new();
    let mut len = 0usize;
    loop {
        let chunk = reader.fill_buf()?;
        if chunk.is_empty() {
            return Ok((len > 0).then(|| finish(buf, len)));
        }
        let (take, done) = match chunk.iter().position(|b| *b == b'\n') {
            Some(i) => (i + 1, true),
            None => (chunk.len(), false),
        };
        let body = &chunk[..if done { take - 1 } else { take }];
        len += body.len();
        if len <= MAX_LINE + 1 {
            buf.extend_from_slice(body);
        }
        reader.consume(take);
        if done {
            return Ok(Some(finish(buf, len)));
        }
    }
}

fn finish(mut buf: Vec<u8>, len: usize) -> Line {
    if buf.last() == Some(&b'\r') {
        buf.pop();
    }
    if buf.len() > MAX_LINE || len > MAX_LINE + 1 {
        Line::Oversize(len)
    } else {
        Line::Full(buf)
    }
}
