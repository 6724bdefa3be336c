//! The repository service.
//!
//! Each connection gets a reader thread that decodes frames and forwards
//! requests to a single writer thread owning every run's state. Blocking
//! fusion waits are parked as reply channels, so the writer never blocks on a
//! client.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use coldfuse::{Contribution, Error as CoreError, HistoryRecord, ParameterVector, RepositoryState, SubmitOutcome, ValidationPolicy};

use serde::Serialize;

use crate::error::{HubError, Result};
use crate::wire::{Ack, ErrorCode, FrameError, Message, WireMessage, DEFAULT_MAX_PAYLOAD};

/// Run key used when a client does not name one.
pub const DEFAULT_RUN: &str = "default";

#[derive(Debug, Clone)]
pub struct HubConfig {
    pub bind: String,
    /// Cohort size for iterations whose first fetch does not request one.
    pub cohort_size: usize,
    /// An open iteration that has not fused within this many milliseconds is aborted.
    pub deadline_ms: u64,
    pub max_payload: u32,
    pub policy: ValidationPolicy,
    /// Append one JSON line per fused iteration to this file.
    pub history_log: Option<PathBuf>,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:0".into(),
            cohort_size: 4,
            deadline_ms: 600_000,
            max_payload: DEFAULT_MAX_PAYLOAD,
            policy: ValidationPolicy::default(),
            history_log: None,
        }
    }
}

enum Command {
    Fetch {
        run_key: String,
        contributor_id: String,
        cohort_size: u32,
        reply: Sender<Message>,
    },
    Submit {
        run_key: String,
        contribution: Contribution,
        reply: Sender<Message>,
    },
    Await {
        run_key: String,
        iteration: u64,
        reply: Sender<Message>,
    },
    Snapshot {
        run_key: String,
        reply: Sender<Option<RepositoryState>>,
    },
    Shutdown,
}

/// A bound but not yet running hub.
pub struct Hub {
    listener: TcpListener,
    config: HubConfig,
    initial: ParameterVector,
}

impl Hub {
    /// Binds the listener. Every run starts from `initial`.
    pub fn bind(config: HubConfig, initial: ParameterVector) -> Result<Self> {
        if config.cohort_size == 0 {
            return Err(CoreError::Config("hub cohort_size must be positive".into()).into());
        }
        let listener = TcpListener::bind(&config.bind)
            .map_err(|e| HubError::Transport(format!("cannot bind {}: {e}", config.bind)))?;
        Ok(Self {
            listener,
            config,
            initial,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Starts serving on background threads.
    pub fn spawn(self) -> HubHandle {
        let addr = self.local_addr();
        let (tx, rx) = mpsc::channel::<Command>();
        let stop = Arc::new(AtomicBool::new(false));
        let max_payload = self.config.max_payload;
        let writer = {
            let config = self.config.clone();
            let initial = self.initial;
            thread::Builder::new()
                .name("hub-writer".into())
                .spawn(move || Writer::new(config, initial).run(rx))
                .expect("spawn writer")
        };
        let accept = {
            let tx = tx.clone();
            let stop = stop.clone();
            let listener = self.listener;
            thread::Builder::new()
                .name("hub-accept".into())
                .spawn(move || {
                    for stream in listener.incoming() {
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        match stream {
                            Ok(s) => {
                                let tx = tx.clone();
                                let _ = thread::Builder::new()
                                    .name("hub-conn".into())
                                    .spawn(move || handle_connection(s, tx, max_payload));
                            }
                            Err(e) => log::warn!("accept failed: {e}"),
                        }
                    }
                })
                .expect("spawn acceptor")
        };
        log::info!("hub listening on {addr}");
        HubHandle {
            addr,
            commands: tx,
            stop,
            accept: Some(accept),
            writer: Some(writer),
        }
    }

    /// Serves until the process exits.
    pub fn serve(self) -> Result<()> {
        let mut handle = self.spawn();
        if let Some(a) = handle.accept.take() {
            let _ = a.join();
        }
        Ok(())
    }
}

/// Control handle for a running hub; dropping it shuts the hub down.
pub struct HubHandle {
    addr: SocketAddr,
    commands: Sender<Command>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    writer: Option<JoinHandle<()>>,
}

impl HubHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// A copy of a run's repository state, if the run exists.
    pub fn state(&self, run_key: &str) -> Option<RepositoryState> {
        let (reply, rx) = mpsc::channel();
        self.commands
            .send(Command::Snapshot {
                run_key: run_key.to_string(),
                reply,
            })
            .ok()?;
        rx.recv().ok().flatten()
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = self.commands.send(Command::Shutdown);
        // Wake the acceptor so it sees the stop flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(a) = self.accept.take() {
            let _ = a.join();
        }
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
    }
}

impl Drop for HubHandle {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

fn handle_connection(stream: TcpStream, tx: Sender<Command>, max_payload: u32) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    loop {
        let frame = match WireMessage::read_from(&mut reader, max_payload) {
            Ok(f) => f,
            Err(e @ (FrameError::BadMagic(_) | FrameError::BadVersion(_))) => {
                log::debug!("{peer}: {e}");
                let _ = Message::error(ErrorCode::Malformed, e.to_string()).to_wire().write_to(&mut writer);
                return;
            }
            Err(e @ FrameError::TooLarge { .. }) => {
                let _ = Message::error(ErrorCode::TooLarge, e.to_string()).to_wire().write_to(&mut writer);
                return;
            }
            Err(e) => {
                log::debug!("{peer}: closing: {e}");
                return;
            }
        };
        let reply = match Message::from_wire(&frame) {
            Ok(m) => dispatch(m, &tx),
            Err(HubError::UnknownType(t)) => Message::error(ErrorCode::UnknownType, format!("unknown message type {t}")),
            Err(e) => Message::error(ErrorCode::Malformed, e.to_string()),
        };
        if reply.to_wire().write_to(&mut writer).is_err() {
            return;
        }
    }
}

fn dispatch(m: Message, tx: &Sender<Command>) -> Message {
    let (reply, rx) = mpsc::channel();
    let cmd = match m {
        Message::FetchBase {
            run_key,
            contributor_id,
            cohort_size,
        } => Command::Fetch {
            run_key,
            contributor_id,
            cohort_size,
            reply,
        },
        Message::Submit { run_key, contribution } => Command::Submit {
            run_key,
            contribution,
            reply,
        },
        Message::AwaitFusion { run_key, iteration } => Command::Await {
            run_key,
            iteration,
            reply,
        },
        other => {
            return Message::error(
                ErrorCode::UnknownType,
                format!("message type {} is not a request", other.msg_type()),
            )
        }
    };
    if tx.send(cmd).is_err() {
        return Message::error(ErrorCode::Internal, "hub is shutting down");
    }
    rx.recv()
        .unwrap_or_else(|_| Message::error(ErrorCode::Internal, "hub is shutting down"))
}

struct LastFusion {
    iteration: u64,
    hashes: BTreeSet<String>,
    base: ParameterVector,
}

struct Session {
    state: RepositoryState,
    waiters: Vec<Sender<Message>>,
    last: Option<LastFusion>,
    opened_at: Option<Instant>,
}

struct Writer {
    config: HubConfig,
    initial: ParameterVector,
    sessions: BTreeMap<String, Session>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    run_key: &'a str,
    #[serde(flatten)]
    record: &'a HistoryRecord,
}

fn append_history(path: &Path, run_key: &str, record: &HistoryRecord) -> std::io::Result<()> {
    let mut line = serde_json::to_string(&LogLine { run_key, record })?;
    line.push('\n');
    OpenOptions::new().create(true).append(true).open(path)?.write_all(line.as_bytes())
}

fn code_for(e: &CoreError) -> ErrorCode {
    match e {
        CoreError::Stale { .. } => ErrorCode::Stale,
        CoreError::Duplicate(_) => ErrorCode::Duplicate,
        CoreError::FusionShape(_) | CoreError::Shape(_) => ErrorCode::Shape,
        CoreError::NotInCohort(_) => ErrorCode::NotInCohort,
        CoreError::NormExceeded { .. } => ErrorCode::Norm,
        CoreError::NonFinite(_) => ErrorCode::NonFinite,
        _ => ErrorCode::Internal,
    }
}

impl Writer {
    fn new(config: HubConfig, initial: ParameterVector) -> Self {
        Self {
            config,
            initial,
            sessions: BTreeMap::new(),
        }
    }

    fn run(mut self, rx: mpsc::Receiver<Command>) {
        let tick = Duration::from_millis((self.config.deadline_ms / 4).clamp(1, 50));
        loop {
            match rx.recv_timeout(tick) {
                Ok(Command::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
                Ok(cmd) => self.handle(cmd),
                Err(RecvTimeoutError::Timeout) => {}
            }
            self.expire();
        }
        for s in self.sessions.values_mut() {
            for w in s.waiters.drain(..) {
                let _ = w.send(Message::error(ErrorCode::Aborted, "hub shut down"));
            }
        }
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Fetch {
                run_key,
                contributor_id,
                cohort_size,
                reply,
            } => {
                let _ = reply.send(self.fetch(run_key, &contributor_id, cohort_size));
            }
            Command::Submit {
                run_key,
                contribution,
                reply,
            } => {
                let _ = reply.send(self.submit(&run_key, contribution));
            }
            Command::Await {
                run_key,
                iteration,
                reply,
            } => self.await_fusion(&run_key, iteration, reply),
            Command::Snapshot { run_key, reply } => {
                let _ = reply.send(self.sessions.get(&run_key).map(|s| s.state.clone()));
            }
            Command::Shutdown => {}
        }
    }

    fn fetch(&mut self, run_key: String, contributor_id: &str, requested: u32) -> Message {
        let (initial, policy) = (&self.initial, self.config.policy);
        let s = self.sessions.entry(run_key).or_insert_with(|| Session {
            state: RepositoryState::with_policy(initial.clone(), policy),
            waiters: Vec::new(),
            last: None,
            opened_at: None,
        });
        let size = if requested == 0 {
            self.config.cohort_size
        } else {
            requested as usize
        };
        if s.state.expected_cohort().is_empty() {
            if let Err(e) = s.state.open_iteration(size) {
                return Message::error(code_for(&e), e.to_string());
            }
            s.opened_at = Some(Instant::now());
        } else if s.state.cohort_size() != size {
            return Message::error(
                ErrorCode::CohortMismatch,
                format!(
                    "iteration {} is open with cohort size {}, requested {size}",
                    s.state.iteration(),
                    s.state.cohort_size()
                ),
            );
        }
        match s.state.admit(contributor_id) {
            Ok(()) => Message::Base {
                iteration: s.state.iteration(),
                base: s.state.base().clone(),
            },
            Err(e) => Message::error(ErrorCode::NotInCohort, format!("cohort is full: {e}")),
        }
    }

    fn submit(&mut self, run_key: &str, c: Contribution) -> Message {
        let Some(s) = self.sessions.get_mut(run_key) else {
            return Message::error(ErrorCode::NotInCohort, format!("unknown run {run_key:?}"));
        };
        if let Some(last) = &s.last {
            // A retry whose ACK was lost after its cohort already fused.
            if c.iteration == last.iteration && last.hashes.contains(&c.content_hash()) {
                let n = last.hashes.len() as u32;
                return Message::Ack(Ack {
                    iteration: c.iteration,
                    received: n,
                    cohort_size: n,
                    already_recorded: true,
                });
            }
        }
        let iteration = s.state.iteration();
        match s.state.submit(c) {
            Ok(SubmitOutcome::Recorded { received, cohort_size }) => Message::Ack(Ack {
                iteration,
                received: received as u32,
                cohort_size: cohort_size as u32,
                already_recorded: false,
            }),
            Ok(SubmitOutcome::AlreadyRecorded { received, cohort_size }) => Message::Ack(Ack {
                iteration,
                received: received as u32,
                cohort_size: cohort_size as u32,
                already_recorded: true,
            }),
            Ok(SubmitOutcome::Fused(record)) => {
                let n = record.cohort.len() as u32;
                log::info!("{run_key}: fused iteration {}", record.iteration);
                if let Some(path) = &self.config.history_log {
                    if let Err(e) = append_history(path, run_key, &record) {
                        log::error!("cannot append to {}: {e}", path.display());
                    }
                }
                let base = s.state.base().clone();
                for w in s.waiters.drain(..) {
                    let _ = w.send(Message::Fused {
                        iteration: s.state.iteration(),
                        base: base.clone(),
                    });
                }
                s.last = Some(LastFusion {
                    iteration: record.iteration,
                    hashes: record.contribution_hashes.into_iter().collect(),
                    base,
                });
                s.opened_at = None;
                Message::Ack(Ack {
                    iteration,
                    received: n,
                    cohort_size: n,
                    already_recorded: false,
                })
            }
            Err(e) => Message::error(code_for(&e), e.to_string()),
        }
    }

    fn await_fusion(&mut self, run_key: &str, iteration: u64, reply: Sender<Message>) {
        let Some(s) = self.sessions.get_mut(run_key) else {
            let _ = reply.send(Message::error(ErrorCode::NotInCohort, format!("unknown run {run_key:?}")));
            return;
        };
        if iteration == s.state.iteration() {
            s.waiters.push(reply);
            return;
        }
        let msg = match &s.last {
            Some(last) if last.iteration == iteration => Message::Fused {
                iteration: iteration + 1,
                base: last.base.clone(),
            },
            _ => Message::error(
                ErrorCode::Stale,
                format!("cannot await iteration {iteration}; repository is at {}", s.state.iteration()),
            ),
        };
        let _ = reply.send(msg);
    }

    fn expire(&mut self) {
        let deadline = Duration::from_millis(self.config.deadline_ms);
        for (key, s) in &mut self.sessions {
            let Some(opened) = s.opened_at else { continue };
            if opened.elapsed() < deadline {
                continue;
            }
            log::warn!("{key}: iteration {} missed its deadline; aborting", s.state.iteration());
            s.state.abort_iteration();
            s.opened_at = None;
            for w in s.waiters.drain(..) {
                let _ = w.send(Message::error(
                    ErrorCode::Aborted,
                    format!("iteration {} aborted after {} ms", s.state.iteration(), self.config.deadline_ms),
                ));
            }
        }
    }
}
