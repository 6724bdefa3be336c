use std::io::{BufReader, BufWriter};
use std::net::TcpStream;
use std::thread;
use std::time::Duration;

use coldfuse::{
    contribute_local, CohortEntry, Contribution, IterationDriver, ModelArch, ParameterVector, RepositoryState,
    TaskDataset, TaskRegistry, TrainConfig,
};

use crate::error::{HubError, Result};
use crate::server::DEFAULT_RUN;
use crate::wire::{Ack, Message, WireMessage, DEFAULT_MAX_PAYLOAD};

pub const ADDR_ENV: &str = "COLDFUSE_HUB_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:7878";

/// `COLDFUSE_HUB_ADDR` if set, else the default local address.
pub fn default_addr() -> String {
    std::env::var(ADDR_ENV).unwrap_or_else(|_| DEFAULT_ADDR.to_string())
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// Reconnect attempts per request after a transport failure.
    pub retries: u32,
    pub backoff: Duration,
    pub max_payload: u32,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            retries: 5,
            backoff: Duration::from_millis(100),
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// A connection to a hub that reconnects and retries idempotent requests.
pub struct HubClient {
    addr: String,
    options: ClientOptions,
    conn: Option<Conn>,
}

impl HubClient {
    pub fn new(addr: impl Into<String>, options: ClientOptions) -> Self {
        Self {
            addr: addr.into(),
            options,
            conn: None,
        }
    }

    fn connect(&mut self) -> Result<&mut Conn> {
        if self.conn.is_none() {
            let stream = TcpStream::connect(&self.addr)
                .map_err(|e| HubError::Transport(format!("cannot connect to {}: {e}", self.addr)))?;
            let _ = stream.set_nodelay(true);
            self.conn = Some(Conn {
                reader: BufReader::new(stream.try_clone()?),
                writer: BufWriter::new(stream),
            });
        }
        Ok(self.conn.as_mut().expect("connected"))
    }

    fn exchange(&mut self, frame: &WireMessage) -> Result<Message> {
        let max = self.options.max_payload;
        let conn = self.connect()?;
        frame.write_to(&mut conn.writer)?;
        let reply = WireMessage::read_from(&mut conn.reader, max)?;
        Message::from_wire(&reply)
    }

    /// Sends a request and returns the reply; ERROR frames become [`HubError::Remote`].
    ///
    /// Every request in the protocol is idempotent, so transport failures are
    /// retried on a fresh connection.
    pub fn request(&mut self, msg: &Message) -> Result<Message> {
        let frame = msg.to_wire();
        let mut attempt = 0;
        loop {
            match self.exchange(&frame) {
                Ok(Message::Error { code, message }) => return Err(HubError::Remote { code, message }),
                Ok(m) => return Ok(m),
                Err(e) if e.is_transient() && attempt < self.options.retries => {
                    log::debug!("retrying after transport failure: {e}");
                    self.conn = None;
                    attempt += 1;
                    thread::sleep(self.options.backoff * attempt);
                }
                Err(e) => {
                    self.conn = None;
                    return Err(if e.is_transient() {
                        HubError::Transport(format!("{} after {attempt} retries: {e}", self.addr))
                    } else {
                        e
                    });
                }
            }
        }
    }

    /// Joins the current iteration; returns its number and base.
    pub fn fetch_base(&mut self, run_key: &str, contributor_id: &str, cohort_size: u32) -> Result<(u64, ParameterVector)> {
        match self.request(&Message::FetchBase {
            run_key: run_key.into(),
            contributor_id: contributor_id.into(),
            cohort_size,
        })? {
            Message::Base { iteration, base } => Ok((iteration, base)),
            other => Err(HubError::Unexpected(format!("type {} to FETCH_BASE", other.msg_type()))),
        }
    }

    pub fn submit(&mut self, run_key: &str, contribution: &Contribution) -> Result<Ack> {
        match self.request(&Message::Submit {
            run_key: run_key.into(),
            contribution: contribution.clone(),
        })? {
            Message::Ack(a) => Ok(a),
            other => Err(HubError::Unexpected(format!("type {} to SUBMIT", other.msg_type()))),
        }
    }

    /// Blocks until `iteration` fuses; returns the new iteration number and base.
    pub fn await_fusion(&mut self, run_key: &str, iteration: u64) -> Result<(u64, ParameterVector)> {
        match self.request(&Message::AwaitFusion {
            run_key: run_key.into(),
            iteration,
        })? {
            Message::Fused { iteration, base } => Ok((iteration, base)),
            other => Err(HubError::Unexpected(format!("type {} to AWAIT_FUSION", other.msg_type()))),
        }
    }
}

/// One contributor's round trip through the hub.
#[derive(Debug, Clone)]
pub struct ContributeRequest<'a> {
    pub run_key: &'a str,
    pub contributor_id: &'a str,
    pub task: &'a TaskDataset,
    pub cfg: &'a TrainConfig,
    pub arch: &'a ModelArch,
    /// 0 uses the hub's configured cohort size.
    pub cohort_size: u32,
}

#[derive(Debug, Clone)]
pub struct ContributeOutcome {
    pub iteration: u64,
    /// The base this contributor started from.
    pub fetched: ParameterVector,
    pub contribution: Contribution,
    pub fused: ParameterVector,
}

/// Fetch, finetune locally, submit, and wait for the fused base.
pub fn contribute(addr: &str, req: &ContributeRequest<'_>, options: &ClientOptions) -> Result<ContributeOutcome> {
    let mut client = HubClient::new(addr, options.clone());
    let (iteration, fetched) = client.fetch_base(req.run_key, req.contributor_id, req.cohort_size)?;
    let contribution = contribute_local(&fetched, req.arch, req.task, req.cfg, req.contributor_id, iteration)?;
    client.submit(req.run_key, &contribution)?;
    let (_, fused) = client.await_fusion(req.run_key, iteration)?;
    Ok(ContributeOutcome {
        iteration,
        fetched,
        contribution,
        fused,
    })
}

/// Runs each iteration through a hub, one client thread per cohort member.
///
/// The contributions are also replayed into a local copy of the state and the
/// result must match the hub's fused base bit for bit.
#[derive(Debug, Clone)]
pub struct HubDriver {
    pub addr: String,
    pub options: ClientOptions,
    /// Prepended to every run key so repeated runs get fresh hub sessions.
    pub prefix: String,
}

impl HubDriver {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            options: ClientOptions::default(),
            prefix: String::new(),
        }
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.prefix = prefix.into();
        self
    }
}

impl IterationDriver for HubDriver {
    fn run_iteration(
        &self,
        run_key: &str,
        state: &RepositoryState,
        cohort: &[CohortEntry],
        registry: &TaskRegistry,
        arch: &ModelArch,
    ) -> coldfuse::Result<RepositoryState> {
        let run_key = if run_key.is_empty() { DEFAULT_RUN } else { run_key };
        let run_key = format!("{}{run_key}", self.prefix);
        let run_key = run_key.as_str();
        let tasks = cohort
            .iter()
            .map(|e| registry.get(&e.task_id))
            .collect::<coldfuse::Result<Vec<_>>>()?;
        let size = u32::try_from(cohort.len()).map_err(|_| coldfuse::Error::Config("cohort too large".into()))?;
        let outcomes: Vec<Result<ContributeOutcome>> = thread::scope(|scope| {
            let handles: Vec<_> = cohort
                .iter()
                .zip(&tasks)
                .map(|(e, task)| {
                    let req = ContributeRequest {
                        run_key,
                        contributor_id: &e.contributor_id,
                        task,
                        cfg: &e.cfg,
                        arch,
                        cohort_size: size,
                    };
                    scope.spawn(move || contribute(&self.addr, &req, &self.options))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(HubError::Unexpected("contributor thread panicked".into()))))
                .collect()
        });
        let mut next = state.clone();
        let ids: Vec<&str> = cohort.iter().map(|e| e.contributor_id.as_str()).collect();
        next.open_cohort(&ids)?;
        let mut hub_base: Option<ParameterVector> = None;
        for o in outcomes {
            let o = o?;
            if o.iteration != state.iteration() || o.fetched.to_bytes() != state.base().to_bytes() {
                return Err(coldfuse::Error::Transport(format!(
                    "hub run {run_key:?} is at iteration {} with a different base than the local state (iteration {})",
                    o.iteration,
                    state.iteration()
                )));
            }
            if let Some(b) = &hub_base {
                if b.to_bytes() != o.fused.to_bytes() {
                    return Err(coldfuse::Error::Transport("contributors received different fused bases".into()));
                }
            }
            hub_base = Some(o.fused);
            next.submit(o.contribution)?;
        }
        let hub_base = hub_base.ok_or_else(|| coldfuse::Error::Config("empty cohort".into()))?;
        if next.iteration() != state.iteration() + 1 || next.base().to_bytes() != hub_base.to_bytes() {
            return Err(coldfuse::Error::Transport(
                "hub fused base differs from the local replay".into(),
            ));
        }
        Ok(next)
    }
}
