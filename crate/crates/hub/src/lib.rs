//! Networked fusion repository.
//!
//! A hub holds one repository state per named run and performs no training:
//! contributors fetch the current base, finetune locally, submit their body
//! and block until the cohort is complete and fused. Frames are defined in
//! [`wire`]; parameters travel in the core crate's binary format, so the
//! networked path is bit-identical to running the protocol in process.

pub mod client;
pub mod error;
pub mod server;
pub mod wire;

pub use client::{contribute, default_addr, ClientOptions, ContributeOutcome, ContributeRequest, HubClient, HubDriver, ADDR_ENV};
pub use error::{HubError, Result};
pub use server::{Hub, HubConfig, HubHandle, DEFAULT_RUN};
pub use wire::{Ack, ErrorCode, FrameError, Message, WireMessage};
