//! Permissioned ledger for grid data assets.
//!
//! Nodes are ranked by credit score into recorders, supervisors and
//! candidates. Recorders take turns sealing signed, Merkle-rooted blocks of
//! uploaded data digests; one supervisor and two candidates re-validate every
//! block, and each outcome moves the credit scores of the nodes involved by
//! one point. Payloads travel and rest only inside digital envelopes, and a
//! replicated store keeps the ciphertext. [`simnet`] runs the whole system as
//! a deterministic discrete-event simulation with fault injection.

pub mod chain;
pub mod codec;
pub mod crypto;
pub mod merkle;
pub mod credit;
pub mod datastore;
pub mod record_protocol;
pub mod share_protocol;
pub mod simnet;
