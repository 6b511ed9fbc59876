pub mod agents;
pub mod blobstore;
pub mod broker;
pub mod ca;
pub mod cli;
pub mod config;
pub mod crypto;
pub mod ledger;
pub mod metrics;
pub mod privacy;
pub mod protocol;
pub mod sim;
pub mod trace;
