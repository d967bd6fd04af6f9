//! Batch driver for the qsd toolkit: configuration, manifests and the
//! subcommands behind the `qsd` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod manifest;
