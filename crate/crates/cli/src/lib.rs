//! The `eaa` command line and HTTP session service.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod service;
pub mod workflows;
