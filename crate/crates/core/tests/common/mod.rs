//! Brute-force reference implementations shared by the evaluation and acceptance tests.
#![allow(dead_code)]

pub mod oracle;
