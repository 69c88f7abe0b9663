#![allow(
    dead_code,
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord
)]

pub mod fixtures;
pub mod gradsuite;
pub mod oracle;
pub mod scenarios;
