#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod numkit;
pub mod dataio;
pub mod partition;
pub mod segmodel;
pub mod metrics;
pub mod calib;
pub mod confidence;
pub mod trainer;
