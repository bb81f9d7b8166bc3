//! Judging workflow over HTTP: consent, task checkout, one pair at a time,
//! QC-gated commit to the judgment log.

pub mod http;
pub mod service;

pub use http::{router, serve};
pub use service::{
    approval_qualification, AssessorProfile, Clock, ManualClock, NextPair, Service, ServiceConfig, ServiceError,
    SessionState, SystemClock,
};
