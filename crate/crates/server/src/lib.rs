//! HTTP session service and command-line front end for `cleanloop`.
//!
//! Endpoints (all bodies JSON with `"v": 1`):
//!
//! | method | path | purpose |
//! |---|---|---|
//! | GET | `/healthz` | version |
//! | POST | `/sessions` | create a session, start scoring (202) |
//! | GET | `/sessions/{id}/batch` | outstanding batch; 409 while scoring, 410 once stopped |
//! | POST | `/sessions/{id}/corrections` | answer the whole batch; 422 on mismatch |
//! | GET | `/sessions/{id}/status` | phase, iteration, progress |
//! | GET | `/sessions/{id}/report` | yields, query log, AP when gold exists; 409 until stopped |
//! | POST | `/sessions/{id}/stop` | stop now, or after the running scoring pass |
//! | GET | `/sessions/{id}/dataset` | current labels as dataset JSONL |

pub mod cli;
pub mod service;
pub mod wire;

pub use service::{router, serve, AppState, ServiceConfig, ServiceError};
