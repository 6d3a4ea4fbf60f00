// SPDX-License-Identifier: Apache-2.0

//! Error and concurrency plumbing shared by chat, embedding and simulator
//! backends.

use std::sync::{Condvar, Mutex};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("backend failed after {attempts} attempt(s): {message}")]
pub struct BackendError {
    pub message: String,
    pub attempts: u32,
}

impl BackendError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            attempts: 1,
        }
    }
}

/// Counting semaphore that bounds in-flight backend requests.
#[derive(Debug)]
pub struct Throttle {
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Throttle);

impl Throttle {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }

    fn release(&self) {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.freed.notify_one();
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        self.0.release();
    }
}
