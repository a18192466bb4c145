//! Admission gate bounding concurrent in-flight requests.

use std::sync::{Condvar, Mutex};

/// Counting semaphore over Mutex + Condvar. `acquire` blocks until a
/// slot frees up; the guard releases on drop.
pub struct Gate {
    capacity: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "gate capacity must be at least 1");
        Self {
            capacity,
            in_use: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> GateGuard<'_> {
        let mut in_use = self.in_use.lock().unwrap();
        while *in_use >= self.capacity {
            in_use = self.freed.wait(in_use).unwrap();
        }
        *in_use += 1;
        GateGuard { gate: self }
    }
}

pub struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut in_use = self.gate.in_use.lock().unwrap();
        *in_use -= 1;
        self.gate.freed.notify_one();
    }
}
