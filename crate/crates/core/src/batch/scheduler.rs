use std::collections::VecDeque;

use super::BatchError;

/// FIFO admission with at most `capacity` requests running.
#[derive(Debug, Clone)]
pub struct Scheduler {
    capacity: usize,
    queue: VecDeque<usize>,
    /// Oldest admission first.
    running: Vec<usize>,
    arrived: usize,
    completed: usize,
}

impl Scheduler {
    pub fn new(capacity: usize) -> Result<Self, BatchError> {
        if capacity == 0 {
            return Err(BatchError::Config("batch size must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            queue: VecDeque::new(),
            running: Vec::new(),
            arrived: 0,
            completed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn arrive(&mut self, request: usize) {
        self.arrived += 1;
        self.queue.push_back(request);
    }

    /// Moves queued requests into the running set while there is room and
    /// `fits` accepts the next one. Returns the newly admitted requests.
    pub fn admit(&mut self, mut fits: impl FnMut(usize) -> bool) -> Vec<usize> {
        let mut admitted = Vec::new();
        while self.running.len() < self.capacity {
            match self.queue.front() {
                Some(&r) if fits(r) => {
                    self.queue.pop_front();
                    self.running.push(r);
                    admitted.push(r);
                }
                _ => break,
            }
        }
        admitted
    }

    pub fn complete(&mut self, request: usize) -> Result<(), BatchError> {
        let pos = self
            .running
            .iter()
            .position(|&r| r == request)
            .ok_or_else(|| BatchError::Invariant(format!("request {request} is not running")))?;
        self.running.remove(pos);
        self.completed += 1;
        Ok(())
    }

    pub fn running(&self) -> &[usize] {
        &self.running
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn arrived(&self) -> usize {
        self.arrived
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn is_idle(&self) -> bool {
        self.running.is_empty() && self.queue.is_empty()
    }

    pub fn check(&self) -> Result<(), BatchError> {
        if self.arrived != self.completed + self.running.len() + self.queue.len() {
            return Err(BatchError::Invariant(format!(
                "{} arrived but {} completed, {} running, {} queued",
                self.arrived,
                self.completed,
                self.running.len(),
                self.queue.len()
            )));
        }
        if self.running.len() > self.capacity {
            return Err(BatchError::Invariant(format!(
                "{} running over capacity {}",
                self.running.len(),
                self.capacity
            )));
        }
        Ok(())
    }
}
