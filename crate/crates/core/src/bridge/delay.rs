//! Delay and jitter injection for frame channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelaySpec {
    /// Mean one-way delay, s.
    pub delay: f64,
    /// Half-width of the uniform jitter, s.
    pub jitter: f64,
    pub seed: u64,
}

impl DelaySpec {
    pub fn none() -> Self {
        Self { delay: 0.0, jitter: 0.0, seed: 0 }
    }

    pub fn is_passthrough(&self) -> bool {
        self.delay == 0.0 && self.jitter == 0.0
    }
}

/// FIFO queue that releases each item `delay + jitter·u` after it was
/// pushed, `u ~ U[-1, 1]`. Release times are monotonized so jitter never
/// reorders items.
#[derive(Debug)]
pub struct DelayLine<T> {
    spec: DelaySpec,
    rng: ChaCha8Rng,
    queue: VecDeque<(f64, T)>,
    last_release: f64,
}

impl<T> DelayLine<T> {
    pub fn new(spec: DelaySpec) -> Self {
        assert!(spec.delay >= 0.0 && spec.jitter >= 0.0, "delay and jitter must be >= 0");
        Self { spec, rng: ChaCha8Rng::seed_from_u64(spec.seed), queue: VecDeque::new(), last_release: f64::NEG_INFINITY }
    }

    /// Enqueues `item` at time `now` and returns its release time.
    pub fn push(&mut self, now: f64, item: T) -> f64 {
        let u = if self.spec.jitter > 0.0 { self.rng.random_range(-1.0..=1.0) } else { 0.0 };
        let release = (now + self.spec.delay + self.spec.jitter * u).max(now).max(self.last_release);
        self.last_release = release;
        self.queue.push_back((release, item));
        release
    }

    pub fn next_release(&self) -> Option<f64> {
        self.queue.front().map(|(t, _)| *t)
    }

    /// Removes and returns every item due at or before `now`.
    pub fn pop_ready(&mut self, now: f64) -> Vec<(f64, T)> {
        let mut out = Vec::new();
        while self.queue.front().is_some_and(|(t, _)| *t <= now) {
            out.extend(self.queue.pop_front());
        }
        out
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn drain(&mut self) -> impl Iterator<Item = (f64, T)> + '_ {
        self.queue.drain(..)
    }
}

/// Wraps a channel so every item is released per `spec`. The relay thread
/// exits once the input is closed and the line has drained.
pub fn inject_delay<T: Send + 'static>(input: Receiver<T>, spec: DelaySpec) -> Receiver<T> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let origin = Instant::now();
        let now = || origin.elapsed().as_secs_f64();
        let mut line = DelayLine::new(spec);
        let mut open = true;
        loop {
            for (_, item) in line.pop_ready(now()) {
                if tx.send(item).is_err() {
                    return;
                }
            }
            if !open {
                match line.next_release() {
                    Some(t) => thread::sleep(Duration::from_secs_f64((t - now()).max(0.0))),
                    None => return,
                }
                continue;
            }
            let received = match line.next_release() {
                Some(t) => input.recv_timeout(Duration::from_secs_f64((t - now()).max(0.0))),
                None => input.recv().map_err(|_| RecvTimeoutError::Disconnected),
            };
            match received {
                Ok(item) => {
                    line.push(now(), item);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => open = false,
            }
        }
    });
    rx
}
