use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};

use super::Backpressure;

#[derive(Debug, PartialEq, Eq)]
pub enum PushOutcome<T> {
    Accepted,
    /// The oldest queued item was evicted to make room.
    Evicted(T),
    /// The queue was closed; the item is handed back.
    Closed(T),
}

struct State<T> {
    items: VecDeque<T>,
    closed: bool,
    next_ticket: u64,
}

/// Bounded multi-consumer queue. Items receive consecutive tickets in the
/// order they are dequeued, so evicted items never consume a ticket.
pub struct FrameQueue<T> {
    capacity: usize,
    policy: Backpressure,
    state: Mutex<State<T>>,
    not_empty: Condvar,
    not_full: Condvar,
}

impl<T> FrameQueue<T> {
    pub fn new(capacity: usize, policy: Backpressure) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            capacity,
            policy,
            state: Mutex::new(State {
                items: VecDeque::with_capacity(capacity),
                closed: false,
                next_ticket: 0,
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&self, item: T) -> PushOutcome<T> {
        let mut st = self.state.lock().unwrap();
        if self.policy == Backpressure::Block {
            while !st.closed && st.items.len() >= self.capacity {
                st = self.not_full.wait(st).unwrap();
            }
        }
        if st.closed {
            return PushOutcome::Closed(item);
        }
        let evicted = if st.items.len() >= self.capacity {
            st.items.pop_front()
        } else {
            None
        };
        st.items.push_back(item);
        drop(st);
        self.not_empty.notify_one();
        evicted.map_or(PushOutcome::Accepted, PushOutcome::Evicted)
    }

    /// Blocks until an item is available; `None` once closed and drained.
    pub fn pop(&self) -> Option<(u64, T)> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(item) = st.items.pop_front() {
                let ticket = st.next_ticket;
                st.next_ticket += 1;
                drop(st);
                self.not_full.notify_one();
                return Some((ticket, item));
            }
            if st.closed {
                return None;
            }
            st = self.not_empty.wait(st).unwrap();
        }
    }

    /// Stops accepting items; queued items can still be popped.
    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    /// Closes the queue and discards whatever is still queued.
    pub fn abort(&self) -> usize {
        let mut st = self.state.lock().unwrap();
        st.closed = true;
        let n = st.items.len();
        st.items.clear();
        drop(st);
        self.not_empty.notify_all();
        self.not_full.notify_all();
        n
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
