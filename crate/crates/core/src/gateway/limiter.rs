use std::sync::{Condvar, Mutex};

/// Counting semaphore that admits waiters strictly in arrival order.
pub struct FairLimiter {
    capacity: usize,
    state: Mutex<State>,
    cond: Condvar,
}

struct State {
    next_ticket: u64,
    next_admit: u64,
    in_flight: usize,
    peak: usize,
}

pub struct Permit<'a> {
    limiter: &'a FairLimiter,
}

impl FairLimiter {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            state: Mutex::new(State { next_ticket: 0, next_admit: 0, in_flight: 0, peak: 0 }),
            cond: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut state = self.state.lock().expect("limiter lock");
        let ticket = state.next_ticket;
        state.next_ticket += 1;
        while ticket != state.next_admit || state.in_flight >= self.capacity {
            state = self.cond.wait(state).expect("limiter lock");
        }
        state.next_admit += 1;
        state.in_flight += 1;
        state.peak = state.peak.max(state.in_flight);
        drop(state);
        // Let the next ticket holder re-check.
        self.cond.notify_all();
        Permit { limiter: self }
    }

    /// Highest number of simultaneously held permits observed.
    pub fn peak_in_flight(&self) -> usize {
        self.state.lock().expect("limiter lock").peak
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock().expect("limiter lock");
        state.in_flight -= 1;
        drop(state);
        self.limiter.cond.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    #[test]
    fn never_exceeds_capacity() {
        let limiter = FairLimiter::new(3);
        let live = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..16 {
                s.spawn(|| {
                    let _p = limiter.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    assert!(now <= 3);
                    std::thread::sleep(Duration::from_millis(2));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(limiter.peak_in_flight() <= 3);
        assert!(limiter.peak_in_flight() >= 1);
    }

    #[test]
    fn admits_in_arrival_order() {
        let limiter = FairLimiter::new(1);
        let order = Mutex::new(Vec::new());
        let held = limiter.acquire();
        std::thread::scope(|s| {
            for i in 0..5 {
                let (limiter, order) = (&limiter, &order);
                s.spawn(move || {
                    let _p = limiter.acquire();
                    order.lock().unwrap().push(i);
                });
                // Ensure thread i has taken its ticket before i+1 starts.
                while limiter.state.lock().unwrap().next_ticket < i as u64 + 2 {
                    std::thread::yield_now();
                }
            }
            drop(held);
        });
        assert_eq!(*order.lock().unwrap(), vec![0, 1, 2, 3, 4]);
    }
}
