//! Sliding-window rate limiter shared across gateway callers. Over any
//! 60-second window, at most `limit` requests are admitted per backend.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::{Duration, Instant};

const WINDOW: Duration = Duration::from_secs(60);

#[derive(Default)]
pub struct RateLimiter {
    windows: Mutex<HashMap<String, VecDeque<Instant>>>,
}

impl RateLimiter {
    pub fn new() -> Self {
        Self::default()
    }

    /// How long a caller must wait before `record` is admissible at `now`;
    /// `None` means it may proceed immediately. Pure decision logic so it
    /// can be tested with synthetic clocks.
    pub fn wait_needed(&self, backend_id: &str, limit: u32, now: Instant) -> Option<Duration> {
        if limit == 0 {
            return None; // unlimited
        }
        let mut windows = self.windows.lock().unwrap();
        let window = windows.entry(backend_id.to_string()).or_default();
        while let Some(front) = window.front() {
            if now.duration_since(*front) >= WINDOW {
                window.pop_front();
            } else {
                break;
            }
        }
        if (window.len() as u32) < limit {
            return None;
        }
        let oldest = *window.front().expect("window non-empty at limit");
        Some(WINDOW.saturating_sub(now.duration_since(oldest)))
    }

    /// Record an admitted request at `now`.
    pub fn record(&self, backend_id: &str, now: Instant) {
        let mut windows = self.windows.lock().unwrap();
        windows.entry(backend_id.to_string()).or_default().push_back(now);
    }

    /// Block until a slot is free, then claim it.
    pub fn acquire(&self, backend_id: &str, limit: u32) {
        loop {
            let now = Instant::now();
            match self.wait_needed(backend_id, limit, now) {
                None => {
                    self.record(backend_id, now);
                    return;
                }
                Some(wait) => std::thread::sleep(wait.min(Duration::from_millis(250))),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn admits_up_to_limit_then_blocks() {
        let limiter = RateLimiter::new();
        let start = Instant::now();
        for _ in 0..3 {
            assert_eq!(limiter.wait_needed("b", 3, start), None);
            limiter.record("b", start);
        }
        let wait = limiter.wait_needed("b", 3, start).expect("must wait");
        assert!(wait <= WINDOW);
        // After the window passes, the slot frees up.
        let later = start + WINDOW;
        assert_eq!(limiter.wait_needed("b", 3, later), None);
    }

    #[test]
    fn window_is_sliding_not_fixed() {
        let limiter = RateLimiter::new();
        let start = Instant::now();
        limiter.record("b", start);
        limiter.record("b", start + Duration::from_secs(30));
        // At t=59s both requests are still inside the window.
        assert!(limiter.wait_needed("b", 2, start + Duration::from_secs(59)).is_some());
        // At t=61s the first request expired.
        assert_eq!(limiter.wait_needed("b", 2, start + Duration::from_secs(61)), None);
    }

    #[test]
    fn never_more_than_limit_in_any_window() {
        // Simulate a minute of eager callers against limit 5 and count
        // admissions inside every 60s window.
        let limiter = RateLimiter::new();
        let start = Instant::now();
        let mut admitted: Vec<Instant> = Vec::new();
        let mut t = start;
        for _ in 0..600 {
            if limiter.wait_needed("b", 5, t).is_none() {
                limiter.record("b", t);
                admitted.push(t);
            }
            t += Duration::from_secs(1);
        }
        for anchor in &admitted {
            let in_window = admitted
                .iter()
                .filter(|a| **a >= *anchor && a.duration_since(*anchor) < WINDOW)
                .count();
            assert!(in_window <= 5, "window starting at admitted point exceeded limit");
        }
        assert!(admitted.len() > 5);
    }

    #[test]
    fn zero_limit_means_unlimited() {
        let limiter = RateLimiter::new();
        let now = Instant::now();
        for _ in 0..100 {
            assert_eq!(limiter.wait_needed("b", 0, now), None);
        }
    }

    #[test]
    fn backends_are_limited_independently() {
        let limiter = RateLimiter::new();
        let now = Instant::now();
        limiter.record("a", now);
        assert!(limiter.wait_needed("a", 1, now).is_some());
        assert_eq!(limiter.wait_needed("b", 1, now), None);
    }
}
