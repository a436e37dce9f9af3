//! Discrete-event loop.
//!
//! Events fire in `(fire_at, insertion sequence)` order so identical inputs
//! always replay identically.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Duration;

use crate::overlay::NodeId;
use crate::time::SimTime;

/// Who an event is addressed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Node(NodeId),
    Host(u32),
    Lan(u32),
    /// Scenario-level bookkeeping (timers, churn, measurements).
    Control,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimEvent<E> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: Target,
    pub payload: E,
}

impl<E> Eq for SimEvent<E> where E: PartialEq {}

impl<E: PartialEq> Ord for SimEvent<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first.
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

impl<E: PartialEq> PartialOrd for SimEvent<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct Simulator<E> {
    now: SimTime,
    next_seq: u64,
    fired: u64,
    queue: BinaryHeap<SimEvent<E>>,
}

impl<E: PartialEq> Default for Simulator<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: PartialEq> Simulator<E> {
    pub fn new() -> Self {
        Simulator { now: SimTime::ZERO, next_seq: 0, fired: 0, queue: BinaryHeap::new() }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|e| e.fire_at)
    }

    /// Events in the past are clamped to `now`.
    pub fn schedule_at(&mut self, at: SimTime, target: Target, payload: E) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(SimEvent { fire_at: at.max(self.now), seq, target, payload });
        seq
    }

    pub fn schedule_in(&mut self, delay: Duration, target: Target, payload: E) -> u64 {
        self.schedule_at(self.now + delay, target, payload)
    }

    /// Pop the next event and advance the clock to it.
    pub fn step(&mut self) -> Option<SimEvent<E>> {
        let ev = self.queue.pop()?;
        self.now = ev.fire_at;
        self.fired += 1;
        Some(ev)
    }

    /// Pop the next event only if it fires at or before `t`.
    pub fn step_until(&mut self, t: SimTime) -> Option<SimEvent<E>> {
        if self.peek_time()? > t {
            return None;
        }
        self.step()
    }

    /// Deliver every event up to and including `t`, then park the clock at `t`.
    pub fn run_until<F>(&mut self, t: SimTime, mut handler: F)
    where
        F: FnMut(&mut Simulator<E>, SimEvent<E>),
    {
        while let Some(ev) = self.step_until(t) {
            handler(self, ev);
        }
        if t != SimTime::MAX {
            self.now = self.now.max(t);
        }
    }

    /// Drop everything still queued.
    pub fn clear(&mut self) {
        self.queue.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_queue_returns_immediately() {
        let mut sim: Simulator<u32> = Simulator::new();
        let mut calls = 0;
        sim.run_until(SimTime::from_secs(5), |_, _| calls += 1);
        assert_eq!(calls, 0);
        assert_eq!(sim.now(), SimTime::from_secs(5));
    }

    #[test]
    fn equal_times_preserve_insertion_order() {
        let mut sim = Simulator::new();
        for i in 0..10u32 {
            sim.schedule_at(SimTime::from_secs(1), Target::Control, i);
        }
        sim.schedule_at(SimTime::ZERO, Target::Control, 99);
        let order: Vec<u32> = std::iter::from_fn(|| sim.step().map(|e| e.payload)).collect();
        assert_eq!(order, vec![99, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn handlers_can_schedule_follow_ups() {
        let mut sim = Simulator::new();
        sim.schedule_at(SimTime::ZERO, Target::Control, 0u32);
        let mut seen = Vec::new();
        sim.run_until(SimTime::from_secs(10), |sim, ev| {
            seen.push((sim.now(), ev.payload));
            if ev.payload < 3 {
                sim.schedule_in(Duration::from_secs(2), Target::Control, ev.payload + 1);
            }
        });
        assert_eq!(seen.len(), 4);
        assert_eq!(seen[3], (SimTime::from_secs(6), 3));
    }

    #[test]
    fn step_until_respects_horizon() {
        let mut sim = Simulator::new();
        sim.schedule_at(SimTime::from_secs(3), Target::Control, 1u8);
        assert!(sim.step_until(SimTime::from_secs(2)).is_none());
        assert_eq!(sim.step_until(SimTime::from_secs(3)).unwrap().payload, 1);
    }
}
