use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use crate::time::{SimDuration, SimTime};

/// Handle for cancelling a scheduled timer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimerId(u64);

struct Entry<T> {
    at: SimTime,
    seq: u64,
    item: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    // Reversed: BinaryHeap is a max-heap and we pop the earliest entry.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// A virtual clock with a queue of pending timers.
///
/// Time never moves backwards. Timers due at the same instant fire in the
/// order they were scheduled.
pub struct VirtualClock<T> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Entry<T>>,
    cancelled: BTreeSet<u64>,
}

impl<T> std::fmt::Debug for VirtualClock<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VirtualClock")
            .field("now", &self.now)
            .field(
                "pending",
                &self.heap.len().saturating_sub(self.cancelled.len()),
            )
            .finish()
    }
}

impl<T> Default for VirtualClock<T> {
    fn default() -> Self {
        Self::new(SimTime::ZERO)
    }
}

impl<T> VirtualClock<T> {
    pub fn new(start: SimTime) -> Self {
        Self {
            now: start,
            next_seq: 0,
            heap: BinaryHeap::new(),
            cancelled: BTreeSet::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Schedules `item` at `at`, clamped to the present.
    pub fn schedule_at(&mut self, at: SimTime, item: T) -> TimerId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry {
            at: at.max(self.now),
            seq,
            item,
        });
        TimerId(seq)
    }

    pub fn schedule_in(&mut self, delay: SimDuration, item: T) -> TimerId {
        self.schedule_at(self.now + delay, item)
    }

    pub fn cancel(&mut self, id: TimerId) {
        self.cancelled.insert(id.0);
    }

    fn skip_cancelled(&mut self) {
        while let Some(top) = self.heap.peek() {
            if self.cancelled.remove(&top.seq) {
                self.heap.pop();
            } else {
                break;
            }
        }
    }

    /// Time of the earliest live timer.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.skip_cancelled();
        self.heap.peek().map(|e| e.at)
    }

    pub fn is_idle(&mut self) -> bool {
        self.peek_time().is_none()
    }

    /// Pops the earliest timer due at or before `limit` and advances the
    /// clock to it.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<(SimTime, T)> {
        match self.peek_time() {
            Some(at) if at <= limit => {
                let e = self.heap.pop().expect("peeked");
                self.now = e.at;
                Some((e.at, e.item))
            }
            _ => None,
        }
    }

    pub fn pop_next(&mut self) -> Option<(SimTime, T)> {
        self.pop_until(SimTime::MAX)
    }

    /// Moves the clock forward without firing anything. Never moves back.
    pub fn advance_to(&mut self, t: SimTime) {
        self.now = self.now.max(t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_fire_in_schedule_order() {
        let mut c = VirtualClock::default();
        c.schedule_at(SimTime::from_secs(2.0), "late");
        c.schedule_at(SimTime::from_secs(1.0), "a");
        c.schedule_at(SimTime::from_secs(1.0), "b");
        let order: Vec<_> = std::iter::from_fn(|| c.pop_next().map(|x| x.1)).collect();
        assert_eq!(order, ["a", "b", "late"]);
        assert_eq!(c.now(), SimTime::from_secs(2.0));
    }

    #[test]
    fn cancelled_timers_never_fire() {
        let mut c = VirtualClock::default();
        let id = c.schedule_in(SimDuration::from_secs(1.0), 1);
        c.schedule_in(SimDuration::from_secs(2.0), 2);
        c.cancel(id);
        assert_eq!(c.pop_next(), Some((SimTime::from_secs(2.0), 2)));
        assert!(c.is_idle());
    }

    #[test]
    fn pop_until_respects_limit_and_time_is_monotone() {
        let mut c = VirtualClock::default();
        c.schedule_at(SimTime::from_secs(5.0), ());
        assert!(c.pop_until(SimTime::from_secs(4.0)).is_none());
        c.advance_to(SimTime::from_secs(4.0));
        c.advance_to(SimTime::from_secs(3.0));
        assert_eq!(c.now(), SimTime::from_secs(4.0));
        // Scheduling in the past clamps to now.
        c.schedule_at(SimTime::from_secs(1.0), ());
        assert_eq!(c.peek_time(), Some(SimTime::from_secs(4.0)));
    }
}
