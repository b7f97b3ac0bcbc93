//! Deterministic discrete-event scheduler.
//!
//! Events are totally ordered by (time, node, link, insertion sequence), so
//! two runs that enqueue the same events in the same order replay
//! identically regardless of hash-map iteration or allocator behavior.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::link::LinkId;

pub type NodeId = u16;
pub type Tick = u64;

/// What the fabric should do when an event fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// A frame on `link` reaches the far end and may be processed.
    Deliver { link: LinkId },
    /// A node gets a turn to drain its receive queues.
    ConsumeTick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub time: Tick,
    pub node: NodeId,
    pub kind: EventKind,
}

#[derive(Debug, PartialEq, Eq)]
struct QueuedEvent {
    event: Event,
    seq: u64,
}

impl QueuedEvent {
    fn sort_key(&self) -> (Tick, NodeId, u32, u64) {
        let link = match self.event.kind {
            EventKind::Deliver { link } => link,
            // Consume ticks sort after deliveries at the same instant so a
            // node sees everything that arrived "now" before it runs.
            EventKind::ConsumeTick => u32::MAX,
        };
        (self.event.time, self.event.node, link, self.seq)
    }
}

impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first ordering.
        other.sort_key().cmp(&self.sort_key())
    }
}

impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Earliest-first event queue with a stable tiebreak.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<QueuedEvent>,
    next_seq: u64,
    now: Tick,
    pub processed: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn push(&mut self, event: Event) {
        debug_assert!(event.time >= self.now, "event scheduled in the past");
        self.heap.push(QueuedEvent { event, seq: self.next_seq });
        self.next_seq += 1;
    }

    /// Pop the next event, advancing the clock to its timestamp.
    pub fn pop(&mut self) -> Option<Event> {
        let q = self.heap.pop()?;
        self.now = q.event.time;
        self.processed += 1;
        Some(q.event)
    }

    /// Discard all pending events (fabric purge on failure injection).
    pub fn clear(&mut self) -> usize {
        let n = self.heap.len();
        self.heap.clear();
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(time: Tick, node: NodeId, kind: EventKind) -> Event {
        Event { time, node, kind }
    }

    #[test]
    fn orders_by_time_node_link_seq() {
        let mut q = EventQueue::new();
        q.push(ev(5, 1, EventKind::Deliver { link: 0 }));
        q.push(ev(3, 2, EventKind::Deliver { link: 7 }));
        q.push(ev(3, 0, EventKind::Deliver { link: 9 }));
        q.push(ev(3, 0, EventKind::Deliver { link: 2 }));
        q.push(ev(3, 0, EventKind::ConsumeTick));

        assert_eq!(q.pop().unwrap(), ev(3, 0, EventKind::Deliver { link: 2 }));
        assert_eq!(q.pop().unwrap(), ev(3, 0, EventKind::Deliver { link: 9 }));
        // ConsumeTick sorts after same-instant deliveries for the node.
        assert_eq!(q.pop().unwrap(), ev(3, 0, EventKind::ConsumeTick));
        assert_eq!(q.pop().unwrap(), ev(3, 2, EventKind::Deliver { link: 7 }));
        assert_eq!(q.pop().unwrap(), ev(5, 1, EventKind::Deliver { link: 0 }));
        assert!(q.pop().is_none());
    }

    #[test]
    fn equal_keys_replay_in_insertion_order() {
        let mut q = EventQueue::new();
        for _ in 0..4 {
            q.push(ev(1, 0, EventKind::Deliver { link: 3 }));
        }
        let mut seen = 0;
        while let Some(e) = q.pop() {
            assert_eq!(e, ev(1, 0, EventKind::Deliver { link: 3 }));
            seen += 1;
        }
        assert_eq!(seen, 4);
        assert_eq!(q.processed, 4);
    }

    #[test]
    fn clock_tracks_popped_events() {
        let mut q = EventQueue::new();
        q.push(ev(2, 0, EventKind::ConsumeTick));
        q.push(ev(10, 0, EventKind::ConsumeTick));
        assert_eq!(q.now(), 0);
        q.pop();
        assert_eq!(q.now(), 2);
        q.pop();
        assert_eq!(q.now(), 10);
    }

    #[test]
    fn clear_empties_the_queue() {
        let mut q = EventQueue::new();
        for t in 0..5 {
            q.push(ev(t, 0, EventKind::ConsumeTick));
        }
        assert_eq!(q.clear(), 5);
        assert!(q.is_empty());
    }
}
