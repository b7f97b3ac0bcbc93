//! Directed links with credit-based lossless flow control.
//!
//! A sender may only push a frame onto a link while it holds credit for it;
//! the receiver returns credit as it drains frames. Multicast delivery is
//! all-or-nothing: it consumes one credit on every member link or none.

use std::collections::VecDeque;

use thiserror::Error;

use super::frame::WireFrame;

/// Identifies one directed link in the fabric.
pub type LinkId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("link {0} does not exist")]
    UnknownLink(LinkId),
    #[error("credit grant overflows capacity on link {link}: {granted} > {capacity}")]
    CreditOverflow { link: LinkId, granted: u32, capacity: u32 },
}

/// Result of attempting to place a frame on a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Sent,
    /// No credit available; the sender must hold the frame and retry.
    Blocked,
}

/// One directed FIFO with a credit budget.
#[derive(Debug)]
pub struct Link {
    pub id: LinkId,
    /// Human-readable endpoint description for traces.
    pub label: String,
    capacity: u32,
    credits: u32,
    queue: VecDeque<WireFrame>,
    /// Frames ever accepted onto this link.
    pub sent_frames: u64,
    /// Frames that have crossed the wire and are visible to the receiver.
    pub arrived_frames: u64,
    /// Frames ever drained off this link.
    pub delivered_frames: u64,
    /// Tagged DATA frames accepted (shadow traffic accounting).
    pub tagged_frames: u64,
    pub tagged_bytes: u64,
    /// High-water mark of the in-flight queue.
    pub max_depth: usize,
}

impl Link {
    pub fn new(id: LinkId, label: impl Into<String>, capacity: u32) -> Self {
        Self {
            id,
            label: label.into(),
            capacity,
            credits: capacity,
            queue: VecDeque::new(),
            sent_frames: 0,
            arrived_frames: 0,
            delivered_frames: 0,
            tagged_frames: 0,
            tagged_bytes: 0,
            max_depth: 0,
        }
    }

    pub fn credits(&self) -> u32 {
        self.credits
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn has_credit(&self) -> bool {
        self.credits > 0
    }

    /// Push a frame if credit is available, consuming one credit.
    pub fn try_send(&mut self, frame: WireFrame) -> (SendOutcome, Option<WireFrame>) {
        if self.credits == 0 {
            return (SendOutcome::Blocked, Some(frame));
        }
        self.credits -= 1;
        self.accept(frame);
        (SendOutcome::Sent, None)
    }

    /// Push without consuming credit. Only control traffic that is itself
    /// part of the credit loop (grants) may use this.
    pub fn send_uncredited(&mut self, frame: WireFrame) {
        self.accept(frame);
    }

    fn accept(&mut self, frame: WireFrame) {
        if frame.is_tagged() {
            self.tagged_frames += 1;
            self.tagged_bytes += frame.payload.len() as u64;
        }
        self.sent_frames += 1;
        self.queue.push_back(frame);
        self.max_depth = self.max_depth.max(self.queue.len());
    }

    /// Mark the oldest undelivered frame as having crossed the wire.
    pub fn arrive(&mut self) {
        debug_assert!(self.arrived_frames < self.sent_frames);
        self.arrived_frames += 1;
    }

    /// True when an arrived frame is waiting to be consumed.
    pub fn available(&self) -> bool {
        self.arrived_frames > self.delivered_frames
    }

    /// Drain the next in-flight frame.
    pub fn pop(&mut self) -> Option<WireFrame> {
        let f = self.queue.pop_front();
        if f.is_some() {
            self.delivered_frames += 1;
        }
        f
    }

    pub fn peek(&self) -> Option<&WireFrame> {
        self.queue.front()
    }

    /// Return credit to the sender side of this link.
    pub fn grant(&mut self, count: u32) -> Result<(), LinkError> {
        let next = self.credits.saturating_add(count);
        if next > self.capacity {
            return Err(LinkError::CreditOverflow {
                link: self.id,
                granted: next,
                capacity: self.capacity,
            });
        }
        self.credits = next;
        Ok(())
    }

    /// Drop all in-flight frames and restore full credit. Used when a
    /// failed node's traffic is purged before recovery.
    pub fn purge(&mut self) -> usize {
        let n = self.queue.len();
        self.queue.clear();
        self.arrived_frames = self.delivered_frames;
        self.credits = self.capacity;
        n
    }
}

/// Check that every named link can accept one frame right now.
pub fn all_have_credit(links: &[Link], members: &[LinkId]) -> Result<bool, LinkError> {
    for &id in members {
        let link = links
            .iter()
            .find(|l| l.id == id)
            .ok_or(LinkError::UnknownLink(id))?;
        if !link.has_credit() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Deliver one frame to every member link, consuming one credit on each.
/// Fails atomically: if any member lacks credit, no link is touched.
pub fn multicast(
    links: &mut [Link],
    members: &[LinkId],
    frame: &WireFrame,
    rewrite: impl Fn(&WireFrame, LinkId) -> WireFrame,
) -> Result<SendOutcome, LinkError> {
    if !all_have_credit(links, members)? {
        return Ok(SendOutcome::Blocked);
    }
    for &id in members {
        let link = links.iter_mut().find(|l| l.id == id).unwrap();
        let (outcome, _) = link.try_send(rewrite(frame, id));
        debug_assert_eq!(outcome, SendOutcome::Sent);
    }
    Ok(SendOutcome::Sent)
}
