//! Seat and lease bookkeeping for annotation slots.
//!
//! Every task has `annotators_per_task` seats. An annotator claims a seat the
//! first time they are served the task and owns both of its display-order
//! slots. All AB slots an annotator can take are served before any BA slot,
//! so the two views of one task are separated by the rest of the queue.
//! Times are milliseconds since the Unix epoch and are passed in by the caller.

use std::collections::HashMap;

use facepref::prefdata::{decide_task, Choice, ComparisonTask, Decision, DisplayOrder, Vote};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Slot {
    Pending,
    Leased { expires_ms: u64 },
    Complete,
}

#[derive(Debug, Clone)]
struct Seat {
    owner: Option<String>,
    slots: [Slot; 2],
}

impl Seat {
    fn empty() -> Self {
        Self {
            owner: None,
            slots: [Slot::Pending, Slot::Pending],
        }
    }

    fn any_complete(&self) -> bool {
        self.slots.contains(&Slot::Complete)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Lease {
    task: usize,
    seat: usize,
    order: DisplayOrder,
    expires_ms: u64,
}

/// A leased slot as handed to an annotator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub task_id: String,
    pub annotator_id: String,
    pub display_order: DisplayOrder,
    pub lease_expiry_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueueError {
    /// The annotator already holds an unexpired lease.
    LeaseHeld(Assignment),
    UnknownTask(String),
    /// No active lease matches the submitted vote.
    NoLease,
    /// The slot the vote refers to was already closed by a recorded vote.
    AlreadyRecorded,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub pending: usize,
    pub leased: usize,
    pub complete: usize,
    pub consistent: usize,
    pub inconsistent: usize,
}

#[derive(Debug, Clone)]
pub struct Queue {
    tasks: Vec<ComparisonTask>,
    index: HashMap<String, usize>,
    seats: Vec<Vec<Seat>>,
    votes: Vec<Vec<Vote>>,
    active: HashMap<String, Lease>,
    lease_ms: u64,
    annotators: usize,
}

fn order_slot(order: DisplayOrder) -> usize {
    match order {
        DisplayOrder::AB => 0,
        DisplayOrder::BA => 1,
    }
}

impl Queue {
    pub fn new(tasks: Vec<ComparisonTask>, annotators_per_task: usize, lease_ms: u64) -> Self {
        let index = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.task_id.clone(), i))
            .collect();
        let seats = vec![vec![Seat::empty(); annotators_per_task]; tasks.len()];
        let votes = vec![Vec::new(); tasks.len()];
        Self {
            tasks,
            index,
            seats,
            votes,
            active: HashMap::new(),
            lease_ms,
            annotators: annotators_per_task,
        }
    }

    pub fn task(&self, task_id: &str) -> Option<&ComparisonTask> {
        self.index.get(task_id).map(|&i| &self.tasks[i])
    }

    pub fn tasks(&self) -> &[ComparisonTask] {
        &self.tasks
    }

    pub fn slot_count(&self) -> usize {
        self.tasks.len() * self.annotators * 2
    }

    fn seat_of(&self, task: usize, annotator: &str) -> Option<usize> {
        self.seats[task]
            .iter()
            .position(|s| s.owner.as_deref() == Some(annotator))
    }

    /// Returns expired leases to the queue. A seat whose slots are all still
    /// open is released so another annotator can take it.
    pub fn expire(&mut self, now_ms: u64) {
        let expired: Vec<(String, Lease)> = self
            .active
            .iter()
            .filter(|(_, l)| l.expires_ms <= now_ms)
            .map(|(a, l)| (a.clone(), *l))
            .collect();
        for (annotator, lease) in expired {
            self.active.remove(&annotator);
            let seat = &mut self.seats[lease.task][lease.seat];
            seat.slots[order_slot(lease.order)] = Slot::Pending;
            if !seat.any_complete() {
                seat.owner = None;
            }
        }
    }

    fn assignment(&self, annotator: &str, lease: &Lease) -> Assignment {
        Assignment {
            task_id: self.tasks[lease.task].task_id.clone(),
            annotator_id: annotator.to_string(),
            display_order: lease.order,
            lease_expiry_ms: lease.expires_ms,
        }
    }

    fn lease(&mut self, annotator: &str, task: usize, seat: usize, order: DisplayOrder, now_ms: u64) -> Assignment {
        let expires_ms = now_ms.saturating_add(self.lease_ms);
        let s = &mut self.seats[task][seat];
        s.owner = Some(annotator.to_string());
        s.slots[order_slot(order)] = Slot::Leased { expires_ms };
        let lease = Lease {
            task,
            seat,
            order,
            expires_ms,
        };
        self.active.insert(annotator.to_string(), lease);
        self.assignment(annotator, &lease)
    }

    /// Leases the next slot for `annotator`, or `None` when nothing is left for them.
    pub fn next(&mut self, annotator: &str, now_ms: u64) -> Result<Option<Assignment>, QueueError> {
        self.expire(now_ms);
        if let Some(lease) = self.active.get(annotator) {
            return Err(QueueError::LeaseHeld(self.assignment(annotator, lease)));
        }
        for t in 0..self.tasks.len() {
            let seat = match self.seat_of(t, annotator) {
                Some(s) if self.seats[t][s].slots[0] == Slot::Pending => Some(s),
                Some(_) => None,
                None => self.seats[t].iter().position(|s| s.owner.is_none()),
            };
            if let Some(s) = seat {
                return Ok(Some(self.lease(annotator, t, s, DisplayOrder::AB, now_ms)));
            }
        }
        for t in 0..self.tasks.len() {
            if let Some(s) = self.seat_of(t, annotator) {
                let slots = &self.seats[t][s].slots;
                if slots[0] == Slot::Complete && slots[1] == Slot::Pending {
                    return Ok(Some(self.lease(annotator, t, s, DisplayOrder::BA, now_ms)));
                }
            }
        }
        Ok(None)
    }

    /// Resolves a submitted choice against the annotator's active lease. The
    /// display order comes from the lease; `order_hint` only disambiguates replays.
    pub fn resolve_vote(
        &mut self,
        task_id: &str,
        annotator: &str,
        choice: Choice,
        order_hint: Option<DisplayOrder>,
        now_ms: u64,
    ) -> Result<Vote, QueueError> {
        self.expire(now_ms);
        let task = *self
            .index
            .get(task_id)
            .ok_or_else(|| QueueError::UnknownTask(task_id.to_string()))?;
        if let Some(lease) = self.active.get(annotator) {
            if lease.task == task && order_hint.is_none_or(|o| o == lease.order) {
                return Ok(Vote {
                    task_id: task_id.to_string(),
                    annotator_id: annotator.to_string(),
                    choice,
                    display_order: lease.order,
                    timestamp: now_ms,
                });
            }
        }
        let closed = self.seat_of(task, annotator).is_some_and(|s| {
            let slots = &self.seats[task][s].slots;
            match order_hint {
                Some(o) => slots[order_slot(o)] == Slot::Complete,
                None => slots.contains(&Slot::Complete),
            }
        });
        Err(if closed {
            QueueError::AlreadyRecorded
        } else {
            QueueError::NoLease
        })
    }

    /// Closes the lease a resolved vote belongs to. Call after the vote is persisted.
    pub fn commit(&mut self, vote: Vote) {
        if let Some(lease) = self.active.remove(&vote.annotator_id) {
            self.seats[lease.task][lease.seat].slots[order_slot(lease.order)] = Slot::Complete;
            self.votes[lease.task].push(vote);
        }
    }

    /// Replays a vote from the log. Returns false for votes that do not fit
    /// the queue: unknown task, no free seat, or a slot already closed.
    pub fn restore(&mut self, vote: Vote) -> bool {
        let Some(&task) = self.index.get(&vote.task_id) else {
            return false;
        };
        let seat = self
            .seat_of(task, &vote.annotator_id)
            .or_else(|| self.seats[task].iter().position(|s| s.owner.is_none()));
        let Some(seat) = seat else {
            return false;
        };
        let s = &mut self.seats[task][seat];
        let slot = &mut s.slots[order_slot(vote.display_order)];
        if *slot == Slot::Complete {
            return false;
        }
        *slot = Slot::Complete;
        s.owner = Some(vote.annotator_id.clone());
        self.votes[task].push(vote);
        true
    }

    /// Slot counts plus consistency of every fully voted task. Leases past
    /// their expiry count as pending.
    pub fn progress(&self, now_ms: u64) -> Progress {
        let mut p = Progress::default();
        for (t, seats) in self.seats.iter().enumerate() {
            for slot in seats.iter().flat_map(|s| s.slots.iter()) {
                match slot {
                    Slot::Complete => p.complete += 1,
                    Slot::Leased { expires_ms } if *expires_ms > now_ms => p.leased += 1,
                    _ => p.pending += 1,
                }
            }
            if self.votes[t].len() == self.annotators * 2 {
                let refs: Vec<&Vote> = self.votes[t].iter().collect();
                match decide_task(&self.tasks[t], &refs, self.annotators) {
                    Ok(Decision::Inconsistent) => p.inconsistent += 1,
                    Ok(_) => p.consistent += 1,
                    Err(_) => {}
                }
            }
        }
        p
    }
}
