//! Deterministic discrete-event engine.
//!
//! Events run in `(time, sequence)` order; the sequence number is assigned at
//! scheduling time, so events scheduled for the same instant run first in,
//! first out. Time is integer milliseconds. All randomness comes from one
//! seeded generator owned by the kernel.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{DeviceId, InstanceId, LinkId, NodeId};
use crate::platform::{Ctx, Platform};
use crate::topology::Tier;
use crate::trace::{Details, Trace};
use crate::SimTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("event at {time} ms is before the current clock {now} ms")]
    TimeInPast { time: SimTime, now: SimTime },
    #[error("fault target `{0}` does not exist")]
    UnknownTarget(String),
    #[error("fault duration must be positive")]
    InvalidFault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    LinkDown,
    NodeDown,
    /// Cuts every link incident to a central-cloud node.
    CloudPartition,
}

impl FaultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::LinkDown => "link_down",
            FaultKind::NodeDown => "node_down",
            FaultKind::CloudPartition => "cloud_partition",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub kind: FaultKind,
    /// Link id for `LinkDown`, node id otherwise.
    pub target: String,
    pub start: SimTime,
    pub duration: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Workload {
    Deploy {
        instance: InstanceId,
        app: crate::ids::AppId,
        source: NodeId,
        replicas: u32,
    },
    Scale {
        instance: InstanceId,
        replicas: u32,
    },
    DataRate {
        device: DeviceId,
        kbps: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    Attach {
        device: DeviceId,
        gateway: NodeId,
        model: String,
        os_version: String,
        preferences: BTreeMap<String, String>,
    },
    Detach {
        device: DeviceId,
        gateway: NodeId,
    },
    /// Detach from the current gateway and attach to `gateway`.
    Roam {
        device: DeviceId,
        gateway: NodeId,
    },
    WorkloadChange(Workload),
    SchedulerTick,
    FlowAdvance,
    FaultStart(Fault),
    FaultEnd(Fault),
    MigrationComplete {
        instance: InstanceId,
    },
    Custom {
        name: String,
        details: Details,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: SimTime,
    pub sequence: u64,
    pub kind: EventKind,
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.sequence).cmp(&(other.time, other.sequence))
    }
}

/// Result of a completed run.
#[derive(Debug)]
pub struct Completed {
    pub trace: Trace,
    pub platform: Platform,
    pub clock: SimTime,
}

pub struct Simulation {
    clock: SimTime,
    next_sequence: u64,
    queue: BinaryHeap<Reverse<Event>>,
    platform: Platform,
    trace: Trace,
    rng: ChaCha8Rng,
}

impl Simulation {
    pub fn new(platform: Platform, seed: u64) -> Self {
        Self {
            clock: 0,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            platform,
            trace: Trace::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    pub fn platform_mut(&mut self) -> &mut Platform {
        &mut self.platform
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut Trace {
        &mut self.trace
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, time: SimTime, kind: EventKind) -> Result<u64, KernelError> {
        if time < self.clock {
            return Err(KernelError::TimeInPast {
                time,
                now: self.clock,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Reverse(Event {
            time,
            sequence,
            kind,
        }));
        Ok(sequence)
    }

    /// Schedules the start and end of a fault after checking its target.
    pub fn inject_fault(&mut self, fault: Fault) -> Result<(), KernelError> {
        if fault.duration == 0 {
            return Err(KernelError::InvalidFault);
        }
        let topo = &self.platform.topology;
        let known = match fault.kind {
            FaultKind::LinkDown => topo.contains_link(&LinkId::new(fault.target.as_str())),
            FaultKind::NodeDown => topo.contains_node(&NodeId::new(fault.target.as_str())),
            FaultKind::CloudPartition => topo
                .node(&NodeId::new(fault.target.as_str()))
                .is_ok_and(|n| n.tier == Tier::CentralCloud),
        };
        if !known {
            return Err(KernelError::UnknownTarget(fault.target));
        }
        if fault.start < self.clock {
            return Err(KernelError::TimeInPast {
                time: fault.start,
                now: self.clock,
            });
        }
        let end = fault.start + fault.duration;
        self.schedule(fault.start, EventKind::FaultStart(fault.clone()))?;
        self.schedule(end, EventKind::FaultEnd(fault))?;
        Ok(())
    }

    /// Executes every event with `time <= until`.
    pub fn step_until(&mut self, until: SimTime) {
        while let Some(Reverse(next)) = self.queue.peek() {
            if next.time > until {
                break;
            }
            let Reverse(event) = self.queue.pop().expect("peeked");
            debug_assert!(event.time >= self.clock);
            self.clock = event.time;
            let mut ctx = Ctx::new(self.clock, &mut self.trace);
            self.platform.handle(&mut ctx, event.kind);
            let follow_ups = ctx.into_follow_ups();
            for (time, kind) in follow_ups {
                self.schedule(time, kind)
                    .expect("handlers never schedule into the past");
            }
        }
    }

    pub fn run(mut self, until: SimTime) -> Completed {
        self.step_until(until);
        Completed {
            trace: self.trace,
            platform: self.platform,
            clock: self.clock,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use crate::platform::RunConfig;
    use crate::topology::{Node, Topology};
    use crate::trace::TraceKind;

    fn empty_platform() -> Platform {
        Platform::new(RunConfig::default(), Topology::new(), Catalog::new())
    }

    fn custom(name: &str) -> EventKind {
        EventKind::Custom {
            name: name.into(),
            details: Details::new(),
        }
    }

    #[test]
    fn empty_run_has_empty_trace() {
        let done = Simulation::new(empty_platform(), 1).run(10_000);
        assert!(done.trace.is_empty());
    }

    #[test]
    fn same_time_events_run_fifo() {
        let mut sim = Simulation::new(empty_platform(), 1);
        sim.schedule(5, custom("b")).unwrap();
        sim.schedule(5, custom("c")).unwrap();
        sim.schedule(1, custom("a")).unwrap();
        let done = sim.run(100);
        let names: Vec<_> = done
            .trace
            .of_kind(TraceKind::Custom)
            .map(|r| r.subject.clone())
            .collect();
        assert_eq!(names, ["a", "b", "c"]);
    }

    #[test]
    fn schedule_in_past_is_rejected() {
        let mut sim = Simulation::new(empty_platform(), 1);
        sim.schedule(50, custom("x")).unwrap();
        sim.step_until(50);
        assert_eq!(sim.clock(), 50);
        assert_eq!(
            sim.schedule(10, custom("late")),
            Err(KernelError::TimeInPast { time: 10, now: 50 })
        );
        // Scheduling at `now` is fine and runs on the next step.
        sim.schedule(50, custom("now")).unwrap();
        sim.step_until(50);
        assert_eq!(sim.trace().len(), 2);
    }

    #[test]
    fn events_after_horizon_are_left_queued() {
        let mut sim = Simulation::new(empty_platform(), 1);
        sim.schedule(10, custom("in")).unwrap();
        sim.schedule(11, custom("out")).unwrap();
        sim.step_until(10);
        assert_eq!(sim.trace().len(), 1);
        assert_eq!(sim.pending(), 1);
    }

    #[test]
    fn fault_targets_are_checked() {
        let mut topo = Topology::new();
        topo.add_node(Node::with_default_capacity("cloud", Tier::CentralCloud)).unwrap();
        topo.add_node(Node::with_default_capacity("edge", Tier::EdgeModule)).unwrap();
        let platform = Platform::new(RunConfig::default(), topo, Catalog::new());
        let mut sim = Simulation::new(platform, 1);
        let fault = |kind, target: &str| Fault {
            kind,
            target: target.into(),
            start: 0,
            duration: 60_000,
        };
        assert_eq!(
            sim.inject_fault(fault(FaultKind::LinkDown, "nope")),
            Err(KernelError::UnknownTarget("nope".into()))
        );
        assert_eq!(
            sim.inject_fault(fault(FaultKind::CloudPartition, "edge")),
            Err(KernelError::UnknownTarget("edge".into()))
        );
        assert!(sim.inject_fault(fault(FaultKind::CloudPartition, "cloud")).is_ok());
        assert_eq!(sim.pending(), 2);
        let mut zero = fault(FaultKind::NodeDown, "edge");
        zero.duration = 0;
        assert_eq!(sim.inject_fault(zero), Err(KernelError::InvalidFault));
    }
}
