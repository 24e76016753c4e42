//! Event-driven execution of a compiled graph: per-unit schedulers, per-device
//! compute / feature / gradient streams, link sharing, overlap and memory.

mod engine;
mod memory;
mod scheduler;

use std::fmt::Write as _;

use serde::Serialize;

pub use engine::{simulate, simulate_with};
pub use memory::{MemoryTracker, PeakEvent};
pub use scheduler::{select_next_subgraph, Candidate, SchedulerState};

use crate::compiler::{TaskId, TaskKind};
use crate::strategy::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimOptions {
    /// Overlap factor: overlapped tasks run at (1 + gamma) of their cost.
    pub gamma: f64,
    /// Concurrent groups on a link split its bandwidth.
    pub bandwidth_sharing: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            gamma: 0.0,
            bandwidth_sharing: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Compute,
    Feature,
    Gradient,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Compute, Stream::Feature, Stream::Gradient];

    pub fn of(kind: TaskKind) -> Stream {
        match kind {
            TaskKind::Compute => Stream::Compute,
            TaskKind::FeatureComm => Stream::Feature,
            TaskKind::GradientComm => Stream::Gradient,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Compute => "compute",
            Stream::Feature => "feature_comm",
            Stream::Gradient => "gradient_comm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineEntry {
    pub task: TaskId,
    pub key: String,
    pub kind: TaskKind,
    pub devices: Vec<DeviceId>,
    pub start: f64,
    pub end: f64,
    /// Largest bandwidth share factor applied while the task ran.
    pub share: f64,
    pub overlapped: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BusyTime {
    pub compute: f64,
    pub feature_comm: f64,
    pub gradient_comm: f64,
}

impl BusyTime {
    fn add(&mut self, s: Stream, dt: f64) {
        match s {
            Stream::Compute => self.compute += dt,
            Stream::Feature => self.feature_comm += dt,
            Stream::Gradient => self.gradient_comm += dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceReport {
    pub device: DeviceId,
    pub peak_bytes: u64,
    pub capacity: u64,
    pub oom: bool,
    pub peak_event: Option<PeakEvent>,
    pub persistent_bytes: u64,
    pub final_bytes: u64,
    pub busy: BusyTime,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BehaviorSummary {
    pub gamma: f64,
    /// Comm tasks slowed by link sharing at some point.
    pub shared_comm_tasks: usize,
    pub max_share: f64,
    pub overlapped_compute_tasks: usize,
    pub overlapped_comm_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub model: String,
    pub batch_size: u64,
    pub iteration_time: f64,
    /// Samples per second.
    pub throughput: f64,
    pub oom: bool,
    pub devices: Vec<DeviceReport>,
    pub behaviors: BehaviorSummary,
    pub timeline: Vec<TimelineEntry>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Trace events (complete events, microseconds) for trace viewers.
    pub fn chrome_trace(&self) -> String {
        let mut events = Vec::new();
        for e in &self.timeline {
            let tid = Stream::of(e.kind).as_str();
            for &d in &e.devices {
                events.push(serde_json::json!({
                    "name": e.key,
                    "cat": e.kind.as_str(),
                    "ph": "X",
                    "ts": e.start * 1e6,
                    "dur": (e.end - e.start) * 1e6,
                    "pid": d,
                    "tid": tid,
                    "args": {"share": e.share, "overlapped": e.overlapped},
                }));
            }
        }
        serde_json::to_string(&serde_json::json!({ "traceEvents": events }))
            .expect("trace serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "model {}: iteration {:.6} s, throughput {:.3} samples/s",
            self.model, self.iteration_time, self.throughput
        );
        let _ = writeln!(
            s,
            "{:>6} {:>14} {:>14} {:>5} {:>12} {:>12} {:>12}",
            "device", "peak MiB", "capacity MiB", "oom", "compute s", "feature s", "gradient s"
        );
        for d in &self.devices {
            let _ = writeln!(
                s,
                "{:>6} {:>14.1} {:>14.1} {:>5} {:>12.6} {:>12.6} {:>12.6}",
                d.device,
                d.peak_bytes as f64 / (1 << 20) as f64,
                d.capacity as f64 / (1 << 20) as f64,
                if d.oom { "yes" } else { "no" },
                d.busy.compute,
                d.busy.feature_comm,
                d.busy.gradient_comm
            );
        }
        let b = &self.behaviors;
        let _ = writeln!(
            s,
            "behaviors: {} shared comm tasks (max share {:.2}), {} overlapped compute, {} overlapped comm, gamma {}",
            b.shared_comm_tasks, b.max_share, b.overlapped_compute_tasks, b.overlapped_comm_tasks, b.gamma
        );
        if self.oom {
            let _ = writeln!(s, "OOM predicted");
        }
        s
    }
}
