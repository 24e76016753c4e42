use serde::Serialize;

use crate::compiler::{ExecutionGraph, ShardId, ShardKind, TaskNode};
use crate::strategy::DeviceId;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakEvent {
    pub task: String,
    pub time: f64,
    pub shard: String,
}

#[derive(Debug, Clone, Copy, Default)]
struct ShardState {
    allocated: bool,
    freed: bool,
    readers_left: usize,
    writers_left: usize,
}

/// Reference-counted device memory.
#[derive(Debug, Clone)]
pub struct MemoryTracker {
    pub current: Vec<u64>,
    pub peak: Vec<u64>,
    pub peak_event: Vec<Option<PeakEvent>>,
    shards: Vec<ShardState>,
}

impl MemoryTracker {
    /// Persistent shards are resident from the start.
    pub fn new(g: &ExecutionGraph) -> Self {
        let mut m = MemoryTracker {
            current: vec![0; g.n_devices],
            peak: vec![0; g.n_devices],
            peak_event: vec![None; g.n_devices],
            shards: g
                .shards
                .iter()
                .map(|s| ShardState {
                    readers_left: s.readers.len(),
                    writers_left: s.writers.len(),
                    ..Default::default()
                })
                .collect(),
        };
        for s in g.shards.iter().filter(|s| s.kind == ShardKind::Persistent) {
            m.shards[s.id].allocated = true;
            m.current[s.device] += s.bytes;
        }
        for d in 0..g.n_devices {
            m.peak[d] = m.current[d];
        }
        m
    }

    fn alloc(&mut self, g: &ExecutionGraph, s: ShardId, task: &TaskNode, time: f64) {
        let st = &mut self.shards[s];
        if st.allocated || st.freed {
            return;
        }
        st.allocated = true;
        let sh = &g.shards[s];
        let d = sh.device;
        self.current[d] += sh.bytes;
        if self.current[d] > self.peak[d] {
            self.peak[d] = self.current[d];
            self.peak_event[d] = Some(PeakEvent {
                task: task.key.clone(),
                time,
                shard: sh.name.clone(),
            });
        }
    }

    fn release(&mut self, g: &ExecutionGraph, s: ShardId) {
        let sh = &g.shards[s];
        let st = &mut self.shards[s];
        let done = match sh.kind {
            ShardKind::Persistent | ShardKind::Retained => false,
            ShardKind::Transient | ShardKind::Input => st.readers_left == 0 && st.writers_left == 0,
        };
        if done && st.allocated && !st.freed {
            st.freed = true;
            self.current[sh.device] -= sh.bytes;
        }
    }

    /// Allocates written shards, and input shards on their first read.
    pub fn on_dispatch(&mut self, g: &ExecutionGraph, task: &TaskNode, time: f64) {
        for &s in &task.writes {
            self.alloc(g, s, task, time);
        }
        for &s in &task.reads {
            if g.shards[s].kind == ShardKind::Input {
                self.alloc(g, s, task, time);
            }
        }
    }

    /// Drops the task's references and frees shards nobody needs any more.
    pub fn on_complete(&mut self, g: &ExecutionGraph, task: &TaskNode) {
        for &s in &task.reads {
            self.shards[s].readers_left -= 1;
        }
        for &s in &task.writes {
            self.shards[s].writers_left -= 1;
        }
        for &s in task.reads.iter().chain(&task.writes) {
            self.release(g, s);
        }
    }

    pub fn oom(&self, d: DeviceId, capacity: u64) -> bool {
        self.peak[d] > capacity
    }
}
