use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::memory::MemoryTracker;
use super::scheduler::{select_next_subgraph, Candidate, SchedulerState};
use super::{
    BehaviorSummary, BusyTime, DeviceReport, SimOptions, SimReport, Stream, TimelineEntry,
};
use crate::cluster::{ClusterSpec, Link};
use crate::compiler::{ExecutionGraph, SubgraphId, SubgraphPhase, TaskId, TaskKind};
use crate::error::SimError;
use crate::strategy::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq)]
enum InstState {
    Waiting,
    Ready,
    Active,
    Done,
}

#[derive(Debug, Clone, Copy)]
struct Run {
    start: f64,
    seg_start: f64,
    /// Base-cost seconds still to execute.
    remaining: f64,
    stretch: f64,
    share: f64,
    max_share: f64,
    overlapped: bool,
}

impl Run {
    fn end(&self) -> f64 {
        self.seg_start + self.remaining * self.stretch
    }
}

/// Link usage of one comm group, cached per distinct group.
struct GroupLinks {
    links: Vec<(Link, f64)>,
}

pub fn simulate(
    g: &ExecutionGraph,
    cluster: &ClusterSpec,
    gamma: f64,
) -> Result<SimReport, SimError> {
    simulate_with(
        g,
        cluster,
        &SimOptions {
            gamma,
            ..Default::default()
        },
    )
}

pub fn simulate_with(
    g: &ExecutionGraph,
    cluster: &ClusterSpec,
    opts: &SimOptions,
) -> Result<SimReport, SimError> {
    if !(opts.gamma >= 0.0 && opts.gamma.is_finite()) {
        return Err(SimError::BadGamma(opts.gamma));
    }
    if let Some(t) = g.tasks.iter().find(|t| t.duration.is_none()) {
        return Err(SimError::Unannotated(t.id));
    }
    Engine::new(g, cluster, opts).run()
}

struct Engine<'a> {
    g: &'a ExecutionGraph,
    cluster: &'a ClusterSpec,
    opts: SimOptions,
    now: f64,
    task_left: Vec<usize>,
    task_succ: Vec<Vec<TaskId>>,
    task_done: Vec<bool>,
    inst_left: Vec<usize>,
    inst_tasks_left: Vec<usize>,
    inst_succ: Vec<Vec<SubgraphId>>,
    inst_state: Vec<InstState>,
    sched: Vec<SchedulerState>,
    /// One queue per (device, stream), ordered by (ready time, task id).
    queues: Vec<BTreeSet<(u64, TaskId)>>,
    slots: Vec<Option<TaskId>>,
    running: BTreeMap<TaskId, Run>,
    links: HashMap<Vec<DeviceId>, GroupLinks>,
    mem: MemoryTracker,
    busy: Vec<BusyTime>,
    timeline: Vec<TimelineEntry>,
    done: usize,
}

fn slot(d: DeviceId, s: Stream) -> usize {
    d * 3 + s as usize
}

impl<'a> Engine<'a> {
    fn new(g: &'a ExecutionGraph, cluster: &'a ClusterSpec, opts: &SimOptions) -> Self {
        let nt = g.tasks.len();
        let ns = g.subgraphs.len();
        let mut task_succ = vec![Vec::new(); nt];
        for t in &g.tasks {
            for &p in &t.preds {
                task_succ[p].push(t.id);
            }
        }
        let mut inst_succ = vec![Vec::new(); ns];
        let mut inst_left = vec![0; ns];
        for s in &g.subgraphs {
            let preds: BTreeSet<SubgraphId> = s
                .data_preds
                .iter()
                .chain(&s.control_preds)
                .copied()
                .collect();
            inst_left[s.id] = preds.len();
            for p in preds {
                inst_succ[p].push(s.id);
            }
        }
        let n_dev = g.n_devices.max(cluster.n_devices());
        Engine {
            g,
            cluster,
            opts: *opts,
            now: 0.0,
            task_left: g.tasks.iter().map(|t| t.preds.len()).collect(),
            task_succ,
            task_done: vec![false; nt],
            inst_left,
            inst_tasks_left: g.subgraphs.iter().map(|s| s.tasks.len()).collect(),
            inst_succ,
            inst_state: vec![InstState::Waiting; ns],
            sched: g
                .units
                .iter()
                .map(|u| SchedulerState {
                    unit: u.id,
                    ..Default::default()
                })
                .collect(),
            queues: vec![BTreeSet::new(); n_dev * 3],
            slots: vec![None; n_dev * 3],
            running: BTreeMap::new(),
            links: HashMap::new(),
            mem: MemoryTracker::new(g),
            busy: vec![BusyTime::default(); n_dev],
            timeline: Vec::new(),
            done: 0,
        }
    }

    fn run(mut self) -> Result<SimReport, SimError> {
        for s in 0..self.g.subgraphs.len() {
            if self.inst_left[s] == 0 {
                self.inst_state[s] = InstState::Ready;
            }
        }
        loop {
            self.schedule();
            self.dispatch();
            self.restretch();
            if self.running.is_empty() {
                if self.done == self.g.tasks.len() {
                    break;
                }
                return Err(self.deadlock());
            }
            let next = self
                .running
                .values()
                .map(|r| r.end())
                .fold(f64::INFINITY, f64::min);
            self.advance(next);
        }
        Ok(self.report())
    }

    fn schedule(&mut self) {
        for u in 0..self.sched.len() {
            if self.sched[u].active.is_some() {
                continue;
            }
            let cands: Vec<Candidate> = self
                .g
                .subgraphs
                .iter()
                .filter(|s| s.unit == u && self.inst_state[s.id] == InstState::Ready)
                .map(|s| Candidate {
                    id: s.id,
                    phase: s.phase,
                    origin: s.origin,
                    micro_batch: s.micro_batch,
                    enables_backward: s.phase == SubgraphPhase::Forward
                        && self.inst_succ[s.id].iter().any(|&x| {
                            self.g.subgraphs[x].phase != SubgraphPhase::Forward
                                && self.inst_left[x] == 1
                        }),
                })
                .collect();
            let Some(pick) = select_next_subgraph(&self.sched[u], &cands) else {
                continue;
            };
            let sg = &self.g.subgraphs[pick];
            if sg.phase != SubgraphPhase::Forward {
                self.sched[u].last_backward_origin = Some(sg.origin);
            }
            self.sched[u].active = Some(pick);
            self.inst_state[pick] = InstState::Active;
            for &t in &sg.tasks {
                if self.task_left[t] == 0 {
                    self.enqueue(t);
                }
            }
        }
    }

    fn enqueue(&mut self, t: TaskId) {
        let task = &self.g.tasks[t];
        let s = Stream::of(task.kind);
        for &d in &task.devices {
            self.queues[slot(d, s)].insert((self.now.to_bits(), t));
        }
    }

    fn dispatch(&mut self) {
        loop {
            let mut progress = false;
            for q in 0..self.queues.len() {
                if self.slots[q].is_some() {
                    continue;
                }
                let Some(&(_, t)) = self.queues[q].first() else {
                    continue;
                };
                let task = &self.g.tasks[t];
                let s = Stream::of(task.kind);
                let ok = task.devices.iter().all(|&d| {
                    let i = slot(d, s);
                    self.slots[i].is_none() && self.queues[i].first().map(|x| x.1) == Some(t)
                });
                if !ok {
                    continue;
                }
                for &d in &task.devices {
                    let i = slot(d, s);
                    self.queues[i].pop_first();
                    self.slots[i] = Some(t);
                }
                self.mem.on_dispatch(self.g, task, self.now);
                self.running.insert(
                    t,
                    Run {
                        start: self.now,
                        seg_start: self.now,
                        remaining: task.duration.unwrap_or(0.0),
                        stretch: f64::NAN,
                        share: 1.0,
                        max_share: 1.0,
                        overlapped: false,
                    },
                );
                progress = true;
            }
            if !progress {
                break;
            }
        }
    }

    fn group_links(&mut self, devices: &[DeviceId]) -> &GroupLinks {
        if !self.links.contains_key(devices) {
            let links = self.cluster.group_links(devices);
            let agg = links
                .iter()
                .map(|&l| self.cluster.link_capacity(l))
                .fold(f64::INFINITY, f64::min);
            let gl = GroupLinks {
                links: links
                    .into_iter()
                    .map(|l| (l, agg / self.cluster.link_capacity(l)))
                    .collect(),
            };
            self.links.insert(devices.to_vec(), gl);
        }
        &self.links[devices]
    }

    /// Recomputes share and overlap factors; a task whose factor changed
    /// banks its progress so far and continues at the new rate.
    fn restretch(&mut self) {
        let ids: Vec<TaskId> = self.running.keys().copied().collect();
        let mut shares: HashMap<TaskId, f64> = HashMap::new();
        if self.opts.bandwidth_sharing {
            let comm: Vec<TaskId> = ids
                .iter()
                .copied()
                .filter(|&t| self.g.tasks[t].kind.is_comm())
                .collect();
            let mut count: HashMap<Link, u32> = HashMap::new();
            for &t in &comm {
                let devs = self.g.tasks[t].devices.clone();
                for &(l, _) in &self.group_links(&devs).links {
                    *count.entry(l).or_default() += 1;
                }
            }
            for &t in &comm {
                let devs = self.g.tasks[t].devices.clone();
                let s = self
                    .group_links(&devs)
                    .links
                    .iter()
                    .map(|&(l, ratio)| count[&l] as f64 * ratio)
                    .fold(1.0, f64::max);
                shares.insert(t, s);
            }
        }
        let mut grad_on = BTreeSet::new();
        let mut comp_on = BTreeSet::new();
        for &t in &ids {
            let task = &self.g.tasks[t];
            match task.kind {
                TaskKind::Compute => comp_on.extend(task.devices.iter().copied()),
                TaskKind::GradientComm => grad_on.extend(task.devices.iter().copied()),
                TaskKind::FeatureComm => {}
            }
        }
        let now = self.now;
        let gamma = self.opts.gamma;
        for t in ids {
            let task = &self.g.tasks[t];
            let r = self.running.get_mut(&t).unwrap();
            let hit = match task.kind {
                TaskKind::Compute => task.devices.iter().any(|d| grad_on.contains(d)),
                TaskKind::GradientComm => task.devices.iter().any(|d| comp_on.contains(d)),
                TaskKind::FeatureComm => false,
            };
            r.overlapped |= hit;
            r.share = shares.get(&t).copied().unwrap_or(1.0);
            r.max_share = r.max_share.max(r.share);
            let stretch = r.share * if r.overlapped { 1.0 + gamma } else { 1.0 };
            if stretch != r.stretch {
                if !r.stretch.is_nan() {
                    r.remaining -= (now - r.seg_start) / r.stretch;
                    r.remaining = r.remaining.max(0.0);
                }
                r.seg_start = now;
                r.stretch = stretch;
            }
        }
    }

    fn advance(&mut self, next: f64) {
        self.now = next;
        let finished: Vec<TaskId> = self
            .running
            .iter()
            .filter(|(_, r)| r.end() == next)
            .map(|(&t, _)| t)
            .collect();
        for t in finished {
            let r = self.running.remove(&t).unwrap();
            let task = &self.g.tasks[t];
            let s = Stream::of(task.kind);
            for &d in &task.devices {
                self.slots[slot(d, s)] = None;
                self.busy[d].add(s, next - r.start);
            }
            self.mem.on_complete(self.g, task);
            self.timeline.push(TimelineEntry {
                task: t,
                key: task.key.clone(),
                kind: task.kind,
                devices: task.devices.clone(),
                start: r.start,
                end: next,
                share: r.max_share,
                overlapped: r.overlapped,
            });
            self.task_done[t] = true;
            self.done += 1;
            for i in 0..self.task_succ[t].len() {
                let x = self.task_succ[t][i];
                self.task_left[x] -= 1;
                if self.task_left[x] == 0
                    && self.inst_state[self.g.tasks[x].subgraph] == InstState::Active
                {
                    self.enqueue(x);
                }
            }
            let sg = task.subgraph;
            self.inst_tasks_left[sg] -= 1;
            if self.inst_tasks_left[sg] == 0 {
                self.inst_state[sg] = InstState::Done;
                let u = self.g.subgraphs[sg].unit;
                if self.sched[u].active == Some(sg) {
                    self.sched[u].active = None;
                }
                for i in 0..self.inst_succ[sg].len() {
                    let x = self.inst_succ[sg][i];
                    self.inst_left[x] -= 1;
                    if self.inst_left[x] == 0 {
                        self.inst_state[x] = InstState::Ready;
                    }
                }
            }
        }
    }

    fn deadlock(&self) -> SimError {
        let mut frontier = Vec::new();
        for s in &self.g.subgraphs {
            if self.inst_state[s.id] == InstState::Done {
                continue;
            }
            let waiting: Vec<String> = s
                .data_preds
                .iter()
                .chain(&s.control_preds)
                .filter(|&&p| self.inst_state[p] != InstState::Done)
                .map(|p| p.to_string())
                .collect();
            frontier.push(format!(
                "{:?} unit {} block {} mb {} ({:?}, waiting on {:?})",
                s.phase, s.unit, s.block, s.micro_batch, self.inst_state[s.id], waiting
            ));
            if frontier.len() == 8 {
                break;
            }
        }
        SimError::Deadlock {
            time: self.now,
            frontier,
        }
    }

    fn report(self) -> SimReport {
        let g = self.g;
        let iteration_time = self.timeline.iter().map(|e| e.end).fold(0.0, f64::max);
        let persistent = g.persistent_bytes();
        let cap = self.cluster.device_memory;
        let devices: Vec<DeviceReport> = (0..g.n_devices)
            .map(|d| DeviceReport {
                device: d,
                peak_bytes: self.mem.peak[d],
                capacity: cap,
                oom: self.mem.oom(d, cap),
                peak_event: self.mem.peak_event[d].clone(),
                persistent_bytes: persistent[d],
                final_bytes: self.mem.current[d],
                busy: self.busy[d],
            })
            .collect();
        let mut b = BehaviorSummary {
            gamma: self.opts.gamma,
            max_share: 1.0,
            ..Default::default()
        };
        for e in &self.timeline {
            if e.share > 1.0 {
                b.shared_comm_tasks += 1;
            }
            b.max_share = b.max_share.max(e.share);
            if e.overlapped {
                if e.kind == TaskKind::Compute {
                    b.overlapped_compute_tasks += 1;
                } else {
                    b.overlapped_comm_tasks += 1;
                }
            }
        }
        let mut timeline = self.timeline;
        timeline.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.task.cmp(&b.task)));
        SimReport {
            model: g.model.clone(),
            batch_size: g.batch_size,
            iteration_time,
            throughput: if iteration_time > 0.0 {
                g.batch_size as f64 / iteration_time
            } else {
                f64::INFINITY
            },
            oom: devices.iter().any(|d| d.oom),
            devices,
            behaviors: b,
            timeline,
        }
    }
}
