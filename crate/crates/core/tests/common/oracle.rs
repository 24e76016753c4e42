//! Reference implementations the simulator and transform inference are checked against.

use std::collections::{BTreeSet, HashMap};

use stratsim::compiler::{ExecutionGraph, TaskKind};
use stratsim::layout::{CommPlan, PlacementLayout, Region, StepDetail};

fn stream(k: TaskKind) -> usize {
    match k {
        TaskKind::Compute => 0,
        TaskKind::FeatureComm => 1,
        TaskKind::GradientComm => 2,
    }
}

/// One task as the list scheduler sees it.
struct Job {
    res: Vec<(usize, usize)>,
    dur: f64,
    preds: BTreeSet<usize>,
}

/// Greedy list scheduling over (device, stream) resources.
///
/// At every decision time the unstarted tasks whose predecessors have all
/// finished are ranked by (ready time, id). Walking that ranking, a task
/// starts iff every resource it needs is idle and not wanted by a
/// higher-ranked ready task.
fn list_run(jobs: &[Job]) -> f64 {
    let n = jobs.len();
    let mut finish: Vec<Option<f64>> = vec![None; n];
    let mut busy_until: HashMap<(usize, usize), f64> = HashMap::new();
    let mut now = 0.0f64;
    let mut started = 0;
    while started < n {
        let mut ready: Vec<(f64, usize)> = (0..n)
            .filter(|&t| finish[t].is_none())
            .filter_map(|t| {
                let mut r = 0.0f64;
                for &p in &jobs[t].preds {
                    match finish[p] {
                        Some(f) if f <= now => r = r.max(f),
                        _ => return None,
                    }
                }
                Some((r, t))
            })
            .collect();
        ready.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut wanted: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut instant = false;
        for &(_, t) in &ready {
            let res = &jobs[t].res;
            let free = res
                .iter()
                .all(|r| !wanted.contains(r) && busy_until.get(r).is_none_or(|&u| u <= now));
            if free {
                let end = now + jobs[t].dur;
                instant |= end == now;
                finish[t] = Some(end);
                started += 1;
                for r in res {
                    busy_until.insert(*r, end);
                }
            }
            wanted.extend(res.iter().copied());
        }
        if instant {
            // zero-length tasks release successors at the same instant
            continue;
        }
        let next = finish
            .iter()
            .flatten()
            .copied()
            .filter(|&f| f > now)
            .fold(f64::INFINITY, f64::min);
        if next.is_infinite() {
            assert!(started == n, "oracle stuck at {now}");
            break;
        }
        now = next;
    }
    finish.iter().flatten().copied().fold(0.0, f64::max)
}

fn jobs_of(g: &ExecutionGraph, tasks: &[usize]) -> Vec<Job> {
    let index: HashMap<usize, usize> = tasks.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    tasks
        .iter()
        .map(|&t| {
            let task = &g.tasks[t];
            Job {
                res: task.devices.iter().map(|&d| (d, stream(task.kind))).collect(),
                dur: task.duration.expect("annotated"),
                preds: task.preds.iter().filter_map(|p| index.get(p).copied()).collect(),
            }
        })
        .collect()
}

/// List schedule of the whole graph. With `barriers`, a task also waits for
/// every task of its instance's data and control predecessor instances.
pub fn list_schedule(g: &ExecutionGraph, barriers: bool) -> f64 {
    let all: Vec<usize> = (0..g.tasks.len()).collect();
    let mut jobs = jobs_of(g, &all);
    if barriers {
        for t in &g.tasks {
            let s = &g.subgraphs[t.subgraph];
            for &p in s.data_preds.iter().chain(&s.control_preds) {
                jobs[t.id].preds.extend(g.subgraphs[p].tasks.iter().copied());
            }
        }
    }
    list_run(&jobs)
}

/// A job on one exclusive machine.
#[derive(Clone)]
pub struct Block {
    pub machine: usize,
    pub dur: f64,
    pub preds: Vec<usize>,
}

/// Exact minimum makespan of `blocks` with precedences, each machine running
/// one block at a time. Branch and bound over active schedules: at every
/// node the machine of the earliest-completing ready block branches over its
/// ready blocks that could start before that completion.
pub fn block_optimum(blocks: &[Block]) -> f64 {
    let n = blocks.len();
    let n_mach = blocks.iter().map(|b| b.machine + 1).max().unwrap_or(0);
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, b) in blocks.iter().enumerate() {
        for &p in &b.preds {
            succs[p].push(i);
        }
    }
    // topological order, then the longest chain after each block
    let mut indeg: Vec<usize> = blocks.iter().map(|b| b.preds.len()).collect();
    let mut topo: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut k = 0;
    while k < topo.len() {
        for &s in &succs[topo[k]] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                topo.push(s);
            }
        }
        k += 1;
    }
    assert_eq!(topo.len(), n, "block graph has a cycle");
    let mut tail = vec![0.0f64; n];
    for &i in topo.iter().rev() {
        tail[i] = succs[i]
            .iter()
            .map(|&s| blocks[s].dur + tail[s])
            .fold(0.0, f64::max);
    }

    struct Search<'a> {
        blocks: &'a [Block],
        topo: &'a [usize],
        tail: &'a [f64],
        n_mach: usize,
        best: f64,
        nodes: u64,
    }
    impl Search<'_> {
        fn bound(&self, end: &[Option<f64>], avail: &[f64]) -> f64 {
            let mut lb = end.iter().flatten().copied().fold(0.0, f64::max);
            let mut est = vec![0.0f64; self.blocks.len()];
            for &t in self.topo {
                if end[t].is_some() {
                    continue;
                }
                let b = &self.blocks[t];
                let mut e = avail[b.machine];
                for &q in &b.preds {
                    e = e.max(match end[q] {
                        Some(x) => x,
                        None => est[q] + self.blocks[q].dur,
                    });
                }
                est[t] = e;
                lb = lb.max(e + b.dur + self.tail[t]);
            }
            for m in 0..self.n_mach {
                let mut head = f64::INFINITY;
                let mut work = 0.0;
                let mut tl = f64::INFINITY;
                for t in 0..self.blocks.len() {
                    if end[t].is_none() && self.blocks[t].machine == m {
                        head = head.min(est[t]);
                        work += self.blocks[t].dur;
                        tl = tl.min(self.tail[t]);
                    }
                }
                if head.is_finite() {
                    lb = lb.max(head + work + tl);
                }
            }
            lb
        }

        fn dfs(&mut self, end: &mut Vec<Option<f64>>, avail: &mut Vec<f64>, left: usize) {
            self.nodes += 1;
            assert!(self.nodes < 5_000_000, "block oracle search exploded");
            if left == 0 {
                let mk = end.iter().flatten().copied().fold(0.0, f64::max);
                self.best = self.best.min(mk);
                return;
            }
            if self.bound(end, avail) >= self.best {
                return;
            }
            let ready: Vec<(f64, usize)> = (0..self.blocks.len())
                .filter(|&t| end[t].is_none() && self.blocks[t].preds.iter().all(|&q| end[q].is_some()))
                .map(|t| {
                    let b = &self.blocks[t];
                    let r = b.preds.iter().map(|&q| end[q].unwrap()).fold(avail[b.machine], f64::max);
                    (r, t)
                })
                .collect();
            let (c_star, m_star) = ready
                .iter()
                .map(|&(r, t)| (r + self.blocks[t].dur, self.blocks[t].machine))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap();
            let mut cand: Vec<(f64, usize)> = ready
                .into_iter()
                .filter(|&(r, t)| self.blocks[t].machine == m_star && r < c_star)
                .collect();
            // longest remaining chain first finds good schedules early
            cand.sort_by(|a, b| {
                (self.tail[b.1] + self.blocks[b.1].dur)
                    .total_cmp(&(self.tail[a.1] + self.blocks[a.1].dur))
                    .then(a.0.total_cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
            for (start, t) in cand {
                let m = self.blocks[t].machine;
                let saved = avail[m];
                let e = start + self.blocks[t].dur;
                end[t] = Some(e);
                avail[m] = e;
                self.dfs(end, avail, left - 1);
                end[t] = None;
                avail[m] = saved;
            }
        }
    }

    let mut s = Search {
        blocks,
        topo: &topo,
        tail: &tail,
        n_mach,
        best: f64::INFINITY,
        nodes: 0,
    };
    s.dfs(&mut vec![None; n], &mut vec![0.0; n_mach], n);
    s.best
}

/// Exact minimum makespan of a `p`-stage, `m` micro-batch pipeline where
/// stage `s` runs F(s,k) then later B(s,k) on device `s`.
pub fn pipeline_optimum(p: usize, m: usize, tf: f64, tb: f64) -> f64 {
    let id = |fwd: bool, s: usize, k: usize| (if fwd { 0 } else { p * m }) + s * m + k;
    let mut blocks = vec![
        Block {
            machine: 0,
            dur: 0.0,
            preds: Vec::new()
        };
        2 * p * m
    ];
    for s in 0..p {
        for k in 0..m {
            let f = id(true, s, k);
            let b = id(false, s, k);
            blocks[f] = Block {
                machine: s,
                dur: tf,
                preds: if s > 0 { vec![id(true, s - 1, k)] } else { Vec::new() },
            };
            blocks[b] = Block {
                machine: s,
                dur: tb,
                preds: vec![if s + 1 < p { id(false, s + 1, k) } else { f }],
            };
        }
    }
    block_optimum(&blocks)
}

/// Best makespan over every order in which the stage units may run their
/// instances, one at a time, with each instance taking its isolated
/// list-scheduled makespan.
pub fn instance_optimum(g: &ExecutionGraph) -> f64 {
    let blocks: Vec<Block> = g
        .subgraphs
        .iter()
        .map(|s| Block {
            machine: s.unit,
            dur: list_run(&jobs_of(g, &s.tasks)),
            preds: s.data_preds.iter().chain(&s.control_preds).copied().collect::<BTreeSet<_>>().into_iter().collect(),
        })
        .collect();
    block_optimum(&blocks)
}

/// Replays a plan element by element. Each device cell holds the set of
/// partial contributions summed into it; a cell is complete when it holds all.
pub fn replay_plan(src: &PlacementLayout, dst: &PlacementLayout, plan: &CommPlan) -> bool {
    let ext = &src.extents;
    let keys: BTreeSet<u32> = (0..src.partial_keys).collect();
    let elems = |r: &Region| -> Vec<usize> {
        let mut out = vec![0usize];
        for (d, &(a, b)) in r.0.iter().enumerate() {
            out = out
                .iter()
                .flat_map(|&base| (a..b).map(move |i| base * ext[d] as usize + i as usize))
                .collect();
        }
        out
    };
    let mut st: HashMap<(usize, usize), BTreeSet<u32>> = HashMap::new();
    for h in &src.holdings {
        let add: BTreeSet<u32> = match h.partial {
            Some(k) => [k].into(),
            None => keys.clone(),
        };
        for e in elems(&h.region) {
            st.entry((h.device, e))
                .or_default()
                .extend(add.iter().copied());
        }
    }
    let complete = |st: &HashMap<(usize, usize), BTreeSet<u32>>, d: usize, r: &Region| {
        elems(r).iter().all(|&e| st.get(&(d, e)) == Some(&keys))
    };
    let reduce = |st: &HashMap<(usize, usize), BTreeSet<u32>>,
                  group: &[usize],
                  e: usize|
     -> Option<BTreeSet<u32>> {
        let mut u = BTreeSet::new();
        for &d in group {
            let s = st.get(&(d, e))?;
            if s.is_empty() || !s.is_disjoint(&u) {
                return None;
            }
            u.extend(s.iter().copied());
        }
        Some(u)
    };
    for step in &plan.steps {
        let g = &step.group;
        if g.len() < 2 || g.iter().collect::<BTreeSet<_>>().len() != g.len() {
            return false;
        }
        match &step.detail {
            StepDetail::AllReduce { region } => {
                for e in elems(region) {
                    let Some(u) = reduce(&st, g, e) else {
                        return false;
                    };
                    for &d in g {
                        st.insert((d, e), u.clone());
                    }
                }
            }
            StepDetail::ReduceScatter { region, chunks } => {
                if chunks.len() != g.len() {
                    return false;
                }
                let all: Vec<usize> = elems(region);
                let mut owner: HashMap<usize, usize> = HashMap::new();
                for (i, c) in chunks.iter().enumerate() {
                    for e in elems(c) {
                        if owner.insert(e, i).is_some() {
                            return false;
                        }
                    }
                }
                if owner.len() != all.len() || all.iter().any(|e| !owner.contains_key(e)) {
                    return false;
                }
                for e in all {
                    let Some(u) = reduce(&st, g, e) else {
                        return false;
                    };
                    for (i, &d) in g.iter().enumerate() {
                        if owner[&e] == i {
                            st.insert((d, e), u.clone());
                        } else {
                            st.remove(&(d, e));
                        }
                    }
                }
            }
            StepDetail::AllGather { pieces } => {
                if pieces.len() != g.len()
                    || pieces.iter().zip(g).any(|(r, &d)| !complete(&st, d, r))
                {
                    return false;
                }
                for r in pieces {
                    for e in elems(r) {
                        for &d in g {
                            st.insert((d, e), keys.clone());
                        }
                    }
                }
            }
            StepDetail::AllToAll { sends } => {
                for (i, j, r) in sends {
                    if *i >= g.len() || *j >= g.len() || !complete(&st, g[*i], r) {
                        return false;
                    }
                }
                for (_, j, r) in sends {
                    for e in elems(r) {
                        st.insert((g[*j], e), keys.clone());
                    }
                }
            }
            StepDetail::Broadcast { root, region } => {
                if !g.contains(root) || !complete(&st, *root, region) {
                    return false;
                }
                for e in elems(region) {
                    for &d in g {
                        st.insert((d, e), keys.clone());
                    }
                }
            }
            StepDetail::SendRecv { region } => {
                if g.len() != 2 || !complete(&st, g[0], region) {
                    return false;
                }
                for e in elems(region) {
                    st.insert((g[1], e), keys.clone());
                }
            }
        }
    }
    dst.holdings.iter().all(|h| {
        let want: BTreeSet<u32> = match h.partial {
            Some(k) => [k].into(),
            None => keys.clone(),
        };
        elems(&h.region)
            .iter()
            .all(|&e| st.get(&(h.device, e)) == Some(&want))
    })
}
