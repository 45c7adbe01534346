//! Match-and-allocate: find a subgraph satisfying a request through a pruned
//! depth-first traversal, then commit the allocation.
//!
//! Selection is two-phase. The traversal first picks a complete satisfying
//! vertex set without mutating anything; only then is the allocation
//! committed, so a failed match leaves the graph untouched. Candidates are
//! tried in path order (or in a seeded shuffle order), with backtracking, so
//! the selected set is the policy-minimal satisfying set. Subtrees whose
//! free-core aggregate cannot host one more candidate are pruned.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, JobId, ResourceGraph, ResourceKind, VertexId};
use crate::jgf::Subgraph;
use crate::jobspec::{JobSpec, RequestEntry, SpecError};

/// How one job holds its vertices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreatedFrom {
    MatchAllocate,
    MatchGrow,
}

/// One job's allocation record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub job: JobId,
    pub vertices: BTreeSet<VertexId>,
    pub created_from: CreatedFrom,
    /// Whether this instance inserted the vertices while growing (as opposed
    /// to matching resources it already had).
    pub added_topology: bool,
}

impl Allocation {
    pub fn paths(&self, g: &ResourceGraph) -> BTreeSet<String> {
        self.vertices
            .iter()
            .filter_map(|v| g.vertex(*v).map(|vert| vert.path.clone()))
            .collect()
    }
}

/// Candidate ordering policy. `LowestPath` is the default first fit;
/// `Seeded` orders candidates by a seeded hash of their paths, which keeps
/// runs deterministic per seed while varying the selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchPolicy {
    LowestPath,
    Seeded(u64),
}

#[derive(Debug, Error)]
pub enum MatchError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid request: {0}")]
    Spec(#[from] SpecError),
}

/// Finds and allocates a subgraph satisfying `spec` under the default
/// lowest-path policy.
pub fn match_allocate(
    g: &mut ResourceGraph,
    spec: &JobSpec,
    job: JobId,
    policy: &MatchPolicy,
) -> Result<Option<Subgraph>, MatchError> {
    match_allocate_opts(g, spec, job, policy, true)
}

/// Full-control variant: `prune` disables the aggregate pruning filter so
/// property tests can compare outcomes against the unpruned traversal.
pub fn match_allocate_opts(
    g: &mut ResourceGraph,
    spec: &JobSpec,
    job: JobId,
    policy: &MatchPolicy,
    prune: bool,
) -> Result<Option<Subgraph>, MatchError> {
    spec.validate()?;
    if g.has_job(job) {
        return Err(GraphError::DuplicateJob(job).into());
    }
    if spec.hint.is_some() {
        // Provider-routed requests never match local resources.
        return Ok(None);
    }
    let selected = {
        let mut selector = Selector::new(g, policy, prune);
        if selector.satisfy(g.root(), &spec.entries, 0) {
            Some(selector.into_chosen())
        } else {
            None
        }
    };
    let Some(chosen) = selected else {
        return Ok(None);
    };
    g.allocate_vertices(job, &chosen, CreatedFrom::MatchAllocate, false)?;
    Ok(Some(g.extract_subgraph(&chosen)))
}

/// Frees every vertex held by `job`; aggregates are restored. The inverse of
/// a successful match.
pub fn cancel(g: &mut ResourceGraph, job: JobId) -> Result<(), GraphError> {
    g.free_job(job).map(|_| ())
}

struct Selector<'g> {
    g: &'g ResourceGraph,
    policy: MatchPolicy,
    prune: bool,
    chosen: BTreeSet<VertexId>,
    chosen_stack: Vec<VertexId>,
    /// Tentatively chosen cores per ancestor, for effective-aggregate math.
    chosen_cores_under: HashMap<VertexId, u64>,
}

impl<'g> Selector<'g> {
    fn new(g: &'g ResourceGraph, policy: &MatchPolicy, prune: bool) -> Self {
        Selector {
            g,
            policy: *policy,
            prune,
            chosen: BTreeSet::new(),
            chosen_stack: Vec::new(),
            chosen_cores_under: HashMap::new(),
        }
    }

    fn into_chosen(self) -> BTreeSet<VertexId> {
        self.chosen
    }

    fn effective_aggregate(&self, v: VertexId) -> u64 {
        self.g
            .aggregate(v)
            .saturating_sub(self.chosen_cores_under.get(&v).copied().unwrap_or(0))
    }

    fn pick(&mut self, v: VertexId) {
        self.chosen.insert(v);
        self.chosen_stack.push(v);
        if self.g.vertex(v).expect("candidate vertex").kind == ResourceKind::Core {
            let mut cur = Some(v);
            while let Some(c) = cur {
                *self.chosen_cores_under.entry(c).or_insert(0) += 1;
                cur = self.g.parent_of(c);
            }
        }
    }

    fn rollback_to(&mut self, mark: usize) {
        while self.chosen_stack.len() > mark {
            let v = self.chosen_stack.pop().expect("non-empty stack");
            self.chosen.remove(&v);
            if self.g.vertex(v).expect("chosen vertex").kind == ResourceKind::Core {
                let mut cur = Some(v);
                while let Some(c) = cur {
                    let slot = self.chosen_cores_under.get_mut(&c).expect("counted ancestor");
                    *slot -= 1;
                    cur = self.g.parent_of(c);
                }
            }
        }
    }

    /// Satisfies `entries[idx..]` with candidates drawn from `anchor`'s
    /// subtree. Backtracks across entries: a later entry's failure revisits
    /// the earlier entries' choices.
    fn satisfy(&mut self, anchor: VertexId, entries: &[RequestEntry], idx: usize) -> bool {
        let Some(entry) = entries.get(idx) else {
            return true;
        };
        let candidates = self.candidates(anchor, entry);
        self.choose(anchor, entries, idx, entry, &candidates, 0, entry.count)
    }

    fn choose(
        &mut self,
        anchor: VertexId,
        entries: &[RequestEntry],
        idx: usize,
        entry: &RequestEntry,
        candidates: &[VertexId],
        from: usize,
        remaining: u64,
    ) -> bool {
        if remaining == 0 {
            return self.satisfy(anchor, entries, idx + 1);
        }
        let remaining_usize = remaining as usize;
        if candidates.len().saturating_sub(from) < remaining_usize {
            return false;
        }
        for i in from..=(candidates.len() - remaining_usize) {
            let cand = candidates[i];
            if self.chosen.contains(&cand) || !self.g.is_free(cand) {
                continue;
            }
            let mark = self.chosen_stack.len();
            self.pick(cand);
            if self.satisfy(cand, &entry.children, 0)
                && self.choose(anchor, entries, idx, entry, candidates, i + 1, remaining - 1)
            {
                return true;
            }
            self.rollback_to(mark);
        }
        false
    }

    /// Free vertices of the entry's kind in `anchor`'s subtree, in policy
    /// order. With pruning on, a subtree whose effective free-core aggregate
    /// cannot supply one candidate's core demand is skipped whole.
    fn candidates(&self, anchor: VertexId, entry: &RequestEntry) -> Vec<VertexId> {
        let need = entry.cores_per_candidate();
        let mut out = Vec::new();
        let mut stack: Vec<VertexId> = self.g.children_of(anchor).iter().rev().copied().collect();
        while let Some(v) = stack.pop() {
            if self.prune && need > 0 && self.effective_aggregate(v) < need {
                continue;
            }
            let vert = self.g.vertex(v).expect("traversed vertex");
            if vert.kind == entry.kind && self.g.is_free(v) && !self.chosen.contains(&v) {
                out.push(v);
            }
            for child in self.g.children_of(v).iter().rev() {
                stack.push(*child);
            }
        }
        if let MatchPolicy::Seeded(seed) = self.policy {
            let mut keyed: Vec<(u64, VertexId)> = out
                .into_iter()
                .map(|v| (policy_key(seed, &self.g.vertex(v).expect("candidate").path), v))
                .collect();
            keyed.sort();
            return keyed.into_iter().map(|(_, v)| v).collect();
        }
        out
    }
}

fn policy_key(seed: u64, path: &str) -> u64 {
    // FNV-1a over the seed then the path; stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    for b in path.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ClusterSpec;

    fn l3_graph() -> ResourceGraph {
        ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(2, 2, 16)).unwrap()
    }

    #[test]
    fn t7_match_on_free_l3() {
        let mut g = l3_graph();
        let spec = JobSpec::parse("node:1 socket:2 core:32").unwrap();
        let sub = match_allocate(&mut g, &spec, JobId::new(0, 1), &MatchPolicy::LowestPath)
            .unwrap()
            .expect("satisfiable");
        assert_eq!(sub.size(), 70);
        assert!(g.verify_aggregates());
        // Lowest-path policy takes node0 whole.
        assert!(sub.member_paths().iter().all(|p| p.starts_with("/cluster0/node0")));
    }

    #[test]
    fn failed_match_mutates_nothing() {
        let mut g = l3_graph();
        let hash = g.state_hash();
        let spec = JobSpec::parse("node:2 socket:4 core:128").unwrap(); // 128 cores > 64 free
        let got = match_allocate(&mut g, &spec, JobId::new(0, 1), &MatchPolicy::LowestPath).unwrap();
        assert!(got.is_none());
        assert_eq!(g.state_hash(), hash);
    }

    #[test]
    fn duplicate_job_is_an_error_not_a_miss() {
        let mut g = l3_graph();
        let spec = JobSpec::parse("core:1").unwrap();
        let job = JobId::new(0, 3);
        match_allocate(&mut g, &spec, job, &MatchPolicy::LowestPath)
            .unwrap()
            .unwrap();
        let err = match_allocate(&mut g, &spec, job, &MatchPolicy::LowestPath).unwrap_err();
        assert!(matches!(err, MatchError::Graph(GraphError::DuplicateJob(_))));
    }

    #[test]
    fn allocate_then_cancel_restores_state() {
        let mut g = l3_graph();
        let before = g.state_hash();
        let spec = JobSpec::parse("node:1 socket:1 core:4").unwrap();
        let job = JobId::new(0, 2);
        match_allocate(&mut g, &spec, job, &MatchPolicy::LowestPath)
            .unwrap()
            .unwrap();
        assert_ne!(g.state_hash(), before);
        cancel(&mut g, job).unwrap();
        assert_eq!(g.state_hash(), before);
    }

    #[test]
    fn cancel_unknown_job_errors() {
        let mut g = l3_graph();
        assert!(matches!(
            cancel(&mut g, JobId::new(0, 44)),
            Err(GraphError::UnknownJob(_))
        ));
    }

    #[test]
    fn hinted_specs_do_not_match_locally() {
        let mut g = l3_graph();
        let spec = JobSpec::parse("node:1 @type:t2.micro").unwrap();
        let got = match_allocate(&mut g, &spec, JobId::new(0, 1), &MatchPolicy::LowestPath).unwrap();
        assert!(got.is_none());
    }

    #[test]
    fn seeded_policy_is_deterministic() {
        let spec = JobSpec::parse("node:1 socket:1 core:8").unwrap();
        let mut first = None;
        for _ in 0..2 {
            let mut g = l3_graph();
            let sub = match_allocate(&mut g, &spec, JobId::new(0, 1), &MatchPolicy::Seeded(42))
                .unwrap()
                .unwrap();
            let paths = sub.member_paths();
            match &first {
                None => first = Some(paths),
                Some(prev) => assert_eq!(prev, &paths),
            }
        }
    }

    #[test]
    fn backtracking_finds_the_feasible_split() {
        // One socket has 2 free cores, the other 1. A request for one socket
        // with 2 cores plus one socket with 1 core must not get stuck after
        // greedily taking the 2-core socket for the first entry.
        let mut g = ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(1, 2, 2)).unwrap();
        let blocked = g.lookup_by_path("/cluster0/node0/socket1/core0").unwrap();
        g.allocate_vertices(
            JobId::new(0, 99),
            &[blocked].into_iter().collect(),
            CreatedFrom::MatchAllocate,
            false,
        )
        .unwrap();
        let spec = JobSpec::from_entries(vec![
            RequestEntry::new(ResourceKind::Socket, 1).with_children(vec![RequestEntry::new(
                ResourceKind::Core,
                2,
            )]),
            RequestEntry::new(ResourceKind::Socket, 1).with_children(vec![RequestEntry::new(
                ResourceKind::Core,
                1,
            )]),
        ])
        .unwrap();
        let sub = match_allocate(&mut g, &spec, JobId::new(0, 1), &MatchPolicy::LowestPath)
            .unwrap()
            .expect("feasible with backtracking");
        let paths = sub.member_paths();
        assert!(paths.contains("/cluster0/node0/socket0"));
        assert!(paths.contains("/cluster0/node0/socket1"));
        assert!(paths.contains("/cluster0/node0/socket1/core1"));
    }

    #[test]
    fn pruning_skips_allocated_subtrees() {
        let mut g = l3_graph();
        g.allocate_subtree("/cluster0/node0", JobId::new(0, 50)).unwrap();
        let spec = JobSpec::parse("node:1 socket:2 core:32").unwrap();
        let sub = match_allocate(&mut g, &spec, JobId::new(0, 1), &MatchPolicy::LowestPath)
            .unwrap()
            .expect("node1 is free");
        assert!(sub.member_paths().iter().all(|p| p.starts_with("/cluster0/node1")));
    }
}
