#![allow(dead_code)]

//! Shared test oracles, independent of the library's matcher internals.

use std::collections::{BTreeSet, VecDeque};

use hgs_core::graph::{ResourceGraph, ResourceKind};
use hgs_core::jobspec::RequestEntry;

pub struct SnapVertex {
    pub path: String,
    pub kind: ResourceKind,
    pub free: bool,
}

/// Flat path/kind/free view of a graph, sorted by path.
pub struct Snapshot {
    pub verts: Vec<SnapVertex>,
}

pub fn snapshot(g: &ResourceGraph) -> Snapshot {
    let mut verts: Vec<SnapVertex> = g
        .vertices()
        .map(|v| SnapVertex {
            path: v.path.clone(),
            kind: v.kind,
            free: g.jobs_on(v.id).is_empty(),
        })
        .collect();
    verts.sort_by(|a, b| a.path.cmp(&b.path));
    Snapshot { verts }
}

/// One pending pick: a vertex of `kind` strictly under `anchor`, whose
/// subtree must then satisfy `children`. Picks sharing a `group` belong to
/// one entry's count and must be chosen with strictly ascending paths, which
/// makes the search enumerate combinations in lowest-path order.
#[derive(Clone)]
struct Slot {
    anchor: String,
    kind: ResourceKind,
    children: Vec<RequestEntry>,
    group: usize,
}

fn expand(entries: &[RequestEntry], anchor: &str, next_group: &mut usize) -> Vec<Slot> {
    let mut slots = Vec::new();
    for entry in entries {
        let group = *next_group;
        *next_group += 1;
        for _ in 0..entry.count {
            slots.push(Slot {
                anchor: anchor.to_string(),
                kind: entry.kind,
                children: entry.children.clone(),
                group,
            });
        }
    }
    slots
}

/// Exhaustive backtracking search over the snapshot, no pruning, candidates
/// in path order: the first complete assignment is the policy-minimal
/// selection under lowest-path first fit. Returns the selected path set.
pub fn oracle_match(
    snap: &Snapshot,
    entries: &[RequestEntry],
    anchor_path: &str,
) -> Option<BTreeSet<String>> {
    let mut next_group = 0usize;
    let queue: VecDeque<Slot> = expand(entries, anchor_path, &mut next_group).into();
    let mut chosen: Vec<(String, usize)> = Vec::new();
    if solve(snap, queue, &mut chosen, &mut next_group) {
        Some(chosen.into_iter().map(|(p, _)| p).collect())
    } else {
        None
    }
}

fn solve(
    snap: &Snapshot,
    mut queue: VecDeque<Slot>,
    chosen: &mut Vec<(String, usize)>,
    next_group: &mut usize,
) -> bool {
    let Some(slot) = queue.pop_front() else {
        return true;
    };
    let floor: Option<&str> = chosen
        .iter()
        .rev()
        .find(|(_, g)| *g == slot.group)
        .map(|(p, _)| p.as_str());
    let prefix = format!("{}/", slot.anchor);
    let candidate_paths: Vec<&SnapVertex> = snap
        .verts
        .iter()
        .filter(|v| {
            v.kind == slot.kind
                && v.free
                && v.path.starts_with(&prefix)
                && floor.map_or(true, |f| v.path.as_str() > f)
                && !chosen.iter().any(|(p, _)| p == &v.path)
        })
        .collect();
    for cand in candidate_paths {
        chosen.push((cand.path.clone(), slot.group));
        let mut next_queue = queue.clone();
        let group_base = *next_group;
        for child_slot in expand(&slot.children, &cand.path, next_group).into_iter().rev() {
            next_queue.push_front(child_slot);
        }
        if solve(snap, next_queue, chosen, next_group) {
            return true;
        }
        *next_group = group_base;
        chosen.pop();
    }
    false
}

/// Direct partial-sum oracle for the nested-match bound: `ceil(log_b s0)`
/// terms of `beta * s0 * b^-k + beta0`.
pub fn bound_partial_sum(b: f64, s0: f64, beta: f64, beta0: f64) -> f64 {
    let levels = s0.log(b).ceil() as i64;
    (0..levels)
        .map(|k| beta * s0 * b.powi(-(k as i32)) + beta0)
        .sum()
}
