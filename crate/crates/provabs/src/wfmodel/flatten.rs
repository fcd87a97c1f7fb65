//! Un-nesting of sub-workflows. Flattening rewires every link that crosses a
//! sub-workflow boundary to the internal ports behind it, records that
//! rewiring in a promotion map, and keeps the top layer of the design around
//! as ground truth for precision measurements.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{validate_workflow, Activity, ActivityKind, DataLink, PortRef, Violation, Workflow};

const MAX_NESTING_DEPTH: usize = 128;

/// One group of the top-layer design view: a top-level activity and the flat
/// activities it stands for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthGroup {
    pub id: String,
    pub members: BTreeSet<String>,
    /// The unique significant member, when exactly one exists.
    pub defining_significant: Option<String>,
}

/// What the top layer of the design exposes: the activity grouping and the
/// flat ports visible there (boundary ports of top-level activities, through
/// promotion, plus the workflow's own ports — including promoted lineage
/// bookmarks).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopLayerView {
    pub groups: Vec<GroundTruthGroup>,
    pub visible_ports: BTreeSet<PortRef>,
}

impl TopLayerView {
    pub fn group(&self, id: &str) -> Option<&GroundTruthGroup> {
        self.groups.iter().find(|g| g.id == id)
    }
}

/// A workflow with no sub-workflow activities, plus the boundary-port
/// promotion map and the top-layer ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatWorkflow {
    pub workflow: Workflow,
    /// Each original sub-workflow boundary port (keyed `subworkflow.port`)
    /// mapped to the flat port(s) it forwards to (inputs) or from (outputs).
    pub promotion_map: BTreeMap<PortRef, BTreeSet<PortRef>>,
    pub ground_truth: TopLayerView,
}

impl FlatWorkflow {
    /// Wrap an already-flat workflow: singleton groups, every port visible.
    pub fn from_flat(workflow: Workflow) -> Result<FlatWorkflow, FlattenError> {
        flatten(&workflow)
    }

    /// The flat image(s) of an original boundary port.
    pub fn promoted(&self, subworkflow: &str, port: &str) -> Option<&BTreeSet<PortRef>> {
        self.promotion_map.get(&PortRef::act(subworkflow, port))
    }
}

#[derive(Debug, Error)]
pub enum FlattenError {
    #[error("invalid workflow: {0}")]
    Invalid(Violation),
    #[error("activity id {0:?} appears more than once across nesting levels")]
    IdCollision(String),
    #[error("dangling boundary port: sub-workflow {activity} output {port:?} has no internal producer")]
    DanglingBoundary { activity: String, port: String },
    #[error("sub-workflow nesting exceeds {MAX_NESTING_DEPTH} levels")]
    RecursionLimit,
}

/// A node of the wiring graph used during flattening: either a real flat
/// port or a sub-workflow boundary connector that disappears.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum WireNode {
    Real(PortRef),
    Connector { activity: String, port: String },
}

/// Replace every sub-workflow activity by its children, rewiring
/// boundary-crossing links through the promotion map.
pub fn flatten(w: &Workflow) -> Result<FlatWorkflow, FlattenError> {
    if let Some(v) = validate_workflow(w).into_iter().next() {
        return Err(FlattenError::Invalid(v));
    }

    let mut atomics: Vec<Activity> = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    let mut wiring: BTreeMap<WireNode, BTreeSet<WireNode>> = BTreeMap::new();
    let mut connectors: Vec<(String, String, bool)> = Vec::new(); // (sw, port, is_input)
    let mut groups: Vec<GroundTruthGroup> = Vec::new();

    collect(w, None, 0, &mut atomics, &mut seen_ids, &mut wiring, &mut connectors)?;

    // Ground-truth groups: one per top-level activity.
    for a in &w.activities {
        let members = descendant_atomics(a);
        let significant: Vec<&String> = members
            .iter()
            .filter(|id| atomics.iter().any(|x| &x.id == *id && x.significant))
            .collect();
        groups.push(GroundTruthGroup {
            id: a.id.clone(),
            members: members.clone(),
            defining_significant: if significant.len() == 1 {
                Some(significant[0].clone())
            } else {
                None
            },
        });
    }

    // Dangling check: every sub-workflow output connector needs an internal feed.
    for (sw, port, is_input) in &connectors {
        if !is_input {
            let node = WireNode::Connector {
                activity: sw.clone(),
                port: port.clone(),
            };
            let fed = wiring.values().any(|sinks| sinks.contains(&node));
            if !fed {
                return Err(FlattenError::DanglingBoundary {
                    activity: sw.clone(),
                    port: port.clone(),
                });
            }
        }
    }

    // Flat links: every real-to-real path through connector chains.
    let mut flat_links: BTreeSet<DataLink> = BTreeSet::new();
    for (from, sinks) in &wiring {
        let source = match from {
            WireNode::Real(p) => p.clone(),
            WireNode::Connector { .. } => continue,
        };
        for sink in sinks {
            for target in resolve_forward(sink, &wiring) {
                flat_links.insert(DataLink::direct(source.clone(), target));
            }
        }
    }

    // Promotion map: forward images for boundary inputs, backward for outputs.
    let mut promotion_map: BTreeMap<PortRef, BTreeSet<PortRef>> = BTreeMap::new();
    for (sw, port, is_input) in &connectors {
        let node = WireNode::Connector {
            activity: sw.clone(),
            port: port.clone(),
        };
        let image = if *is_input {
            wiring
                .get(&node)
                .map(|sinks| {
                    sinks
                        .iter()
                        .flat_map(|s| resolve_forward(s, &wiring))
                        .collect()
                })
                .unwrap_or_default()
        } else {
            resolve_backward(&node, &wiring)
        };
        promotion_map.insert(PortRef::act(sw, port), image);
    }

    // Visible ports: flat images of every top-level activity port, plus the
    // workflow's own ports.
    let mut visible_ports: BTreeSet<PortRef> = BTreeSet::new();
    for p in w.inputs.iter().chain(&w.outputs) {
        visible_ports.insert(PortRef::wf(&p.id));
    }
    for a in &w.activities {
        match a.kind {
            ActivityKind::Atomic => {
                for p in a.inputs.iter().chain(&a.outputs) {
                    visible_ports.insert(PortRef::act(&a.id, &p.id));
                }
            }
            ActivityKind::Subworkflow => {
                for p in a.inputs.iter().chain(&a.outputs) {
                    if let Some(image) = promotion_map.get(&PortRef::act(&a.id, &p.id)) {
                        visible_ports.extend(image.iter().cloned());
                    }
                }
            }
        }
    }

    let flat = Workflow {
        id: w.id.clone(),
        inputs: w.inputs.clone(),
        outputs: w.outputs.clone(),
        activities: atomics,
        links: flat_links.into_iter().collect(),
    };
    debug_assert!(validate_workflow(&flat).is_empty(), "flatten produced an invalid workflow");

    Ok(FlatWorkflow {
        workflow: flat,
        promotion_map,
        ground_truth: TopLayerView {
            groups,
            visible_ports,
        },
    })
}

/// Walk one nesting level: record atomic activities and wiring edges.
/// `container` is the sub-workflow activity owning this level's `wf:` ports.
fn collect(
    w: &Workflow,
    container: Option<&str>,
    depth: usize,
    atomics: &mut Vec<Activity>,
    seen: &mut BTreeSet<String>,
    wiring: &mut BTreeMap<WireNode, BTreeSet<WireNode>>,
    connectors: &mut Vec<(String, String, bool)>,
) -> Result<(), FlattenError> {
    if depth > MAX_NESTING_DEPTH {
        return Err(FlattenError::RecursionLimit);
    }
    let mut subworkflows: BTreeSet<&str> = BTreeSet::new();
    for a in &w.activities {
        if !seen.insert(a.id.clone()) {
            return Err(FlattenError::IdCollision(a.id.clone()));
        }
        match (&a.kind, &a.child) {
            (ActivityKind::Atomic, _) => atomics.push(a.clone()),
            (ActivityKind::Subworkflow, Some(child)) => {
                subworkflows.insert(&a.id);
                for p in &a.inputs {
                    connectors.push((a.id.clone(), p.id.clone(), true));
                }
                for p in &a.outputs {
                    connectors.push((a.id.clone(), p.id.clone(), false));
                }
                collect(child, Some(&a.id), depth + 1, atomics, seen, wiring, connectors)?;
            }
            (ActivityKind::Subworkflow, None) => unreachable!("validated"),
        }
    }
    let as_node = |r: &PortRef| -> WireNode {
        match r {
            PortRef::Wf(p) => match container {
                Some(sw) => WireNode::Connector {
                    activity: sw.to_string(),
                    port: p.clone(),
                },
                None => WireNode::Real(r.clone()),
            },
            PortRef::Act { activity, port } => {
                if subworkflows.contains(activity.as_str()) {
                    WireNode::Connector {
                        activity: activity.clone(),
                        port: port.clone(),
                    }
                } else {
                    WireNode::Real(r.clone())
                }
            }
        }
    };
    for link in &w.links {
        wiring
            .entry(as_node(&link.source))
            .or_default()
            .insert(as_node(&link.sink));
    }
    Ok(())
}

fn descendant_atomics(a: &Activity) -> BTreeSet<String> {
    match (&a.kind, &a.child) {
        (ActivityKind::Atomic, _) => BTreeSet::from([a.id.clone()]),
        (ActivityKind::Subworkflow, Some(child)) => child
            .activities
            .iter()
            .flat_map(descendant_atomics)
            .collect(),
        (ActivityKind::Subworkflow, None) => BTreeSet::new(),
    }
}

/// Follow connector chains forward until real ports are reached.
fn resolve_forward(node: &WireNode, wiring: &BTreeMap<WireNode, BTreeSet<WireNode>>) -> BTreeSet<PortRef> {
    let mut out = BTreeSet::new();
    let mut stack = vec![node.clone()];
    let mut visited = BTreeSet::new();
    while let Some(n) = stack.pop() {
        if !visited.insert(n.clone()) {
            continue;
        }
        match n {
            WireNode::Real(p) => {
                out.insert(p);
            }
            WireNode::Connector { .. } => {
                if let Some(next) = wiring.get(&n) {
                    stack.extend(next.iter().cloned());
                }
            }
        }
    }
    out
}

/// Follow connector chains backward to the producing real port(s).
fn resolve_backward(node: &WireNode, wiring: &BTreeMap<WireNode, BTreeSet<WireNode>>) -> BTreeSet<PortRef> {
    let mut out = BTreeSet::new();
    let mut stack = vec![node.clone()];
    let mut visited = BTreeSet::new();
    while let Some(n) = stack.pop() {
        if !visited.insert(n.clone()) {
            continue;
        }
        let feeders: Vec<&WireNode> = wiring
            .iter()
            .filter(|(_, sinks)| sinks.contains(&n))
            .map(|(from, _)| from)
            .collect();
        for f in feeders {
            match f {
                WireNode::Real(p) => {
                    out.insert(p.clone());
                }
                WireNode::Connector { .. } => stack.push(f.clone()),
            }
        }
    }
    out
}
