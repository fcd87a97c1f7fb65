//! Typed model of nested dataflow workflows: activities, ports, links,
//! sub-workflows, motif annotations, plus parsing, validation, flattening
//! and dependency reachability.

mod flatten;
mod reach;

pub use flatten::{flatten, FlatWorkflow, GroundTruthGroup, TopLayerView};
pub use reach::{reach_in_view, reach_in_workflow, PortGraph};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Reference to a data-carrying port. `Wf` names a workflow-level port of the
/// enclosing workflow ("wf:x" on the wire); `Act` names an activity port
/// ("activity.port"). Workflow ports order before activity ports, which makes
/// link and witness ordering put workflow inputs first.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PortRef {
    Wf(String),
    Act { activity: String, port: String },
}

impl PortRef {
    pub fn wf(name: impl Into<String>) -> Self {
        PortRef::Wf(name.into())
    }

    pub fn act(activity: impl Into<String>, port: impl Into<String>) -> Self {
        PortRef::Act {
            activity: activity.into(),
            port: port.into(),
        }
    }

    /// Activity id for activity ports, `None` for workflow ports.
    pub fn activity(&self) -> Option<&str> {
        match self {
            PortRef::Wf(_) => None,
            PortRef::Act { activity, .. } => Some(activity),
        }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortRef::Wf(name) => write!(f, "wf:{name}"),
            PortRef::Act { activity, port } => write!(f, "{activity}.{port}"),
        }
    }
}

impl FromStr for PortRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(name) = s.strip_prefix("wf:") {
            if name.is_empty() {
                return Err(format!("empty workflow port reference: {s:?}"));
            }
            return Ok(PortRef::Wf(name.to_string()));
        }
        match s.split_once('.') {
            Some((activity, port)) if !activity.is_empty() && !port.is_empty() => {
                Ok(PortRef::act(activity, port))
            }
            _ => Err(format!(
                "port reference must be \"wf:<port>\" or \"<activity>.<port>\", got {s:?}"
            )),
        }
    }
}

impl Serialize for PortRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PortRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Semantic annotation classifying an adapter's function. The named set is
/// closed; anything else round-trips as `Other(label)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Motif {
    InputPreparation,
    Extractor,
    Filtering,
    FormatTransformation,
    Retrieval,
    Other(String),
}

impl Motif {
    pub fn as_str(&self) -> &str {
        match self {
            Motif::InputPreparation => "InputPreparation",
            Motif::Extractor => "Extractor",
            Motif::Filtering => "Filtering",
            Motif::FormatTransformation => "FormatTransformation",
            Motif::Retrieval => "Retrieval",
            Motif::Other(label) => label,
        }
    }
}

impl From<&str> for Motif {
    fn from(s: &str) -> Self {
        match s {
            "InputPreparation" => Motif::InputPreparation,
            "Extractor" => Motif::Extractor,
            "Filtering" => Motif::Filtering,
            "FormatTransformation" => Motif::FormatTransformation,
            "Retrieval" => Motif::Retrieval,
            other => Motif::Other(other.to_string()),
        }
    }
}

impl fmt::Display for Motif {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Motif {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Motif {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(Motif::from(s.as_str()))
    }
}

/// A named port. Used both for activity ports and workflow-level ports.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Port {
    pub id: String,
}

impl Port {
    pub fn new(id: impl Into<String>) -> Self {
        Port { id: id.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityKind {
    Atomic,
    Subworkflow,
}

/// A workflow step: either an atomic activity or a nested sub-workflow whose
/// boundary ports mirror the child's workflow inputs/outputs one-to-one (by id).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub id: String,
    pub kind: ActivityKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motif: Option<Motif>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub significant: bool,
    #[serde(default)]
    pub inputs: Vec<Port>,
    #[serde(default)]
    pub outputs: Vec<Port>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child: Option<Box<Workflow>>,
    /// (input-port-id, output-port-id) pairs. Absent means every input
    /// affects every output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internal_deps: Option<BTreeSet<(String, String)>>,
}

impl Activity {
    pub fn atomic(id: impl Into<String>) -> Self {
        Activity {
            id: id.into(),
            kind: ActivityKind::Atomic,
            motif: None,
            significant: false,
            inputs: Vec::new(),
            outputs: Vec::new(),
            child: None,
            internal_deps: None,
        }
    }

    /// The dependency relation between this activity's inputs and outputs,
    /// as (input, output) port-id pairs. Defaults to the full relation.
    pub fn dependency_pairs(&self) -> BTreeSet<(String, String)> {
        match &self.internal_deps {
            Some(pairs) => pairs.clone(),
            None => {
                let mut full = BTreeSet::new();
                for i in &self.inputs {
                    for o in &self.outputs {
                        full.insert((i.id.clone(), o.id.clone()));
                    }
                }
                full
            }
        }
    }
}

/// A dataflow link. `indirect` links only occur in abstract views, where they
/// record the activities they bypass.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DataLink {
    pub source: PortRef,
    pub sink: PortRef,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub indirect: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bypass: Vec<String>,
}

impl DataLink {
    pub fn direct(source: PortRef, sink: PortRef) -> Self {
        DataLink {
            source,
            sink,
            indirect: false,
            bypass: Vec::new(),
        }
    }

    pub fn indirect(source: PortRef, sink: PortRef, bypass: Vec<String>) -> Self {
        DataLink {
            source,
            sink,
            indirect: true,
            bypass,
        }
    }
}

/// A (possibly nested) dataflow workflow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    pub id: String,
    #[serde(default)]
    pub inputs: Vec<Port>,
    #[serde(default)]
    pub outputs: Vec<Port>,
    #[serde(default)]
    pub activities: Vec<Activity>,
    #[serde(default)]
    pub links: Vec<DataLink>,
}

impl Workflow {
    pub fn activity(&self, id: &str) -> Option<&Activity> {
        self.activities.iter().find(|a| a.id == id)
    }

    pub fn has_subworkflows(&self) -> bool {
        self.activities
            .iter()
            .any(|a| a.kind == ActivityKind::Subworkflow)
    }

    /// All legal link sources: workflow inputs and activity outputs.
    pub fn source_ports(&self) -> BTreeSet<PortRef> {
        let mut set: BTreeSet<PortRef> =
            self.inputs.iter().map(|p| PortRef::wf(&p.id)).collect();
        for a in &self.activities {
            for o in &a.outputs {
                set.insert(PortRef::act(&a.id, &o.id));
            }
        }
        set
    }

    /// All legal link sinks: workflow outputs and activity inputs.
    pub fn sink_ports(&self) -> BTreeSet<PortRef> {
        let mut set: BTreeSet<PortRef> =
            self.outputs.iter().map(|p| PortRef::wf(&p.id)).collect();
        for a in &self.activities {
            for i in &a.inputs {
                set.insert(PortRef::act(&a.id, &i.id));
            }
        }
        set
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("workflow serialization cannot fail")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("workflow serialization cannot fail")
    }
}

/// An invariant violation found by [`validate_workflow`]. Violations are data,
/// not errors: each one names the offending element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateActivityId { workflow: String, id: String },
    DuplicateWorkflowPort { workflow: String, id: String },
    DuplicateActivityPort { activity: String, id: String },
    MissingEndpoint { workflow: String, port: PortRef },
    BadEndpointRole { workflow: String, port: PortRef },
    FanIn { workflow: String, port: PortRef },
    KindChildMismatch { activity: String },
    BoundaryMismatch { activity: String, detail: String },
    SignificantWithMotif { activity: String },
    IndirectInSource { workflow: String, source: PortRef, sink: PortRef },
    UnknownDependencyPort { activity: String, port: String },
    Cycle { workflow: String, activities: Vec<String> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateActivityId { workflow, id } => {
                write!(f, "workflow {workflow}: duplicate activity id {id:?}")
            }
            Violation::DuplicateWorkflowPort { workflow, id } => {
                write!(f, "workflow {workflow}: duplicate workflow port {id:?}")
            }
            Violation::DuplicateActivityPort { activity, id } => {
                write!(f, "activity {activity}: duplicate port {id:?}")
            }
            Violation::MissingEndpoint { workflow, port } => {
                write!(f, "workflow {workflow}: link endpoint {port} does not exist")
            }
            Violation::BadEndpointRole { workflow, port } => {
                write!(f, "workflow {workflow}: {port} used on the wrong side of a link")
            }
            Violation::FanIn { workflow, port } => {
                write!(f, "workflow {workflow}: input port {port} has more than one incoming link")
            }
            Violation::KindChildMismatch { activity } => {
                write!(f, "activity {activity}: kind and child presence disagree")
            }
            Violation::BoundaryMismatch { activity, detail } => {
                write!(f, "sub-workflow {activity}: boundary ports do not mirror child ({detail})")
            }
            Violation::SignificantWithMotif { activity } => {
                write!(f, "activity {activity}: significant activities cannot carry an adapter motif")
            }
            Violation::IndirectInSource { workflow, source, sink } => {
                write!(f, "workflow {workflow}: indirect link {source} -> {sink} not allowed in a source workflow")
            }
            Violation::UnknownDependencyPort { activity, port } => {
                write!(f, "activity {activity}: internal_deps references unknown port {port:?}")
            }
            Violation::Cycle { workflow, activities } => {
                write!(f, "workflow {workflow}: cyclic dataflow through {}", activities.join(" -> "))
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("reference error: {0}")]
    Reference(Violation),
    #[error("duplicate id: {0}")]
    Duplicate(Violation),
    #[error("invalid workflow: {0}")]
    Invalid(Violation),
}

/// Parse a workflow document. The result satisfies every workflow invariant;
/// any violation is promoted to a hard error.
pub fn parse_workflow(document: &str) -> Result<Workflow, ParseError> {
    let workflow: Workflow = serde_json::from_str(document).map_err(|e| ParseError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    match validate_workflow(&workflow).into_iter().next() {
        None => Ok(workflow),
        Some(v @ Violation::MissingEndpoint { .. }) => Err(ParseError::Reference(v)),
        Some(
            v @ (Violation::DuplicateActivityId { .. }
            | Violation::DuplicateWorkflowPort { .. }
            | Violation::DuplicateActivityPort { .. }),
        ) => Err(ParseError::Duplicate(v)),
        Some(v) => Err(ParseError::Invalid(v)),
    }
}

/// Check every workflow invariant, recursing into sub-workflow children.
/// Returns an empty list iff the workflow is well formed.
pub fn validate_workflow(w: &Workflow) -> Vec<Violation> {
    let mut out = Vec::new();
    validate_level(w, &mut out);
    out
}

fn validate_level(w: &Workflow, out: &mut Vec<Violation>) {
    let mut seen = BTreeSet::new();
    for a in &w.activities {
        if !seen.insert(a.id.clone()) {
            out.push(Violation::DuplicateActivityId {
                workflow: w.id.clone(),
                id: a.id.clone(),
            });
        }
    }
    let mut wf_ports = BTreeSet::new();
    for p in w.inputs.iter().chain(&w.outputs) {
        if !wf_ports.insert(p.id.clone()) {
            out.push(Violation::DuplicateWorkflowPort {
                workflow: w.id.clone(),
                id: p.id.clone(),
            });
        }
    }
    for a in &w.activities {
        let mut ports = BTreeSet::new();
        for p in a.inputs.iter().chain(&a.outputs) {
            if !ports.insert(p.id.clone()) {
                out.push(Violation::DuplicateActivityPort {
                    activity: a.id.clone(),
                    id: p.id.clone(),
                });
            }
        }
        match (a.kind, &a.child) {
            (ActivityKind::Atomic, None) => {}
            (ActivityKind::Subworkflow, Some(child)) => {
                let ins: BTreeSet<_> = a.inputs.iter().map(|p| p.id.clone()).collect();
                let child_ins: BTreeSet<_> = child.inputs.iter().map(|p| p.id.clone()).collect();
                let outs: BTreeSet<_> = a.outputs.iter().map(|p| p.id.clone()).collect();
                let child_outs: BTreeSet<_> = child.outputs.iter().map(|p| p.id.clone()).collect();
                if ins != child_ins || outs != child_outs {
                    out.push(Violation::BoundaryMismatch {
                        activity: a.id.clone(),
                        detail: format!(
                            "activity ports {:?}/{:?} vs child ports {:?}/{:?}",
                            ins, outs, child_ins, child_outs
                        ),
                    });
                }
                validate_level(child, out);
            }
            _ => out.push(Violation::KindChildMismatch {
                activity: a.id.clone(),
            }),
        }
        if a.significant && a.motif.is_some() {
            out.push(Violation::SignificantWithMotif {
                activity: a.id.clone(),
            });
        }
        if let Some(deps) = &a.internal_deps {
            let ins: BTreeSet<_> = a.inputs.iter().map(|p| p.id.as_str()).collect();
            let outs: BTreeSet<_> = a.outputs.iter().map(|p| p.id.as_str()).collect();
            for (i, o) in deps {
                if !ins.contains(i.as_str()) {
                    out.push(Violation::UnknownDependencyPort {
                        activity: a.id.clone(),
                        port: i.clone(),
                    });
                }
                if !outs.contains(o.as_str()) {
                    out.push(Violation::UnknownDependencyPort {
                        activity: a.id.clone(),
                        port: o.clone(),
                    });
                }
            }
        }
    }

    let sources = w.source_ports();
    let sinks = w.sink_ports();
    let all_ports: BTreeSet<_> = sources.union(&sinks).cloned().collect();
    let mut incoming: BTreeMap<&PortRef, usize> = BTreeMap::new();
    for link in &w.links {
        for (port, legal) in [(&link.source, &sources), (&link.sink, &sinks)] {
            if !legal.contains(port) {
                if all_ports.contains(port) {
                    out.push(Violation::BadEndpointRole {
                        workflow: w.id.clone(),
                        port: port.clone(),
                    });
                } else {
                    out.push(Violation::MissingEndpoint {
                        workflow: w.id.clone(),
                        port: port.clone(),
                    });
                }
            }
        }
        if link.indirect || !link.bypass.is_empty() {
            out.push(Violation::IndirectInSource {
                workflow: w.id.clone(),
                source: link.source.clone(),
                sink: link.sink.clone(),
            });
        }
        *incoming.entry(&link.sink).or_insert(0) += 1;
    }
    for (port, count) in incoming {
        if count > 1 {
            out.push(Violation::FanIn {
                workflow: w.id.clone(),
                port: port.clone(),
            });
        }
    }

    if let Some(cycle) = find_activity_cycle(w) {
        out.push(Violation::Cycle {
            workflow: w.id.clone(),
            activities: cycle,
        });
    }
}

/// Cycle detection on the activity-level dataflow graph (links only; internal
/// dependencies point input -> output and cannot close a cycle on their own).
fn find_activity_cycle(w: &Workflow) -> Option<Vec<String>> {
    let mut adj: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for a in &w.activities {
        adj.entry(a.id.as_str()).or_default();
    }
    for link in &w.links {
        if let (Some(from), Some(to)) = (link.source.activity(), link.sink.activity()) {
            if adj.contains_key(from) && adj.contains_key(to) {
                adj.entry(from).or_default().insert(to);
            }
        }
    }
    // Iterative DFS with colors; returns the first cycle found in id order.
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Grey,
        Black,
    }
    let mut color: BTreeMap<&str, Color> = adj.keys().map(|k| (*k, Color::White)).collect();
    let ids: Vec<&str> = adj.keys().copied().collect();
    for &start in &ids {
        if color[start] != Color::White {
            continue;
        }
        let mut stack = vec![(start, adj[start].iter())];
        color.insert(start, Color::Grey);
        let mut path = vec![start];
        while let Some((node, iter)) = stack.last_mut() {
            let node = *node;
            match iter.next() {
                Some(&next) => match color[next] {
                    Color::White => {
                        color.insert(next, Color::Grey);
                        path.push(next);
                        stack.push((next, adj[next].iter()));
                    }
                    Color::Grey => {
                        let pos = path.iter().position(|&p| p == next).unwrap_or(0);
                        let mut cycle: Vec<String> =
                            path[pos..].iter().map(|s| s.to_string()).collect();
                        cycle.push(next.to_string());
                        return Some(cycle);
                    }
                    Color::Black => {}
                },
                None => {
                    color.insert(node, Color::Black);
                    stack.pop();
                    path.pop();
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Workflow {
        parse_workflow(crate::fixtures::CHAIN).unwrap()
    }

    #[test]
    fn empty_workflow_parses() {
        let w = parse_workflow(r#"{"id":"w","inputs":[],"outputs":[],"activities":[],"links":[]}"#)
            .unwrap();
        assert_eq!(w.id, "w");
        assert!(w.activities.is_empty() && w.links.is_empty());
    }

    #[test]
    fn chain_fixture_shape() {
        let w = chain();
        assert_eq!(w.activities.len(), 3);
        assert_eq!(w.links.len(), 4);
        assert!(validate_workflow(&w).is_empty());
    }

    #[test]
    fn serialization_round_trips() {
        let w = chain();
        let again = parse_workflow(&w.to_json()).unwrap();
        assert_eq!(w, again);
    }

    #[test]
    fn field_order_is_irrelevant() {
        let doc = r#"{"links":[],"activities":[],"outputs":[],"inputs":[{"id":"x"}],"id":"w"}"#;
        let w = parse_workflow(doc).unwrap();
        assert_eq!(w.inputs[0].id, "x");
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_workflow("{\n  \"id\": }").unwrap_err();
        match err {
            ParseError::Syntax { line, .. } => assert_eq!(line, 2),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn ghost_endpoint_is_a_reference_violation() {
        let mut w = chain();
        w.links[1].sink = PortRef::act("S1", "ghost");
        let violations = validate_workflow(&w);
        assert_eq!(violations.len(), 1);
        assert!(matches!(
            &violations[0],
            Violation::MissingEndpoint { port, .. } if *port == PortRef::act("S1", "ghost")
        ));
        let err = parse_workflow(&w.to_json()).unwrap_err();
        assert!(matches!(err, ParseError::Reference(_)));
    }

    #[test]
    fn double_fan_in_is_reported() {
        let mut w = chain();
        w.links.push(DataLink::direct(
            PortRef::wf("wi"),
            PortRef::act("S1", "in"),
        ));
        let violations = validate_workflow(&w);
        assert_eq!(violations.len(), 1);
        assert!(matches!(&violations[0], Violation::FanIn { .. }));
    }

    #[test]
    fn duplicate_activity_id_is_an_error() {
        let mut w = chain();
        let dup = w.activities[0].clone();
        w.activities.push(dup);
        // The duplicate also duplicates port refs downstream; the first
        // violation reported must be the duplicate id.
        let violations = validate_workflow(&w);
        assert!(matches!(
            &violations[0],
            Violation::DuplicateActivityId { id, .. } if id == "A1"
        ));
        assert!(matches!(
            parse_workflow(&w.to_json()).unwrap_err(),
            ParseError::Duplicate(_)
        ));
    }

    #[test]
    fn significant_activity_with_motif_is_rejected() {
        let mut w = chain();
        w.activities[1].motif = Some(Motif::Extractor);
        assert!(validate_workflow(&w)
            .iter()
            .any(|v| matches!(v, Violation::SignificantWithMotif { activity } if activity == "S1")));
    }

    #[test]
    fn cyclic_dataflow_is_rejected() {
        let mut w = chain();
        w.activities[0].inputs.push(Port::new("loop"));
        w.links.push(DataLink::direct(
            PortRef::act("A2", "out"),
            PortRef::act("A1", "loop"),
        ));
        // A2.out now fans out to wf:wo and A1.loop, both single-assignment.
        assert!(validate_workflow(&w)
            .iter()
            .any(|v| matches!(v, Violation::Cycle { .. })));
    }

    #[test]
    fn indirect_links_are_rejected_in_source_workflows() {
        let mut w = chain();
        w.links[0].indirect = true;
        assert!(validate_workflow(&w)
            .iter()
            .any(|v| matches!(v, Violation::IndirectInSource { .. })));
    }

    #[test]
    fn motif_round_trip_preserves_other_labels() {
        for name in ["InputPreparation", "Extractor", "Filtering", "FormatTransformation", "Retrieval", "CorpusAssembly"] {
            let motif = Motif::from(name);
            assert_eq!(motif.as_str(), name);
        }
        assert_eq!(Motif::from("CorpusAssembly"), Motif::Other("CorpusAssembly".into()));
    }

    #[test]
    fn portref_parsing() {
        assert_eq!("wf:x".parse::<PortRef>().unwrap(), PortRef::wf("x"));
        assert_eq!(
            "a.p".parse::<PortRef>().unwrap(),
            PortRef::act("a", "p")
        );
        assert!("nodot".parse::<PortRef>().is_err());
        assert!("wf:".parse::<PortRef>().is_err());
        // Workflow ports order before activity ports.
        assert!(PortRef::wf("z") < PortRef::act("a", "p"));
    }
}
