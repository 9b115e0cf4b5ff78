//! Semantic graphs of captions and the coverage mask over their elements.
//!
//! Graph extraction itself is delegated to a language model; this module
//! only validates and types the reply. Edges carry no identifiers in the
//! model's schema, so coverage keys edges by their position in the graph.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::borrow::Borrow;
use core::fmt;

use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Serialize, Serializer};
use serde_json::{json, Map, Value};

use crate::extract::{self, field, Parsed};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("malformed output: no JSON object found in model reply")]
    MalformedOutput,
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("duplicate node id {0}")]
    DuplicateNodeId(String),
    #[error("edge {index} references missing node {id}")]
    DanglingEdge { index: usize, id: String },
    #[error("unknown graph element {0}")]
    UnknownElement(String),
    #[error("caption is empty")]
    EmptyCaption,
}

/// Node identifier of the form `N<positive integer>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(raw: &str) -> Result<Self, GraphError> {
        let raw = raw.trim();
        let digits = raw.strip_prefix('N').unwrap_or("");
        let valid = !digits.is_empty()
            && digits.bytes().all(|b| b.is_ascii_digit())
            && digits.bytes().any(|b| b != b'0');
        if valid {
            Ok(Self(raw.to_owned()))
        } else {
            Err(GraphError::SchemaViolation(format!(
                "node id {raw:?} does not match N<positive integer>"
            )))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    Entity,
    Location,
    Concept,
    Event,
    Attribute,
    Other,
}

impl NodeKind {
    pub const ALL: [NodeKind; 6] = [
        NodeKind::Entity,
        NodeKind::Location,
        NodeKind::Concept,
        NodeKind::Event,
        NodeKind::Attribute,
        NodeKind::Other,
    ];

    /// Spelling used by the graph-generation prompt.
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Entity => "Entity",
            NodeKind::Location => "Location",
            NodeKind::Concept => "Concept",
            NodeKind::Event => "Event",
            NodeKind::Attribute => "Attribute",
            NodeKind::Other => "Others",
        }
    }

    fn from_label(raw: &str) -> Option<Self> {
        match squash(raw).as_str() {
            "entity" => Some(NodeKind::Entity),
            "location" => Some(NodeKind::Location),
            "concept" => Some(NodeKind::Concept),
            "event" => Some(NodeKind::Event),
            "attribute" => Some(NodeKind::Attribute),
            "other" | "others" => Some(NodeKind::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Action,
    Spatial,
    HasAttribute,
    PartOf,
    Quantity,
    Other,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 6] = [
        EdgeKind::Action,
        EdgeKind::Spatial,
        EdgeKind::HasAttribute,
        EdgeKind::PartOf,
        EdgeKind::Quantity,
        EdgeKind::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Action => "Action",
            EdgeKind::Spatial => "Spatial",
            EdgeKind::HasAttribute => "Has Attribute",
            EdgeKind::PartOf => "Part Of",
            EdgeKind::Quantity => "Quantity",
            EdgeKind::Other => "Others",
        }
    }

    fn from_label(raw: &str) -> Option<Self> {
        match squash(raw).as_str() {
            "action" => Some(EdgeKind::Action),
            "spatial" => Some(EdgeKind::Spatial),
            "hasattribute" | "attribute" => Some(EdgeKind::HasAttribute),
            "partof" => Some(EdgeKind::PartOf),
            "quantity" => Some(EdgeKind::Quantity),
            "other" | "others" => Some(EdgeKind::Other),
            _ => None,
        }
    }
}

fn squash(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: EdgeKind,
    pub label: String,
    pub description: String,
}

/// A validated caption graph. Construct through [`parse_semantic_graph`]
/// or [`SemanticGraph::new`]; both enforce unique ids, resolvable edge
/// endpoints and a nonempty node set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticGraph {
    nodes: Vec<SemanticNode>,
    edges: Vec<SemanticEdge>,
    source_caption: String,
}

impl SemanticGraph {
    pub fn new(
        nodes: Vec<SemanticNode>,
        edges: Vec<SemanticEdge>,
        source_caption: impl Into<String>,
    ) -> Result<Self, GraphError> {
        let source_caption = source_caption.into();
        if source_caption.trim().is_empty() {
            return Err(GraphError::EmptyCaption);
        }
        if nodes.is_empty() {
            return Err(GraphError::SchemaViolation("graph has no nodes".into()));
        }
        let mut seen = BTreeSet::new();
        for node in &nodes {
            if node.label.trim().is_empty() {
                return Err(GraphError::SchemaViolation(format!(
                    "node {} has an empty label",
                    node.id
                )));
            }
            if !seen.insert(node.id.as_str()) {
                return Err(GraphError::DuplicateNodeId(node.id.to_string()));
            }
        }
        for (index, edge) in edges.iter().enumerate() {
            for end in [&edge.from, &edge.to] {
                if !seen.contains(end.as_str()) {
                    return Err(GraphError::DanglingEdge {
                        index,
                        id: end.to_string(),
                    });
                }
            }
        }
        Ok(Self {
            nodes,
            edges,
            source_caption,
        })
    }

    pub fn nodes(&self) -> &[SemanticNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[SemanticEdge] {
        &self.edges
    }

    pub fn source_caption(&self) -> &str {
        &self.source_caption
    }

    pub fn node(&self, id: &str) -> Option<&SemanticNode> {
        self.nodes.iter().find(|n| n.id.as_str() == id)
    }

    pub fn element_count(&self) -> usize {
        self.nodes.len() + self.edges.len()
    }

    fn endpoint(&self, id: &NodeId) -> Value {
        let label = self.node(id.as_str()).map(|n| n.label.as_str()).unwrap_or("");
        json!([id.as_str(), label])
    }

    /// The graph in the generation prompt's JSON shape, endpoints written
    /// as `[id, label]` pairs.
    pub fn to_payload(&self) -> Value {
        self.payload(false)
    }

    /// Payload for embedding in later prompts: as [`Self::to_payload`]
    /// with each edge's position under `"index"`, since coverage replies
    /// name edges by position.
    pub fn to_prompt_payload(&self) -> Value {
        self.payload(true)
    }

    fn payload(&self, with_index: bool) -> Value {
        let nodes: Vec<Value> = self
            .nodes
            .iter()
            .map(|n| json!({"id": n.id.as_str(), "type": n.kind.as_str(), "label": n.label}))
            .collect();
        let edges: Vec<Value> = self
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mut obj = Map::new();
                if with_index {
                    obj.insert("index".into(), json!(i));
                }
                obj.insert("from".into(), self.endpoint(&e.from));
                obj.insert("to".into(), self.endpoint(&e.to));
                obj.insert("type".into(), json!(e.kind.as_str()));
                obj.insert("label".into(), json!(e.label));
                obj.insert("description".into(), json!(e.description));
                Value::Object(obj)
            })
            .collect();
        json!({"nodes": nodes, "edges": edges})
    }

    /// Human-readable one-liner for an edge, e.g. `dog -[has color]-> brown`.
    pub fn describe_edge(&self, index: usize) -> Option<String> {
        let e = self.edges.get(index)?;
        let from = self.node(e.from.as_str()).map(|n| n.label.as_str())?;
        let to = self.node(e.to.as_str()).map(|n| n.label.as_str())?;
        Some(format!("{from} -[{}: {}]-> {to}", e.kind.as_str(), e.label))
    }

    /// Lists the elements still flagged in `mask`, one per line, in the
    /// form injected into question-generation prompts. `None` when nothing
    /// remains.
    pub fn describe_unverified(&self, mask: &CoverageMask) -> String {
        let mut lines = Vec::new();
        for node in &self.nodes {
            if mask.node_flag(node.id.as_str()) == Some(true) {
                lines.push(format!(
                    "- node {} ({}): {}",
                    node.id,
                    node.kind.as_str(),
                    node.label
                ));
            }
        }
        for index in 0..self.edges.len() {
            if mask.edge_flag(index) == Some(true) {
                if let Some(text) = self.describe_edge(index) {
                    lines.push(format!("- edge {index}: {text}"));
                }
            }
        }
        if lines.is_empty() {
            "None".into()
        } else {
            lines.join("\n")
        }
    }
}

impl Serialize for SemanticGraph {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let payload = self.to_payload();
        let mut s = serializer.serialize_struct("SemanticGraph", 3)?;
        s.serialize_field("caption", &self.source_caption)?;
        s.serialize_field("nodes", &payload["nodes"])?;
        s.serialize_field("edges", &payload["edges"])?;
        s.end()
    }
}

/// Parses the reply to the graph-generation prompt.
///
/// The first well-formed JSON object in `raw_model_output` is taken as the
/// payload. Unknown node or edge types become `Other`, self-loops are
/// kept; both are reported as warnings.
pub fn parse_semantic_graph(
    raw_model_output: &str,
    caption: &str,
) -> Result<Parsed<SemanticGraph>, GraphError> {
    if caption.trim().is_empty() {
        return Err(GraphError::EmptyCaption);
    }
    let obj = extract::first_object(raw_model_output).ok_or(GraphError::MalformedOutput)?;
    SemanticGraph::from_payload(&obj, caption)
}

impl SemanticGraph {
    /// Builds a graph from an already extracted payload object.
    pub fn from_payload(
        obj: &Map<String, Value>,
        caption: &str,
    ) -> Result<Parsed<SemanticGraph>, GraphError> {
        let mut warnings = Vec::new();
        let raw_nodes = field(obj, "nodes")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("missing \"nodes\" array"))?;
        let raw_edges = match field(obj, "edges") {
            None | Some(Value::Null) => &[][..],
            Some(Value::Array(items)) => items.as_slice(),
            Some(_) => return Err(schema("\"edges\" is not an array")),
        };

        let mut nodes = Vec::with_capacity(raw_nodes.len());
        for (i, raw) in raw_nodes.iter().enumerate() {
            let node = raw
                .as_object()
                .ok_or_else(|| schema(&format!("node {i} is not an object")))?;
            let id = NodeId::new(required_str(node, "id", "node", i)?)?;
            let kind_raw = required_str(node, "type", "node", i)?;
            let kind = NodeKind::from_label(kind_raw).unwrap_or_else(|| {
                warnings.push(format!("node {id}: unknown type {kind_raw:?} mapped to Others"));
                NodeKind::Other
            });
            let label = required_str(node, "label", "node", i)?.to_owned();
            nodes.push(SemanticNode { id, kind, label });
        }

        let mut edges = Vec::with_capacity(raw_edges.len());
        for (i, raw) in raw_edges.iter().enumerate() {
            let edge = raw
                .as_object()
                .ok_or_else(|| schema(&format!("edge {i} is not an object")))?;
            let from = endpoint_id(edge, "from", i)?;
            let to = endpoint_id(edge, "to", i)?;
            let kind_raw = required_str(edge, "type", "edge", i)?;
            let kind = EdgeKind::from_label(kind_raw).unwrap_or_else(|| {
                warnings.push(format!("edge {i}: unknown type {kind_raw:?} mapped to Others"));
                EdgeKind::Other
            });
            let label = required_str(edge, "label", "edge", i)?.to_owned();
            let description = match field(edge, "description").and_then(Value::as_str) {
                Some(d) => d.to_owned(),
                None => {
                    warnings.push(format!("edge {i}: missing description"));
                    String::new()
                }
            };
            if from == to {
                warnings.push(format!("edge {i}: self-loop on {from}"));
            }
            edges.push(SemanticEdge {
                from,
                to,
                kind,
                label,
                description,
            });
        }

        let graph = SemanticGraph::new(nodes, edges, caption)?;
        Ok(Parsed {
            value: graph,
            warnings,
        })
    }
}

fn schema(msg: &str) -> GraphError {
    GraphError::SchemaViolation(msg.to_owned())
}

fn required_str<'a>(
    obj: &'a Map<String, Value>,
    key: &str,
    what: &str,
    index: usize,
) -> Result<&'a str, GraphError> {
    field(obj, key)
        .and_then(Value::as_str)
        .ok_or_else(|| schema(&format!("{what} {index}: missing string field {key:?}")))
}

fn endpoint_id(edge: &Map<String, Value>, key: &str, index: usize) -> Result<NodeId, GraphError> {
    let value = field(edge, key)
        .ok_or_else(|| schema(&format!("edge {index}: missing field {key:?}")))?;
    let raw = match value {
        Value::String(s) => s.as_str(),
        Value::Array(items) => items
            .first()
            .and_then(Value::as_str)
            .ok_or_else(|| schema(&format!("edge {index}: {key:?} pair lacks an id")))?,
        Value::Object(obj) => field(obj, "id")
            .and_then(Value::as_str)
            .ok_or_else(|| schema(&format!("edge {index}: {key:?} object lacks an id")))?,
        _ => return Err(schema(&format!("edge {index}: {key:?} is not an id"))),
    };
    NodeId::new(raw)
}

/// Binary flags over a graph's nodes and edges; `true` marks an element no
/// question has examined yet. Flags only ever go from `true` to `false`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMask {
    node_flags: BTreeMap<NodeId, bool>,
    edge_flags: BTreeMap<usize, bool>,
}

/// All-ones mask: every element of `graph` unexamined.
pub fn fresh_mask(graph: &SemanticGraph) -> CoverageMask {
    CoverageMask {
        node_flags: graph.nodes.iter().map(|n| (n.id.clone(), true)).collect(),
        edge_flags: (0..graph.edges.len()).map(|i| (i, true)).collect(),
    }
}

impl CoverageMask {
    /// Returns a copy with the listed elements cleared. Identifiers absent
    /// from the mask are an error and leave no partial update behind.
    pub fn apply_coverage<N, E>(&self, examined_nodes: N, examined_edges: E) -> Result<Self, GraphError>
    where
        N: IntoIterator,
        N::Item: AsRef<str>,
        E: IntoIterator<Item = usize>,
    {
        let mut next = self.clone();
        for id in examined_nodes {
            let id = id.as_ref();
            let flag = next
                .node_flags
                .get_mut(id)
                .ok_or_else(|| GraphError::UnknownElement(id.to_owned()))?;
            *flag = false;
        }
        for index in examined_edges {
            let flag = next
                .edge_flags
                .get_mut(&index)
                .ok_or_else(|| GraphError::UnknownElement(format!("edge {index}")))?;
            *flag = false;
        }
        Ok(next)
    }

    pub fn is_fully_covered(&self) -> bool {
        self.node_flags.values().chain(self.edge_flags.values()).all(|f| !f)
    }

    pub fn node_flag(&self, id: &str) -> Option<bool> {
        self.node_flags.get(id).copied()
    }

    pub fn edge_flag(&self, index: usize) -> Option<bool> {
        self.edge_flags.get(&index).copied()
    }

    pub fn contains_node(&self, id: &str) -> bool {
        self.node_flags.contains_key(id)
    }

    pub fn contains_edge(&self, index: usize) -> bool {
        self.edge_flags.contains_key(&index)
    }

    pub fn len(&self) -> usize {
        self.node_flags.len() + self.edge_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn remaining(&self) -> usize {
        self.node_flags
            .values()
            .chain(self.edge_flags.values())
            .filter(|f| **f)
            .count()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.node_flags.keys()
    }

    pub fn edge_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.edge_flags.keys().copied()
    }
}

impl Serialize for CoverageMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        struct Flags<'a, K>(&'a BTreeMap<K, bool>);
        impl<K: fmt::Display> Serialize for Flags<'_, K> {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                let mut m = serializer.serialize_map(Some(self.0.len()))?;
                for (k, v) in self.0 {
                    m.serialize_entry(&k.to_string(), &u8::from(*v))?;
                }
                m.end()
            }
        }
        let mut s = serializer.serialize_struct("CoverageMask", 2)?;
        s.serialize_field("nodes", &Flags(&self.node_flags))?;
        s.serialize_field("edges", &Flags(&self.edge_flags))?;
        s.end()
    }
}
