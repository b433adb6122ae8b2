use serde::{Deserialize, Serialize};

use super::{ConstellationError, Result, TaskConstellation, TaskStar, TaskStarLine, Violation};

/// Identifier of the document schema shipped in `schemas/`.
pub const DOCUMENT_SCHEMA_ID: &str = "constellation-document/v1";

/// Canonical wire form: tasks and dependencies as arrays sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationDocument {
    pub request: String,
    pub version: u64,
    pub tasks: Vec<TaskStar>,
    pub dependencies: Vec<TaskStarLine>,
}

impl TaskConstellation {
    pub fn to_document(&self) -> ConstellationDocument {
        ConstellationDocument {
            request: self.request.clone(),
            version: self.version,
            tasks: self.tasks.values().cloned().collect(),
            dependencies: self.edges.values().cloned().collect(),
        }
    }

    /// Rebuilds a constellation, rejecting duplicate ids and any violation
    /// `validate` would report.
    pub fn from_document(doc: ConstellationDocument) -> Result<Self> {
        let mut c = TaskConstellation::new(doc.request);
        c.version = doc.version;
        let mut violations = Vec::new();
        for task in doc.tasks {
            if c.tasks.contains_key(&task.id) {
                violations.push(Violation::DuplicateTaskId { task: task.id });
            } else {
                c.tasks.insert(task.id.clone(), task);
            }
        }
        for edge in doc.dependencies {
            if c.edges.contains_key(&edge.id) {
                violations.push(Violation::DuplicateEdgeId { edge: edge.id });
            } else {
                c.edges.insert(edge.id.clone(), edge);
            }
        }
        violations.extend(c.validate());
        if violations.is_empty() {
            Ok(c)
        } else {
            Err(ConstellationError::ValidationFailed(violations))
        }
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ConstellationDocument =
            serde_json::from_str(text).map_err(|e| ConstellationError::Parse(e.to_string()))?;
        Self::from_document(doc)
    }
}

/// Pretty-printed canonical JSON. Object keys inside result payloads are
/// sorted because `serde_json::Map` is ordered.
pub fn canonical_json(c: &TaskConstellation) -> String {
    serde_json::to_string_pretty(&c.to_document()).expect("document is always serializable")
}
