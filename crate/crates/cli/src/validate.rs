use std::path::Path;

use serde_json::json;

use constellation_core::constellation::{
    ConstellationDocument, ConstellationError, TaskConstellation,
};

use crate::{emit, exit};

pub fn cmd_validate(path: &Path) -> i32 {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            emit(json!({"type": "error", "path": path, "error": e.to_string()}));
            return exit::PARSE;
        }
    };
    let doc: ConstellationDocument = match serde_json::from_str(&text) {
        Ok(d) => d,
        Err(e) => {
            emit(json!({"type": "error", "path": path, "error": format!("parse: {e}")}));
            return exit::PARSE;
        }
    };
    match TaskConstellation::from_document(doc) {
        Ok(c) => {
            let order = c.topological_order().unwrap_or_default();
            emit(json!({
                "type": "validate",
                "path": path,
                "valid": true,
                "tasks": c.len(),
                "dependencies": c.edges().len(),
                "topological_order": order,
            }));
            exit::OK
        }
        Err(ConstellationError::ValidationFailed(violations)) => {
            emit(
                json!({"type": "validate", "path": path, "valid": false, "violations": violations}),
            );
            exit::INVALID
        }
        Err(e) => {
            emit(json!({"type": "validate", "path": path, "valid": false, "error": e.to_string()}));
            exit::INVALID
        }
    }
}
