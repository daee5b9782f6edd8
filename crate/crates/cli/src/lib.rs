//! Command-line entry point and HTTP session service for adapter and copy-head dialogue checkpoints.

pub mod commands;
pub mod server;

/// The `{"error": {"code", "message"}}` document printed on failure.
pub fn error_document(err: &anyhow::Error) -> serde_json::Value {
    let code = err
        .downcast_ref::<acn_core::AcnError>()
        .map_or("error", acn_core::AcnError::code);
    serde_json::json!({"error": {"code": code, "message": format!("{err:#}")}})
}
