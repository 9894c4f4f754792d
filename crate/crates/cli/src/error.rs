use std::path::PathBuf;

/// An upstream artifact a stage needs is absent. The binary exits with
/// status 2 on this error and 1 on every other failure.
#[derive(Debug, thiserror::Error)]
#[error("missing artifact: {}", .0.display())]
pub struct MissingArtifact(pub PathBuf);
