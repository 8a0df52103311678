//! The whole mock pipeline in a scratch directory: synth, ingest, fuse, then
//! full vs no_hkf (and no_it against a second backend) in one report.

use hkfr::config::{BackendConfig, RunConfig};
use hkfr::pipeline::{run_all, Workspace};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let ws = Workspace::new(dir.path());
    let cfg = RunConfig {
        base_backend: Some(BackendConfig {
            model_name: "base".into(),
            ..BackendConfig::default()
        }),
        ..RunConfig::default()
    };
    let users = std::env::args().nth(1).map_or(Ok(200), |s| s.parse())?;
    let report = run_all(&ws, &cfg, users, 0.3)?;
    print!("{}", report.to_table());
    Ok(())
}
