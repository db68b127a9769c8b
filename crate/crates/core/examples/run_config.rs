//! Runs an experiment configuration through the artifact runner and prints
//! the manifest. Usage: `run_config <kind> <config.toml> <out-dir>`.

use std::path::PathBuf;

use quenched::config::ExperimentKind;
use quenched::runner::{run_config_file, RunOptions};

fn main() -> quenched::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind: ExperimentKind = args.next().unwrap_or_else(|| "convolution-K".into()).parse()?;
    let config = PathBuf::from(args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/convolution_k.toml").into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| std::env::temp_dir().join("quenched_run").display().to_string()));
    let opts = RunOptions { emit_plots_data: true, ..RunOptions::new(&out) };
    let manifest = run_config_file(kind, &config, &opts)?;
    println!("{:?} ({}), config sha256 {}", manifest.status, manifest.kind, manifest.config_sha256);
    for f in &manifest.files {
        println!("  {:<28} {:>8} bytes  {}", f.path, f.bytes, &f.sha256[..16]);
    }
    Ok(())
}
