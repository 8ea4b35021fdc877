//! Runs every stage in order from a TOML config and prints the report.
//!
//! `cargo run --release --example run_pipeline -- [config.toml] [output_dir]`

use std::path::Path;
use std::time::Instant;

use gpmech::run::{Pipeline, RunConfig};

fn main() -> gpmech::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = match args.first() {
        Some(p) => RunConfig::load(Path::new(p))?,
        None => RunConfig::default(),
    };
    if let Some(dir) = args.get(1) {
        cfg.output_dir = dir.into();
    }
    let pipe = Pipeline::new(cfg);
    let start = Instant::now();
    for m in pipe.run_all()? {
        println!("{:<18} {} outputs", m.command, m.outputs.len());
    }
    println!("finished in {:.0?}\n", start.elapsed());
    print!("{}", std::fs::read_to_string(pipe.layout.report())?);
    Ok(())
}
