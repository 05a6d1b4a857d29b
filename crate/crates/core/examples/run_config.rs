//! Prints a run configuration as TOML, optionally loading and validating
//! one first, together with its preprocessing cache key.
//!
//! cargo run --example run_config -- [config.toml | toy]

use std::path::Path;

use pointfuse::config::RunConfig;

fn main() -> pointfuse::Result<()> {
    let cfg = match std::env::args().nth(1).as_deref() {
        None => RunConfig::default(),
        Some("toy") => RunConfig::toy(),
        Some(p) => RunConfig::load(Path::new(p))?,
    };
    cfg.validate()?;
    print!("{}", cfg.to_toml()?);
    println!("# cache key {}", cfg.preprocess_key()?);
    Ok(())
}
