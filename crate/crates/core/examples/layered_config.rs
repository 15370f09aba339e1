//! Resolves a preset, applies dotted overrides, and prints the frozen result.
//!
//! cargo run --example layered_config -- voc inference.stride=56 augmentation.lambda=0.5

use ovseg::config::RunConfig;

fn main() -> ovseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "voc".into());
    let overrides: Vec<(String, String)> = args
        .map(|a| {
            let (k, v) = a.split_once('=').unwrap_or((a.as_str(), "true"));
            (k.to_string(), v.to_string())
        })
        .collect();
    let cfg = RunConfig::build(Some(&preset), None, &overrides)?;
    print!("{}", cfg.snapshot());
    match RunConfig::build(Some(&preset), None, &[("inference.strid".into(), "56".into())]) {
        Ok(_) => println!("# misspelt key was accepted"),
        Err(e) => println!("# misspelt key rejected: {e}"),
    }
    Ok(())
}
