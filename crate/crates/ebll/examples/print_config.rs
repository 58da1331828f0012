//! Prints the built-in benchmark configuration as TOML, ready to save and
//! edit. Usage: `cargo run --example print_config [tasks] [seed]`.

use ebll::config::RunConfig;

fn main() {
    let mut args = std::env::args().skip(1);
    let tasks: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let cfg = RunConfig::benchmark("benchmark", tasks, seed);
    print!("{}", cfg.to_toml());
}
