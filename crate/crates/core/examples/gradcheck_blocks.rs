//! Central-difference gradient check of every network block and loss.
//!
//! cargo run --example gradcheck_blocks

use pointfuse::checks::run_all;

fn main() -> pointfuse::Result<()> {
    let t0 = std::time::Instant::now();
    for c in run_all(0)? {
        println!(
            "{:<28} {:>6} coords  max rel err {:.3e}  {}",
            c.name,
            c.report.coordinates,
            c.report.max_rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("{:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
