//! Runs the ten acceptance criteria at full scale and prints one line per
//! criterion. Exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=3,7` restricts the run to the listed criteria.

use flowproc::checks::{Suite, CRITERIA};
use flowproc_core::par::Execution;

const SEED: u64 = 1;

fn main() {
    // `cargo test -- --list` and friends expect no work to be done
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let suite = Suite::new(SEED, None, Execution::Parallel);
    let mut failed = 0;
    for &(id, _) in CRITERIA.iter() {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = suite.run(id);
        println!("{}", outcome.line());
        failed += usize::from(!outcome.pass);
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
