//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails or overruns its time budget.

mod data;
mod gradients;
mod losses;
mod oracles;
mod training;

use std::panic;
use std::time::{Duration, Instant};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}
pub(crate) use ensure;

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 9] = [
        ("edit-distance oracle", 30, oracles::edit_distance_oracle),
        ("CTC oracle", 60, oracles::ctc_oracle),
        ("gradient suite", 300, gradients::suite),
        ("loss reductions", 60, losses::reductions),
        ("overfit end-to-end", 300, training::overfit),
        ("segmentation round trip", 60, data::segmentation),
        ("split invariants", 60, data::splits),
        ("augmentation properties", 120, data::augmentation),
        ("numeric spot checks", 10, losses::spot_checks),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > Duration::from_secs(limit) => {
                Err(format!("{detail}; took {elapsed:.1?}, budget {limit}s"))
            }
            r => r,
        };
        match result {
            Ok(detail) => println!("[PASS] {}. {name} ({elapsed:.1?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {}. {name} ({elapsed:.1?}): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
