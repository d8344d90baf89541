//! Paired semi-supervised vs supervised runs on the synthetic task.
//!
//! usage: desk_gain <n_seeds> [key=value overrides applied to both presets]

use std::time::Instant;

use mtseg::config::{apply_overrides, preset};
use mtseg::trainer::fit;

fn main() -> mtseg::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    let overrides = &args[1.min(args.len())..];
    let semi = apply_overrides(&preset("desk-semi")?, overrides)?;
    let sup = apply_overrides(&preset("desk-supervised")?, overrides)?;
    let data = semi.data.load()?;
    let mut wins = 0;
    for s in 0..seeds {
        let t0 = Instant::now();
        let mut a = semi.train.clone();
        a.seed = s;
        let ra = fit(&a, &data, None)?.test.unwrap();
        let ta = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let mut b = sup.train.clone();
        b.seed = s;
        let rb = fit(&b, &data, None)?.test.unwrap();
        let tb = t1.elapsed().as_secs_f64();
        if ra.teacher.dice > rb.student.dice {
            wins += 1;
        }
        println!(
            "seed {s}: semi teacher {:.2} student {:.2} ({ta:.0}s) | sup student {:.2} teacher {:.2} ({tb:.0}s)",
            ra.teacher.dice, ra.student.dice, rb.student.dice, rb.teacher.dice
        );
    }
    println!("wins {wins}/{seeds}");
    Ok(())
}
