//! Mean accuracies of the main variants over several master seeds.
//!
//! ```text
//! cargo run --release --example multiseed -- [config.toml] [num_seeds] [first_seed]
//! ```

use cpl_core::config::{RunConfig, Variant};
use cpl_core::orchestrator::{prepare, run_variant, RunResult};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn main() -> cpl_core::error::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let base = match args.first() {
        Some(p) if p.ends_with(".toml") => RunConfig::from_toml(&std::fs::read_to_string(p)?)?,
        _ => RunConfig::default(),
    };
    let mut numbers = args.iter().filter_map(|a| a.parse::<u64>().ok());
    let seeds = numbers.next().unwrap_or(5);
    let first = numbers.next().unwrap_or(0);
    let variants = [Variant::Cpl, Variant::Shuffle, Variant::CompleteOnly, Variant::DepthwiseQ];
    let mut rows: Vec<Vec<RunResult>> = vec![Vec::new(); variants.len()];
    let started = std::time::Instant::now();
    for seed in first..first + seeds {
        let mut config = base.clone();
        config.run.seed = seed;
        let prepared = prepare(&config)?;
        for (i, v) in variants.iter().enumerate() {
            let r = run_variant(&config, &prepared, *v)?.result;
            let series: Vec<f64> = r.checkpoints.iter().map(|c| c.accuracy).collect();
            println!(
                "seed {seed} {:<14} base {:.3} sft {:.3} epochs {:?} best {:.3} ckpt_std {:.4} pairs {}",
                v.as_str(), r.base_accuracy, r.sft_accuracy, r.epoch_accuracies, r.best_checkpoint_accuracy, std(&series), r.buffer.total
            );
            rows[i].push(r);
        }
    }
    println!("--- means over {seeds} seeds ({:.1}s)", started.elapsed().as_secs_f64());
    for (v, rs) in variants.iter().zip(&rows) {
        let col = |f: &dyn Fn(&RunResult) -> f64| mean(&rs.iter().map(f).collect::<Vec<_>>());
        println!(
            "{:<14} base {:.4} sft {:.4} e1 {:.4} e2 {:.4} best {:.4} ckpt_std {:.4}",
            v.as_str(),
            col(&|r| r.base_accuracy),
            col(&|r| r.sft_accuracy),
            col(&|r| r.epoch_accuracies[0]),
            col(&|r| *r.epoch_accuracies.last().unwrap()),
            col(&|r| r.best_checkpoint_accuracy),
            col(&|r| std(&r.checkpoints.iter().map(|c| c.accuracy).collect::<Vec<_>>())),
        );
    }
    Ok(())
}
