// Scratch harness for timing and convergence probing. Not part of the
// deliverable surface; run with:
//   cargo run --release -p fess-core --example tune -- <mode>
use std::time::Instant;

use fess_core::data::{generate, split, SyntheticSpec};
use fess_core::losses::{LossConfig, LossVariant};
use fess_core::trainer::{train, TrainerConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("time");
    match mode {
        "time" => time_steps(),
        "lr" => lr_sweep(),
        "conv" => convergence(args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.05)),
        "sweep" => sweep(),
        "watch" => watch(
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.1),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2),
        ),
        other => eprintln!("unknown mode {other}"),
    }
}

fn dataset(seed: u64) -> (Vec<fess_core::data::Sample>, Vec<fess_core::data::Sample>) {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let samples = generate(&spec, 50).unwrap();
    split(samples, 0.8, seed).unwrap()
}

fn cfg(lr: f64, steps: usize, seed: u64) -> TrainerConfig {
    TrainerConfig {
        batch_size: 5,
        learning_rate: lr,
        steps,
        eval_every: 50,
        loss: LossConfig {
            lambda: 0.9,
            variant: LossVariant::Fess,
            ..LossConfig::default()
        },
        seed,
    }
}

fn time_steps() {
    let (train_set, test_set) = dataset(0);
    let t0 = Instant::now();
    let (_p, log) = train(&cfg(1e-5, 10, 0), &train_set[..40], &test_set).unwrap();
    let dt = t0.elapsed();
    println!(
        "10 steps in {:.2}s -> {:.0} ms/step; first dice {:.4}",
        dt.as_secs_f64(),
        dt.as_secs_f64() * 100.0,
        log.steps[0].dice_term
    );
}

fn lr_sweep() {
    let (train_set, test_set) = dataset(0);
    for lr in [1e-5, 1e-3, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0] {
        let t0 = Instant::now();
        let (_p, log) = train(&cfg(lr, 200, 0), &train_set[..40], &test_set).unwrap();
        let evals: Vec<String> = log
            .evals
            .iter()
            .map(|e| format!("{}:{:.3}", e.step + 1, e.report.dice))
            .collect();
        println!(
            "lr {:>8}: dice trail [{}] last_total {:.4} ({:.1}s)",
            lr,
            evals.join(" "),
            log.steps.last().unwrap().total,
            t0.elapsed().as_secs_f64()
        );
    }
}

fn convergence(lr: f64) {
    for seed in [0u64, 1, 2] {
        let (train_set, test_set) = dataset(seed);
        let t0 = Instant::now();
        let (_p, log) = train(&cfg(lr, 200, seed), &train_set[..40], &test_set).unwrap();
        println!(
            "seed {seed}: final dice {:.4} in {:.1}s",
            log.final_eval().unwrap().dice,
            t0.elapsed().as_secs_f64()
        );
    }
}

// Pass-rate sweep over (lr, eta, seed) cells in parallel.
fn sweep() {
    use rayon::prelude::*;
    let mut cells = Vec::new();
    for &(lr, eta) in &[
        (0.05, 1e-5),
        (0.07, 1e-5),
        (0.1, 1e-5),
        (0.1, 1.0),
        (0.1, 10.0),
        (0.15, 10.0),
    ] {
        for seed in 0..8u64 {
            cells.push((lr, eta, seed));
        }
    }
    let results: Vec<(f64, f64, u64, f64)> = cells
        .par_iter()
        .map(|&(lr, eta, seed)| {
            let (train_set, test_set) = dataset(seed);
            let mut c = cfg(lr, 200, seed);
            c.loss.eta = eta;
            let (_p, log) = train(&c, &train_set[..40], &test_set).unwrap();
            (lr, eta, seed, log.final_eval().unwrap().dice)
        })
        .collect();
    for &(lr, eta, _) in &[
        (0.05, 1e-5, 0),
        (0.07, 1e-5, 0),
        (0.1, 1e-5, 0),
        (0.1, 1.0, 0),
        (0.1, 10.0, 0),
        (0.15, 10.0, 0),
    ] {
        let dices: Vec<f64> = results
            .iter()
            .filter(|r| r.0 == lr && r.1 == eta)
            .map(|r| r.3)
            .collect();
        let passes = dices.iter().filter(|&&d| d >= 0.8).count();
        let row: Vec<String> = dices.iter().map(|d| format!("{d:.2}")).collect();
        println!("lr {lr:>5} eta {eta:>6}: {passes}/8 pass  [{}]", row.join(" "));
    }
}

// Watch per-step loss and prediction mass to see collapse dynamics.
fn watch(lr: f64, seed: u64) {
    use fess_core::model;
    use fess_core::trainer::{stack_batch, train_step, EmbeddingBuffer};
    let (train_set, test_set) = dataset(seed);
    let cfg = cfg(lr, 200, seed);
    let mut params = model::init_params(seed ^ 0x9e3779b97f4a7c15, 1);
    let mut buffer = EmbeddingBuffer::default();
    for step in 0..120usize {
        let lo = (step * 5) % 40;
        let batch: Vec<&fess_core::data::Sample> = train_set[lo..lo + 5].iter().collect();
        let (images, masks) = stack_batch(&batch).unwrap();
        let c = train_step(&mut params, &images, &masks, &mut buffer, &cfg).unwrap();
        if step % 10 == 0 {
            let out = model::infer(&params, &images).unwrap();
            let mean_p = out.probs.data().iter().sum::<f64>() / out.probs.len() as f64;
            let max_p = out.probs.data().iter().cloned().fold(0.0, f64::max);
            let dice = fess_core::trainer::evaluate(&params, &test_set, 0.5).unwrap().dice;
            println!(
                "step {step:3}: loss {:.4} mean_p {:.4} max_p {:.4} heldout_dice {:.3}",
                c.total, mean_p, max_p, dice
            );
        }
    }
}
