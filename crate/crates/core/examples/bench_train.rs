//! Scratch harness for tuning default hyperparameters on the reference
//! tasks. Prints per-stage diagnostics for one DEN run.

use den_core::lifelong::{DenLearner, HyperParams, Learner};
use den_core::tasks::{generate, Split, TaskFamilyConfig};
use den_core::trainer::TrainConfig;
use std::time::Instant;

fn auroc_of(learner: &DenLearner, tasks: &[den_core::tasks::TaskDataset], t: u32) -> f64 {
    let data = &tasks[t as usize - 1];
    let ex = data.examples(Split::Test);
    let scores: Vec<f64> = ex.iter().map(|(x, _)| learner.predict(t, x).unwrap()).collect();
    let labels: Vec<u8> = ex.iter().map(|(_, y)| *y as u8).collect();
    den_core::tasks::auroc(&scores, &labels).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mu: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let gamma: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let tau: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.35);
    let sigma: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let cfg = TaskFamilyConfig::default();
    let tasks = generate(&cfg).unwrap();
    let hp = HyperParams {
        mu,
        gamma,
        tau,
        sigma,
        train: TrainConfig::default(),
        ..Default::default()
    };
    println!("mu={mu} gamma={gamma} tau={tau} sigma={sigma}");
    let mut learner = DenLearner::new("den", 32, &[64, 32], hp, 1).unwrap();
    let mut t1_auroc_at_1 = 0.0;
    for data in &tasks {
        let t0 = Instant::now();
        let r = learner.den_observe(data).unwrap();
        let mut rhos: Vec<f64> = r.drift.entries.iter().map(|e| e.rho).collect();
        rhos.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |f: f64| -> f64 {
            if rhos.is_empty() { 0.0 } else { rhos[((rhos.len() - 1) as f64 * f) as usize] }
        };
        let zeros: Vec<String> = (0..2)
            .map(|l| {
                let m = &learner.net.layer(l).incoming;
                let z = m.data().iter().filter(|&&v| v == 0.0).count();
                format!("{z}/{}", m.data().len())
            })
            .collect();
        println!(
            "stage {:>2}: loss {:>8.4} added {:>2} surv {:>2} splits {:>3} cap {:>6} zeros {:?} {:?}",
            r.task_id,
            r.retrain_loss,
            r.added_total(),
            r.surviving_total(),
            r.split_count,
            r.capacity_after,
            zeros,
            t0.elapsed()
        );
        if !rhos.is_empty() {
            println!("          rho p50 {:.3} p90 {:.3} max {:.3}", q(0.5), q(0.9), q(1.0));
        }
        if r.task_id == 1 {
            t1_auroc_at_1 = auroc_of(&learner, &tasks, 1);
        }
    }
    let t_final = tasks.len() as u32;
    let aurocs: Vec<f64> = (1..=t_final).map(|t| auroc_of(&learner, &tasks, t)).collect();
    let avg = aurocs.iter().sum::<f64>() / aurocs.len() as f64;
    println!(
        "avg auroc {:.4}; task1 {:.4} -> {:.4} (drop {:+.4})",
        avg,
        t1_auroc_at_1,
        aurocs[0],
        t1_auroc_at_1 - aurocs[0]
    );
}
