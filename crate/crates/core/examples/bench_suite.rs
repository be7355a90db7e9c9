//! Criterion-oriented tuning bench: runs the reference-style experiment for
//! several learners on one seed and prints the quantities the acceptance
//! suite checks (avg AUROC, task-1 drop, final capacity, expansion stats,
//! wall time).

use den_core::experiment::{default_config, run, LearnerKind, RunOptions};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mu: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-2);
    let gamma: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let tau: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let sigma: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let lambda: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1e-2);
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(42);
    let epochs: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(500);
    let l2_lambda: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(lambda);
    let only: Option<String> = args.get(9).cloned();
    let relatedness: f64 = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(0.5);

    let mut cfg = default_config();
    cfg.seed = seed;
    cfg.tasks.seed = seed.wrapping_add(1000);
    cfg.tasks.relatedness = relatedness;
    for lc in &mut cfg.learners {
        lc.hyper.mu = mu;
        lc.hyper.gamma = gamma;
        lc.hyper.tau = tau;
        lc.hyper.sigma = sigma;
        lc.hyper.lambda = lambda;
        lc.hyper.train.max_epochs = epochs;
        if matches!(lc.kind, LearnerKind::L2 | LearnerKind::Ewc) {
            lc.hyper.lambda = l2_lambda;
        }
    }
    if let Some(only) = &only {
        cfg.learners.retain(|lc| only.split(',').any(|k| k == lc.kind.as_str()));
    }
    println!("mu={mu} gamma={gamma} tau={tau} sigma={sigma} lambda={lambda} l2_lambda={l2_lambda} epochs={epochs} seed={seed}");
    let t0 = Instant::now();
    let out = run(
        &cfg,
        &RunOptions {
            no_artifacts: true,
            ..Default::default()
        },
    )
    .unwrap();
    let t_final = cfg.tasks.task_count;
    for lc in &cfg.learners {
        let name = lc.effective_name();
        let s = &out.summaries[&name];
        let t1_at_1 = out
            .metrics
            .iter()
            .find(|r| r.learner == name && r.stage == 1 && r.task == 1)
            .map(|r| r.auroc)
            .unwrap_or(f64::NAN);
        let t1_at_t = out
            .metrics
            .iter()
            .find(|r| r.learner == name && r.stage == t_final && r.task == 1)
            .map(|r| r.auroc)
            .unwrap_or(f64::NAN);
        let reports = &out.reports[&name];
        let added: usize = reports.iter().map(|r| r.added_total()).sum();
        let surv: usize = reports.iter().map(|r| r.surviving_total()).sum();
        let splits: usize = reports.iter().map(|r| r.split_count).sum();
        let ms: u64 = reports.iter().map(|r| r.wall_ms).sum();
        println!(
            "{name:>12}: avg {:.4} | task1 {:.4}->{:.4} (drop {:+.4}) | cap {:>6} | added {added:>3} surv {surv:>3} splits {splits:>3} | {ms:>6} ms",
            s.avg_auroc, t1_at_1, t1_at_t, t1_at_1 - t1_at_t, s.final_capacity
        );
        let at_final: Vec<String> = out
            .metrics
            .iter()
            .filter(|r| r.learner == name && r.stage == t_final)
            .map(|r| format!("{:.3}", r.auroc))
            .collect();
        let fresh: Vec<String> = (1..=t_final)
            .map(|t| {
                out.metrics
                    .iter()
                    .find(|r| r.learner == name && r.stage == t && r.task == t)
                    .map(|r| format!("{:.3}", r.auroc))
                    .unwrap_or_default()
            })
            .collect();
        println!("      at T:  [{}]", at_final.join(" "));
        println!("      fresh: [{}]", fresh.join(" "));
    }
    if matches!(cfg.learners.first().map(|l| l.kind), Some(LearnerKind::Den)) {
        let dr = &out.reports["den"];
        let per_stage: Vec<String> = dr
            .iter()
            .map(|r| format!("s{}:{}/{}/{}", r.task_id, r.added_total(), r.surviving_total(), r.split_count))
            .collect();
        println!("den add/surv/split per stage: {}", per_stage.join(" "));
        for r in dr.iter() {
            let mut rhos: Vec<f64> = r.drift.entries.iter().map(|e| e.rho).collect();
            rhos.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |f: f64| -> f64 {
                if rhos.is_empty() {
                    0.0
                } else {
                    rhos[((rhos.len() - 1) as f64 * f) as usize]
                }
            };
            println!(
                "  s{:<2} loss {:.4} trainable {:>5} rho p50 {:.3} p90 {:.3} max {:.3}",
                r.task_id,
                r.retrain_loss,
                r.audit.trainable.len(),
                q(0.5),
                q(0.9),
                q(1.0)
            );
        }
    }
    println!("total wall: {:?}", t0.elapsed());
}
