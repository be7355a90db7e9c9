//! Dissects the incremental stage pipeline phase by phase: loss and fresh
//! AUROC after head fit, selective retrain, expansion, and the split pass.

use den_core::lifelong::{DenLearner, HyperParams, Learner};
use den_core::tasks::{generate, Split, TaskFamilyConfig};
use den_core::trainer::{mean_data_loss, TrainConfig};

fn auroc_of(learner: &DenLearner, data: &den_core::tasks::TaskDataset, t: u32) -> f64 {
    let ex = data.examples(Split::Test);
    let scores: Vec<f64> = ex.iter().map(|(x, _)| learner.predict(t, x).unwrap()).collect();
    let labels: Vec<u8> = ex.iter().map(|(_, y)| *y as u8).collect();
    den_core::tasks::auroc(&scores, &labels).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let rel: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let sigma: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.25);
    let lambda: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let tasks = generate(&TaskFamilyConfig {
        relatedness: rel,
        seed: 1042,
        ..Default::default()
    })
    .unwrap();
    let hp = HyperParams {
        mu: 1e-2,
        gamma: 1e-3,
        tau: 0.03,
        sigma,
        lambda,
        k: 8,
        train: TrainConfig::default(),
    };
    let mut learner = DenLearner::new("den", 32, &[64, 32], hp, 7).unwrap();
    let r = learner.den_first_task(&tasks[0]).unwrap();
    println!(
        "stage 1: loss {:.4}, auroc {:.4}",
        r.retrain_loss,
        auroc_of(&learner, &tasks[0], 1)
    );
    for data in &tasks[1..6] {
        let t = data.task_id;
        let batch = data.examples(Split::Train);
        learner.fit_output_head(data).unwrap();
        let l_head = mean_data_loss(&learner.net, &batch, t).unwrap();
        let a_head = auroc_of(&learner, data, t);
        let sel = learner.select_subnetwork().unwrap();
        let sel_units = sel.selected_unit_count();
        let l_retrain = learner.selective_retrain(data, &sel).unwrap();
        let a_retrain = auroc_of(&learner, data, t);
        let (l_exp, a_exp, stats) = if l_retrain > learner.hp.tau {
            let stats = learner.dynamic_expand(data).unwrap();
            (
                mean_data_loss(&learner.net, &batch, t).unwrap(),
                auroc_of(&learner, data, t),
                stats.iter().map(|e| e.surviving()).sum::<usize>(),
            )
        } else {
            (l_retrain, a_retrain, 0)
        };
        let drift = learner.split_stage(data, Some(&sel)).unwrap();
        let l_split = mean_data_loss(&learner.net, &batch, t).unwrap();
        let a_split = auroc_of(&learner, data, t);
        learner.net.snapshot_commit();
        println!(
            "stage {t}: head l={l_head:.4} a={a_head:.4} | sel {sel_units} units, retrain l={l_retrain:.4} a={a_retrain:.4} | expand(surv {stats}) l={l_exp:.4} a={a_exp:.4} | split({}) l={l_split:.4} a={a_split:.4}",
            drift.split_count()
        );
    }
}
