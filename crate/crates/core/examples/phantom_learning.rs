//! Trains MimirNet-S on a phantom cohort and prints validation metrics.
//!
//! `cargo run --release -p mimir-core --example phantom_learning -- [n_subjects] [iterations] [HxW] [lr]`
//!
//! `lr` sets the first-stage rate; the second stage runs at a tenth of it.

use std::time::Instant;

use mimir_core::dataset::make_folds;
use mimir_core::inference::{prepare_tile, raw_predictions};
use mimir_core::metrics::{auc_roc, icc_2_1, r_squared};
use mimir_core::model::{NetworkConfig, DEFAULT_INPUT};
use mimir_core::phantom::{generate_subject, labels_with_dropout, phantom_registry, PhantomSpec, SEX_ANALOG};
use mimir_core::training::{train, TrainingConfig};
use rayon::prelude::*;

fn main() -> mimir_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map_or(2000, |v| v.parse().expect("n_subjects"));
    let iters: usize = args.get(2).map_or(2000, |v| v.parse().expect("iterations"));
    let (h, w) = args.get(3).map_or((DEFAULT_INPUT.1, DEFAULT_INPUT.2), |v| {
        let (h, w) = v.split_once('x').expect("HxW");
        (h.parse().expect("H"), w.parse().expect("W"))
    });
    let lr: f64 = args.get(4).map_or(5e-5, |v| v.parse().expect("lr"));
    let spec = PhantomSpec {
        n_subjects: n,
        missing_rate: 0.5,
        seed: 1,
        ..PhantomSpec::default()
    };
    let registry = phantom_registry();
    let network = NetworkConfig::mimirnet_s((2, h, w), registry.len(), 7);

    let start = Instant::now();
    let rows: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = generate_subject(&spec, i)?;
            let tile = prepare_tile(&s.volume, &network)?;
            let values: Vec<f64> = registry.targets().iter().map(|t| s.truth[&t.name]).collect();
            Ok((s.subject_id, values, tile))
        })
        .collect::<mimir_core::Result<_>>()?;
    println!("generated {n} subjects in {:.1?}", start.elapsed());
    let tiles: Vec<_> = rows.iter().map(|r| r.2.clone()).collect();
    let labels = labels_with_dropout(
        &registry,
        rows.into_iter().map(|r| (r.0, r.1)).collect(),
        spec.missing_rate,
        spec.seed,
    )?;
    let folds = make_folds(&labels, 5, Some(SEX_ANALOG), 3)?;
    let config = TrainingConfig {
        total_iterations: iters,
        stage1_iterations: (iters * 4 / 5).max(1),
        lr_stage1: lr,
        lr_stage2: lr / 10.0,
        ..TrainingConfig::default()
    };

    let start = Instant::now();
    let model = train(&tiles, &labels, Some((&folds, 0)), &network, &config)?;
    println!("trained {iters} iterations in {:.1?}", start.elapsed());
    for e in model.log.entries.iter().step_by((iters / 10).max(1)) {
        println!("  it {:5} lr {:.0e} loss {:.4}", e.iteration, e.lr, e.loss);
    }

    let val = folds.validation_rows(0);
    let vt: Vec<_> = val.iter().map(|&r| &tiles[r]).collect();
    let (mu, _) = raw_predictions(&model.params, &network, &model.norm_stats, &model.input_norm, &vt)?;
    let t = registry.len();
    for (k, target) in registry.targets().iter().enumerate() {
        let (truth, pred): (Vec<f64>, Vec<f64>) = val
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| labels.get(r, k).map(|y| (y, mu[i * t + k])))
            .unzip();
        let icc = icc_2_1(&truth, &pred)?.value;
        let r2 = r_squared(&truth, &pred)?;
        let auc = auc_roc(&truth, &pred).map(|a| format!(" AUC={a:.3}")).unwrap_or_default();
        println!("{:14} n={:4} R2={r2:.3} ICC={icc:.3}{auc}", target.name, truth.len());
    }
    Ok(())
}
