//! Scratch calibration runs for the acceptance-scale workloads.

use citmil::cohort::{generate_cohort, generate_tile_set, CohortSpec};
use citmil::encoder::{finetune_morph, pretrain_mae, VitConfig};
use citmil::eval::{benchmark_suite, CvSettings};
use citmil::fusion::ModelKind;
use citmil::training::TrainOpts;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());

    if which == "mae" || which == "all" {
        let t0 = Instant::now();
        let tiles = generate_tile_set(200, 32, 0.06, 42).unwrap();
        let cfg = VitConfig::default();
        let opts = TrainOpts {
            max_epochs: 30,
            batch_size: 32,
            ..TrainOpts::default()
        };
        let out = pretrain_mae(&tiles, &cfg, &opts, 7).unwrap();
        let first = out.loss_curve[0];
        let last = *out.loss_curve.last().unwrap();
        println!(
            "MAE: {:.1}s, loss {:.5} -> {:.5} (ratio {:.3})",
            t0.elapsed().as_secs_f64(),
            first,
            last,
            last / first
        );

        let t1 = Instant::now();
        let fopts = TrainOpts {
            max_epochs: 20,
            batch_size: 32,
            ..TrainOpts::default()
        };
        let fout = finetune_morph(&tiles, &out.encoder, &fopts, 8).unwrap();
        println!(
            "morph: {:.1}s, held-out accuracy {:.3}",
            t1.elapsed().as_secs_f64(),
            fout.held_out_accuracy
        );
    }

    if which == "bench" || which == "all" {
        let t0 = Instant::now();
        let cohort = generate_cohort(&CohortSpec::interaction_benchmark(2024)).unwrap();
        println!("cohort: n={} mean bag {:.1}", cohort.len(), cohort.mean_bag_size());
        let settings = CvSettings::benchmark(25);
        let kinds = [
            ModelKind::Cit,
            ModelKind::LateFusion,
            ModelKind::ClinicalMlp,
            ModelKind::Abmil,
        ];
        let report = benchmark_suite(&cohort, &kinds, &settings).unwrap();
        for s in &report.summaries {
            println!(
                "  {:>14}: acc {:.3}+/-{:.3}  auc {:.3}+/-{:.3}  params {}",
                s.model, s.accuracy.mean, s.accuracy.std, s.auc.mean, s.auc.std, s.parameter_count
            );
        }
        for w in &report.wilcoxon {
            println!(
                "  wilcoxon {} > {}: W+ {:.1} p {:.5}",
                w.reference, w.baseline, w.result.w_plus, w.result.p_one_sided
            );
        }
        println!("benchmark: {:.1}s", t0.elapsed().as_secs_f64());
    }

    if which == "ablate" || which == "all" {
        let t0 = Instant::now();
        let cohort = generate_cohort(&CohortSpec::composition_benchmark(77)).unwrap();
        let with = CvSettings::benchmark(25);
        let without = CvSettings {
            input: with.input.clone().without_injection(),
            ..with.clone()
        };
        let r_with = benchmark_suite(&cohort, &[ModelKind::Cit], &with).unwrap();
        let r_without = benchmark_suite(&cohort, &[ModelKind::Cit], &without).unwrap();
        println!(
            "  injection on : acc {:.3}+/-{:.3}",
            r_with.summaries[0].accuracy.mean, r_with.summaries[0].accuracy.std
        );
        println!(
            "  injection off: acc {:.3}+/-{:.3}",
            r_without.summaries[0].accuracy.mean, r_without.summaries[0].accuracy.std
        );
        let diffs: Vec<f64> = r_with
            .fold_results
            .iter()
            .zip(&r_without.fold_results)
            .map(|(a, b)| a.metrics.accuracy - b.metrics.accuracy)
            .collect();
        let w = citmil::eval::wilcoxon_exact(&diffs).unwrap();
        println!("  paired improvement p = {:.5} (n={})", w.p_one_sided, w.n_nonzero);
        if let Some(att) = &r_with.attention {
            println!("  attention by type (rows CR/PR/NR):");
            for row in &att.mean_attention {
                println!(
                    "    {:.3} {:.3} {:.3} {:.3} {:.3}",
                    row[0], row[1], row[2], row[3], row[4]
                );
            }
        }
        println!("ablation: {:.1}s", t0.elapsed().as_secs_f64());
    }
}
