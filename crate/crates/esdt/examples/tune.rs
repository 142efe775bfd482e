//! Scratch harness for sizing the toy configurations: prints step rate,
//! validation loss against the irreducible floor, and elastic parity.
//! Run: cargo run -p esdt --release --example tune -- <mode> [steps]

use esdt::bench::{eval_val_loss, EvalSuite};
use esdt::elastic::WidthSet;
use esdt::kdmd::DitField;
use esdt::model::ModelConfig;
use esdt::numerics::StreamRng;
use esdt::oracle::{gmm_sample, irreducible_loss, GmmSpec};
use esdt::train::{train_elastic, train_standalone, DataSource, TrainOpts};
use std::time::Instant;

fn toy_cfg(d: usize, hd: usize, depths: (usize, usize, usize)) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.layout.hidden_width = d;
    cfg.attention.head_dim = hd;
    cfg.layout.down_depth = depths.0;
    cfg.layout.middle_depth = depths.1;
    cfg.layout.up_depth = depths.2;
    cfg.layout.skip_topology = esdt::model::StageLayout::symmetric_skips(depths.1);
    cfg.layout.time_embed_dim = 16;
    cfg.layout.cond_dim = 16;
    cfg.layout.ca_inner = d;
    cfg.layout.class_count = 2;
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("speed");
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);

    let spec = GmmSpec::default_two_component();
    let source = DataSource::Gmm(spec.clone());

    // frozen eval suite + irreducible reference
    let mut rng = StreamRng::new(999, 0);
    let (x0, _) = gmm_sample::<f32>(&spec, 512, &mut rng).unwrap();
    let x0 = x0.reshaped(&[512, 2, 4, 4]).unwrap();
    let suite = EvalSuite::freeze(&x0, vec![None; 512], 16, 999).unwrap();
    let grid: Vec<f64> = (0..16).map(|i| (i as f64 + 0.5) / 16.0).collect();
    let mut irr_rng = StreamRng::new(1000, 0);
    let (irr, irr_se) = irreducible_loss(&spec, &grid, 100_000, &mut irr_rng).unwrap();
    println!("irreducible = {irr:.5} +- {irr_se:.5}");

    match mode {
        "speed" => {
            for (d, hd, depths, batch) in [
                (32usize, 8usize, (1usize, 2usize, 1usize), 32usize),
                (32, 8, (1, 2, 1), 64),
                (48, 12, (1, 2, 1), 64),
                (48, 12, (2, 2, 2), 64),
                (64, 16, (2, 4, 2), 64),
            ] {
                let cfg = toy_cfg(d, hd, depths);
                let opts = TrainOpts {
                    steps: 60,
                    batch,
                    lr: 3e-3,
                    seed: 1,
                    ..TrainOpts::default()
                };
                let t0 = Instant::now();
                train_standalone(&cfg, &source, &opts, None, None, |_| {}).unwrap();
                let dt = t0.elapsed().as_secs_f64();
                println!(
                    "d={d} depths={depths:?} batch={batch}: {:.1} steps/s ({:.1} ms/step)",
                    60.0 / dt,
                    dt / 60.0 * 1000.0
                );
            }
        }
        "converge" => {
            let d: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(48);
            let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);
            let cfg = toy_cfg(d, d / 4, (1, 2, 1));
            let opts = TrainOpts {
                steps,
                batch,
                lr: 3e-3,
                seed: 1,
                eval_every: (steps / 10).max(1),
                ..TrainOpts::default()
            };
            let t0 = Instant::now();
            let out = train_standalone(&cfg, &source, &opts, Some(&suite), None, |row| {
                if !row.val_loss.is_nan() {
                    println!(
                        "step {}: train {:.4} val {:.4} (irr ratio {:.3})",
                        row.step,
                        row.loss_diff,
                        row.val_loss,
                        row.val_loss / irr
                    );
                }
            })
            .unwrap();
            let field = DitField { cfg: cfg.clone(), params: out.params };
            let v = eval_val_loss(&field, &suite).unwrap();
            println!(
                "final val {v:.5}, ratio {:.4}, wall {:.0}s",
                v / irr,
                t0.elapsed().as_secs_f64()
            );
        }
        "elastic" => {
            let d: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
            let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
            let cfg = toy_cfg(d, d / 4, (1, 2, 1));
            let widths = WidthSet::new(vec![0.5, 1.0]).unwrap();
            let opts = TrainOpts {
                steps,
                batch,
                lr: 3e-3,
                seed: 1,
                ..TrainOpts::default()
            };
            let t0 = Instant::now();
            let out = train_elastic(&cfg, &widths, &source, &opts, None, None, |_| {}).unwrap();
            println!("elastic wall {:.0}s", t0.elapsed().as_secs_f64());
            let (sub_cfg, view) =
                esdt::elastic::slice_parameters(&out.params, &cfg, &widths, 0.5).unwrap();
            let sub_field = DitField { cfg: sub_cfg.clone(), params: view };
            let sub_val = eval_val_loss(&sub_field, &suite).unwrap();

            let alone = train_standalone(&sub_cfg, &source, &opts, None, None, |_| {}).unwrap();
            let alone_field = DitField { cfg: sub_cfg, params: alone.params };
            let alone_val = eval_val_loss(&alone_field, &suite).unwrap();
            println!(
                "elastic 0.5x val {sub_val:.5} vs standalone {alone_val:.5}: rel diff {:.4}",
                (sub_val - alone_val).abs() / alone_val
            );
        }
        other => eprintln!("unknown mode {other}"),
    }
}
