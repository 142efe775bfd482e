//! Command implementations behind the CLI: elastic pretraining with resume,
//! knowledge distillation, K-DMD step distillation, width extraction,
//! few-step sampling, benchmarking, and the oracle-check suite.

use std::path::{Path, PathBuf};

use crate::bench::{bench_attention_layers, flop_report};
use crate::checks::oracle_check_suite;
use crate::config::Config;
use crate::data_io::{
    load_checkpoint, save_checkpoint, write_pgm_gray, CheckpointState, MetricsRow, MetricsWriter,
};
use crate::elastic::{slice_parameters, width_tag, WidthSet};
use crate::error::{EsdtError, Result};
use crate::kdmd::{few_step_sample, lora_merge, DistillRoles, DistillTimesteps, DitField, LoraConfig, Teacher};
use crate::model::ModelConfig;
use crate::numerics::{ParamStore, StreamPurpose, StreamRng, Tensor};
use crate::train::{
    make_eval_suite, run_kdmd, train_elastic, train_kd, DataSource, ResumePoint, TrainOpts,
};

/// Merge model parameters with namespaced optimizer state for persistence.
fn combined_store(params: &ParamStore<f32>, opt: &ParamStore<f32>) -> ParamStore<f32> {
    let mut out = params.clone();
    for (name, t) in opt.iter() {
        out.insert(format!("opt.{name}"), t.clone());
    }
    out
}

fn split_store(combined: &ParamStore<f32>) -> (ParamStore<f32>, Option<ParamStore<f32>>) {
    let mut params = ParamStore::new();
    let mut opt = ParamStore::new();
    for (name, t) in combined.iter() {
        if let Some(rest) = name.strip_prefix("opt.") {
            opt.insert(rest.to_string(), t.clone());
        } else {
            params.insert(name.clone(), t.clone());
        }
    }
    let opt = if opt.is_empty() { None } else { Some(opt) };
    (params, opt)
}

fn save_ckpt(
    path: &Path,
    params: &ParamStore<f32>,
    opt: Option<&ParamStore<f32>>,
    model: &ModelConfig,
    widths: &[f64],
    seed: u64,
    step: u64,
) -> Result<()> {
    let params = match opt {
        Some(o) => combined_store(params, o),
        None => params.clone(),
    };
    save_checkpoint(
        &CheckpointState {
            params,
            model: model.clone(),
            widths: widths.to_vec(),
            seed,
            step,
        },
        path,
    )
}

fn load_model_ckpt(path: &Path) -> Result<(CheckpointState, ParamStore<f32>, Option<ParamStore<f32>>)> {
    let state = load_checkpoint(path)?;
    let (params, opt) = split_store(&state.params);
    Ok((state, params, opt))
}

pub fn out_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.str("out_dir"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

// --------------------------------------------------------------------------
// train
// --------------------------------------------------------------------------

pub fn cmd_train(cfg: &Config) -> Result<()> {
    let dir = out_dir(cfg)?;
    let model = cfg.model_config()?;
    let widths = cfg.widths()?;
    widths.validate_for(&model)?;
    let source = cfg.data_source()?;
    let mut opts = cfg.train_opts()?;
    let seed = opts.seed;
    let wall_clock = cfg.bool("metrics.wall_clock")?;
    let ckpt_every = cfg.u64("train.ckpt_every")?.max(1);
    let suite = make_eval_suite(&source, cfg.usize("train.eval_n")?, cfg.usize("train.eval_grid")?, seed)?;

    let final_path = dir.join("model.esdt");
    let ckpt_path = dir.join("ckpt.esdt");
    let metrics_path = dir.join("metrics.csv");

    // resume from the last checkpoint when present
    let mut start: Option<ResumePoint> = None;
    if final_path.exists() {
        let (state, _, _) = load_model_ckpt(&final_path)?;
        if state.step >= opts.steps {
            println!("train: {} already complete at step {}", final_path.display(), state.step);
            return Ok(());
        }
    }
    if ckpt_path.exists() {
        let (state, params, opt) = load_model_ckpt(&ckpt_path)?;
        if state.model != model {
            return Err(EsdtError::Config(
                "checkpoint model configuration does not match the run configuration".into(),
            ));
        }
        println!("train: resuming from step {}", state.step);
        start = Some(ResumePoint {
            params,
            step: state.step,
            opt_state: opt,
        });
    }

    let mut metrics = match &start {
        Some(r) if r.step > 0 && metrics_path.exists() => {
            MetricsWriter::resume(&metrics_path, r.step - 1, wall_clock)?
        }
        _ => MetricsWriter::create(&metrics_path, wall_clock)?,
    };

    let mut done = start.as_ref().map_or(0, |r| r.step);
    let mut cursor = start;
    while done < opts.steps {
        opts.run_until = Some((done + ckpt_every).min(opts.steps));
        let out = train_elastic(&model, &widths, &source, &opts, Some(&suite), cursor.take(), |row| {
            let _ = metrics.append(row);
        })?;
        done = out.step;
        save_ckpt(
            &ckpt_path,
            &out.params,
            Some(&out.opt_state),
            &model,
            widths.fractions(),
            seed,
            done,
        )?;
        cursor = Some(out.resume_point());
        if done >= opts.steps {
            save_ckpt(&final_path, &out.params, None, &model, widths.fractions(), seed, done)?;
        }
    }
    println!("train: finished {done} steps -> {}", final_path.display());
    Ok(())
}

// --------------------------------------------------------------------------
// distill-kd
// --------------------------------------------------------------------------

fn teacher_from_key(cfg: &Config, key: &str) -> Result<Teacher<f32>> {
    match cfg.str(key) {
        "analytic" => {
            let spec = cfg.gmm_spec()?;
            Ok(Teacher::Analytic(spec))
        }
        path => {
            let (state, params, _) = load_model_ckpt(Path::new(path))?;
            Ok(Teacher::Model {
                field: DitField {
                    cfg: state.model,
                    params,
                },
                few_step_lora: None,
            })
        }
    }
}

pub fn cmd_distill_kd(cfg: &Config) -> Result<()> {
    let dir = out_dir(cfg)?;
    let model = cfg.model_config()?;
    let source = cfg.data_source()?;
    let mut opts = cfg.train_opts()?;
    let seed = opts.seed;
    let wall_clock = cfg.bool("metrics.wall_clock")?;
    let schedule = cfg.kd_schedule()?;
    let teacher = teacher_from_key(cfg, "kd.teacher")?;
    let suite = make_eval_suite(&source, cfg.usize("train.eval_n")?, cfg.usize("train.eval_grid")?, seed)?;

    let start = match cfg.str("kd.base") {
        "fresh" => None,
        path => {
            let (state, params, _) = load_model_ckpt(Path::new(path))?;
            if state.model != model {
                return Err(EsdtError::Config(
                    "kd.base checkpoint does not match the configured model".into(),
                ));
            }
            Some(ResumePoint {
                params,
                step: 0,
                opt_state: None,
            })
        }
    };

    let metrics_path = dir.join("kd_metrics.csv");
    let mut metrics = MetricsWriter::create(&metrics_path, wall_clock)?;
    opts.run_until = None;
    let out = train_kd(&model, &source, &teacher, &schedule, &opts, Some(&suite), start, |row| {
        let _ = metrics.append(row);
    })?;
    let path = dir.join("kd_model.esdt");
    save_ckpt(&path, &out.params, None, &model, &[1.0], seed, out.step)?;
    println!("distill-kd: finished {} steps -> {}", out.step, path.display());
    Ok(())
}

// --------------------------------------------------------------------------
// distill-step (K-DMD)
// --------------------------------------------------------------------------

pub fn cmd_distill_step(cfg: &Config) -> Result<()> {
    let dir = out_dir(cfg)?;
    let source = cfg.data_source()?;
    let seed = cfg.u64("seed")?;
    let wall_clock = cfg.bool("metrics.wall_clock")?;

    let (student_cfg, base) = match cfg.str("kdmd.base") {
        "" => {
            return Err(EsdtError::Config(
                "kdmd.base: a pretrained student checkpoint is required (or 'fresh')".into(),
            ))
        }
        "fresh" => {
            let model = cfg.model_config()?;
            let mut rng = StreamRng::for_step(seed, StreamPurpose::Init, 0);
            let params = crate::model::init_params::<f32>(&model, &mut rng)?;
            (model, params)
        }
        path => {
            let (state, params, _) = load_model_ckpt(Path::new(path))?;
            (state.model, params)
        }
    };
    if student_cfg.latent != source.latent() {
        return Err(EsdtError::Config(format!(
            "student latent {:?} does not match data latent {:?}",
            student_cfg.latent,
            source.latent()
        )));
    }

    let teacher = teacher_from_key(cfg, "kdmd.teacher")?;
    let lora_cfg = LoraConfig {
        rank: cfg.usize("kdmd.lora_rank")?,
        alpha: cfg.f64("kdmd.lora_alpha")?,
    };
    let mut rng = StreamRng::for_step(seed, StreamPurpose::Init, 1);
    let mut roles = DistillRoles::new(student_cfg.clone(), base, lora_cfg, teacher, &mut rng)?;
    roles.guidance = cfg.f64("kdmd.cfg")?;
    roles.tau_range = (cfg.f64("kdmd.tau_lo")?, cfg.f64("kdmd.tau_hi")?);
    roles.sample_steps = cfg.usize("steps")?;
    roles.time_shift = cfg.f64("shift")?;
    roles.out_weight = cfg.f64("kdmd.out_weight")?;
    roles.feat_weight = cfg.f64("kdmd.feat_weight")?;
    roles.timesteps = match cfg.str("kdmd.t_mode") {
        "shifted" => DistillTimesteps::ShiftedGrid,
        "uniform" => DistillTimesteps::Uniform,
        other => {
            return Err(EsdtError::Config(format!(
                "kdmd.t_mode: expected shifted|uniform, got {other:?}"
            )))
        }
    };

    let metrics_path = dir.join("kdmd_metrics.csv");
    let mut metrics = MetricsWriter::create(&metrics_path, wall_clock)?;
    run_kdmd(
        &mut roles,
        &source,
        cfg.u64("kdmd.iterations")?,
        cfg.usize("kdmd.batch")?,
        cfg.u64("kdmd.student_every")?,
        cfg.f64("kdmd.lr")?,
        seed,
        |row| {
            let _ = metrics.append(row);
        },
    )?;

    let merged = lora_merge(
        &student_cfg,
        &roles.base,
        &roles.student_lora,
        &roles.lora_cfg,
        true,
    )?;
    let path = dir.join("kdmd_student.esdt");
    save_ckpt(&path, &merged, None, &student_cfg, &[1.0], seed, cfg.u64("kdmd.iterations")?)?;
    println!("distill-step: finished -> {}", path.display());
    Ok(())
}

// --------------------------------------------------------------------------
// slice / sample
// --------------------------------------------------------------------------

fn default_checkpoint(cfg: &Config, key: &str) -> Result<PathBuf> {
    let explicit = cfg.str(key);
    if !explicit.is_empty() {
        return Ok(PathBuf::from(explicit));
    }
    let fallback = PathBuf::from(cfg.str("out_dir")).join("model.esdt");
    if fallback.exists() {
        Ok(fallback)
    } else {
        Err(EsdtError::Config(format!(
            "{key} is empty and {} does not exist",
            fallback.display()
        )))
    }
}

pub fn cmd_slice(cfg: &Config) -> Result<()> {
    let dir = out_dir(cfg)?;
    let path = default_checkpoint(cfg, "slice.checkpoint")?;
    let (state, params, _) = load_model_ckpt(&path)?;
    let widths = WidthSet::new(state.widths.clone())?;
    let f = cfg.f64("width")?;
    let (sub_cfg, view) = slice_parameters(&params, &state.model, &widths, f)?;
    let out = dir.join(format!("slice_{}.esdt", width_tag(f)));
    save_ckpt(&out, &view, None, &sub_cfg, &[1.0], state.seed, state.step)?;
    println!(
        "slice: width {f} ({} parameters) -> {}",
        view.total_elements(),
        out.display()
    );
    Ok(())
}

pub fn cmd_sample(cfg: &Config) -> Result<()> {
    let dir = out_dir(cfg)?;
    let path = default_checkpoint(cfg, "sample.checkpoint")?;
    let (state, params, _) = load_model_ckpt(&path)?;
    let field = DitField {
        cfg: state.model.clone(),
        params,
    };
    let n = cfg.usize("sample.n")?;
    let steps = cfg.usize("steps")?;
    let shift = cfg.f64("shift")?;
    let guidance = cfg.f64("cfg")?;
    let seed = cfg.u64("seed")?;
    let cond: Vec<Option<usize>> = match cfg.str("sample.class") {
        "null" => vec![None; n],
        c => {
            let idx: usize = c
                .parse()
                .map_err(|_| EsdtError::Config(format!("sample.class: expected null or index, got {c:?}")))?;
            vec![Some(idx); n]
        }
    };
    let mut rng = StreamRng::for_step(seed, StreamPurpose::Sampler, 0);
    let samples: Tensor<f32> = few_step_sample(&field, n, steps, shift, &cond, guidance, &mut rng)?;

    // raw little-endian f32 latents plus a JSON sidecar
    let bin = dir.join("samples.bin");
    let mut bytes = Vec::with_capacity(samples.numel() * 4);
    for &v in samples.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&bin, &bytes)?;
    let knots = crate::kdmd::shift_knots(steps, shift)?;
    let meta = serde_json::json!({
        "shape": samples.shape(),
        "dtype": "f32le",
        "steps": steps,
        "shift": shift,
        "cfg": guidance,
        "knots": knots,
    });
    std::fs::write(dir.join("samples.json"), serde_json::to_vec_pretty(&meta)?)?;

    // channel-0 previews
    let (c, h, w) = state.model.latent;
    let plane = h * w;
    for i in 0..n {
        let start = i * c * plane;
        let vals: Vec<f64> = samples.data()[start..start + plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        write_pgm_gray(&dir.join(format!("sample_{i:03}.pgm")), &vals, w, h, lo, hi)?;
    }
    println!(
        "sample: {n} latents at knots {knots:?} -> {}",
        bin.display()
    );
    Ok(())
}

// --------------------------------------------------------------------------
// bench / oracle-check
// --------------------------------------------------------------------------

pub fn cmd_bench(cfg: &Config) -> Result<()> {
    let dir = out_dir(cfg)?;
    let model = cfg.model_config()?;
    let report = flop_report(&model)?;
    std::fs::write(dir.join("flops.csv"), report.to_csv())?;
    println!("flop report (multiply-adds per sample):");
    for (label, mas) in &report.entries {
        println!("  {label:<12} {mas}");
    }
    println!("  {:<12} {}", "total", report.total());

    if cfg.bool("bench.export_mask_pgm")? {
        let (n, _) = model.token_ledger();
        let mask = crate::attention::NeighborhoodMask::new(
            n,
            model.attention.block_count,
            model.attention.radius,
        )?;
        let p = dir.join("mask.pgm");
        mask.write_pgm(&p)?;
        println!("mask: {}", p.display());
    }

    if cfg.bool("bench.latency")? {
        let grid_spec = cfg.str("bench.grid");
        let (gh, gw) = grid_spec
            .split_once('x')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| EsdtError::Config(format!("bench.grid: expected HxW, got {grid_spec:?}")))?;
        let repeats = cfg.usize("bench.repeats")?;
        let (dense, sparse) = bench_attention_layers((gh, gw), &model.attention, repeats)?;
        let ratio = sparse.median.as_secs_f64() / dense.median.as_secs_f64();
        let mut csv = String::from("label,median_us,iqr_us,repeats,flagged,host\n");
        for s in [&dense, &sparse] {
            csv.push_str(&format!(
                "{},{:.1},{:.1},{},{},{}\n",
                s.label,
                s.median.as_secs_f64() * 1e6,
                s.iqr.as_secs_f64() * 1e6,
                s.repeats,
                s.flagged,
                s.host
            ));
        }
        csv.push_str(&format!("assa_over_dense_ratio,{ratio:.4},,,,\n"));
        std::fs::write(dir.join("latency.csv"), &csv)?;
        println!(
            "latency ({} tokens, {} repeats, host {}):",
            gh * gw,
            repeats,
            dense.host
        );
        println!(
            "  dense  median {:>10.1} us (iqr {:.1}){}",
            dense.median.as_secs_f64() * 1e6,
            dense.iqr.as_secs_f64() * 1e6,
            if dense.flagged { " [flagged: timer]" } else { "" }
        );
        println!(
            "  assa   median {:>10.1} us (iqr {:.1}){}",
            sparse.median.as_secs_f64() * 1e6,
            sparse.iqr.as_secs_f64() * 1e6,
            if sparse.flagged { " [flagged: timer]" } else { "" }
        );
        println!("  assa / dense = {ratio:.4}");
    }
    Ok(())
}

pub fn cmd_oracle_check(_cfg: &Config) -> Result<()> {
    let mut failed = 0;
    for r in oracle_check_suite() {
        println!("{}", r.line());
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        Err(EsdtError::Validation(format!("{failed} suite(s) failed")))
    } else {
        Ok(())
    }
}
