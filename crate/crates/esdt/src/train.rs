//! Training drivers: standalone flow matching, elastic supernetwork
//! pretraining, knowledge distillation, and the K-DMD loop. All randomness
//! is keyed by `(seed, purpose, step)` so interrupted runs resume onto the
//! exact trajectory of an unbroken run.

use crate::bench::{eval_val_loss, EvalSuite};
use crate::data_io::{gen_dataset, MetricsRow, ShapesSpec};
use crate::elastic::{elastic_train_step, WidthSet};
use crate::error::{EsdtError, Result};
use crate::kdmd::{kdmd_step, DistillRoles, DitField, KdmdReport, UpdatedRole};
use crate::losses::{
    flow_matching_loss, per_sample_sq_error, sample_xt, timestep_scaled_kd,
    KdSchedule,
};
use crate::model::{dit_forward, ModelConfig};
use crate::numerics::{ParamStore, Scalar, StreamPurpose, StreamRng, Tape, Tensor};
use crate::optim::Adam;
use crate::oracle::{GmmSpec, GmmVelocityField};
use crate::velocity::VelocityField;

/// Checkpointed continuation point: parameters, completed step count, and
/// (when present) optimizer moments — with them a resumed run is
/// bit-identical to an unbroken one.
#[derive(Debug, Clone)]
pub struct ResumePoint {
    pub params: ParamStore<f32>,
    pub step: u64,
    pub opt_state: Option<ParamStore<f32>>,
}

/// Where clean latents come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Gmm(GmmSpec),
    Shapes(ShapesSpec),
}

impl DataSource {
    pub fn latent(&self) -> (usize, usize, usize) {
        match self {
            DataSource::Gmm(s) => s.latent,
            DataSource::Shapes(s) => (s.channels, s.size, s.size),
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            DataSource::Gmm(s) => s.components(),
            DataSource::Shapes(s) => s.class_count,
        }
    }

    /// Deterministic batch for one step: latents `[n, C, H, W]` plus
    /// conditions. Unconditional mode yields null conditions; conditional
    /// mode labels each sample with its class, dropped to null with the
    /// given probability (classifier-free guidance training).
    pub fn draw_batch<F: Scalar>(
        &self,
        n: usize,
        seed: u64,
        step: u64,
        conditional: bool,
        cond_dropout: f64,
    ) -> Result<(Tensor<F>, Vec<Option<usize>>)> {
        let mut rng = StreamRng::for_step(seed, StreamPurpose::Data, step);
        let (c, h, w) = self.latent();
        let (x0, labels) = match self {
            DataSource::Gmm(spec) => {
                let (x, l) = crate::oracle::gmm_sample::<F>(spec, n, &mut rng)?;
                (x.reshaped(&[n, c, h, w])?, l)
            }
            DataSource::Shapes(spec) => {
                // per-step offset keeps every batch fresh but reproducible
                let (x, l) = gen_dataset::<F>(spec, n, seed ^ (step.wrapping_mul(0x9e37_79b9)))?;
                (x, l)
            }
        };
        let cond: Vec<Option<usize>> = labels
            .iter()
            .map(|&l| {
                if conditional && rng.uniform::<f64>(0.0, 1.0) >= cond_dropout {
                    Some(l)
                } else {
                    None
                }
            })
            .collect();
        Ok((x0, cond))
    }
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub step: u64,
    pub opt_state: ParamStore<f32>,
}

impl TrainOutcome {
    pub fn resume_point(&self) -> ResumePoint {
        ResumePoint {
            params: self.params.clone(),
            step: self.step,
            opt_state: Some(self.opt_state.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Linear warmup then cosine decay to 10% of the base rate.
    pub lr_schedule: bool,
    pub warmup: u64,
    pub conditional: bool,
    pub cond_dropout: f64,
    pub lambda_sub: f64,
    pub lambda_dist: f64,
    pub eval_every: u64,
    pub seed: u64,
    /// Stop after this step even if below `steps` (checkpoint chunking);
    /// the learning-rate schedule still spans the full `steps`.
    pub run_until: Option<u64>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 32,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            lr_schedule: true,
            warmup: 100,
            conditional: false,
            cond_dropout: 0.1,
            lambda_sub: 1.0,
            lambda_dist: 1.0,
            eval_every: 0,
            seed: 0,
            run_until: None,
        }
    }
}

fn lr_at(opts: &TrainOpts, step: u64) -> f64 {
    if !opts.lr_schedule {
        return opts.lr;
    }
    if step < opts.warmup {
        return opts.lr * (step + 1) as f64 / opts.warmup as f64;
    }
    let span = (opts.steps.saturating_sub(opts.warmup)).max(1) as f64;
    let p = (step - opts.warmup) as f64 / span;
    let min = 0.1 * opts.lr;
    min + 0.5 * (opts.lr - min) * (1.0 + (std::f64::consts::PI * p).cos())
}

fn draw_timesteps<F: Scalar>(seed: u64, step: u64, n: usize) -> Vec<F> {
    let mut rng = StreamRng::for_step(seed, StreamPurpose::Timestep, step);
    (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()
}

fn draw_noise<F: Scalar>(seed: u64, step: u64, shape: &[usize]) -> Tensor<F> {
    let mut rng = StreamRng::for_step(seed, StreamPurpose::Noise, step);
    rng.normal_tensor(shape)
}

/// Plain flow-matching training of a standalone model. The sink receives one
/// row per step (val_loss filled on eval steps). Non-finite steps are
/// rejected without touching state and reported through the error count.
pub fn train_standalone<S: FnMut(&MetricsRow)>(
    cfg: &ModelConfig,
    source: &DataSource,
    opts: &TrainOpts,
    eval_suite: Option<&EvalSuite<f32>>,
    start: Option<ResumePoint>,
    mut sink: S,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut init_rng = StreamRng::for_step(opts.seed, StreamPurpose::Init, 0);
    let mut opt = Adam::new(opts.lr, opts.beta1, opts.beta2);
    let (mut store, start_step) = match start {
        Some(r) => {
            if let Some(os) = &r.opt_state {
                opt.import_state(os)?;
            }
            (r.params, r.step)
        }
        None => (crate::model::init_params::<f32>(cfg, &mut init_rng)?, 0),
    };
    let mut incidents = 0u64;

    let end_step = opts.run_until.map_or(opts.steps, |u| u.min(opts.steps));
    for step in start_step..end_step {
        opt.lr = f32::c(lr_at(opts, step));
        let (x0, cond) =
            source.draw_batch::<f32>(opts.batch, opts.seed, step, opts.conditional, opts.cond_dropout)?;
        let eps = draw_noise::<f32>(opts.seed, step, x0.shape());
        let t = draw_timesteps::<f32>(opts.seed, step, opts.batch);
        let batch = sample_xt(&x0, &eps, &t)?;

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape)?;
        let xr = tape.constant(batch.x_t.clone());
        let out = dit_forward(&mut tape, cfg, &bound, xr, &t, &cond)?;
        let loss = flow_matching_loss(&mut tape, out.velocity, &batch.target)?;
        let loss_val = tape.value(loss).item() as f64;
        let step_result: Result<()> = (|| {
            if !loss_val.is_finite() {
                return Err(EsdtError::Numeric("non-finite loss".into()));
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut store, &grads)
        })();
        if step_result.is_err() {
            incidents += 1;
            if incidents > 10 {
                return Err(EsdtError::Numeric(format!(
                    "training diverged: {incidents} rejected steps by step {step}"
                )));
            }
            continue;
        }

        let mut row = MetricsRow::at(step);
        row.loss_diff = loss_val;
        row.width = 1.0;
        if let (Some(suite), true) = (
            eval_suite,
            opts.eval_every > 0 && (step + 1).is_multiple_of(opts.eval_every),
        ) {
            let field = DitField {
                cfg: cfg.clone(),
                params: store.clone(),
            };
            row.val_loss = eval_val_loss(&field, suite)?;
        }
        sink(&row);
    }
    Ok(TrainOutcome {
        params: store,
        step: end_step,
        opt_state: opt.export_state(),
    })
}

/// Elastic supernetwork pretraining: per step one full-width pass and one
/// sampled sub-width supervised by Eq. 4 plus the Eq. 5 stop-gradient term.
pub fn train_elastic<S: FnMut(&MetricsRow)>(
    cfg: &ModelConfig,
    widths: &WidthSet,
    source: &DataSource,
    opts: &TrainOpts,
    eval_suite: Option<&EvalSuite<f32>>,
    start: Option<ResumePoint>,
    mut sink: S,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    widths.validate_for(cfg)?;
    let mut init_rng = StreamRng::for_step(opts.seed, StreamPurpose::Init, 0);
    let mut opt = Adam::new(opts.lr, opts.beta1, opts.beta2);
    let (mut store, start_step) = match start {
        Some(r) => {
            if let Some(os) = &r.opt_state {
                opt.import_state(os)?;
            }
            (r.params, r.step)
        }
        None => (crate::elastic::init_supernet::<f32>(cfg, widths, &mut init_rng)?, 0),
    };
    let mut incidents = 0u64;

    let end_step = opts.run_until.map_or(opts.steps, |u| u.min(opts.steps));
    for step in start_step..end_step {
        opt.lr = f32::c(lr_at(opts, step));
        let (x0, cond) =
            source.draw_batch::<f32>(opts.batch, opts.seed, step, opts.conditional, opts.cond_dropout)?;
        let eps = draw_noise::<f32>(opts.seed, step, x0.shape());
        let t = draw_timesteps::<f32>(opts.seed, step, opts.batch);
        let flat = x0.reshaped(&[opts.batch, x0.numel() / opts.batch])?;
        let eps_flat = eps.reshaped(flat.shape())?;
        let batch = sample_xt(&flat, &eps_flat, &t)?;

        let mut wrng = StreamRng::for_step(opts.seed, StreamPurpose::WidthChoice, step);
        let f_s = widths
            .sample_subwidth(&mut wrng)
            .ok_or_else(|| EsdtError::Config("elastic training needs a sub-width".into()))?;

        match elastic_train_step(
            &mut store,
            cfg,
            widths,
            &batch,
            &cond,
            f_s,
            opts.lambda_sub,
            opts.lambda_dist,
            &mut opt,
        ) {
            Ok(rep) => {
                let mut row = MetricsRow::at(step);
                row.loss_diff = rep.supernet_diff;
                row.loss_dist = rep.dist;
                row.width = rep.width;
                if let (Some(suite), true) = (
                    eval_suite,
                    opts.eval_every > 0 && (step + 1).is_multiple_of(opts.eval_every),
                ) {
                    let (sub_cfg, view) = crate::elastic::slice_parameters(&store, cfg, widths, 1.0)?;
                    let field = DitField {
                        cfg: sub_cfg,
                        params: view,
                    };
                    row.val_loss = eval_val_loss(&field, suite)?;
                }
                sink(&row);
            }
            Err(EsdtError::Numeric(msg)) => {
                incidents += 1;
                if incidents > 10 {
                    return Err(EsdtError::Numeric(format!(
                        "elastic training diverged at step {step}: {msg}"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        params: store,
        step: end_step,
        opt_state: opt.export_state(),
    })
}

/// Knowledge distillation per Eq. 8: the student matches a teacher's
/// velocities under the timestep-aware schedule, with flow matching as the
/// complementary term and feature matching added when the teacher exposes
/// features.
#[allow(clippy::too_many_arguments)]
pub fn train_kd<S: FnMut(&MetricsRow)>(
    cfg: &ModelConfig,
    source: &DataSource,
    teacher: &crate::kdmd::Teacher<f32>,
    schedule: &KdSchedule,
    opts: &TrainOpts,
    eval_suite: Option<&EvalSuite<f32>>,
    start: Option<ResumePoint>,
    mut sink: S,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    schedule.validate()?;
    let mut init_rng = StreamRng::for_step(opts.seed, StreamPurpose::Init, 0);
    let (mut store, start_step) = match start {
        Some(r) => (r.params, r.step),
        None => (crate::model::init_params::<f32>(cfg, &mut init_rng)?, 0),
    };
    // feature projector trained jointly when the teacher has features
    let mut phi: Option<ParamStore<f32>> = teacher.feature_width().map(|dt| {
        let ds = cfg.layout.hidden_width;
        let mut p = ParamStore::new();
        let mut w = Tensor::zeros(&[dt, ds]);
        for i in 0..ds.min(dt) {
            w.data_mut()[i * ds + i] = 1.0;
        }
        p.insert("phi.w", w);
        p.insert("phi.b", Tensor::zeros(&[dt]));
        p
    });
    let mut opt = Adam::new(opts.lr, opts.beta1, opts.beta2);
    let mut phi_opt = Adam::new(opts.lr, opts.beta1, opts.beta2);

    let end_step = opts.run_until.map_or(opts.steps, |u| u.min(opts.steps));
    for step in start_step..end_step {
        opt.lr = f32::c(lr_at(opts, step));
        phi_opt.lr = opt.lr;
        let (x0, cond) =
            source.draw_batch::<f32>(opts.batch, opts.seed, step, opts.conditional, opts.cond_dropout)?;
        let eps = draw_noise::<f32>(opts.seed, step, x0.shape());
        let t = draw_timesteps::<f32>(opts.seed, step, opts.batch);
        let batch = sample_xt(&x0, &eps, &t)?;
        let (teacher_v, teacher_feat) = teacher.few_step_velocity(&batch.x_t, &t, &cond)?;

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape)?;
        let xr = tape.constant(batch.x_t.clone());
        let out = dit_forward(&mut tape, cfg, &bound, xr, &t, &cond)?;

        let target_ref = tape.constant(batch.target.clone());
        let diff_per = per_sample_sq_error(&mut tape, out.velocity, target_ref)?;
        let teacher_ref = tape.constant(teacher_v.clone());
        let out_per = per_sample_sq_error(&mut tape, out.velocity, teacher_ref)?;
        let mut total = timestep_scaled_kd(&mut tape, diff_per, out_per, &t, schedule)?;

        let mut l_feat = f64::NAN;
        if let (Some(p), Some(tf)) = (&phi, &teacher_feat) {
            let pw = tape.leaf("phi.w", p.get("phi.w").clone())?;
            let pb = tape.leaf("phi.b", p.get("phi.b").clone())?;
            let lf = crate::losses::feature_kd_loss(&mut tape, tf, out.features, pw, pb)?;
            l_feat = tape.value(lf).item() as f64;
            total = tape.add(total, lf)?;
        }
        let total_val = tape.value(total).item() as f64;
        if !total_val.is_finite() {
            continue;
        }
        let grads = tape.backward(total)?;
        let mut model_grads = crate::numerics::GradientMap::new();
        let mut phi_grads = crate::numerics::GradientMap::new();
        for (name, g) in grads.iter() {
            if name.starts_with("phi.") {
                phi_grads.insert(name.clone(), g.clone());
            } else {
                model_grads.insert(name.clone(), g.clone());
            }
        }
        opt.step(&mut store, &model_grads)?;
        if let Some(p) = &mut phi {
            if phi_grads.iter().next().is_some() {
                phi_opt.step(p, &phi_grads)?;
            }
        }

        let mut row = MetricsRow::at(step);
        let mut diff_mean = 0.0;
        let mut out_mean = 0.0;
        for i in 0..opts.batch {
            diff_mean += tape.value(diff_per).data()[i] as f64;
            out_mean += tape.value(out_per).data()[i] as f64;
        }
        row.loss_diff = diff_mean / opts.batch as f64;
        row.loss_out = out_mean / opts.batch as f64;
        row.loss_feat = l_feat;
        row.width = 1.0;
        if let (Some(suite), true) = (
            eval_suite,
            opts.eval_every > 0 && (step + 1).is_multiple_of(opts.eval_every),
        ) {
            let field = DitField {
                cfg: cfg.clone(),
                params: store.clone(),
            };
            row.val_loss = eval_val_loss(&field, suite)?;
        }
        sink(&row);
    }
    Ok(TrainOutcome {
        params: store,
        step: end_step,
        opt_state: opt.export_state(),
    })
}

/// The K-DMD loop over a data source, one `kdmd_step` per iteration.
pub fn run_kdmd<S: FnMut(&MetricsRow)>(
    roles: &mut DistillRoles<f32>,
    source: &DataSource,
    iterations: u64,
    batch: usize,
    student_every: u64,
    lr: f64,
    seed: u64,
    mut sink: S,
) -> Result<Vec<KdmdReport>> {
    // step-distillation optimizer setup: beta = (0, 0.99)
    let mut opt_s = Adam::new(lr, 0.0, 0.99);
    let mut opt_c = Adam::new(lr, 0.0, 0.99);
    let mut reports = Vec::with_capacity(iterations as usize);
    for it in 0..iterations {
        let (x0, cond) = source.draw_batch::<f32>(batch, seed, it, false, 0.0)?;
        let rep = kdmd_step(roles, it, student_every, &x0, &cond, &mut opt_s, &mut opt_c, seed)?;
        let mut row = MetricsRow::at(it);
        row.loss_dmd = rep.l_dmd;
        row.loss_out = rep.l_out;
        row.loss_feat = rep.l_feat;
        row.loss_diff = rep.critic_loss;
        row.width = 1.0;
        sink(&row);
        reports.push(rep);
    }
    Ok(reports)
}

/// Frozen evaluation suite drawn on the dedicated eval stream: `n` clean
/// latents with per-tuple noise and a centered timestep grid.
pub fn make_eval_suite(
    source: &DataSource,
    n: usize,
    t_grid: usize,
    seed: u64,
) -> Result<EvalSuite<f32>> {
    let mut rng = StreamRng::for_step(seed, StreamPurpose::Eval, 1);
    let (c, h, w) = source.latent();
    let x0: Tensor<f32> = match source {
        DataSource::Gmm(spec) => {
            let (x, _) = crate::oracle::gmm_sample::<f32>(spec, n, &mut rng)?;
            x.reshaped(&[n, c, h, w])?
        }
        DataSource::Shapes(spec) => gen_dataset::<f32>(spec, n, seed ^ 0x5eed_0e7a)?.0,
    };
    EvalSuite::freeze(&x0, vec![None; n], t_grid, seed)
}

/// Convenience: the analytic oracle's validation loss on a suite (used as
/// the irreducible reference during monitoring).
pub fn oracle_val_loss(spec: &GmmSpec, suite: &EvalSuite<f32>) -> Result<f64> {
    let field = GmmVelocityField { spec: spec.clone() };
    // evaluate through f64 for the posterior arithmetic, report in f64
    struct F32Wrap(GmmVelocityField);
    impl VelocityField<f32> for F32Wrap {
        fn velocity(&self, x: &Tensor<f32>, t: &[f32], c: &[Option<usize>]) -> Result<Tensor<f32>> {
            let x64: Tensor<f64> = x.cast();
            let t64: Vec<f64> = t.iter().map(|&v| v as f64).collect();
            let v = crate::oracle::analytic_velocity(&self.0.spec, &x64, &t64, c)?;
            Ok(v.cast())
        }
        fn latent_shape(&self) -> (usize, usize, usize) {
            self.0.spec.latent
        }
    }
    eval_val_loss(&F32Wrap(field), suite)
}

/// Count of reports where the student was the updated role.
pub fn student_steps(reports: &[KdmdReport]) -> usize {
    reports.iter().filter(|r| r.role == UpdatedRole::Student).count()
}
