//! Knowledge-guided distribution matching distillation: the DMD gradient
//! surrogate, critic alternation, LoRA adapters on student and critic, CFG
//! teacher evaluation, and the time-shifted few-step Euler sampler.
//!
//! The DMD bracket is formed from the x0-prediction heads of critic and
//! teacher, `f(x, tau) = x - tau * v(x, tau)`: with velocity-parameterized
//! models this is the form whose inner product with the student's x0
//! estimate descends the distribution-matching KL (a velocity difference
//! with the same ordering would ascend it).

use std::collections::BTreeMap;

use crate::error::{EsdtError, Result};
use crate::losses::{flow_matching_loss, sample_xt};
use crate::model::{dit_forward, ModelConfig};
use crate::numerics::{
    ops, BoundParams, GradientMap, ParamStore, Scalar, StreamPurpose, StreamRng, Tape, Tensor,
    TensorRef,
};
use crate::optim::Adam;
use crate::oracle::{GmmSpec, GmmVelocityField};
use crate::velocity::VelocityField;

// --------------------------------------------------------------------------
// LoRA
// --------------------------------------------------------------------------

/// Low-rank adapter hyperparameters; effective delta is `(alpha/rank) A B`.
#[derive(Debug, Clone, Copy)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 64,
            alpha: 128.0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapter targets: every attention and FFN projection matrix.
pub fn lora_targets(cfg: &ModelConfig) -> Vec<String> {
    crate::model::param_specs(cfg)
        .into_iter()
        .filter(|s| {
            s.shape.len() == 2
                && (s.name.contains(".sa.w") || s.name.contains(".ca.w") || s.name.contains(".ffn.w"))
                && !s.name.contains("wkc")
                && !s.name.contains("wvc")
        })
        .map(|s| s.name)
        .collect()
}

/// Fresh adapter parameters: `A` zero (adapter starts as the identity),
/// `B` small normal.
pub fn init_lora<F: Scalar>(
    cfg: &ModelConfig,
    lc: &LoraConfig,
    rng: &mut StreamRng,
) -> Result<ParamStore<F>> {
    let specs: BTreeMap<String, Vec<usize>> = crate::model::param_specs(cfg)
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect();
    let mut store = ParamStore::new();
    for t in lora_targets(cfg) {
        let shape = &specs[&t];
        let (out, inp) = (shape[0], shape[1]);
        store.insert(format!("{t}.lora_a"), Tensor::zeros(&[out, lc.rank]));
        let sd = 1.0 / (inp as f64).sqrt();
        let n = lc.rank * inp;
        store.insert(
            format!("{t}.lora_b"),
            Tensor::new(
                &[lc.rank, inp],
                (0..n).map(|_| F::c(rng.normal::<f64>().to_f64_() * sd)).collect(),
            ),
        );
    }
    Ok(store)
}

/// Materialize `W + (alpha/rank) A B` for every target; non-targets copied.
pub fn lora_merge<F: Scalar>(
    cfg: &ModelConfig,
    base: &ParamStore<F>,
    lora: &ParamStore<F>,
    lc: &LoraConfig,
    enabled: bool,
) -> Result<ParamStore<F>> {
    let mut out = ParamStore::new();
    let targets = lora_targets(cfg);
    for (name, t) in base.iter() {
        if enabled && targets.contains(name) {
            let a = lora.get(&format!("{name}.lora_a"));
            let b = lora.get(&format!("{name}.lora_b"));
            if a.shape()[0] != t.shape()[0] || b.shape()[1] != t.shape()[1] {
                return Err(EsdtError::shape(
                    "lora_merge",
                    format!(
                        "{name}: target {:?} vs adapter {:?}x{:?}",
                        t.shape(),
                        a.shape(),
                        b.shape()
                    ),
                ));
            }
            let delta = ops::bmm(a, b)?;
            let delta = ops::scale(&delta, F::c(lc.scale()));
            out.insert(name.clone(), ops::add(t, &delta)?);
        } else {
            out.insert(name.clone(), t.clone());
        }
    }
    Ok(out)
}

/// Bind base parameters with the adapter applied on-tape: base weights are
/// constants, adapter factors are leaves, so gradients reach only the LoRA
/// parameters. With `enabled = false` the bound set is exactly the base.
pub fn bind_with_lora<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    base: &ParamStore<F>,
    lora: &ParamStore<F>,
    lc: &LoraConfig,
    enabled: bool,
    trainable: bool,
) -> Result<BoundParams> {
    let targets = lora_targets(cfg);
    let mut refs = BTreeMap::new();
    for (name, t) in base.iter() {
        let r = if enabled && targets.contains(name) {
            let w = tape.constant(t.clone());
            let an = format!("{name}.lora_a");
            let bn = format!("{name}.lora_b");
            let (a, b) = if trainable {
                (tape.leaf(&an, lora.get(&an).clone())?, tape.leaf(&bn, lora.get(&bn).clone())?)
            } else {
                (tape.constant(lora.get(&an).clone()), tape.constant(lora.get(&bn).clone()))
            };
            let ab = tape.bmm(a, b)?;
            let delta = tape.scale(ab, F::c(lc.scale()));
            tape.add(w, delta)?
        } else {
            tape.constant(t.clone())
        };
        refs.insert(name.clone(), r);
    }
    Ok(BoundParams::from_refs(refs))
}

// --------------------------------------------------------------------------
// fields and CFG
// --------------------------------------------------------------------------

/// A frozen DiT as a velocity field.
pub struct DitField<F: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
}

impl<F: Scalar> DitField<F> {
    fn forward(&self, x_t: &Tensor<F>, t: &[F], cond: &[Option<usize>]) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let xr = tape.constant(x_t.clone());
        let out = dit_forward(&mut tape, &self.cfg, &bound, xr, t, cond)?;
        Ok((
            tape.value(out.velocity).clone(),
            tape.value(out.features).clone(),
        ))
    }

    pub fn velocity_and_features(
        &self,
        x_t: &Tensor<F>,
        t: &[F],
        cond: &[Option<usize>],
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        self.forward(x_t, t, cond)
    }
}

impl<F: Scalar> VelocityField<F> for DitField<F> {
    fn velocity(&self, x_t: &Tensor<F>, t: &[F], cond: &[Option<usize>]) -> Result<Tensor<F>> {
        Ok(self.forward(x_t, t, cond)?.0)
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.cfg.latent
    }
}

/// Classifier-free guidance: `v_uncond + g (v_cond - v_uncond)`. The
/// endpoints `g = 0` and `g = 1` return the unconditional and conditional
/// velocities exactly.
pub fn cfg_velocity<F: Scalar>(
    field: &dyn VelocityField<F>,
    x: &Tensor<F>,
    t: &[F],
    cond: &[Option<usize>],
    g: f64,
) -> Result<Tensor<F>> {
    if g == 1.0 {
        return field.velocity(x, t, cond);
    }
    let null = vec![None; cond.len()];
    if g == 0.0 {
        return field.velocity(x, t, &null);
    }
    let vc = field.velocity(x, t, cond)?;
    let vu = field.velocity(x, t, &null)?;
    let diff = ops::sub(&vc, &vu)?;
    ops::add(&vu, &ops::scale(&diff, F::c(g)))
}

// --------------------------------------------------------------------------
// x0 prediction and rediffusion
// --------------------------------------------------------------------------

/// `x0_hat = x_t - t * v`, plain tensors.
pub fn predict_x0<F: Scalar>(x_t: &Tensor<F>, t: &[F], v: &Tensor<F>) -> Result<Tensor<F>> {
    if x_t.shape() != v.shape() {
        return Err(EsdtError::shape(
            "predict_x0",
            format!("{:?} vs {:?}", x_t.shape(), v.shape()),
        ));
    }
    let b = t.len();
    let inner = x_t.numel() / b;
    let mut out = vec![F::zero(); x_t.numel()];
    for i in 0..b {
        for d in 0..inner {
            let idx = i * inner + d;
            out[idx] = x_t.data()[idx] - t[i] * v.data()[idx];
        }
    }
    Ok(Tensor::new(x_t.shape(), out))
}

/// Tape version: gradient flows through `v`.
pub fn predict_x0_tape<F: Scalar>(
    tape: &mut Tape<F>,
    x_t: TensorRef,
    t: &[F],
    v: TensorRef,
) -> Result<TensorRef> {
    let shape = tape.shape(v).to_vec();
    let mut tf = tape.constant(Tensor::new(&[t.len()], t.to_vec()));
    for (axis, &e) in shape.iter().enumerate().skip(1) {
        tf = tape.expand_axis(tf, axis, e)?;
    }
    let tv = tape.mul(tf, v)?;
    tape.sub(x_t, tv)
}

/// `x_tau = (1 - tau) x0_hat + tau eps'` with `tau` in `[0, 1]`.
pub fn rediffuse<F: Scalar>(x0_hat: &Tensor<F>, tau: &[F], eps: &Tensor<F>) -> Result<Tensor<F>> {
    for &tv in tau {
        let tv = tv.to_f64_();
        if !(0.0..=1.0).contains(&tv) {
            return Err(EsdtError::Numeric(format!("rediffuse: tau = {tv} outside [0, 1]")));
        }
    }
    Ok(sample_xt(x0_hat, eps, tau)?.x_t)
}

// --------------------------------------------------------------------------
// DMD surrogate
// --------------------------------------------------------------------------

/// Surrogate scalar whose gradient with respect to the student's `x0_hat`
/// equals the DMD bracket `[f_c - f_xi](x_tau, tau)` with `f` the
/// x0-prediction heads: elementwise `tau * (v_xi - v_c)`, averaged like the
/// other losses. Critic and teacher velocities enter detached.
pub fn dmd_surrogate<F: Scalar>(
    tape: &mut Tape<F>,
    x0_hat: TensorRef,
    critic_v: &Tensor<F>,
    teacher_v: &Tensor<F>,
    tau: &[F],
) -> Result<TensorRef> {
    let shape = tape.shape(x0_hat).to_vec();
    if critic_v.shape() != shape.as_slice() || teacher_v.shape() != shape.as_slice() {
        return Err(EsdtError::shape(
            "dmd_surrogate",
            format!(
                "branch shapes {:?}/{:?} vs student {:?}",
                critic_v.shape(),
                teacher_v.shape(),
                shape
            ),
        ));
    }
    let b = tau.len();
    let inner: usize = shape.iter().product::<usize>() / b;
    let inv = 1.0 / (b * inner) as f64;
    let mut bracket = vec![F::zero(); b * inner];
    for i in 0..b {
        for d in 0..inner {
            let idx = i * inner + d;
            bracket[idx] = tau[i]
                * (teacher_v.data()[idx] - critic_v.data()[idx])
                * F::c(inv);
        }
    }
    if bracket.iter().any(|v| !v.is_finite()) {
        return Err(EsdtError::Numeric("dmd_surrogate: non-finite bracket".into()));
    }
    let br = tape.constant(Tensor::new(&shape, bracket));
    tape.dot(br, x0_hat)
}

// --------------------------------------------------------------------------
// few-step sampler
// --------------------------------------------------------------------------

/// Time-shift map `s t / (1 + (s-1) t)` applied to the uniform grid
/// `t_i = 1 - i/n`, endpoints fixed. `s = 1` is the identity; `s > 1`
/// pushes interior knots toward 1.
pub fn shift_knots(n: usize, s: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(EsdtError::Config("few_step_sample: need at least one step".into()));
    }
    if s < 1.0 {
        return Err(EsdtError::Config(format!("time shift must be >= 1, got {s}")));
    }
    Ok((0..=n)
        .map(|i| {
            let t = 1.0 - i as f64 / n as f64;
            s * t / (1.0 + (s - 1.0) * t)
        })
        .collect())
}

/// Euler integration of the (guided) velocity field from pure noise at the
/// shifted knots down to zero.
#[allow(clippy::too_many_arguments)]
pub fn few_step_sample<F: Scalar>(
    field: &dyn VelocityField<F>,
    batch: usize,
    steps: usize,
    shift: f64,
    cond: &[Option<usize>],
    guidance: f64,
    rng: &mut StreamRng,
) -> Result<Tensor<F>> {
    let (c, h, w) = field.latent_shape();
    if cond.len() != batch {
        return Err(EsdtError::shape(
            "few_step_sample",
            format!("{batch} samples vs {} conditions", cond.len()),
        ));
    }
    let knots = shift_knots(steps, shift)?;
    let mut x: Tensor<F> = rng.normal_tensor(&[batch, c, h, w]);
    for i in 0..steps {
        let t = knots[i];
        let dt = knots[i] - knots[i + 1];
        let tv = vec![F::c(t); batch];
        let v = cfg_velocity(field, &x, &tv, cond, guidance)?;
        let step = ops::scale(&v, F::c(dt));
        x = ops::sub(&x, &step)?;
    }
    Ok(x)
}

// --------------------------------------------------------------------------
// roles and the K-DMD loop
// --------------------------------------------------------------------------

/// Which timesteps the student sees during distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillTimesteps {
    /// Sample from the shifted few-step grid (the sampler's own knots).
    ShiftedGrid,
    /// Uniform over (0, 1) — the ablation mode.
    Uniform,
}

/// The teacher side of distillation: exact mixture oracle or a frozen model
/// (with an optional few-step adapter for the `xi'` role).
pub enum Teacher<F: Scalar> {
    Analytic(GmmSpec),
    Model {
        field: DitField<F>,
        few_step_lora: Option<(ParamStore<F>, LoraConfig)>,
    },
}

impl<F: Scalar> Teacher<F> {
    /// Velocity of the base teacher (the `xi` role in the DMD bracket).
    pub fn base_velocity(
        &self,
        x: &Tensor<F>,
        t: &[F],
        cond: &[Option<usize>],
        g: f64,
    ) -> Result<Tensor<F>> {
        match self {
            Teacher::Analytic(spec) => {
                let f = GmmVelocityField { spec: spec.clone() };
                cfg_velocity(&f, x, t, cond, g)
            }
            Teacher::Model { field, .. } => cfg_velocity(field, x, t, cond, g),
        }
    }

    /// Velocity (and features when available) of the few-step teacher `xi'`:
    /// the same base weights with the few-step LoRA toggled on.
    pub fn few_step_velocity(
        &self,
        x: &Tensor<F>,
        t: &[F],
        cond: &[Option<usize>],
    ) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
        match self {
            Teacher::Analytic(spec) => {
                let f = GmmVelocityField { spec: spec.clone() };
                Ok((f.velocity(x, t, cond)?, None))
            }
            Teacher::Model { field, few_step_lora } => match few_step_lora {
                Some((lora, lc)) => {
                    let merged = lora_merge(&field.cfg, &field.params, lora, lc, true)?;
                    let f = DitField {
                        cfg: field.cfg.clone(),
                        params: merged,
                    };
                    let (v, feat) = f.velocity_and_features(x, t, cond)?;
                    Ok((v, Some(feat)))
                }
                None => {
                    let (v, feat) = field.velocity_and_features(x, t, cond)?;
                    Ok((v, Some(feat)))
                }
            },
        }
    }

    pub fn feature_width(&self) -> Option<usize> {
        match self {
            Teacher::Analytic(_) => None,
            Teacher::Model { field, .. } => Some(field.cfg.layout.hidden_width),
        }
    }
}

/// All state of one distillation run: the LoRA-adapted student, the critic
/// (same base weights, its own adapter), and the teacher pair.
pub struct DistillRoles<F: Scalar> {
    pub student_cfg: ModelConfig,
    /// Frozen base weights shared by student and critic.
    pub base: ParamStore<F>,
    pub student_lora: ParamStore<F>,
    pub critic_lora: ParamStore<F>,
    pub lora_cfg: LoraConfig,
    pub teacher: Teacher<F>,
    /// Feature projector (student width -> teacher width), trained jointly;
    /// present only for model teachers.
    pub phi: Option<ParamStore<F>>,
    pub guidance: f64,
    pub tau_range: (f64, f64),
    pub timesteps: DistillTimesteps,
    pub sample_steps: usize,
    pub time_shift: f64,
    pub out_weight: f64,
    pub feat_weight: f64,
}

impl<F: Scalar> DistillRoles<F> {
    pub fn new(
        student_cfg: ModelConfig,
        base: ParamStore<F>,
        lora_cfg: LoraConfig,
        teacher: Teacher<F>,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let student_lora = init_lora(&student_cfg, &lora_cfg, rng)?;
        // critic starts functionally identical to the student: same base,
        // its own zero-initialized adapter
        let critic_lora = init_lora(&student_cfg, &lora_cfg, rng)?;
        let phi = teacher.feature_width().map(|dt| {
            let ds = student_cfg.layout.hidden_width;
            let mut p = ParamStore::new();
            // identity-block start: project by copying the leading channels
            let mut w = Tensor::zeros(&[dt, ds]);
            for i in 0..ds.min(dt) {
                w.data_mut()[i * ds + i] = F::one();
            }
            p.insert("phi.w", w);
            p.insert("phi.b", Tensor::zeros(&[dt]));
            p
        });
        Ok(Self {
            student_cfg,
            base,
            student_lora,
            critic_lora,
            lora_cfg,
            teacher,
            phi,
            guidance: 4.0,
            tau_range: (0.02, 0.98),
            timesteps: DistillTimesteps::ShiftedGrid,
            sample_steps: 4,
            time_shift: 3.0,
            out_weight: 1.0,
            feat_weight: 1.0,
        })
    }

    /// The student as a frozen field (adapter merged).
    pub fn student_field(&self) -> Result<DitField<F>> {
        Ok(DitField {
            cfg: self.student_cfg.clone(),
            params: lora_merge(
                &self.student_cfg,
                &self.base,
                &self.student_lora,
                &self.lora_cfg,
                true,
            )?,
        })
    }

    pub fn critic_field(&self) -> Result<DitField<F>> {
        Ok(DitField {
            cfg: self.student_cfg.clone(),
            params: lora_merge(
                &self.student_cfg,
                &self.base,
                &self.critic_lora,
                &self.lora_cfg,
                true,
            )?,
        })
    }

    fn draw_timesteps(&self, batch: usize, rng: &mut StreamRng) -> Result<Vec<F>> {
        match self.timesteps {
            DistillTimesteps::Uniform => {
                Ok((0..batch).map(|_| rng.uniform(0.01, 1.0)).collect())
            }
            DistillTimesteps::ShiftedGrid => {
                let knots = shift_knots(self.sample_steps, self.time_shift)?;
                // evaluation knots exclude the terminal zero
                Ok((0..batch)
                    .map(|_| F::c(knots[rng.uniform_usize(self.sample_steps)]))
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdatedRole {
    Student,
    Critic,
}

#[derive(Debug, Clone, Copy)]
pub struct KdmdReport {
    pub iteration: u64,
    pub role: UpdatedRole,
    pub l_dmd: f64,
    pub l_out: f64,
    pub l_feat: f64,
    pub critic_loss: f64,
}

/// One flow-matching step for the critic on the student's current outputs
/// (gradient-stopped), with fresh noise and uniform timesteps.
pub fn critic_update<F: Scalar>(
    roles: &mut DistillRoles<F>,
    x0_hat: &Tensor<F>,
    opt: &mut Adam<F>,
    rng: &mut StreamRng,
) -> Result<f64> {
    let b = x0_hat.shape()[0];
    let eps: Tensor<F> = rng.normal_tensor(x0_hat.shape());
    let t: Vec<F> = (0..b).map(|_| rng.uniform(0.01, 1.0)).collect();
    let batch = sample_xt(x0_hat, &eps, &t)?;

    let mut tape = Tape::new();
    let bound = bind_with_lora(
        &mut tape,
        &roles.student_cfg,
        &roles.base,
        &roles.critic_lora,
        &roles.lora_cfg,
        true,
        true,
    )?;
    let xr = tape.constant(batch.x_t.clone());
    let cond = vec![None; b];
    let out = dit_forward(&mut tape, &roles.student_cfg, &bound, xr, &t, &cond)?;
    let loss = flow_matching_loss(&mut tape, out.velocity, &batch.target)?;
    let loss_val = tape.value(loss).item().to_f64_();
    let grads = tape.backward(loss)?;
    opt.step(&mut roles.critic_lora, &grads)?;
    Ok(loss_val)
}

/// One K-DMD iteration. Students update on iterations congruent to 0 modulo
/// `student_every` (Eq. 10: DMD + output and feature matching against the
/// few-step teacher fed the same `x_t`); all other iterations run a critic
/// flow-matching step on the student's x0 estimates.
#[allow(clippy::too_many_arguments)]
pub fn kdmd_step<F: Scalar>(
    roles: &mut DistillRoles<F>,
    iteration: u64,
    student_every: u64,
    data_x0: &Tensor<F>,
    cond: &[Option<usize>],
    opt_student: &mut Adam<F>,
    opt_critic: &mut Adam<F>,
    seed: u64,
) -> Result<KdmdReport> {
    let b = data_x0.shape()[0];
    let mut rng_noise = StreamRng::for_step(seed, StreamPurpose::Noise, iteration);
    let mut rng_t = StreamRng::for_step(seed, StreamPurpose::Timestep, iteration);
    let mut rng_re = StreamRng::for_step(seed, StreamPurpose::Rediffuse, iteration);

    let t = roles.draw_timesteps(b, &mut rng_t)?;
    let eps: Tensor<F> = rng_noise.normal_tensor(data_x0.shape());
    let batch = sample_xt(data_x0, &eps, &t)?;

    if iteration % student_every == 0 {
        // student pass with gradients on the adapter
        let mut tape = Tape::new();
        let bound = bind_with_lora(
            &mut tape,
            &roles.student_cfg,
            &roles.base,
            &roles.student_lora,
            &roles.lora_cfg,
            true,
            true,
        )?;
        let xr = tape.constant(batch.x_t.clone());
        let out = dit_forward(&mut tape, &roles.student_cfg, &bound, xr, &t, cond)?;
        let x0_hat = predict_x0_tape(&mut tape, xr, &t, out.velocity)?;

        // rediffuse the detached estimate and evaluate both score branches
        let x0_val = tape.value(x0_hat).clone();
        let (lo, hi) = roles.tau_range;
        let tau: Vec<F> = (0..b).map(|_| rng_re.uniform(lo, hi)).collect();
        let eps2: Tensor<F> = rng_re.normal_tensor(x0_val.shape());
        let x_tau = rediffuse(&x0_val, &tau, &eps2)?;
        let critic = roles.critic_field()?;
        let critic_v = critic.velocity(&x_tau, &tau, &vec![None; b])?;
        let teacher_v = roles.teacher.base_velocity(&x_tau, &tau, cond, roles.guidance)?;
        let l_dmd = dmd_surrogate(&mut tape, x0_hat, &critic_v, &teacher_v, &tau)?;

        // knowledge terms from the few-step teacher at the same x_t
        let (tv, tfeat) = roles.teacher.few_step_velocity(&batch.x_t, &t, cond)?;
        let l_out = crate::losses::output_kd_loss(&mut tape, &tv, out.velocity)?;
        let mut total = l_dmd;
        let weighted_out = tape.scale(l_out, F::c(roles.out_weight));
        total = tape.add(total, weighted_out)?;

        let mut l_feat_val = 0.0;
        if let (Some(phi), Some(tf)) = (&roles.phi, &tfeat) {
            let pw = tape.leaf("phi.w", phi.get("phi.w").clone())?;
            let pb = tape.leaf("phi.b", phi.get("phi.b").clone())?;
            let lf = crate::losses::feature_kd_loss(&mut tape, tf, out.features, pw, pb)?;
            l_feat_val = tape.value(lf).item().to_f64_();
            let weighted = tape.scale(lf, F::c(roles.feat_weight));
            total = tape.add(total, weighted)?;
        }

        let l_dmd_val = tape.value(l_dmd).item().to_f64_();
        let l_out_val = tape.value(l_out).item().to_f64_();
        if !l_dmd_val.is_finite() || !l_out_val.is_finite() {
            return Err(EsdtError::Numeric("kdmd step: non-finite loss".into()));
        }
        let grads = tape.backward(total)?;
        // split gradients between the adapter store and the projector
        let mut lora_grads = GradientMap::new();
        let mut phi_grads = GradientMap::new();
        for (name, g) in grads.iter() {
            if name.starts_with("phi.") {
                phi_grads.insert(name.clone(), g.clone());
            } else {
                lora_grads.insert(name.clone(), g.clone());
            }
        }
        opt_student.step(&mut roles.student_lora, &lora_grads)?;
        if let Some(phi) = &mut roles.phi {
            if phi_grads.iter().next().is_some() {
                opt_student.step(phi, &phi_grads)?;
            }
        }
        Ok(KdmdReport {
            iteration,
            role: UpdatedRole::Student,
            l_dmd: l_dmd_val,
            l_out: l_out_val,
            l_feat: l_feat_val,
            critic_loss: f64::NAN,
        })
    } else {
        // critic sees the current student's x0 estimates, gradient-stopped
        let student = roles.student_field()?;
        let v = student.velocity(&batch.x_t, &t, cond)?;
        let x0_hat = predict_x0(&batch.x_t, &t, &v)?;
        let closs = critic_update(roles, &x0_hat, opt_critic, &mut rng_noise)?;
        Ok(KdmdReport {
            iteration,
            role: UpdatedRole::Critic,
            l_dmd: f64::NAN,
            l_out: f64::NAN,
            l_feat: f64::NAN,
            critic_loss: closs,
        })
    }
}
