//! Verification suites shared by the `oracle-check` command and the
//! acceptance tests: attention-oracle equivalence, cost accounting parity,
//! gradient soundness, elastic slicing parity, and the sampler schedule.

use crate::attention::{
    attention_pair_count, bna, dense_attention, AttentionConfig, NeighborhoodMask,
};
use crate::elastic::{scatter_grads, slice_parameters, WidthSet};
use crate::error::Result;
use crate::kdmd::{
    bind_with_lora, dmd_surrogate, init_lora, lora_merge, predict_x0, predict_x0_tape, rediffuse,
    shift_knots, DitField, LoraConfig,
};
use crate::losses::{
    feature_kd_loss, flow_matching_loss, output_kd_loss, per_sample_sq_error, sample_xt,
    timestep_scaled_kd, KdSchedule,
};
use crate::model::{dit_forward, init_params, ModelConfig, StageLayout};
use crate::numerics::{finite_diff_grad, ops, ParamStore, StreamRng, Tape, Tensor, TensorRef};
use crate::oracle::analytic_velocity;
use crate::velocity::VelocityField;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn pass(name: &str, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: true,
            detail,
        }
    }

    fn fail(name: &str, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: false,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn report(name: &str, r: Result<String>) -> CheckReport {
    match r {
        Ok(detail) => CheckReport::pass(name, detail),
        Err(e) => CheckReport::fail(name, format!("{e}")),
    }
}

fn ensure(cond: bool, msg: String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(crate::error::EsdtError::Numeric(msg))
    }
}

/// A small model config that slices cleanly at {0.375, 0.5, 1.0}.
fn slicing_cfg() -> ModelConfig {
    ModelConfig {
        latent: (2, 4, 4),
        layout: StageLayout {
            down_depth: 1,
            middle_depth: 2,
            up_depth: 1,
            hidden_width: 32,
            ffn_ratio_outer: 4,
            ffn_ratio_middle: 3,
            use_assa_outer: true,
            skip_topology: vec![(0, 1)],
            long_skip: true,
            pos_embed: true,
            patch: 2,
            time_embed_dim: 16,
            cond_dim: 16,
            cond_tokens: 2,
            cond_pos_embed: true,
            class_count: 2,
            ca_inner: 32,
        },
        attention: AttentionConfig {
            query_heads: 4,
            kv_heads: 4,
            head_dim: 8,
            block_count: 2,
            radius: 1,
            compression_stride: 2,
        },
    }
}

fn gradcheck_cfg() -> ModelConfig {
    ModelConfig {
        latent: (2, 4, 4),
        layout: StageLayout {
            down_depth: 1,
            middle_depth: 1,
            up_depth: 1,
            hidden_width: 8,
            ffn_ratio_outer: 4,
            ffn_ratio_middle: 3,
            use_assa_outer: true,
            skip_topology: vec![],
            long_skip: true,
            pos_embed: true,
            patch: 2,
            time_embed_dim: 8,
            cond_dim: 8,
            cond_tokens: 2,
            cond_pos_embed: true,
            class_count: 2,
            ca_inner: 8,
        },
        attention: AttentionConfig {
            query_heads: 2,
            kv_heads: 2,
            head_dim: 4,
            block_count: 2,
            radius: 1,
            compression_stride: 2,
        },
    }
}

// --------------------------------------------------------------------------
// criterion 1: BNA oracle equivalence grid
// --------------------------------------------------------------------------

pub fn check_bna_oracle_grid() -> CheckReport {
    report("bna-oracle-equivalence", (|| {
        let mut rng = StreamRng::new(2024, 0);
        let mut worst: f32 = 0.0;
        let mut cases = 0;
        for n in [16usize, 64, 256] {
            for b in [2usize, 4, 8, 16] {
                if n % b != 0 {
                    continue;
                }
                for r in [0usize, 1, 2] {
                    let q: Tensor<f32> = rng.normal_tensor(&[1, 2, n, 8]);
                    let k: Tensor<f32> = rng.normal_tensor(&[1, 2, n, 8]);
                    let v: Tensor<f32> = rng.normal_tensor(&[1, 2, n, 8]);
                    let mask = NeighborhoodMask::new(n, b, r)?;
                    let mut tape = Tape::new();
                    let (qr, kr, vr) = (
                        tape.constant(q.clone()),
                        tape.constant(k.clone()),
                        tape.constant(v.clone()),
                    );
                    let got = bna(&mut tape, qr, kr, vr, b, r)?;
                    let want = dense_attention(&mut tape, qr, kr, vr, Some(&mask))?;
                    let diff = tape.value(got).max_abs_diff(tape.value(want));
                    ensure(
                        diff <= 1e-5,
                        format!("N={n} B={b} r={r}: masked-dense diff {diff}"),
                    )?;
                    worst = worst.max(diff);
                    if r >= b - 1 {
                        let full = dense_attention(&mut tape, qr, kr, vr, None)?;
                        let diff = tape.value(got).max_abs_diff(tape.value(full));
                        ensure(
                            diff <= 1e-5,
                            format!("N={n} B={b} r={r}: unmasked diff {diff}"),
                        )?;
                    }
                    cases += 1;
                }
            }
        }
        Ok(format!("{cases} grid cases, worst |bna - masked dense| = {worst:.2e}"))
    })())
}

// --------------------------------------------------------------------------
// criterion 2: cost accounting
// --------------------------------------------------------------------------

pub fn check_pair_count_claims() -> CheckReport {
    report("assa-cost-ratio", (|| {
        let cfg = AttentionConfig {
            query_heads: 2,
            kv_heads: 2,
            head_dim: 4,
            block_count: 16,
            radius: 1,
            compression_stride: 2,
        };
        let pc = attention_pair_count(4096, &cfg)?;
        ensure(pc.ratio == 0.4375, format!("ratio {} != 0.4375", pc.ratio))?;
        ensure(
            pc.global == 4_194_304 && pc.local_model == 3_145_728,
            format!("pairs global {} local {}", pc.global, pc.local_model),
        )?;

        // instrumented mask-count oracle: the mask itself, and the pairs the
        // blockwise implementation actually executes
        let mask = NeighborhoodMask::new(4096, 16, 1)?;
        ensure(
            mask.true_count() == pc.local_exact,
            format!("mask count {} vs exact pairs {}", mask.true_count(), pc.local_exact),
        )?;
        let mut rng = StreamRng::new(7, 0);
        let q: Tensor<f32> = rng.normal_tensor(&[1, 1, 4096, 4]);
        let k: Tensor<f32> = rng.normal_tensor(&[1, 1, 4096, 4]);
        let v: Tensor<f32> = rng.normal_tensor(&[1, 1, 4096, 4]);
        ops::meter_start();
        let mut tape = Tape::new();
        let (qr, kr, vr) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let _ = bna(&mut tape, qr, kr, vr, 16, 1)?;
        let mas = ops::meter_stop();
        ensure(
            mas == 2 * 4 * pc.local_exact,
            format!("executed {mas} MAs vs 2*d*{}", pc.local_exact),
        )?;

        // asymptotic law: local_model/dense == (2r+1)/B
        for b in [4u64, 8, 16, 32] {
            let c = AttentionConfig {
                block_count: b as usize,
                ..cfg.clone()
            };
            let p = attention_pair_count(4096, &c)?;
            ensure(
                p.local_model * b == 3 * p.dense,
                format!("B={b}: local {} violates (2r+1)/B law", p.local_model),
            )?;
        }
        Ok(format!(
            "ratio 0.4375 exact; executed pairs {} == mask count; (2r+1)/B law holds",
            pc.local_exact
        ))
    })())
}

// --------------------------------------------------------------------------
// criterion 3: gradient soundness for every objective
// --------------------------------------------------------------------------

type Builder = dyn Fn(&ParamStore<f64>) -> Result<(Tape<f64>, TensorRef)>;

fn fd_check(name: &str, store: &mut ParamStore<f64>, build: &Builder) -> Result<f64> {
    let (tape, root) = build(store)?;
    let grads = tape.backward(root)?;
    let fd = finite_diff_grad(store, 1e-5, |p| {
        let (t, r) = build(p)?;
        Ok(t.value(r).item())
    })?;
    let mut worst = 0.0f64;
    for (pname, g) in grads.iter() {
        let fd_g = &fd[pname];
        let gnorm = g.sq_norm().sqrt();
        let fnorm = fd_g.sq_norm().sqrt();
        let mut diff = 0.0;
        for (a, b) in g.data().iter().zip(fd_g.data()) {
            diff += (a - b) * (a - b);
        }
        let diff = diff.sqrt();
        ensure(
            diff <= 1e-6 * (gnorm.max(fnorm) + 1e-3),
            format!("{name}/{pname}: |ad-fd| {diff:.3e} at norms {gnorm:.3e}/{fnorm:.3e}"),
        )?;
        if fnorm > 1e-6 {
            worst = worst.max(diff / fnorm);
        }
    }
    Ok(worst)
}

pub fn check_gradient_soundness() -> CheckReport {
    report("gradient-soundness", (|| {
        let cfg = gradcheck_cfg();
        let mut rng = StreamRng::new(31, 0);
        let mut base = init_params::<f64>(&cfg, &mut rng)?;
        // leave the zero-init saddle so every path carries signal
        for name in [
            "time.proj.w",
            "final.w",
            "down.0.ca.wo",
            "mid.0.ca.wo",
            "up.0.ca.wo",
            "mid.0.mod.table",
        ] {
            let t = base.get_mut(name);
            let mut r = StreamRng::new(32, 1);
            let fresh: Tensor<f64> = r.normal_tensor(t.shape());
            *t = Tensor::new(t.shape(), fresh.data().iter().map(|v| v * 0.3).collect());
        }
        ensure(
            base.total_elements() <= 10_000,
            format!("config too large: {}", base.total_elements()),
        )?;

        let x0: Tensor<f64> = rng.normal_tensor(&[2, 2, 4, 4]);
        let eps: Tensor<f64> = rng.normal_tensor(&[2, 2, 4, 4]);
        let t = [0.3, 0.7];
        let cond = [Some(0), None];
        let batch = sample_xt(&x0, &eps, &t)?;
        let teacher_v: Tensor<f64> = rng.normal_tensor(&[2, 2, 4, 4]);
        let teacher_feat: Tensor<f64> = rng.normal_tensor(&[2, 8, 2, 2]);
        let mut worst = 0.0f64;

        // Eq. 4: flow matching through the full model
        {
            let (b, t2, c2) = (batch.clone(), t, cond);
            let cfg2 = cfg.clone();
            let build = move |p: &ParamStore<f64>| -> Result<(Tape<f64>, TensorRef)> {
                let mut tape = Tape::new();
                let bound = p.bind(&mut tape)?;
                let xr = tape.constant(b.x_t.clone());
                let out = dit_forward(&mut tape, &cfg2, &bound, xr, &t2, &c2)?;
                let l = flow_matching_loss(&mut tape, out.velocity, &b.target)?;
                Ok((tape, l))
            };
            worst = worst.max(fd_check("eq4-flow-matching", &mut base, &build)?);
        }

        // Eq. 5: stop-gradient self-distillation on a sliced view
        {
            let widths = WidthSet::new(vec![0.5, 1.0])?;
            let scfg = slicing_cfg();
            let mut srng = StreamRng::new(33, 0);
            let supernet = crate::elastic::init_supernet::<f64>(&scfg, &widths, &mut srng)?;
            let (full_cfg, full_view) = slice_parameters(&supernet, &scfg, &widths, 1.0)?;
            let mut ft = Tape::new();
            let fb = full_view.bind_frozen(&mut ft);
            let xr = ft.constant(batch.x_t.clone());
            let fo = dit_forward(&mut ft, &full_cfg, &fb, xr, &t, &cond)?;
            let v_super = ft.value(fo.velocity).clone();

            let (sub_cfg, sub_view) = slice_parameters(&supernet, &scfg, &widths, 0.5)?;
            let mut view = sub_view;
            let b = batch.clone();
            let build = move |p: &ParamStore<f64>| -> Result<(Tape<f64>, TensorRef)> {
                let mut tape = Tape::new();
                let bound = p.bind(&mut tape)?;
                let xr = tape.constant(b.x_t.clone());
                let out = dit_forward(&mut tape, &sub_cfg, &bound, xr, &t, &cond)?;
                let teacher = tape.constant(v_super.clone());
                let l = tape.mse(out.velocity, teacher)?;
                Ok((tape, l))
            };
            worst = worst.max(fd_check("eq5-self-distillation", &mut view, &build)?);
        }

        // Eq. 6 + Eq. 8: timestep-scaled output distillation
        {
            let (b, tv) = (batch.clone(), teacher_v.clone());
            let cfg2 = cfg.clone();
            let sched = KdSchedule::Constant(0.5);
            let build = move |p: &ParamStore<f64>| -> Result<(Tape<f64>, TensorRef)> {
                let mut tape = Tape::new();
                let bound = p.bind(&mut tape)?;
                let xr = tape.constant(b.x_t.clone());
                let out = dit_forward(&mut tape, &cfg2, &bound, xr, &t, &cond)?;
                let tgt = tape.constant(b.target.clone());
                let diff_per = per_sample_sq_error(&mut tape, out.velocity, tgt)?;
                let tr = tape.constant(tv.clone());
                let out_per = per_sample_sq_error(&mut tape, out.velocity, tr)?;
                let l = timestep_scaled_kd(&mut tape, diff_per, out_per, &t, &sched)?;
                Ok((tape, l))
            };
            worst = worst.max(fd_check("eq6-eq8-output-kd", &mut base, &build)?);
        }

        // Eq. 7: feature distillation with the projector
        {
            let (b, tf) = (batch.clone(), teacher_feat.clone());
            let cfg2 = cfg.clone();
            let mut with_phi = base.clone();
            let mut r = StreamRng::new(34, 0);
            with_phi.insert("phi.w", r.normal_tensor(&[8, 8]));
            with_phi.insert("phi.b", r.normal_tensor(&[8]));
            let build = move |p: &ParamStore<f64>| -> Result<(Tape<f64>, TensorRef)> {
                let mut tape = Tape::new();
                let bound = p.bind(&mut tape)?;
                let xr = tape.constant(b.x_t.clone());
                let out = dit_forward(&mut tape, &cfg2, &bound, xr, &t, &cond)?;
                let l = feature_kd_loss(
                    &mut tape,
                    &tf,
                    out.features,
                    bound.get("phi.w"),
                    bound.get("phi.b"),
                )?;
                Ok((tape, l))
            };
            worst = worst.max(fd_check("eq7-feature-kd", &mut with_phi, &build)?);
        }

        // Eq. 9 + Eq. 10: DMD surrogate plus knowledge terms through LoRA
        {
            let lc = LoraConfig { rank: 2, alpha: 4.0 };
            let mut lrng = StreamRng::new(35, 0);
            let mut lora = init_lora::<f64>(&cfg, &lc, &mut lrng)?;
            let names: Vec<String> = lora.names().cloned().collect();
            for n in &names {
                if n.ends_with(".lora_a") {
                    let t = lora.get_mut(n);
                    let fresh: Tensor<f64> = lrng.normal_tensor(t.shape());
                    *t = Tensor::new(t.shape(), fresh.data().iter().map(|v| v * 0.1).collect());
                }
            }
            // frozen bracket from analytic critic/teacher at the base point
            let field = DitField {
                cfg: cfg.clone(),
                params: lora_merge(&cfg, &base, &lora, &lc, true)?,
            };
            let v0 = field.velocity(&batch.x_t, &t, &cond)?;
            let x0_hat0 = predict_x0(&batch.x_t, &t, &v0)?;
            let tau = [0.3, 0.6];
            let eps2: Tensor<f64> = rng.normal_tensor(&[2, 2, 4, 4]);
            let x_tau = rediffuse(&x0_hat0, &tau, &eps2)?;
            let critic_spec = crate::oracle::GmmSpec {
                weights: vec![1.0],
                means: vec![vec![0.0; 32]],
                variances: vec![1.0],
                latent: (2, 4, 4),
            };
            let teacher_spec = crate::oracle::GmmSpec {
                weights: vec![1.0],
                means: vec![vec![0.4; 32]],
                variances: vec![0.5],
                latent: (2, 4, 4),
            };
            let cv = analytic_velocity(&critic_spec, &x_tau, &tau, &[None, None])?;
            let tv2 = analytic_velocity(&teacher_spec, &x_tau, &tau, &[None, None])?;

            let (b, bcfg, tvv) = (batch.clone(), cfg.clone(), teacher_v.clone());
            let base_frozen = base.clone();
            let build = move |p: &ParamStore<f64>| -> Result<(Tape<f64>, TensorRef)> {
                let mut tape = Tape::new();
                // p holds the adapter; base weights stay constants
                let bound =
                    bind_with_lora(&mut tape, &bcfg, &base_frozen, p, &lc, true, true)?;
                let xr = tape.constant(b.x_t.clone());
                let out = dit_forward(&mut tape, &bcfg, &bound, xr, &t, &cond)?;
                let x0_hat = predict_x0_tape(&mut tape, xr, &t, out.velocity)?;
                let l_dmd = dmd_surrogate(&mut tape, x0_hat, &cv, &tv2, &tau)?;
                let l_out = output_kd_loss(&mut tape, &tvv, out.velocity)?;
                let total = tape.add(l_dmd, l_out)?;
                Ok((tape, total))
            };
            // bind_with_lora takes leaves from `p` directly by name
            worst = worst.max(fd_check("eq9-eq10-kdmd", &mut lora, &build)?);
        }

        Ok(format!("all objectives pass at 1e-6; worst informative rel error {worst:.2e}"))
    })())
}

// --------------------------------------------------------------------------
// criterion 4: elastic slicing parity and stop-gradient zeros
// --------------------------------------------------------------------------

pub fn check_elastic_parity() -> CheckReport {
    report("elastic-parity", (|| {
        let cfg = slicing_cfg();
        let widths = WidthSet::default_set();
        widths.validate_for(&cfg)?;
        let mut rng = StreamRng::new(41, 0);
        let store = crate::elastic::init_supernet::<f32>(&cfg, &widths, &mut rng)?;
        let x: Tensor<f32> = rng.normal_tensor(&[2, 2, 4, 4]);
        let t = [0.4f32, 0.8];
        let cond = [None, Some(1)];

        for &f in widths.fractions() {
            let (sub_cfg, view) = slice_parameters(&store, &cfg, &widths, f)?;
            // independent standalone with the view's values
            let mut r2 = StreamRng::new(99, 7);
            let mut standalone = init_params::<f32>(&sub_cfg, &mut r2)?;
            for (name, tv) in view.iter() {
                *standalone.get_mut(name) = tv.clone();
            }
            let via_view =
                crate::elastic::subnet_forward(&store, &cfg, &widths, f, &x, &t, &cond)?;
            let mut tape = Tape::new();
            let bound = standalone.bind_frozen(&mut tape);
            let xr = tape.constant(x.clone());
            let out = dit_forward(&mut tape, &sub_cfg, &bound, xr, &t, &cond)?;
            let diff = via_view.max_abs_diff(tape.value(out.velocity));
            ensure(diff <= 1e-6, format!("width {f}: view vs standalone diff {diff}"))?;
        }

        // stop-gradient zeros: the distillation term's gradient vanishes
        // outside the sampled prefix and never touches the teacher branch
        let f = 0.5;
        let (full_cfg, full_view) = slice_parameters(&store, &cfg, &widths, 1.0)?;
        let mut ft = Tape::new();
        let fb = full_view.bind_frozen(&mut ft);
        let xr = ft.constant(x.clone());
        let fo = dit_forward(&mut ft, &full_cfg, &fb, xr, &t, &cond)?;
        let v_super = ft.value(fo.velocity).clone();

        let (sub_cfg, sub_view) = slice_parameters(&store, &cfg, &widths, f)?;
        let mut st = Tape::new();
        let sb = sub_view.bind(&mut st)?;
        let xr = st.constant(x.clone());
        let so = dit_forward(&mut st, &sub_cfg, &sb, xr, &t, &cond)?;
        let teacher = st.constant(v_super);
        let dist = st.mse(so.velocity, teacher)?;
        let grads = st.backward(dist)?;
        let scattered = scatter_grads(&grads, &store, &cfg, f)?;
        let w = scattered.get("embed.w").unwrap();
        let rows_f = (cfg.layout.hidden_width as f64 * f) as usize;
        let cols = w.shape()[1];
        for r in rows_f..w.shape()[0] {
            for c in 0..cols {
                ensure(
                    w.data()[r * cols + c] == 0.0,
                    format!("nonzero dist gradient outside prefix at ({r},{c})"),
                )?;
            }
        }
        ensure(
            scattered.get("mid.0.ln1.g").is_none(),
            "teacher-branch per-width parameter received gradient".into(),
        )?;
        Ok("view == standalone at {0.375, 0.5, 1.0}; dist gradients vanish outside prefix".into())
    })())
}

// --------------------------------------------------------------------------
// criterion 9: sampler schedule and LoRA toggle
// --------------------------------------------------------------------------

pub fn check_sampler_schedule() -> CheckReport {
    report("sampler-schedule", (|| {
        let k = shift_knots(4, 3.0)?;
        ensure(
            k == vec![1.0, 0.9, 0.75, 0.5, 0.0],
            format!("shift-3 knots {k:?}"),
        )?;
        let u = shift_knots(4, 1.0)?;
        ensure(
            u == vec![1.0, 0.75, 0.5, 0.25, 0.0],
            format!("shift-1 knots {u:?}"),
        )?;

        // LoRA toggle-off restores bitwise base behavior
        let cfg = gradcheck_cfg();
        let mut rng = StreamRng::new(51, 0);
        let base = init_params::<f32>(&cfg, &mut rng)?;
        let lc = LoraConfig::default();
        let mut lora = init_lora::<f32>(&cfg, &lc, &mut rng)?;
        let names: Vec<String> = lora.names().cloned().collect();
        for n in &names {
            let tmut = lora.get_mut(n);
            let fresh: Tensor<f32> = rng.normal_tensor(tmut.shape());
            *tmut = fresh;
        }
        let off = lora_merge(&cfg, &base, &lora, &lc, false)?;
        for (name, tv) in base.iter() {
            let o = off.get(name);
            for (a, b) in tv.data().iter().zip(o.data()) {
                ensure(
                    a.to_bits() == b.to_bits(),
                    format!("{name}: toggle-off is not bitwise identical"),
                )?;
            }
        }
        Ok("knots {1, 0.9, 0.75, 0.5, 0} exact; uniform at s=1; toggle-off bitwise".into())
    })())
}

/// The fast suite behind `oracle-check`.
pub fn oracle_check_suite() -> Vec<CheckReport> {
    vec![
        check_bna_oracle_grid(),
        check_pair_count_claims(),
        check_gradient_soundness(),
        check_elastic_parity(),
        check_sampler_schedule(),
    ]
}
