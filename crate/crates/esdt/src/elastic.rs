//! Width-elastic supernetwork: sub-network definition by width fraction,
//! prefix parameter slicing with write-back, and the joint training step
//! combining flow matching with stop-gradient self-distillation.
//!
//! Storage scheme: width-shared parameters live under their canonical names
//! at full width; norm and modulation parameters — isolated per width — live
//! under `w{tag}.` prefixes for fractions below one, with the full-width
//! copy staying canonical so the 1.0 view is exactly the supernetwork.

use crate::error::{EsdtError, Result};
use crate::losses::{flow_matching_loss, DiffusionBatch};
use crate::model::{self, dit_forward, ModelConfig, SliceRule};
use crate::numerics::{GradientMap, ParamStore, Scalar, StreamRng, Tape, Tensor};
use crate::optim::Adam;

/// Registered width fractions; always contains 1.0.
#[derive(Debug, Clone)]
pub struct WidthSet {
    fracs: Vec<f64>,
}

impl WidthSet {
    pub fn new(mut fracs: Vec<f64>) -> Result<Self> {
        fracs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        fracs.dedup();
        if fracs.iter().any(|&f| f <= 0.0 || f > 1.0) {
            return Err(EsdtError::Config("widths must lie in (0, 1]".into()));
        }
        if fracs.last() != Some(&1.0) {
            return Err(EsdtError::Config("width 1.0 must always be registered".into()));
        }
        Ok(Self { fracs })
    }

    /// The default registered set.
    pub fn default_set() -> Self {
        Self::new(vec![0.375, 0.5, 1.0]).unwrap()
    }

    /// Every fraction must slice this configuration cleanly.
    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        for &f in &self.fracs {
            cfg.scaled(f)?;
        }
        Ok(())
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fracs
    }

    pub fn contains(&self, f: f64) -> bool {
        self.fracs.iter().any(|&x| (x - f).abs() < 1e-12)
    }

    /// Uniform draw among the registered sub-widths (everything below 1.0).
    pub fn sample_subwidth(&self, rng: &mut StreamRng) -> Option<f64> {
        let subs: Vec<f64> = self.fracs.iter().copied().filter(|&f| f < 1.0).collect();
        if subs.is_empty() {
            None
        } else {
            Some(subs[rng.uniform_usize(subs.len())])
        }
    }
}

/// Stable storage tag for a width fraction (`0.375` -> `"3750"`).
pub fn width_tag(f: f64) -> String {
    format!("{:04}", (f * 10_000.0).round() as u32)
}

fn per_width_name(name: &str, f: f64) -> String {
    if (f - 1.0).abs() < 1e-12 {
        name.to_string()
    } else {
        format!("w{}.{}", width_tag(f), name)
    }
}

/// Prefix block copy: `target_shape[i] <= t.shape[i]` in every dim.
fn slice_nd<F: Scalar>(t: &Tensor<F>, target_shape: &[usize]) -> Result<Tensor<F>> {
    if target_shape.len() != t.shape().len()
        || target_shape.iter().zip(t.shape()).any(|(&a, &b)| a > b)
    {
        return Err(EsdtError::shape(
            "slice_nd",
            format!("{:?} from {:?}", target_shape, t.shape()),
        ));
    }
    let rank = t.shape().len();
    let numel: usize = target_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let src_strides = strides(t.shape());
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let off: usize = idx.iter().zip(&src_strides).map(|(&i, &s)| i * s).sum();
        out.push(t.data()[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < target_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor::new(target_shape, out))
}

/// Scatter a sliced tensor back into the prefix region of a zero tensor of
/// the full shape.
fn embed_nd<F: Scalar>(small: &Tensor<F>, full_shape: &[usize]) -> Tensor<F> {
    let rank = full_shape.len();
    let mut out = Tensor::zeros(full_shape);
    let dst_strides = strides(full_shape);
    let mut idx = vec![0usize; rank];
    for v in small.data() {
        let off: usize = idx.iter().zip(&dst_strides).map(|(&i, &s)| i * s).sum();
        out.data_mut()[off] = *v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < small.shape()[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Initialize supernetwork storage: full-width parameters under canonical
/// names plus isolated per-width copies for every registered sub-width.
pub fn init_supernet<F: Scalar>(
    cfg: &ModelConfig,
    widths: &WidthSet,
    rng: &mut StreamRng,
) -> Result<ParamStore<F>> {
    widths.validate_for(cfg)?;
    let mut store = model::init_params::<F>(cfg, rng)?;
    for &f in widths.fractions() {
        if (f - 1.0).abs() < 1e-12 {
            continue;
        }
        let sub = cfg.scaled(f)?;
        let names: Vec<(String, Vec<usize>, model::Init)> = model::param_specs(&sub)
            .into_iter()
            .filter(|s| s.rule == SliceRule::PerWidth)
            .map(|s| (s.name, s.shape, s.init))
            .collect();
        for (name, shape, init) in names {
            let t = match init {
                model::Init::Zero => Tensor::zeros(&shape),
                model::Init::One => Tensor::full(&shape, F::one()),
                model::Init::Normal { fan_in } => {
                    let sd = 1.0 / (fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    Tensor::new(
                        &shape,
                        (0..n).map(|_| F::c(rng.normal::<f64>().to_f64_() * sd)).collect(),
                    )
                }
            };
            store.insert(per_width_name(&name, f), t);
        }
    }
    Ok(store)
}

/// Materialize the sub-network view at fraction `f`: canonical names, sliced
/// shapes. Updates flow back through [`scatter_grads`] /
/// [`write_back_view`], so the view is an aliased window onto supernet
/// storage rather than an independent model.
pub fn slice_parameters<F: Scalar>(
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    widths: &WidthSet,
    f: f64,
) -> Result<(ModelConfig, ParamStore<F>)> {
    if !widths.contains(f) {
        return Err(EsdtError::Config(format!("width {f} is not registered")));
    }
    let sub_cfg = cfg.scaled(f)?;
    let mut view = ParamStore::new();
    for s in model::param_specs(&sub_cfg) {
        let value = if s.rule == SliceRule::PerWidth {
            store.get(&per_width_name(&s.name, f)).clone()
        } else {
            slice_nd(store.get(&s.name), &s.shape)?
        };
        view.insert(s.name, value);
    }
    Ok((sub_cfg, view))
}

/// Map gradients computed against a view back into supernetwork coordinates:
/// sliced tensors scatter into the prefix of the shared parameter, per-width
/// tensors move to their prefixed name.
pub fn scatter_grads<F: Scalar>(
    grads: &GradientMap<F>,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    f: f64,
) -> Result<GradientMap<F>> {
    let sub_cfg = cfg.scaled(f)?;
    let rules: std::collections::BTreeMap<String, SliceRule> = model::param_specs(&sub_cfg)
        .into_iter()
        .map(|s| (s.name, s.rule))
        .collect();
    let mut out = GradientMap::new();
    for (name, g) in grads.iter() {
        let rule = rules
            .get(name)
            .ok_or_else(|| EsdtError::Config(format!("gradient for unknown parameter {name}")))?;
        if *rule == SliceRule::PerWidth {
            out.insert(per_width_name(name, f), g.clone());
        } else {
            let full = store.get(name);
            out.insert(name.clone(), embed_nd(g, full.shape()));
        }
    }
    Ok(out)
}

/// Apply an optimizer update through a sub-network view: gradients in view
/// coordinates, update on supernet storage. Entries outside the view's
/// prefix region are untouched.
pub fn apply_view_update<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &ModelConfig,
    f: f64,
    view_grads: &GradientMap<F>,
    opt: &mut Adam<F>,
) -> Result<()> {
    let scattered = scatter_grads(view_grads, store, cfg, f)?;
    opt.step(store, &scattered)
}

/// Forward through the sub-network at `f` (velocity only).
pub fn subnet_forward<F: Scalar>(
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    widths: &WidthSet,
    f: f64,
    x_t: &Tensor<F>,
    t: &[F],
    cond: &[Option<usize>],
) -> Result<Tensor<F>> {
    let (sub_cfg, view) = slice_parameters(store, cfg, widths, f)?;
    let mut tape = Tape::new();
    let bound = view.bind_frozen(&mut tape);
    let xr = tape.constant(x_t.clone());
    let out = dit_forward(&mut tape, &sub_cfg, &bound, xr, t, cond)?;
    Ok(tape.value(out.velocity).clone())
}

/// Exact parameter count of the sliced view, written as closed-form
/// arithmetic over the configuration (checked against enumeration in tests).
pub fn parameter_count(cfg: &ModelConfig, f: f64) -> Result<u64> {
    let sub = cfg.scaled(f)?;
    let l = &sub.layout;
    let a = &sub.attention;
    let (c, _, _) = sub.latent;
    let d = l.hidden_width as u64;
    let patch_ch = (c * l.patch * l.patch) as u64;
    let inner = a.inner_dim() as u64;
    let kvin = a.kv_inner_dim() as u64;
    let cai = l.ca_inner as u64;
    let cond = l.cond_dim as u64;
    let e = l.time_embed_dim as u64;
    let heads = a.query_heads as u64;

    let mut total = 0u64;
    total += d * patch_ch + d; // embed
    total += patch_ch * d + patch_ch; // head
    total += (l.class_count as u64 + 1) * cond; // class table
    if l.cond_tokens > 1 {
        total += (l.cond_tokens as u64 - 1) * cond;
    }
    if l.cond_pos_embed {
        total += l.cond_tokens as u64 * cond;
    }
    total += d * e + d + d * d + d; // time mlp
    total += 6 * d * d + 6 * d; // modulation projection
    total += 2 * d * d + 2 * d; // final modulation
    total += d * 4 * d + d; // down_proj
    total += 4 * d * d + 4 * d; // up_proj
    if l.long_skip {
        total += 2 * d * d + d;
    }
    total += l.skip_topology.len() as u64 * (d * d + d);

    let block = |ratio: u64, is_assa: bool| -> u64 {
        let ffn = ratio * d;
        let mut b = 0u64;
        b += 6 * d; // three layer norms
        b += 6 * d; // modulation table
        b += inner * d + inner; // q
        b += 2 * (kvin * d + kvin); // k, v
        b += d * inner + d; // out
        if is_assa {
            b += 2 * (kvin * kvin * 4 + kvin); // compression convs
            b += heads * d + heads; // gate
        }
        b += cai * d + cai; // ca q
        b += 2 * (cai * cond + cai); // ca k, v
        b += d * cai + d; // ca out
        b += ffn * d + ffn + d * ffn + d; // ffn
        b
    };
    total += l.down_depth as u64 * block(l.ffn_ratio_outer as u64, l.use_assa_outer);
    total += l.middle_depth as u64 * block(l.ffn_ratio_middle as u64, false);
    total += l.up_depth as u64 * block(l.ffn_ratio_outer as u64, l.use_assa_outer);
    Ok(total)
}

/// Element count of the isolated per-width parameters at `f`.
pub fn per_width_count(cfg: &ModelConfig, f: f64) -> Result<u64> {
    let sub = cfg.scaled(f)?;
    Ok(model::param_specs(&sub)
        .iter()
        .filter(|s| s.rule == SliceRule::PerWidth)
        .map(|s| s.shape.iter().product::<usize>() as u64)
        .sum())
}

/// Loss report of one elastic step.
#[derive(Debug, Clone, Copy)]
pub struct ElasticStepReport {
    pub supernet_diff: f64,
    pub subnet_diff: f64,
    pub dist: f64,
    pub width: f64,
    pub grad_scale: f64,
}

/// One joint update: flow matching on the supernetwork and on a sampled
/// sub-width, plus the stop-gradient self-distillation term; the sub-network
/// gradient contribution is rescaled so its global norm never exceeds the
/// supernetwork's, then a single Adam update hits shared storage.
#[allow(clippy::too_many_arguments)]
pub fn elastic_train_step<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &ModelConfig,
    widths: &WidthSet,
    batch: &DiffusionBatch<F>,
    cond: &[Option<usize>],
    f_s: f64,
    lambda_sub: f64,
    lambda_dist: f64,
    opt: &mut Adam<F>,
) -> Result<ElasticStepReport> {
    if (f_s - 1.0).abs() < 1e-12 || !widths.contains(f_s) {
        return Err(EsdtError::Config(format!(
            "sampled width {f_s} must be a registered fraction below 1.0"
        )));
    }
    let latent_shape = [batch.t.len(), cfg.latent.0, cfg.latent.1, cfg.latent.2];
    let x_t = batch.x_t.reshaped(&latent_shape)?;
    let target = batch.target.reshaped(&latent_shape)?;

    // supernetwork branch
    let (full_cfg, full_view) = slice_parameters(store, cfg, widths, 1.0)?;
    let mut tape = Tape::new();
    let bound = full_view.bind(&mut tape)?;
    let xr = tape.constant(x_t.clone());
    let out = dit_forward(&mut tape, &full_cfg, &bound, xr, &batch.t, cond)?;
    let loss_super = flow_matching_loss(&mut tape, out.velocity, &target)?;
    let loss_super_val = tape.value(loss_super).item().to_f64_();
    let v_super = tape.value(out.velocity).clone();
    let g_super = tape.backward(loss_super)?;
    let g_super = scatter_grads(&g_super, store, cfg, 1.0)?;

    // sub-network branch: Eq. 4 on the slice plus Eq. 5 against the
    // detached supernetwork prediction
    let (sub_cfg, sub_view) = slice_parameters(store, cfg, widths, f_s)?;
    let mut sub_tape = Tape::new();
    let sub_bound = sub_view.bind(&mut sub_tape)?;
    let xr = sub_tape.constant(x_t);
    let sub_out = dit_forward(&mut sub_tape, &sub_cfg, &sub_bound, xr, &batch.t, cond)?;
    let loss_sub = flow_matching_loss(&mut sub_tape, sub_out.velocity, &target)?;
    let teacher = sub_tape.constant(v_super);
    let loss_dist = sub_tape.mse(sub_out.velocity, teacher)?;
    let loss_sub_val = sub_tape.value(loss_sub).item().to_f64_();
    let loss_dist_val = sub_tape.value(loss_dist).item().to_f64_();

    let ls = sub_tape.scale(loss_sub, F::c(lambda_sub));
    let ld = sub_tape.scale(loss_dist, F::c(lambda_dist));
    let sub_total = sub_tape.add(ls, ld)?;
    let g_sub = sub_tape.backward(sub_total)?;
    let mut g_sub = scatter_grads(&g_sub, store, cfg, f_s)?;

    // adaptive scaling: cap the sub-network contribution at the
    // supernetwork gradient norm
    let n_super = g_super.l2_norm().to_f64_();
    let n_sub = g_sub.l2_norm().to_f64_();
    let scale = if n_sub > n_super && n_sub > 0.0 {
        n_super / n_sub
    } else {
        1.0
    };
    if scale < 1.0 {
        g_sub.scale_in_place(F::c(scale));
    }

    let mut total = g_super;
    total.accumulate(&g_sub);
    if !total.all_finite()
        || !loss_super_val.is_finite()
        || !loss_sub_val.is_finite()
        || !loss_dist_val.is_finite()
    {
        return Err(EsdtError::Numeric("elastic step: non-finite loss or gradient".into()));
    }
    opt.step(store, &total)?;

    Ok(ElasticStepReport {
        supernet_diff: loss_super_val,
        subnet_diff: loss_sub_val,
        dist: loss_dist_val,
        width: f_s,
        grad_scale: scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::sample_xt;
    use crate::attention::AttentionConfig;
    use crate::model::StageLayout;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            latent: (2, 4, 4),
            layout: StageLayout {
                down_depth: 1,
                middle_depth: 2,
                up_depth: 1,
                hidden_width: 16,
                ffn_ratio_outer: 4,
                ffn_ratio_middle: 3,
                use_assa_outer: true,
                skip_topology: vec![(0, 1)],
                long_skip: true,
                pos_embed: true,
                patch: 2,
                time_embed_dim: 8,
                cond_dim: 8,
                cond_tokens: 2,
                cond_pos_embed: true,
                class_count: 2,
                ca_inner: 16,
            },
            attention: AttentionConfig {
                query_heads: 2,
                kv_heads: 2,
                head_dim: 8,
                block_count: 2,
                radius: 1,
                compression_stride: 2,
            },
        }
    }

    fn small_widths() -> WidthSet {
        WidthSet::new(vec![0.5, 1.0]).unwrap()
    }

    #[test]
    fn prefix_slice_takes_top_left_block() {
        let t = Tensor::<f64>::new(&[8, 8], (0..64).map(|i| i as f64).collect());
        let s = slice_nd(&t, &[4, 4]).unwrap();
        assert_eq!(s.shape(), &[4, 4]);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(s.data()[r * 4 + c], (r * 8 + c) as f64);
            }
        }
        let back = embed_nd(&s, &[8, 8]);
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[3 * 8 + 3], (3 * 8 + 3) as f64);
        assert_eq!(back.data()[4 * 8 + 4], 0.0);
    }

    #[test]
    fn full_width_view_is_the_supernetwork() {
        let cfg = small_cfg();
        let widths = small_widths();
        let mut rng = StreamRng::new(1, 0);
        let store = init_supernet::<f64>(&cfg, &widths, &mut rng).unwrap();
        let (sub_cfg, view) = slice_parameters(&store, &cfg, &widths, 1.0).unwrap();
        assert_eq!(sub_cfg, cfg);
        for (name, t) in view.iter() {
            assert_eq!(t.data(), store.get(name).data(), "{name}");
        }
    }

    #[test]
    fn default_width_set_registers_paper_fractions() {
        let w = WidthSet::default_set();
        assert_eq!(w.fractions(), &[0.375, 0.5, 1.0]);
        assert!(WidthSet::new(vec![0.5]).is_err());
        assert!(WidthSet::new(vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn unregistered_width_is_rejected() {
        let cfg = small_cfg();
        let widths = small_widths();
        let mut rng = StreamRng::new(2, 0);
        let store = init_supernet::<f64>(&cfg, &widths, &mut rng).unwrap();
        assert!(slice_parameters(&store, &cfg, &widths, 0.25).is_err());
    }

    #[test]
    fn perturbation_outside_prefix_leaves_subnet_output_unchanged() {
        let cfg = small_cfg();
        let widths = small_widths();
        let mut rng = StreamRng::new(3, 0);
        let mut store = init_supernet::<f64>(&cfg, &widths, &mut rng).unwrap();
        let x: Tensor<f64> = rng.normal_tensor(&[2, 2, 4, 4]);
        let t = [0.3, 0.8];
        let cond = [None, Some(1)];
        let base = subnet_forward(&store, &cfg, &widths, 0.5, &x, &t, &cond).unwrap();
        // channel outside the 0.5 prefix of the embedding
        {
            let w = store.get_mut("embed.w");
            let cols = w.shape()[1];
            w.data_mut()[12 * cols] += 7.0; // row 12 >= 8 = sliced rows
        }
        let after = subnet_forward(&store, &cfg, &widths, 0.5, &x, &t, &cond).unwrap();
        assert_eq!(base.data(), after.data());
        // ...and inside the prefix it does change
        {
            let w = store.get_mut("embed.w");
            let cols = w.shape()[1];
            w.data_mut()[2 * cols] += 7.0;
        }
        let changed = subnet_forward(&store, &cfg, &widths, 0.5, &x, &t, &cond).unwrap();
        assert!(base.max_abs_diff(&changed) > 1e-9);
    }

    #[test]
    fn sliced_view_matches_materialized_standalone_model() {
        let cfg = small_cfg();
        let widths = small_widths();
        let mut rng = StreamRng::new(4, 0);
        let store = init_supernet::<f64>(&cfg, &widths, &mut rng).unwrap();
        let (sub_cfg, view) = slice_parameters(&store, &cfg, &widths, 0.5).unwrap();

        // independent standalone: fresh init then overwrite with view values
        let mut rng2 = StreamRng::new(99, 0);
        let mut standalone = model::init_params::<f64>(&sub_cfg, &mut rng2).unwrap();
        for (name, t) in view.iter() {
            *standalone.get_mut(name) = t.clone();
        }

        let x: Tensor<f64> = rng.normal_tensor(&[2, 2, 4, 4]);
        let t = [0.4, 0.6];
        let cond = [Some(0), None];
        let via_view = subnet_forward(&store, &cfg, &widths, 0.5, &x, &t, &cond).unwrap();
        let mut tape = Tape::new();
        let bound = standalone.bind_frozen(&mut tape);
        let xr = tape.constant(x.clone());
        let out = dit_forward(&mut tape, &sub_cfg, &bound, xr, &t, &cond).unwrap();
        let direct = tape.value(out.velocity).clone();
        assert!(via_view.max_abs_diff(&direct).to_f64_() <= 1e-6);
    }

    #[test]
    fn view_update_touches_only_prefix_entries() {
        let cfg = small_cfg();
        let widths = small_widths();
        let mut rng = StreamRng::new(5, 0);
        let mut store = init_supernet::<f64>(&cfg, &widths, &mut rng).unwrap();
        let before = store.clone();

        // gradient of a simple loss through the 0.5 view
        let (sub_cfg, view) = slice_parameters(&store, &cfg, &widths, 0.5).unwrap();
        let mut tape = Tape::new();
        let bound = view.bind(&mut tape).unwrap();
        let x = tape.constant(rng.normal_tensor(&[1, 2, 4, 4]));
        let out = dit_forward(&mut tape, &sub_cfg, &bound, x, &[0.5], &[None]).unwrap();
        let sq = tape.mul(out.velocity, out.velocity).unwrap();
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();

        let mut opt = Adam::new(1e-2, 0.9, 0.999);
        apply_view_update(&mut store, &cfg, 0.5, &grads, &mut opt).unwrap();

        // the 0.5 view region of embed.w may change; outside it must not
        let (wb, wa) = (before.get("embed.w"), store.get("embed.w"));
        let cols = wb.shape()[1];
        let mut changed_inside = false;
        for r in 0..wb.shape()[0] {
            for c in 0..cols {
                let (b, a) = (wb.data()[r * cols + c], wa.data()[r * cols + c]);
                if r < 8 {
                    changed_inside |= a != b;
                } else {
                    assert_eq!(a, b, "entry ({r},{c}) outside the prefix moved");
                }
            }
        }
        assert!(changed_inside);
        // per-width copies of the other width are untouched
        assert_eq!(
            before.get("w5000.mid.0.ln1.g").data(),
            store.get("w5000.mid.0.ln1.g").data()
        );
        // full-width norm copies (canonical) are untouched by a 0.5 update
        assert_eq!(before.get("mid.0.ln1.g").data(), store.get("mid.0.ln1.g").data());
    }

    #[test]
    fn closed_form_count_matches_enumeration_for_all_widths() {
        let cfg = small_cfg();
        let widths = small_widths();
        for &f in widths.fractions() {
            let sub = cfg.scaled(f).unwrap();
            let enumerated: u64 = model::param_specs(&sub)
                .iter()
                .map(|s| s.shape.iter().product::<usize>() as u64)
                .sum();
            assert_eq!(parameter_count(&cfg, f).unwrap(), enumerated, "width {f}");
        }
        assert!(parameter_count(&cfg, 1.0).unwrap() > parameter_count(&cfg, 0.5).unwrap());
    }

    #[test]
    fn supernet_element_ledger() {
        // total storage = full-width params + per-width copies of sub-widths
        let cfg = small_cfg();
        let widths = small_widths();
        let mut rng = StreamRng::new(6, 0);
        let store = init_supernet::<f64>(&cfg, &widths, &mut rng).unwrap();
        let want = parameter_count(&cfg, 1.0).unwrap() + per_width_count(&cfg, 0.5).unwrap();
        assert_eq!(store.total_elements() as u64, want);
    }

    #[test]
    fn paper_shape_parameter_counts_near_stated_sizes() {
        let cfg = ModelConfig::paper_shape();
        let b = |f: f64| parameter_count(&cfg, f).unwrap() as f64 / 1e9;
        let full = b(1.0);
        let half = b(0.5);
        let tiny = b(0.375);
        assert!((full - 1.6).abs() / 1.6 < 0.25, "full {full}B");
        assert!((half - 0.4).abs() / 0.4 < 0.25, "half {half}B");
        assert!((tiny - 0.3).abs() / 0.3 < 0.35, "tiny {tiny}B");
    }

    #[test]
    fn dist_gradient_is_zero_outside_prefix_and_on_teacher_path() {
        let cfg = small_cfg();
        let widths = small_widths();
        let mut rng = StreamRng::new(7, 0);
        let store = init_supernet::<f64>(&cfg, &widths, &mut rng).unwrap();
        let x0: Tensor<f64> = rng.normal_tensor(&[2, 32]);
        let eps: Tensor<f64> = rng.normal_tensor(&[2, 32]);
        let batch = sample_xt(&x0, &eps, &[0.4, 0.7]).unwrap();
        let cond = [None, None];

        // lambda_sub = 0, lambda_dist = 1: the sub branch carries only the
        // distillation term. Its scattered gradient must vanish outside the
        // 0.5 prefix, and the supernet branch must receive no gradient from
        // it at all (stop-gradient on the teacher path).
        let latent = [2, 2, 4, 4];
        let x_t = batch.x_t.reshaped(&latent).unwrap();

        let (full_cfg, full_view) = slice_parameters(&store, &cfg, &widths, 1.0).unwrap();
        let mut tape = Tape::new();
        let bound = full_view.bind_frozen(&mut tape);
        let xr = tape.constant(x_t.clone());
        let out = dit_forward(&mut tape, &full_cfg, &bound, xr, &batch.t, &cond).unwrap();
        let v_super = tape.value(out.velocity).clone();

        let (sub_cfg, sub_view) = slice_parameters(&store, &cfg, &widths, 0.5).unwrap();
        let mut st = Tape::new();
        let sb = sub_view.bind(&mut st).unwrap();
        let xr = st.constant(x_t.clone());
        let sout = dit_forward(&mut st, &sub_cfg, &sb, xr, &batch.t, &cond).unwrap();
        let teacher = st.constant(v_super.clone());
        let dist = st.mse(sout.velocity, teacher).unwrap();
        let g = st.backward(dist).unwrap();
        let scattered = scatter_grads(&g, &store, &cfg, 0.5).unwrap();

        let w = scattered.get("embed.w").unwrap();
        let cols = w.shape()[1];
        for r in 8..w.shape()[0] {
            for c in 0..cols {
                assert_eq!(w.data()[r * cols + c], 0.0, "gradient outside prefix at ({r},{c})");
            }
        }
        // teacher path: detached-copy recomputation produces the identical
        // dist value, confirming no dependence on live supernet parameters
        let frozen = store.clone();
        let (fc, fv) = slice_parameters(&frozen, &cfg, &widths, 1.0).unwrap();
        let mut t2 = Tape::new();
        let b2 = fv.bind_frozen(&mut t2);
        let xr2 = t2.constant(x_t);
        let out2 = dit_forward(&mut t2, &fc, &b2, xr2, &batch.t, &cond).unwrap();
        assert_eq!(t2.value(out2.velocity).data(), v_super.data());
        // full-width per-width copies never appear in a 0.5 sub gradient
        assert!(scattered.get("mid.0.ln1.g").is_none());
        assert!(scattered.get("w5000.mid.0.ln1.g").is_some());
    }

    #[test]
    fn elastic_step_updates_and_reports() {
        let cfg = small_cfg();
        let widths = small_widths();
        let mut rng = StreamRng::new(8, 0);
        let mut store = init_supernet::<f64>(&cfg, &widths, &mut rng).unwrap();
        let mut opt = Adam::new(1e-3, 0.9, 0.999);
        let x0: Tensor<f64> = rng.normal_tensor(&[4, 32]);
        let eps: Tensor<f64> = rng.normal_tensor(&[4, 32]);
        let batch = sample_xt(&x0, &eps, &[0.2, 0.4, 0.6, 0.8]).unwrap();
        let cond = [None; 4];
        let before = store.get("embed.w").clone();
        let rep =
            elastic_train_step(&mut store, &cfg, &widths, &batch, &cond, 0.5, 1.0, 1.0, &mut opt)
                .unwrap();
        assert!(rep.supernet_diff.is_finite() && rep.subnet_diff.is_finite());
        assert!(rep.grad_scale > 0.0 && rep.grad_scale <= 1.0);
        assert!(before.max_abs_diff(store.get("embed.w")) > 0.0);
        // lambda_sub = lambda_dist = 0 reduces to a plain supernet step
        let mut store2 = init_supernet::<f64>(&cfg, &widths, &mut StreamRng::new(8, 0)).unwrap();
        let mut opt2 = Adam::new(1e-3, 0.9, 0.999);
        elastic_train_step(&mut store2, &cfg, &widths, &batch, &cond, 0.5, 0.0, 0.0, &mut opt2)
            .unwrap();

        let mut store3 = init_supernet::<f64>(&cfg, &widths, &mut StreamRng::new(8, 0)).unwrap();
        let mut opt3 = Adam::new(1e-3, 0.9, 0.999);
        let latent = [4, 2, 4, 4];
        let x_t = batch.x_t.reshaped(&latent).unwrap();
        let target = batch.target.reshaped(&latent).unwrap();
        let (fc, fv) = slice_parameters(&store3, &cfg, &widths, 1.0).unwrap();
        let mut t3 = Tape::new();
        let b3 = fv.bind(&mut t3).unwrap();
        let xr = t3.constant(x_t);
        let o3 = dit_forward(&mut t3, &fc, &b3, xr, &batch.t, &cond).unwrap();
        let l3 = flow_matching_loss(&mut t3, o3.velocity, &target).unwrap();
        let g3 = t3.backward(l3).unwrap();
        let g3 = scatter_grads(&g3, &store3, &cfg, 1.0).unwrap();
        opt3.step(&mut store3, &g3).unwrap();
        for (name, t) in store3.iter() {
            assert_eq!(t.data(), store2.get(name).data(), "{name} diverged");
        }
    }
}
