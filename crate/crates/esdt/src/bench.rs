//! FLOP accounting, wall-clock benchmarking, and the frozen-tuple
//! validation-loss protocol.
//!
//! The multiply-add ledger counts matmul-class work only (linear layers,
//! attention score/value products, compression convolutions) — exactly what
//! the execution meter in `numerics::ops` instruments, so report totals can
//! be asserted against instrumented runs with equality.

use std::time::{Duration, Instant};

use crate::attention::{attention_pair_count, AttentionConfig};
use crate::error::{EsdtError, Result};
use crate::losses::sample_xt;
use crate::model::ModelConfig;
use crate::numerics::{Scalar, StreamRng, Tensor};
use crate::velocity::VelocityField;

// --------------------------------------------------------------------------
// FLOP report
// --------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FlopReport {
    /// Per-component multiply-add counts for a single-sample forward pass.
    pub entries: Vec<(String, u64)>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|(_, v)| v).sum()
    }

    pub fn entry(&self, label: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(l, _)| l == label || l.starts_with(label))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,multiply_adds\n");
        for (l, v) in &self.entries {
            out.push_str(&format!("{l},{v}\n"));
        }
        out.push_str(&format!("total,{}\n", self.total()));
        out
    }
}

/// Analytic multiply-add counts of one forward pass at batch 1, matching the
/// execution meter exactly. Attention counts derive from pair counts times
/// `2 * inner` (score and value products across all query heads).
pub fn flop_report(cfg: &ModelConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let l = &cfg.layout;
    let a = &cfg.attention;
    let d = l.hidden_width as u64;
    let (c, _, _) = cfg.latent;
    let patch_ch = (c * l.patch * l.patch) as u64;
    let inner = a.inner_dim() as u64;
    let kv_inner = a.kv_inner_dim() as u64;
    let cai = l.ca_inner as u64;
    let cond = l.cond_dim as u64;
    let tcond = l.cond_tokens as u64;
    let e = l.time_embed_dim as u64;
    let heads = a.query_heads as u64;
    let (n_outer, n_mid) = cfg.token_ledger();
    let (ht, wt) = cfg.token_grid();

    let mut entries: Vec<(String, u64)> = Vec::new();
    entries.push(("time.mlp".into(), d * e + d * d));
    entries.push(("embed".into(), n_outer as u64 * d * patch_ch));

    let pc_outer = attention_pair_count(n_outer, a)?;
    let block = |label: &str, n: u64, ratio: u64, is_assa: bool, entries: &mut Vec<(String, u64)>| {
        let mut mas = 0u64;
        mas += 6 * d * d; // modulation projection
        mas += n * inner * d + 2 * n * kv_inner * d; // qkv
        if is_assa {
            // compression convs on the token grid
            mas += 2 * kv_inner * ((ht / 2) * (wt / 2)) as u64 * kv_inner * 4;
            mas += 2 * inner * pc_outer.global; // compressed global attention
            mas += 2 * inner * pc_outer.local_exact; // blockwise neighborhood
            mas += heads * d; // fusion gate
        } else {
            mas += 2 * inner * n * n; // dense self-attention
        }
        mas += n * d * inner; // attention output projection
        mas += n * cai * d; // ca query
        mas += 2 * tcond * cai * cond; // ca key/value
        mas += 2 * cai * n * tcond; // ca attention
        mas += n * d * cai; // ca output
        mas += 2 * n * ratio * d * d; // ffn
        entries.push((label.into(), mas));
    };

    for i in 0..l.down_depth {
        block(
            &format!("down.{i}"),
            n_outer as u64,
            l.ffn_ratio_outer as u64,
            l.use_assa_outer,
            &mut entries,
        );
    }
    entries.push((
        "down_proj".into(),
        n_mid as u64 * d * 4 * d,
    ));
    for i in 0..l.middle_depth {
        block(
            &format!("mid.{i}"),
            n_mid as u64,
            l.ffn_ratio_middle as u64,
            false,
            &mut entries,
        );
    }
    entries.push((
        "mid_skips".into(),
        l.skip_topology.len() as u64 * n_mid as u64 * d * d,
    ));
    entries.push(("up_proj".into(), n_mid as u64 * 4 * d * d));
    if l.long_skip {
        entries.push(("long_skip".into(), 2 * n_outer as u64 * d * d));
    }
    for i in 0..l.up_depth {
        block(
            &format!("up.{i}"),
            n_outer as u64,
            l.ffn_ratio_outer as u64,
            l.use_assa_outer,
            &mut entries,
        );
    }
    entries.push(("final.mod".into(), 2 * d * d));
    entries.push(("head".into(), n_outer as u64 * patch_ch * d));
    Ok(FlopReport { entries })
}

/// Cost-model ratio of ASSA attention pairs to dense attention pairs at `n`
/// tokens (compressed global plus modeled local, over N^2).
pub fn assa_attention_ratio(n: usize, cfg: &AttentionConfig) -> Result<f64> {
    Ok(attention_pair_count(n, cfg)?.ratio)
}

// --------------------------------------------------------------------------
// wall-clock benchmarking
// --------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LatencySample {
    pub label: String,
    pub median: Duration,
    pub iqr: Duration,
    pub repeats: usize,
    /// Set when the timer resolution is coarser than 1% of the median.
    pub flagged: bool,
    pub host: String,
}

pub fn host_fingerprint() -> String {
    format!(
        "{}-{}-{}cpu",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map_or(0, |n| n.get())
    )
}

fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Median and interquartile range of `repeats` timed runs, warm-ups
/// discarded. Requires `repeats >= 30`.
pub fn time_op(label: &str, repeats: usize, mut f: impl FnMut()) -> Result<LatencySample> {
    if repeats < 30 {
        return Err(EsdtError::Config(format!(
            "latency bench requires at least 30 repeats, got {repeats}"
        )));
    }
    for _ in 0..3 {
        f();
    }
    let mut times: Vec<Duration> = (0..repeats)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed()
        })
        .collect();
    times.sort();
    let median = times[repeats / 2];
    let iqr = times[(3 * repeats) / 4] - times[repeats / 4];
    let flagged = timer_resolution().as_nanos() * 100 > median.as_nanos().max(1);
    Ok(LatencySample {
        label: label.to_string(),
        median,
        iqr,
        repeats,
        flagged,
        host: host_fingerprint(),
    })
}

/// Time one dense self-attention layer against one ASSA layer over the same
/// `n`-token grid and head setup (projections included in both).
pub fn bench_attention_layers(
    grid: (usize, usize),
    cfg: &AttentionConfig,
    repeats: usize,
) -> Result<(LatencySample, LatencySample)> {
    use crate::attention::{assa, dense_attention, AssaRefs};
    use crate::numerics::Tape;

    cfg.validate()?;
    let (ht, wt) = grid;
    let n = ht * wt;
    let c = cfg.inner_dim();
    let kv_inner = cfg.kv_inner_dim();
    let mut rng = StreamRng::new(1234, 0);
    let hidden: Tensor<f32> = rng.normal_tensor(&[1, c, ht, wt]);
    let wq: Tensor<f32> = rng.normal_tensor(&[c, c]);
    let wk: Tensor<f32> = rng.normal_tensor(&[kv_inner, c]);
    let wv: Tensor<f32> = rng.normal_tensor(&[kv_inner, c]);
    let wo: Tensor<f32> = rng.normal_tensor(&[c, c]);
    let bq = Tensor::<f32>::zeros(&[c]);
    let bk = Tensor::<f32>::zeros(&[kv_inner]);
    let bv = Tensor::<f32>::zeros(&[kv_inner]);
    let bo = Tensor::<f32>::zeros(&[c]);
    let wkc: Tensor<f32> = rng.normal_tensor(&[kv_inner, kv_inner, 2, 2]);
    let wvc: Tensor<f32> = rng.normal_tensor(&[kv_inner, kv_inner, 2, 2]);
    let bkc = Tensor::<f32>::zeros(&[kv_inner]);
    let bvc = Tensor::<f32>::zeros(&[kv_inner]);
    let gw = Tensor::<f32>::zeros(&[cfg.query_heads, c]);
    let gb = Tensor::<f32>::zeros(&[cfg.query_heads]);

    let dense = time_op(&format!("dense_sa_n{n}"), repeats, || {
        let mut tape = Tape::<f32>::new();
        let h = tape.constant(hidden.clone());
        let tok = tape.permute(h, &[0, 2, 3, 1]).unwrap();
        let tok = tape.reshape(tok, &[1, n, c]).unwrap();
        let wqr = tape.constant(wq.clone());
        let wkr = tape.constant(wk.clone());
        let wvr = tape.constant(wv.clone());
        let wor = tape.constant(wo.clone());
        let bqr = tape.constant(bq.clone());
        let bkr = tape.constant(bk.clone());
        let bvr = tape.constant(bv.clone());
        let bor = tape.constant(bo.clone());
        let q = tape.linear(tok, wqr, Some(bqr)).unwrap();
        let k = tape.linear(tok, wkr, Some(bkr)).unwrap();
        let v = tape.linear(tok, wvr, Some(bvr)).unwrap();
        let to_heads = |tape: &mut Tape<f32>, x, heads: usize| {
            let hd = cfg.head_dim;
            let r = tape.reshape(x, &[1, n, hd, heads]).unwrap();
            tape.permute(r, &[0, 3, 1, 2]).unwrap()
        };
        let qh = to_heads(&mut tape, q, cfg.query_heads);
        let kh = to_heads(&mut tape, k, cfg.kv_heads);
        let vh = to_heads(&mut tape, v, cfg.kv_heads);
        let o = dense_attention(&mut tape, qh, kh, vh, None).unwrap();
        let o = tape.permute(o, &[0, 2, 3, 1]).unwrap();
        let o = tape.reshape(o, &[1, n, c]).unwrap();
        let _ = tape.linear(o, wor, Some(bor)).unwrap();
    })?;

    let sparse = time_op(&format!("assa_n{n}"), repeats, || {
        let mut tape = Tape::<f32>::new();
        let h = tape.constant(hidden.clone());
        let refs = AssaRefs {
            wq: tape.constant(wq.clone()),
            bq: tape.constant(bq.clone()),
            wk: tape.constant(wk.clone()),
            bk: tape.constant(bk.clone()),
            wv: tape.constant(wv.clone()),
            bv: tape.constant(bv.clone()),
            wkc: tape.constant(wkc.clone()),
            bkc: tape.constant(bkc.clone()),
            wvc: tape.constant(wvc.clone()),
            bvc: tape.constant(bvc.clone()),
            gate_w: tape.constant(gw.clone()),
            gate_b: tape.constant(gb.clone()),
            wo: tape.constant(wo.clone()),
            bo: tape.constant(bo.clone()),
        };
        let _ = assa(&mut tape, h, cfg, &refs).unwrap();
    })?;
    Ok((dense, sparse))
}

// --------------------------------------------------------------------------
// frozen validation protocol
// --------------------------------------------------------------------------

/// Frozen `(x_0, eps, t)` tuples with fixed conditions: evaluating any model
/// on the suite is deterministic and bit-identical across runs.
#[derive(Debug, Clone)]
pub struct EvalSuite<F: Scalar> {
    pub x_t: Tensor<F>,
    pub target: Tensor<F>,
    pub t: Vec<F>,
    pub cond: Vec<Option<usize>>,
}

impl<F: Scalar> EvalSuite<F> {
    /// Freeze a suite from clean latents `[n, C, H, W]`: per-tuple noise from
    /// the seed, timesteps cycling a centered grid over (0, 1).
    pub fn freeze(
        x0: &Tensor<F>,
        cond: Vec<Option<usize>>,
        t_grid_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = x0.shape()[0];
        if cond.len() != n || t_grid_size == 0 {
            return Err(EsdtError::Config(format!(
                "eval suite: {n} latents vs {} conditions, grid {t_grid_size}",
                cond.len()
            )));
        }
        let mut rng = StreamRng::for_step(seed, crate::numerics::StreamPurpose::Eval, 0);
        let eps: Tensor<F> = rng.normal_tensor(x0.shape());
        let t: Vec<F> = (0..n)
            .map(|i| F::c(((i % t_grid_size) as f64 + 0.5) / t_grid_size as f64))
            .collect();
        let b = sample_xt(x0, &eps, &t)?;
        Ok(Self {
            x_t: b.x_t,
            target: b.target,
            t,
            cond,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Flow-matching loss of a velocity field over the frozen suite, evaluated
/// in fixed-size chunks. Deterministic for a fixed suite and field.
pub fn eval_val_loss<F: Scalar>(field: &dyn VelocityField<F>, suite: &EvalSuite<F>) -> Result<f64> {
    let n = suite.len();
    let shape = suite.x_t.shape().to_vec();
    let inner: usize = shape[1..].iter().product();
    let chunk = 64usize;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let mut sub_shape = shape.clone();
        sub_shape[0] = len;
        let xs = Tensor::new(
            &sub_shape,
            suite.x_t.data()[start * inner..(start + len) * inner].to_vec(),
        );
        let v = field.velocity(&xs, &suite.t[start..start + len], &suite.cond[start..start + len])?;
        if !v.all_finite() {
            return Err(EsdtError::Numeric("eval_val_loss: non-finite prediction".into()));
        }
        for i in 0..len * inner {
            let d = v.data()[i].to_f64_() - suite.target.data()[start * inner + i].to_f64_();
            total += d * d;
        }
        count += len * inner;
        start += len;
    }
    Ok(total / count as f64)
}
