//! Attention variants: dense self-attention with grouped KV heads, stride-2
//! KV-compressed global attention, blockwise neighborhood attention (BNA),
//! and the per-head adaptive fusion that together form adaptive sparse
//! self-attention (ASSA).
//!
//! Token grids are flattened row-major before blocking; blocks are
//! contiguous token ranges. Masked logits are excluded before softmax so
//! rows stay normalized.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{EsdtError, Result};
use crate::numerics::{Scalar, Tape, Tensor, TensorRef};

/// Hyperparameters for one ASSA layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub query_heads: usize,
    /// 1 = MQA, query_heads = MHA, 8 = the paper's GQA setting.
    pub kv_heads: usize,
    pub head_dim: usize,
    pub block_count: usize,
    pub radius: usize,
    /// Fixed at 2; kept as a field so cost accounting can name it.
    pub compression_stride: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_heads == 0 || self.kv_heads == 0 || self.head_dim == 0 {
            return Err(EsdtError::Config(
                "attention: heads and head_dim must be positive".into(),
            ));
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(EsdtError::Config(format!(
                "attention: kv_heads {} must divide query_heads {}",
                self.kv_heads, self.query_heads
            )));
        }
        let ok = self.kv_heads == 1 || self.kv_heads == 8 || self.kv_heads == self.query_heads;
        if !ok {
            return Err(EsdtError::Config(format!(
                "attention: kv_heads must be 1 (MQA), 8 (GQA) or query_heads (MHA), got {}",
                self.kv_heads
            )));
        }
        if self.compression_stride != 2 {
            return Err(EsdtError::Config(format!(
                "attention: compression stride is fixed at 2, got {}",
                self.compression_stride
            )));
        }
        if self.block_count == 0 {
            return Err(EsdtError::Config("attention: block_count must be positive".into()));
        }
        Ok(())
    }

    pub fn inner_dim(&self) -> usize {
        self.query_heads * self.head_dim
    }

    pub fn kv_inner_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }
}

/// Inclusive block range `{b-r, ..., b+r}` clipped to valid blocks.
fn covered_blocks(b: usize, block_count: usize, radius: usize) -> (usize, usize) {
    (b.saturating_sub(radius), (b + radius).min(block_count - 1))
}

/// Token-level mask of the blockwise neighborhood: entry `(i, j)` is true
/// iff `block(j)` lies within `radius` of `block(i)`, clipped to the valid
/// block range.
#[derive(Debug, Clone)]
pub struct NeighborhoodMask {
    n: usize,
    block_count: usize,
    radius: usize,
    data: Vec<bool>,
}

impl NeighborhoodMask {
    pub fn new(n: usize, block_count: usize, radius: usize) -> Result<Self> {
        if block_count == 0 || n % block_count != 0 {
            return Err(EsdtError::shape(
                "neighborhood_mask",
                format!("block count {block_count} must divide token count {n}"),
            ));
        }
        let nb = n / block_count;
        let mut data = vec![false; n * n];
        for i in 0..n {
            let (lo, hi) = covered_blocks(i / nb, block_count, radius);
            for j in lo * nb..(hi + 1) * nb {
                data[i * n + j] = true;
            }
        }
        Ok(Self {
            n,
            block_count,
            radius,
            data,
        })
    }

    pub fn token_count(&self) -> usize {
        self.n
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn entry(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn true_count(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }

    pub fn row_support(&self, i: usize) -> usize {
        self.data[i * self.n..(i + 1) * self.n]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// Binary PGM (P5, maxval 255, true = 255) for visual inspection.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.n, self.n).into_bytes();
        out.extend(self.data.iter().map(|&b| if b { 255u8 } else { 0u8 }));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm_bytes())?;
        Ok(())
    }
}

/// Multiply-pair accounting for one attention layer at `n` tokens.
///
/// `local_model` follows the O((2r+1)·N²/B) cost model (boundary blocks
/// counted at full neighborhood width); `local_exact` counts the pairs the
/// blockwise implementation actually executes with clipped neighborhoods.
/// `ratio` compares the sparse cost model against dense attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCount {
    pub dense: u64,
    pub global: u64,
    pub local_model: u64,
    pub local_exact: u64,
    pub ratio: f64,
}

pub fn attention_pair_count(n: usize, cfg: &AttentionConfig) -> Result<PairCount> {
    cfg.validate()?;
    if n % cfg.block_count != 0 {
        return Err(EsdtError::shape(
            "attention_pair_count",
            format!("block count {} must divide {n}", cfg.block_count),
        ));
    }
    let b = cfg.block_count;
    let nb = (n / b) as u64;
    let s2 = (cfg.compression_stride * cfg.compression_stride) as u64;
    let dense = (n as u64) * (n as u64);
    let global = (n as u64) * (n as u64 / s2);
    let width = (2 * cfg.radius + 1).min(b) as u64;
    let local_model = (n as u64) * width * nb;
    let local_exact: u64 = (0..b)
        .map(|blk| {
            let (lo, hi) = covered_blocks(blk, b, cfg.radius);
            nb * ((hi - lo + 1) as u64) * nb
        })
        .sum();
    Ok(PairCount {
        dense,
        global,
        local_model,
        local_exact,
        ratio: (global + local_model) as f64 / dense as f64,
    })
}

// --------------------------------------------------------------------------
// tape-level attention ops
// --------------------------------------------------------------------------

/// Stride-2 2x2 convolution over the key and value grids, separate
/// parameters per tensor. Shapes `[B, C, H, W]` with even `H`, `W`; the
/// attended token count drops by exactly 4x.
#[allow(clippy::too_many_arguments)]
pub fn kv_compress<F: Scalar>(
    tape: &mut Tape<F>,
    k: TensorRef,
    v: TensorRef,
    wk: TensorRef,
    bk: TensorRef,
    wv: TensorRef,
    bv: TensorRef,
) -> Result<(TensorRef, TensorRef)> {
    let kc = tape.conv2x2s2(k, wk, Some(bk))?;
    let vc = tape.conv2x2s2(v, wv, Some(bv))?;
    Ok((kc, vc))
}

/// Scaled dot-product attention with grouped KV heads.
///
/// `q` is `[B, Hq, Nq, d]`, `k`/`v` are `[B, Hkv, Nk, d]` with `Hkv | Hq`;
/// each query head attends through its KV group. Masked logits are excluded
/// before softmax; a mask row with no admissible key is rejected.
pub fn dense_attention<F: Scalar>(
    tape: &mut Tape<F>,
    q: TensorRef,
    k: TensorRef,
    v: TensorRef,
    mask: Option<&NeighborhoodMask>,
) -> Result<TensorRef> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 4 || ks.len() != 4 {
        return Err(EsdtError::shape(
            "dense_attention",
            format!("q {:?}, k {:?} (want [B,H,N,d])", qs, ks),
        ));
    }
    let (batch, hq, nq, d) = (qs[0], qs[1], qs[2], qs[3]);
    let (hkv, nk) = (ks[1], ks[2]);
    if ks[0] != batch || ks[3] != d || hq % hkv != 0 {
        return Err(EsdtError::shape(
            "dense_attention",
            format!("q {:?} incompatible with k {:?}", qs, ks),
        ));
    }
    let group = hq / hkv;

    // Group the query heads over their shared KV head.
    let qg = tape.reshape(q, &[batch, hkv, group, nq, d])?;
    let kg = tape.expand_axis(k, 2, group)?;
    let vg = tape.expand_axis(v, 2, group)?;
    let kt = tape.permute(kg, &[0, 1, 2, 4, 3])?;
    let scores = tape.bmm(qg, kt)?;
    let scores = tape.scale(scores, F::one() / F::c((d as f64).sqrt()));

    let mask_vec = match mask {
        Some(m) => {
            if m.token_count() != nq || nq != nk {
                return Err(EsdtError::shape(
                    "dense_attention",
                    format!("mask {}x{} vs scores {nq}x{nk}", m.token_count(), m.token_count()),
                ));
            }
            let tile = m.as_slice();
            let mut full = Vec::with_capacity(batch * hq * nq * nk);
            for _ in 0..batch * hq {
                full.extend_from_slice(tile);
            }
            Some(Arc::new(full))
        }
        None => None,
    };
    let attn = tape.row_softmax(scores, mask_vec)?;
    let out = tape.bmm(attn, vg)?;
    tape.reshape(out, &[batch, hq, nq, d])
}

/// Blockwise neighborhood attention (Eq. 3 style): tokens are partitioned
/// into `block_count` contiguous blocks and each query block attends over
/// the concatenated key/value blocks of its clipped radius-`r` neighborhood.
/// Numerically equal to [`dense_attention`] under the matching
/// [`NeighborhoodMask`].
pub fn bna<F: Scalar>(
    tape: &mut Tape<F>,
    q: TensorRef,
    k: TensorRef,
    v: TensorRef,
    block_count: usize,
    radius: usize,
) -> Result<TensorRef> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    if qs.len() != 4 || ks.len() != 4 || qs[2] != ks[2] {
        return Err(EsdtError::shape(
            "bna",
            format!("q {:?}, k {:?} (want matching [B,H,N,d])", qs, ks),
        ));
    }
    let (batch, hq, n, d) = (qs[0], qs[1], qs[2], qs[3]);
    let hkv = ks[1];
    if block_count == 0 || n % block_count != 0 {
        return Err(EsdtError::shape(
            "bna",
            format!("block count {block_count} must divide token count {n}"),
        ));
    }
    if hq % hkv != 0 {
        return Err(EsdtError::shape(
            "bna",
            format!("kv heads {hkv} must divide query heads {hq}"),
        ));
    }
    let group = hq / hkv;
    let nb = n / block_count;
    let scale = F::one() / F::c((d as f64).sqrt());

    let qg = tape.reshape(q, &[batch, hkv, group, n, d])?;
    let kg = tape.expand_axis(k, 2, group)?;
    let vg = tape.expand_axis(v, 2, group)?;

    let mut block_outs = Vec::with_capacity(block_count);
    for b in 0..block_count {
        let (lo, hi) = covered_blocks(b, block_count, radius);
        let span = (hi - lo + 1) * nb;
        let qb = tape.narrow(qg, 3, b * nb, nb)?;
        let kb = tape.narrow(kg, 3, lo * nb, span)?;
        let vb = tape.narrow(vg, 3, lo * nb, span)?;
        let kt = tape.permute(kb, &[0, 1, 2, 4, 3])?;
        let scores = tape.bmm(qb, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.row_softmax(scores, None)?;
        block_outs.push(tape.bmm(attn, vb)?);
    }
    let out = tape.concat(&block_outs, 3)?;
    tape.reshape(out, &[batch, hq, n, d])
}

/// Per-head gated interpolation between the global and local branches,
/// conditioned on the spatially mean-pooled hidden state:
/// `g_h = sigmoid(affine_h(pool(hidden)))`, output `g·global + (1-g)·local`.
pub fn adaptive_fuse<F: Scalar>(
    tape: &mut Tape<F>,
    global_out: TensorRef,
    local_out: TensorRef,
    hidden: TensorRef,
    gate_w: TensorRef,
    gate_b: TensorRef,
) -> Result<TensorRef> {
    let gs = tape.shape(global_out).to_vec();
    if gs != tape.shape(local_out) {
        return Err(EsdtError::shape(
            "adaptive_fuse",
            format!("{:?} vs {:?}", gs, tape.shape(local_out)),
        ));
    }
    let (heads, n, d) = (gs[1], gs[2], gs[3]);
    let pooled = tape.spatial_mean_pool(hidden)?;
    let logits = tape.linear(pooled, gate_w, Some(gate_b))?;
    if tape.shape(logits)[1] != heads {
        return Err(EsdtError::shape(
            "adaptive_fuse",
            format!("gate produces {:?} for {heads} heads", tape.shape(logits)),
        ));
    }
    let g = tape.sigmoid(logits);
    let g = tape.expand_axis(g, 2, n)?;
    let g = tape.expand_axis(g, 3, d)?;
    let diff = tape.sub(global_out, local_out)?;
    let gated = tape.mul(g, diff)?;
    tape.add(local_out, gated)
}

/// Parameter handles for one ASSA layer.
pub struct AssaRefs {
    pub wq: TensorRef,
    pub bq: TensorRef,
    pub wk: TensorRef,
    pub bk: TensorRef,
    pub wv: TensorRef,
    pub bv: TensorRef,
    /// Compression convolutions, separate for k and v.
    pub wkc: TensorRef,
    pub bkc: TensorRef,
    pub wvc: TensorRef,
    pub bvc: TensorRef,
    pub gate_w: TensorRef,
    pub gate_b: TensorRef,
    pub wo: TensorRef,
    pub bo: TensorRef,
}

/// Adaptive sparse self-attention over a channel-first activation
/// `[B, C, H, W]`: KV-compressed global attention fused per head with
/// blockwise neighborhood attention, then the output projection.
pub fn assa<F: Scalar>(
    tape: &mut Tape<F>,
    hidden: TensorRef,
    cfg: &AttentionConfig,
    p: &AssaRefs,
) -> Result<TensorRef> {
    cfg.validate()?;
    let hs = tape.shape(hidden).to_vec();
    if hs.len() != 4 {
        return Err(EsdtError::shape(
            "assa",
            format!("hidden {:?} (want [B,C,H,W])", hs),
        ));
    }
    let (batch, c, gh, gw) = (hs[0], hs[1], hs[2], hs[3]);
    let n = gh * gw;
    if n % cfg.block_count != 0 {
        return Err(EsdtError::shape(
            "assa",
            format!("block count {} must divide token count {n}", cfg.block_count),
        ));
    }

    // Row-major token flattening of the 2-D grid.
    let tokens = tape.permute(hidden, &[0, 2, 3, 1])?;
    let tokens = tape.reshape(tokens, &[batch, n, c])?;

    let q = tape.linear(tokens, p.wq, Some(p.bq))?;
    let k = tape.linear(tokens, p.wk, Some(p.bk))?;
    let v = tape.linear(tokens, p.wv, Some(p.bv))?;

    // Channel-major head layout: flat index c*heads + h, so a prefix of the
    // inner dimension slices every head's channels uniformly.
    let to_heads = |tape: &mut Tape<F>, x: TensorRef, heads: usize| -> Result<TensorRef> {
        let r = tape.reshape(x, &[batch, n, cfg.head_dim, heads])?;
        tape.permute(r, &[0, 3, 1, 2])
    };
    let qh = to_heads(tape, q, cfg.query_heads)?;
    let kh = to_heads(tape, k, cfg.kv_heads)?;
    let vh = to_heads(tape, v, cfg.kv_heads)?;

    // Global branch: compress k/v on the spatial grid, then attend.
    let kv_inner = cfg.kv_inner_dim();
    let to_grid = |tape: &mut Tape<F>, x: TensorRef| -> Result<TensorRef> {
        let r = tape.reshape(x, &[batch, n, kv_inner])?;
        let r = tape.reshape(r, &[batch, gh, gw, kv_inner])?;
        tape.permute(r, &[0, 3, 1, 2])
    };
    let k_grid = to_grid(tape, k)?;
    let v_grid = to_grid(tape, v)?;
    let (kc, vc) = kv_compress(tape, k_grid, v_grid, p.wkc, p.bkc, p.wvc, p.bvc)?;
    let nc = (gh / 2) * (gw / 2);
    let from_grid = |tape: &mut Tape<F>, x: TensorRef| -> Result<TensorRef> {
        let r = tape.permute(x, &[0, 2, 3, 1])?;
        let r = tape.reshape(r, &[batch, nc, cfg.head_dim, cfg.kv_heads])?;
        tape.permute(r, &[0, 3, 1, 2])
    };
    let kch = from_grid(tape, kc)?;
    let vch = from_grid(tape, vc)?;
    let global = dense_attention(tape, qh, kch, vch, None)?;

    // Local branch.
    let local = bna(tape, qh, kh, vh, cfg.block_count, cfg.radius)?;

    // Per-head fusion before the output projection.
    let fused = adaptive_fuse(tape, global, local, hidden, p.gate_w, p.gate_b)?;

    let merged = tape.permute(fused, &[0, 2, 3, 1])?;
    let merged = tape.reshape(merged, &[batch, n, cfg.inner_dim()])?;
    let out = tape.linear(merged, p.wo, Some(p.bo))?;
    let out = tape.reshape(out, &[batch, gh, gw, c])?;
    tape.permute(out, &[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StreamRng;

    fn cfg(heads: usize, kv: usize, d: usize, b: usize, r: usize) -> AttentionConfig {
        AttentionConfig {
            query_heads: heads,
            kv_heads: kv,
            head_dim: d,
            block_count: b,
            radius: r,
            compression_stride: 2,
        }
    }

    // ---- neighborhood mask ----

    #[test]
    fn mask_example_n8_b4_r1() {
        let m = NeighborhoodMask::new(8, 4, 1).unwrap();
        // query tokens {0,1} attend key tokens {0..3}
        for i in 0..2 {
            for j in 0..8 {
                assert_eq!(m.entry(i, j), j < 4, "({i},{j})");
            }
        }
        // tokens {4,5} attend {2..7}
        for i in 4..6 {
            for j in 0..8 {
                assert_eq!(m.entry(i, j), (2..8).contains(&j), "({i},{j})");
            }
        }
        assert_eq!(m.true_count(), 40);
    }

    #[test]
    fn mask_full_when_radius_covers_all_blocks() {
        let m = NeighborhoodMask::new(12, 4, 3).unwrap();
        assert_eq!(m.true_count(), 144);
    }

    #[test]
    fn mask_is_symmetric_and_rejects_bad_blocking() {
        let m = NeighborhoodMask::new(16, 4, 1).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(m.entry(i, j), m.entry(j, i));
            }
        }
        assert!(NeighborhoodMask::new(10, 4, 1).is_err());
    }

    #[test]
    fn mask_row_support_interior_and_boundary() {
        let m = NeighborhoodMask::new(32, 8, 1).unwrap();
        let nb = 4;
        // interior rows: min(2r+1, B) blocks
        assert_eq!(m.row_support(3 * nb), 3 * nb);
        // boundary rows clip
        assert_eq!(m.row_support(0), 2 * nb);
        assert_eq!(m.row_support(31), 2 * nb);
    }

    #[test]
    fn mask_paper_config_row_support() {
        let m = NeighborhoodMask::new(4096, 16, 1).unwrap();
        // interior rows see 3 blocks x 256 tokens
        assert_eq!(m.row_support(2048), 768);
    }

    #[test]
    fn pgm_bytes_shape() {
        let m = NeighborhoodMask::new(8, 4, 1).unwrap();
        let bytes = m.to_pgm_bytes();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
        let header = b"P5\n8 8\n255\n".len();
        assert_eq!(bytes.len() - header, 64);
        assert_eq!(bytes[header..].iter().filter(|&&b| b == 255).count(), 40);
    }

    // ---- pair counts ----

    #[test]
    fn pair_count_paper_configuration() {
        let pc = attention_pair_count(4096, &cfg(16, 8, 64, 16, 1)).unwrap();
        assert_eq!(pc.dense, 16_777_216);
        assert_eq!(pc.global, 4_194_304);
        assert_eq!(pc.local_model, 3_145_728);
        assert_eq!(pc.ratio, 0.4375);
        let m = NeighborhoodMask::new(4096, 16, 1).unwrap();
        assert_eq!(pc.local_exact, m.true_count());
    }

    #[test]
    fn pair_count_full_neighborhood_without_compression_is_dense() {
        let pc = attention_pair_count(64, &cfg(4, 4, 8, 4, 3)).unwrap();
        assert_eq!(pc.local_model, pc.dense);
        assert_eq!(pc.local_exact, pc.dense);
    }

    #[test]
    fn doubling_blocks_halves_local_pairs() {
        let a = attention_pair_count(4096, &cfg(4, 4, 8, 16, 1)).unwrap();
        let b = attention_pair_count(4096, &cfg(4, 4, 8, 32, 1)).unwrap();
        assert_eq!(a.local_model, 2 * b.local_model);
    }

    // ---- dense attention ----

    fn heads_tensor<F: Scalar>(rng: &mut StreamRng, b: usize, h: usize, n: usize, d: usize) -> Tensor<F> {
        rng.normal_tensor(&[b, h, n, d])
    }

    #[test]
    fn single_token_attention_returns_its_value_row() {
        let mut tape = Tape::<f64>::new();
        let mut rng = StreamRng::new(1, 0);
        let q = tape.constant(heads_tensor(&mut rng, 1, 2, 1, 4));
        let k = tape.constant(heads_tensor(&mut rng, 1, 2, 1, 4));
        let vt = heads_tensor::<f64>(&mut rng, 1, 2, 1, 4);
        let v = tape.constant(vt.clone());
        let out = dense_attention(&mut tape, q, k, v, None).unwrap();
        assert!(tape.value(out).max_abs_diff(&vt) < 1e-12);
    }

    #[test]
    fn identical_keys_average_the_values() {
        let mut tape = Tape::<f64>::new();
        let mut rng = StreamRng::new(2, 0);
        let q = tape.constant(heads_tensor(&mut rng, 1, 1, 1, 4));
        let krow: Tensor<f64> = rng.normal_tensor(&[4]);
        let mut kdata = Vec::new();
        for _ in 0..3 {
            kdata.extend_from_slice(krow.data());
        }
        let k = tape.constant(Tensor::new(&[1, 1, 3, 4], kdata));
        let vt: Tensor<f64> = rng.normal_tensor(&[1, 1, 3, 4]);
        let v = tape.constant(vt.clone());
        let out = dense_attention(&mut tape, q, k, v, None).unwrap();
        for i in 0..4 {
            let mean = (vt.data()[i] + vt.data()[4 + i] + vt.data()[8 + i]) / 3.0;
            assert!((tape.value(out).data()[i] - mean).abs() < 1e-12);
        }
    }

    /// Naive per-pair scalar recomputation of grouped-head attention.
    fn dense_oracle(
        q: &Tensor<f64>,
        k: &Tensor<f64>,
        v: &Tensor<f64>,
        mask: Option<&NeighborhoodMask>,
    ) -> Tensor<f64> {
        let (b, hq, nq, d) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
        let (hkv, nk) = (k.shape()[1], k.shape()[2]);
        let group = hq / hkv;
        let mut out = vec![0.0; b * hq * nq * d];
        for bi in 0..b {
            for h in 0..hq {
                let kvh = h / group;
                for i in 0..nq {
                    let qrow = &q.data()[((bi * hq + h) * nq + i) * d..][..d];
                    let mut logits = vec![f64::NEG_INFINITY; nk];
                    for j in 0..nk {
                        if mask.map_or(true, |m| m.entry(i, j)) {
                            let krow = &k.data()[((bi * hkv + kvh) * nk + j) * d..][..d];
                            logits[j] = qrow
                                .iter()
                                .zip(krow)
                                .map(|(&a, &b)| a * b)
                                .sum::<f64>()
                                / (d as f64).sqrt();
                        }
                    }
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for j in 0..nk {
                        let w = exps[j] / z;
                        if w > 0.0 {
                            let vrow = &v.data()[((bi * hkv + kvh) * nk + j) * d..][..d];
                            for t in 0..d {
                                out[((bi * hq + h) * nq + i) * d + t] += w * vrow[t];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(q.shape(), out)
    }

    #[test]
    fn dense_attention_matches_scalar_loop_on_random_case() {
        let mut rng = StreamRng::new(3, 0);
        let q = heads_tensor::<f64>(&mut rng, 2, 4, 8, 6);
        let k = heads_tensor::<f64>(&mut rng, 2, 2, 8, 6);
        let v = heads_tensor::<f64>(&mut rng, 2, 2, 8, 6);
        let mut tape = Tape::new();
        let (qr, kr, vr) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = dense_attention(&mut tape, qr, kr, vr, None).unwrap();
        let want = dense_oracle(&q, &k, &v, None);
        assert!(tape.value(out).max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn masked_dense_attention_matches_scalar_loop() {
        let mut rng = StreamRng::new(4, 0);
        let q = heads_tensor::<f64>(&mut rng, 1, 2, 8, 4);
        let k = heads_tensor::<f64>(&mut rng, 1, 2, 8, 4);
        let v = heads_tensor::<f64>(&mut rng, 1, 2, 8, 4);
        let mask = NeighborhoodMask::new(8, 4, 1).unwrap();
        let mut tape = Tape::new();
        let (qr, kr, vr) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = dense_attention(&mut tape, qr, kr, vr, Some(&mask)).unwrap();
        let want = dense_oracle(&q, &k, &v, Some(&mask));
        assert!(tape.value(out).max_abs_diff(&want) < 1e-6);
    }

    // ---- bna ----

    #[test]
    fn bna_equals_masked_dense_attention() {
        let mut rng = StreamRng::new(5, 0);
        let q = heads_tensor::<f64>(&mut rng, 2, 2, 64, 4);
        let k = heads_tensor::<f64>(&mut rng, 2, 2, 64, 4);
        let v = heads_tensor::<f64>(&mut rng, 2, 2, 64, 4);
        let mask = NeighborhoodMask::new(64, 8, 1).unwrap();
        let mut tape = Tape::new();
        let (qr, kr, vr) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let got = bna(&mut tape, qr, kr, vr, 8, 1).unwrap();
        let want = dense_oracle(&q, &k, &v, Some(&mask));
        assert!(tape.value(got).max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn bna_full_radius_equals_unmasked_dense() {
        let mut rng = StreamRng::new(6, 0);
        let q = heads_tensor::<f64>(&mut rng, 1, 2, 16, 4);
        let k = heads_tensor::<f64>(&mut rng, 1, 2, 16, 4);
        let v = heads_tensor::<f64>(&mut rng, 1, 2, 16, 4);
        let mut tape = Tape::new();
        let (qr, kr, vr) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let got = bna(&mut tape, qr, kr, vr, 4, 3).unwrap();
        let want = dense_oracle(&q, &k, &v, None);
        assert!(tape.value(got).max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn bna_radius_zero_ignores_cross_block_values() {
        let mut rng = StreamRng::new(7, 0);
        let q = heads_tensor::<f64>(&mut rng, 1, 1, 16, 4);
        let k = heads_tensor::<f64>(&mut rng, 1, 1, 16, 4);
        let mut v = heads_tensor::<f64>(&mut rng, 1, 1, 16, 4);

        let run = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (qr, kr, vr) = (
                tape.constant(q.clone()),
                tape.constant(k.clone()),
                tape.constant(v.clone()),
            );
            let out = bna(&mut tape, qr, kr, vr, 4, 0).unwrap();
            tape.value(out).clone()
        };
        let base = run(&q, &k, &v);
        // Perturb values in the last block; first block's outputs must not move.
        for x in &mut v.data_mut()[12 * 4..] {
            *x = *x + 5.0;
        }
        let bumped = run(&q, &k, &v);
        for i in 0..4 * 4 {
            assert_eq!(base.data()[i], bumped.data()[i]);
        }
        // ...but the last block's outputs do.
        assert!(
            (base.data()[15 * 4] - bumped.data()[15 * 4]).abs() > 1e-6,
            "perturbation had no effect at all"
        );
    }

    // ---- fuse ----

    #[test]
    fn zero_gate_affine_gives_equal_mix() {
        let mut rng = StreamRng::new(8, 0);
        let g = heads_tensor::<f64>(&mut rng, 1, 2, 4, 3);
        let l = heads_tensor::<f64>(&mut rng, 1, 2, 4, 3);
        let hidden: Tensor<f64> = rng.normal_tensor(&[1, 5, 2, 2]);
        let mut tape = Tape::new();
        let (gr, lr) = (tape.constant(g.clone()), tape.constant(l.clone()));
        let hr = tape.constant(hidden);
        let gw = tape.constant(Tensor::zeros(&[2, 5]));
        let gb = tape.constant(Tensor::zeros(&[2]));
        let out = adaptive_fuse(&mut tape, gr, lr, hr, gw, gb).unwrap();
        for i in 0..g.numel() {
            let avg = 0.5 * (g.data()[i] + l.data()[i]);
            assert!((tape.value(out).data()[i] - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gate_selects_global_branch() {
        let mut rng = StreamRng::new(9, 0);
        let g = heads_tensor::<f64>(&mut rng, 1, 2, 4, 3);
        let l = heads_tensor::<f64>(&mut rng, 1, 2, 4, 3);
        let hidden = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let mut tape = Tape::new();
        let (gr, lr) = (tape.constant(g.clone()), tape.constant(l.clone()));
        let hr = tape.constant(hidden);
        // Huge positive bias saturates the sigmoid to 1.
        let gw = tape.constant(Tensor::zeros(&[2, 1]));
        let gb = tape.constant(Tensor::full(&[2], 60.0));
        let out = adaptive_fuse(&mut tape, gr, lr, hr, gw, gb).unwrap();
        assert!(tape.value(out).max_abs_diff(&g) < 1e-12);
    }

    #[test]
    fn gate_matches_scalar_recomputation() {
        let mut rng = StreamRng::new(10, 0);
        let g = heads_tensor::<f64>(&mut rng, 2, 3, 4, 2);
        let l = heads_tensor::<f64>(&mut rng, 2, 3, 4, 2);
        let hidden: Tensor<f64> = rng.normal_tensor(&[2, 5, 2, 2]);
        let gw: Tensor<f64> = rng.normal_tensor(&[3, 5]);
        let gb: Tensor<f64> = rng.normal_tensor(&[3]);
        let mut tape = Tape::new();
        let (gr, lr) = (tape.constant(g.clone()), tape.constant(l.clone()));
        let hr = tape.constant(hidden.clone());
        let gwr = tape.constant(gw.clone());
        let gbr = tape.constant(gb.clone());
        let out = adaptive_fuse(&mut tape, gr, lr, hr, gwr, gbr).unwrap();

        for b in 0..2 {
            // pooled hidden
            let mut pooled = [0.0; 5];
            for c in 0..5 {
                let mut acc = 0.0;
                for s in 0..4 {
                    acc += hidden.data()[(b * 5 + c) * 4 + s];
                }
                pooled[c] = acc / 4.0;
            }
            for h in 0..3 {
                let mut logit = gb.data()[h];
                for c in 0..5 {
                    logit += gw.data()[h * 5 + c] * pooled[c];
                }
                let gate = 1.0 / (1.0 + (-logit).exp());
                for t in 0..8 {
                    let idx = (b * 3 + h) * 8 + t;
                    let want = gate * g.data()[idx] + (1.0 - gate) * l.data()[idx];
                    assert!((tape.value(out).data()[idx] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn fused_output_lies_between_branches() {
        let mut rng = StreamRng::new(11, 0);
        let g = heads_tensor::<f64>(&mut rng, 1, 2, 6, 3);
        let l = heads_tensor::<f64>(&mut rng, 1, 2, 6, 3);
        let hidden: Tensor<f64> = rng.normal_tensor(&[1, 4, 2, 3]);
        let gw: Tensor<f64> = rng.normal_tensor(&[2, 4]);
        let gb: Tensor<f64> = rng.normal_tensor(&[2]);
        let mut tape = Tape::new();
        let (gr, lr) = (tape.constant(g.clone()), tape.constant(l.clone()));
        let hr = tape.constant(hidden);
        let gwr = tape.constant(gw);
        let gbr = tape.constant(gb);
        let out = adaptive_fuse(&mut tape, gr, lr, hr, gwr, gbr).unwrap();
        for i in 0..g.numel() {
            let (a, b) = (g.data()[i].min(l.data()[i]), g.data()[i].max(l.data()[i]));
            let v = tape.value(out).data()[i];
            assert!(v >= a - 1e-12 && v <= b + 1e-12);
        }
    }
}
