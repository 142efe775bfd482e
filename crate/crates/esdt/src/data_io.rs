//! Persistence and synthetic data: the single-file checkpoint format, the
//! procedural shapes dataset standing in for image data, metrics CSV output,
//! and grayscale PGM previews.
//!
//! Checkpoint layout: magic `ESDT`, format version (u32 LE), header length
//! (u64 LE), UTF-8 JSON header, zero padding to a 64-byte boundary, then the
//! payload of raw little-endian f32 tensors, each aligned to 64 bytes at the
//! offset recorded in the header.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{EsdtError, Result};
use crate::model::ModelConfig;
use crate::numerics::{ParamStore, Scalar, StreamPurpose, StreamRng, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ESDT";
pub const CHECKPOINT_VERSION: u32 = 1;
const ALIGN: u64 = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    tensors: BTreeMap<String, TensorMeta>,
    model: ModelConfig,
    widths: Vec<f64>,
    seed: u64,
    step: u64,
}

/// Everything a checkpoint persists.
#[derive(Debug, Clone)]
pub struct CheckpointState {
    pub params: ParamStore<f32>,
    pub model: ModelConfig,
    pub widths: Vec<f64>,
    pub seed: u64,
    pub step: u64,
}

fn align_up(v: u64) -> u64 {
    v.div_ceil(ALIGN) * ALIGN
}

pub fn save_checkpoint(state: &CheckpointState, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in state.params.iter() {
        offset = align_up(offset);
        tensors.insert(
            name.clone(),
            TensorMeta {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            },
        );
        offset += (t.numel() * 4) as u64;
    }
    let header = CheckpointHeader {
        tensors,
        model: state.model.clone(),
        widths: state.widths.clone(),
        seed: state.seed,
        step: state.step,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    // pad so the payload starts on an aligned boundary
    let pre = 4 + 4 + 8 + header_bytes.len() as u64;
    for _ in pre..align_up(pre) {
        f.write_all(&[0u8])?;
    }
    let mut written = 0u64;
    for (name, t) in state.params.iter() {
        let meta = &header.tensors[name];
        while written < meta.offset {
            f.write_all(&[0u8])?;
            written += 1;
        }
        for &v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
        written += (t.numel() * 4) as u64;
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(EsdtError::checkpoint("magic", "file shorter than the fixed prelude"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(EsdtError::checkpoint(
            "magic",
            format!("expected {:?}, got {:?}", CHECKPOINT_MAGIC, &bytes[0..4]),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(EsdtError::checkpoint(
            "version",
            format!("expected {CHECKPOINT_VERSION}, got {version}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() {
        return Err(EsdtError::checkpoint(
            "header_length",
            format!("header of {header_len} bytes exceeds file size {}", bytes.len()),
        ));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let payload_start = align_up(16 + header_len as u64) as usize;
    let payload = bytes
        .get(payload_start..)
        .ok_or_else(|| EsdtError::checkpoint("payload", "missing payload"))?;

    // validate offsets: aligned, strictly increasing, non-overlapping, in bounds
    let mut prev_end = 0u64;
    for (name, meta) in &header.tensors {
        if meta.dtype != "f32" {
            return Err(EsdtError::checkpoint(
                format!("tensors.{name}.dtype"),
                format!("unsupported dtype {}", meta.dtype),
            ));
        }
        if meta.offset % ALIGN != 0 {
            return Err(EsdtError::checkpoint(
                format!("tensors.{name}.offset"),
                format!("offset {} is not 64-byte aligned", meta.offset),
            ));
        }
        if meta.offset < prev_end {
            return Err(EsdtError::checkpoint(
                format!("tensors.{name}.offset"),
                format!("offset {} overlaps the previous tensor ending at {prev_end}", meta.offset),
            ));
        }
        let len = meta.shape.iter().product::<usize>() as u64 * 4;
        if meta.offset + len > payload.len() as u64 {
            return Err(EsdtError::checkpoint(
                format!("tensors.{name}"),
                format!(
                    "tensor spans {}..{} beyond payload of {} bytes (truncated?)",
                    meta.offset,
                    meta.offset + len,
                    payload.len()
                ),
            ));
        }
        prev_end = meta.offset + len;
    }

    let mut params = ParamStore::new();
    for (name, meta) in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let start = meta.offset as usize;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let b = &payload[start + 4 * i..start + 4 * i + 4];
            data.push(f32::from_le_bytes(b.try_into().unwrap()));
        }
        params.insert(name.clone(), Tensor::new(&meta.shape, data));
    }
    Ok(CheckpointState {
        params,
        model: header.model,
        widths: header.widths,
        seed: header.seed,
        step: header.step,
    })
}

// --------------------------------------------------------------------------
// synthetic shapes dataset
// --------------------------------------------------------------------------

/// Procedural rectangles and discs with class-conditioned color; a pure
/// function of `(spec, seed)` standing in for image data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapesSpec {
    pub channels: usize,
    pub size: usize,
    pub class_count: usize,
}

impl ShapesSpec {
    fn class_color(&self, class: usize, channel: usize) -> f64 {
        // deterministic per (class, channel), spread over [-1, 1]
        let phase = (class as f64 + 1.0) * (channel as f64 + 1.0) * 2.399963;
        phase.sin()
    }
}

/// Deterministic dataset: latents `[n, C, S, S]` in `[-1, 1]` plus class
/// labels. Sample `i` depends only on `(spec, seed, i)`.
pub fn gen_dataset<F: Scalar>(
    spec: &ShapesSpec,
    n: usize,
    seed: u64,
) -> Result<(Tensor<F>, Vec<usize>)> {
    if n == 0 {
        return Err(EsdtError::Config("gen_dataset: n must be >= 1".into()));
    }
    let s = spec.size;
    let mut data = Vec::with_capacity(n * spec.channels * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = StreamRng::for_step(seed, StreamPurpose::Data, i as u64);
        let class = rng.uniform_usize(spec.class_count);
        labels.push(class);
        let cx = rng.uniform::<f64>(0.25, 0.75) * s as f64;
        let cy = rng.uniform::<f64>(0.25, 0.75) * s as f64;
        let half = rng.uniform::<f64>(0.15, 0.35) * s as f64;
        let disc = class % 2 == 1;
        for ch in 0..spec.channels {
            let color = spec.class_color(class, ch);
            for y in 0..s {
                for x in 0..s {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let inside = if disc {
                        dx * dx + dy * dy <= half * half
                    } else {
                        dx.abs() <= half && dy.abs() <= half
                    };
                    data.push(F::c(if inside { color } else { -1.0 }));
                }
            }
        }
    }
    Ok((Tensor::new(&[n, spec.channels, s, s], data), labels))
}

// --------------------------------------------------------------------------
// metrics stream
// --------------------------------------------------------------------------

pub const METRICS_HEADER: &str =
    "step,wall_ms,loss_diff,loss_dist,loss_out,loss_feat,loss_dmd,val_loss,width";

/// One metrics row; absent quantities stay NaN and serialize as empty fields.
#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_diff: f64,
    pub loss_dist: f64,
    pub loss_out: f64,
    pub loss_feat: f64,
    pub loss_dmd: f64,
    pub val_loss: f64,
    pub width: f64,
}

impl MetricsRow {
    pub fn at(step: u64) -> Self {
        Self {
            step,
            loss_diff: f64::NAN,
            loss_dist: f64::NAN,
            loss_out: f64::NAN,
            loss_feat: f64::NAN,
            loss_dmd: f64::NAN,
            val_loss: f64::NAN,
            width: f64::NAN,
        }
    }
}

fn field(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Append-only CSV with one flush per row. Wall-clock timing is off by
/// default so that reruns from the same `(config, seed)` are byte-identical;
/// enabling it is explicitly a reproducibility trade-off.
pub struct MetricsWriter {
    file: File,
    wall_clock: bool,
    started: Instant,
}

impl MetricsWriter {
    pub fn create(path: &Path, wall_clock: bool) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        file.flush()?;
        Ok(Self {
            file,
            wall_clock,
            started: Instant::now(),
        })
    }

    /// Reopen for resume: keep the header and every row with
    /// `step <= keep_step`, drop the rest, continue appending.
    pub fn resume(path: &Path, keep_step: u64, wall_clock: bool) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let mut kept = String::new();
        for (i, line) in content.lines().enumerate() {
            if i == 0 {
                if line != METRICS_HEADER {
                    return Err(EsdtError::Config(format!(
                        "metrics file has unexpected header: {line}"
                    )));
                }
                kept.push_str(line);
                kept.push('\n');
                continue;
            }
            let step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| EsdtError::Config(format!("unparsable metrics row: {line}")))?;
            if step <= keep_step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        std::fs::write(path, &kept)?;
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            file,
            wall_clock,
            started: Instant::now(),
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let wall = if self.wall_clock {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        };
        writeln!(
            self.file,
            "{},{},{},{},{},{},{},{},{}",
            row.step,
            wall,
            field(row.loss_diff),
            field(row.loss_dist),
            field(row.loss_out),
            field(row.loss_feat),
            field(row.loss_dmd),
            field(row.val_loss),
            field(row.width),
        )?;
        self.file.flush()?;
        Ok(())
    }
}

/// Grayscale PGM (P5, maxval 255) of one channel plane, values mapped from
/// `[lo, hi]`.
pub fn write_pgm_gray(path: &Path, plane: &[f64], w: usize, h: usize, lo: f64, hi: f64) -> Result<()> {
    if plane.len() != w * h {
        return Err(EsdtError::shape(
            "write_pgm_gray",
            format!("{} values for {w}x{h}", plane.len()),
        ));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = (hi - lo).max(1e-12);
    out.extend(plane.iter().map(|&v| {
        (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
    }));
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny_state() -> CheckpointState {
        let cfg = ModelConfig::toy();
        let mut rng = StreamRng::new(5, 0);
        let params = init_params::<f32>(&cfg, &mut rng).unwrap();
        CheckpointState {
            params,
            model: cfg,
            widths: vec![0.5, 1.0],
            seed: 5,
            step: 123,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.esdt");
        let state = tiny_state();
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model, state.model);
        assert_eq!(loaded.widths, state.widths);
        assert_eq!(loaded.seed, 5);
        assert_eq!(loaded.step, 123);
        assert_eq!(loaded.params.len(), state.params.len());
        for (name, t) in state.params.iter() {
            let l = loaded.params.get(name);
            assert_eq!(l.shape(), t.shape());
            for (a, b) in l.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn truncated_payload_is_rejected_with_field_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.esdt");
        save_checkpoint(&tiny_state(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("truncated") || msg.contains("beyond payload"), "{msg}");
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.esdt");
        save_checkpoint(&tiny_state(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(format!("{}", load_checkpoint(&path).unwrap_err()).contains("magic"));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'E';
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(format!("{}", load_checkpoint(&path).unwrap_err()).contains("version"));
    }

    #[test]
    fn header_offsets_match_independent_size_ledger() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.esdt");
        let state = tiny_state();
        save_checkpoint(&state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        // recompute offsets from shapes alone
        let mut expect = 0u64;
        for (name, meta) in &header.tensors {
            expect = expect.div_ceil(64) * 64;
            assert_eq!(meta.offset, expect, "{name}");
            expect += meta.shape.iter().product::<usize>() as u64 * 4;
        }
        // file ends exactly at the last tensor
        let payload_start = (16 + hlen as u64).div_ceil(64) * 64;
        assert_eq!(bytes.len() as u64, payload_start + expect);
    }

    #[test]
    fn dataset_is_deterministic_and_bounded() {
        let spec = ShapesSpec {
            channels: 2,
            size: 8,
            class_count: 4,
        };
        let (a, la) = gen_dataset::<f32>(&spec, 16, 9).unwrap();
        let (b, lb) = gen_dataset::<f32>(&spec, 16, 9).unwrap();
        assert_eq!(la, lb);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_class_histogram_is_roughly_uniform() {
        let spec = ShapesSpec {
            channels: 1,
            size: 4,
            class_count: 4,
        };
        let n = 10_000;
        let (_, labels) = gen_dataset::<f32>(&spec, n, 3).unwrap();
        for c in 0..4 {
            let count = labels.iter().filter(|&&l| l == c).count() as f64;
            let mean = n as f64 / 4.0;
            let sigma = (n as f64 * 0.25 * 0.75).sqrt();
            assert!((count - mean).abs() <= 3.0 * sigma, "class {c}: {count}");
        }
    }

    #[test]
    fn metrics_rows_parse_back_and_steps_are_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path, false).unwrap();
        for step in [0u64, 10, 20] {
            let mut row = MetricsRow::at(step);
            row.loss_diff = 1.5 - step as f64 * 0.01;
            row.width = 1.0;
            w.append(&row).unwrap();
        }
        let content = std::fs::read_to_string(&path).unwrap();
        let mut lines = content.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        let mut prev = None;
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 9);
            let step: u64 = cols[0].parse().unwrap();
            if let Some(p) = prev {
                assert!(step > p);
            }
            prev = Some(step);
            let _: f64 = cols[2].parse().unwrap();
            assert!(cols[6].is_empty()); // loss_dmd missing -> empty field
        }
    }

    #[test]
    fn metrics_resume_truncates_later_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path, false).unwrap();
        for step in 0..5u64 {
            w.append(&MetricsRow::at(step)).unwrap();
        }
        drop(w);
        let mut w = MetricsWriter::resume(&path, 2, false).unwrap();
        w.append(&MetricsRow::at(3)).unwrap();
        drop(w);
        let content = std::fs::read_to_string(&path).unwrap();
        let steps: Vec<u64> = content
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
    }
}
