//! Flat key=value run configuration: one namespace with dotted keys, a full
//! default registry, and strict rejection of unknown keys before any state
//! changes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::attention::AttentionConfig;
use crate::elastic::WidthSet;
use crate::error::{EsdtError, Result};
use crate::losses::KdSchedule;
use crate::model::{ModelConfig, StageLayout};
use crate::oracle::GmmSpec;
use crate::train::{DataSource, TrainOpts};

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out_dir", "out"),
    ("metrics.wall_clock", "false"),
    // model (toy defaults)
    ("model.latent_channels", "2"),
    ("model.latent_height", "4"),
    ("model.latent_width", "4"),
    ("model.down_depth", "2"),
    ("model.middle_depth", "4"),
    ("model.up_depth", "2"),
    ("model.hidden_width", "64"),
    ("model.ffn_outer", "4"),
    ("model.ffn_middle", "3"),
    ("model.use_assa", "true"),
    ("model.long_skip", "true"),
    ("model.pos_embed", "true"),
    ("model.patch", "2"),
    ("model.time_embed_dim", "32"),
    ("model.cond_dim", "32"),
    ("model.cond_tokens", "2"),
    ("model.cond_pos_embed", "true"),
    ("model.class_count", "4"),
    ("model.ca_inner", "64"),
    ("model.skips", "sym"),
    ("attention.query_heads", "4"),
    ("attention.kv_heads", "4"),
    ("attention.head_dim", "16"),
    ("attention.block_count", "2"),
    ("attention.radius", "1"),
    ("attention.stride", "2"),
    // elastic
    ("elastic.widths", "0.375,0.5,1.0"),
    ("elastic.lambda_sub", "1.0"),
    ("elastic.lambda_dist", "1.0"),
    // training
    ("train.steps", "1000"),
    ("train.batch", "32"),
    ("train.lr", "0.003"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.schedule", "true"),
    ("train.warmup", "100"),
    ("train.conditional", "false"),
    ("train.cond_dropout", "0.1"),
    ("train.eval_every", "200"),
    ("train.eval_n", "256"),
    ("train.eval_grid", "16"),
    ("train.ckpt_every", "1000"),
    // data
    ("data.kind", "gmm"),
    ("gmm.preset", "two_component"),
    ("gmm.separation", "1.5"),
    ("gmm.variance", "0.25"),
    ("shapes.size", "16"),
    ("shapes.channels", "2"),
    ("shapes.classes", "4"),
    // knowledge distillation
    ("kd.teacher", "analytic"),
    ("kd.base", "fresh"),
    ("kd.schedule", "0.5"),
    // step distillation
    ("kdmd.iterations", "2000"),
    ("kdmd.batch", "32"),
    ("kdmd.lr", "0.0001"),
    ("kdmd.student_every", "5"),
    ("kdmd.lora_rank", "64"),
    ("kdmd.lora_alpha", "128"),
    ("kdmd.cfg", "4.0"),
    ("kdmd.tau_lo", "0.02"),
    ("kdmd.tau_hi", "0.98"),
    ("kdmd.t_mode", "shifted"),
    ("kdmd.out_weight", "1.0"),
    ("kdmd.feat_weight", "1.0"),
    ("kdmd.base", ""),
    ("kdmd.teacher", "analytic"),
    // sampling (bare aliases per the command surface)
    ("sample.checkpoint", ""),
    ("sample.n", "16"),
    ("steps", "4"),
    ("shift", "3.0"),
    ("cfg", "4.0"),
    ("sample.class", "null"),
    // slicing
    ("width", "1.0"),
    ("slice.checkpoint", ""),
    // bench
    ("bench.grid", "64x64"),
    ("bench.repeats", "30"),
    ("bench.latency", "true"),
    ("bench.export_mask_pgm", "false"),
];

impl Config {
    pub fn defaults() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn set_checked(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(EsdtError::Config(format!("unknown configuration key: {key}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parse a `key=value` file: one pair per line, `#` comments, blank
    /// lines ignored. Unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::defaults();
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                EsdtError::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            cfg.set_checked(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Apply `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| EsdtError::Config(format!("override {o:?} is not key=value")))?;
            self.set_checked(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    // -- typed getters ------------------------------------------------------

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.str(key)
            .parse()
            .map_err(|_| EsdtError::Config(format!("{key}: expected integer, got {:?}", self.str(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.u64(key)? as usize)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.str(key)
            .parse()
            .map_err(|_| EsdtError::Config(format!("{key}: expected number, got {:?}", self.str(key))))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(EsdtError::Config(format!("{key}: expected bool, got {other:?}"))),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.str(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| EsdtError::Config(format!("{key}: bad number {s:?}")))
            })
            .collect()
    }

    // -- assembled objects --------------------------------------------------

    pub fn model_config(&self) -> Result<ModelConfig> {
        let middle = self.usize("model.middle_depth")?;
        let skips = match self.str("model.skips") {
            "sym" => StageLayout::symmetric_skips(middle),
            "none" => vec![],
            spec => spec
                .split(',')
                .map(|p| {
                    let (a, b) = p.split_once('-').ok_or_else(|| {
                        EsdtError::Config(format!("model.skips: expected s-t pairs, got {p:?}"))
                    })?;
                    Ok((
                        a.trim().parse().map_err(|_| EsdtError::Config(format!("bad skip {p:?}")))?,
                        b.trim().parse().map_err(|_| EsdtError::Config(format!("bad skip {p:?}")))?,
                    ))
                })
                .collect::<Result<Vec<(usize, usize)>>>()?,
        };
        let cfg = ModelConfig {
            latent: (
                self.usize("model.latent_channels")?,
                self.usize("model.latent_height")?,
                self.usize("model.latent_width")?,
            ),
            layout: StageLayout {
                down_depth: self.usize("model.down_depth")?,
                middle_depth: middle,
                up_depth: self.usize("model.up_depth")?,
                hidden_width: self.usize("model.hidden_width")?,
                ffn_ratio_outer: self.usize("model.ffn_outer")?,
                ffn_ratio_middle: self.usize("model.ffn_middle")?,
                use_assa_outer: self.bool("model.use_assa")?,
                skip_topology: skips,
                long_skip: self.bool("model.long_skip")?,
                pos_embed: self.bool("model.pos_embed")?,
                patch: self.usize("model.patch")?,
                time_embed_dim: self.usize("model.time_embed_dim")?,
                cond_dim: self.usize("model.cond_dim")?,
                cond_tokens: self.usize("model.cond_tokens")?,
                cond_pos_embed: self.bool("model.cond_pos_embed")?,
                class_count: self.usize("model.class_count")?,
                ca_inner: self.usize("model.ca_inner")?,
            },
            attention: AttentionConfig {
                query_heads: self.usize("attention.query_heads")?,
                kv_heads: self.usize("attention.kv_heads")?,
                head_dim: self.usize("attention.head_dim")?,
                block_count: self.usize("attention.block_count")?,
                radius: self.usize("attention.radius")?,
                compression_stride: self.usize("attention.stride")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn widths(&self) -> Result<WidthSet> {
        WidthSet::new(self.f64_list("elastic.widths")?)
    }

    pub fn gmm_spec(&self) -> Result<GmmSpec> {
        let latent = (
            self.usize("model.latent_channels")?,
            self.usize("model.latent_height")?,
            self.usize("model.latent_width")?,
        );
        let (c, h, w) = latent;
        let dim = c * h * w;
        let var = self.f64("gmm.variance")?;
        let sep = self.f64("gmm.separation")?;
        let spec = match self.str("gmm.preset") {
            "two_component" => {
                let hw = h * w;
                let mut mean_a = vec![0.0; dim];
                let mut mean_b = vec![0.0; dim];
                for i in 0..hw {
                    mean_a[i] = sep;
                    mean_b[i] = -sep;
                    if c > 1 {
                        let ramp = (i as f64) / ((hw - 1).max(1) as f64) - 0.5;
                        mean_a[hw + i] = ramp;
                        mean_b[hw + i] = -ramp;
                    }
                }
                GmmSpec {
                    weights: vec![0.5, 0.5],
                    means: vec![mean_a, mean_b],
                    variances: vec![var, var],
                    latent,
                }
            }
            "single" => GmmSpec {
                weights: vec![1.0],
                means: vec![vec![sep; dim]],
                variances: vec![var],
                latent,
            },
            other => {
                return Err(EsdtError::Config(format!("gmm.preset: unknown preset {other:?}")))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn data_source(&self) -> Result<DataSource> {
        match self.str("data.kind") {
            "gmm" => Ok(DataSource::Gmm(self.gmm_spec()?)),
            "shapes" => {
                let spec = crate::data_io::ShapesSpec {
                    channels: self.usize("shapes.channels")?,
                    size: self.usize("shapes.size")?,
                    class_count: self.usize("shapes.classes")?,
                };
                let model_latent = (
                    self.usize("model.latent_channels")?,
                    self.usize("model.latent_height")?,
                    self.usize("model.latent_width")?,
                );
                if (spec.channels, spec.size, spec.size) != model_latent {
                    return Err(EsdtError::Config(format!(
                        "shapes latent {:?} does not match model latent {:?}",
                        (spec.channels, spec.size, spec.size),
                        model_latent
                    )));
                }
                Ok(DataSource::Shapes(spec))
            }
            other => Err(EsdtError::Config(format!("data.kind: unknown source {other:?}"))),
        }
    }

    pub fn train_opts(&self) -> Result<TrainOpts> {
        Ok(TrainOpts {
            steps: self.u64("train.steps")?,
            batch: self.usize("train.batch")?,
            lr: self.f64("train.lr")?,
            beta1: self.f64("train.beta1")?,
            beta2: self.f64("train.beta2")?,
            lr_schedule: self.bool("train.schedule")?,
            warmup: self.u64("train.warmup")?,
            conditional: self.bool("train.conditional")?,
            cond_dropout: self.f64("train.cond_dropout")?,
            lambda_sub: self.f64("elastic.lambda_sub")?,
            lambda_dist: self.f64("elastic.lambda_dist")?,
            eval_every: self.u64("train.eval_every")?,
            seed: self.u64("seed")?,
            run_until: None,
        })
    }

    pub fn kd_schedule(&self) -> Result<KdSchedule> {
        let raw = self.str("kd.schedule");
        let schedule = if raw.contains(':') {
            let knots = raw
                .split(',')
                .map(|p| {
                    let (t, w) = p
                        .split_once(':')
                        .ok_or_else(|| EsdtError::Config(format!("kd.schedule: bad knot {p:?}")))?;
                    Ok((
                        t.trim().parse().map_err(|_| EsdtError::Config(format!("bad knot {p:?}")))?,
                        w.trim().parse().map_err(|_| EsdtError::Config(format!("bad knot {p:?}")))?,
                    ))
                })
                .collect::<Result<Vec<(f64, f64)>>>()?;
            KdSchedule::Table(knots)
        } else {
            KdSchedule::Constant(
                raw.parse()
                    .map_err(|_| EsdtError::Config(format!("kd.schedule: bad constant {raw:?}")))?,
            )
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::defaults()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_assemble_into_valid_objects() {
        let cfg = Config::defaults();
        cfg.model_config().unwrap();
        cfg.widths().unwrap();
        cfg.gmm_spec().unwrap();
        cfg.data_source().unwrap();
        cfg.train_opts().unwrap();
        cfg.kd_schedule().unwrap();
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        let mut cfg = Config::defaults();
        assert!(cfg.apply_overrides(&["bogus.key=1".into()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "train.steps=5\nnot.a.key=2\n").unwrap();
        assert!(Config::load(&p).is_err());
    }

    #[test]
    fn file_parsing_with_comments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "# comment\ntrain.steps=42  # trailing\n\nseed=9\n").unwrap();
        let mut cfg = Config::load(&p).unwrap();
        assert_eq!(cfg.u64("train.steps").unwrap(), 42);
        assert_eq!(cfg.u64("seed").unwrap(), 9);
        cfg.apply_overrides(&["train.steps=7".into()]).unwrap();
        assert_eq!(cfg.u64("train.steps").unwrap(), 7);
    }

    #[test]
    fn dump_round_trips_through_parser() {
        let cfg = Config::defaults();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, cfg.dump()).unwrap();
        let re = Config::load(&p).unwrap();
        assert_eq!(re.dump(), cfg.dump());
    }

    #[test]
    fn schedule_table_parses() {
        let mut cfg = Config::defaults();
        cfg.apply_overrides(&["kd.schedule=0:0.2,0.5:0.8,1:0.2".into()]).unwrap();
        match cfg.kd_schedule().unwrap() {
            KdSchedule::Table(k) => assert_eq!(k.len(), 3),
            _ => panic!("expected table"),
        }
    }
}
