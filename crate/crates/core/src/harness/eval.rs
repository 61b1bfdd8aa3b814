//! Metric evaluation of trained models and attention-map export.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::attention::{attention_map, AttentionMode, AttentionParams, AttnInputs};
use crate::data::{resize_bilinear, save_pgm, save_ppm, save_tensor, DatasetSpec};
use crate::error::{contract_err, Result};
use crate::metrics::{feature_stats, ffd, frechet_distance, mode_coverage};
use crate::networks::sample_latent;
use crate::tensor::Tensor;

use super::config::{ExperimentConfig, Metric};
use super::train::{seeded, stream, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub metrics: Vec<Metric>,
    pub samples: usize,
    pub seed: u64,
    pub radius: f64,
    pub extractor_seed: u64,
}

impl EvalSpec {
    pub fn from_config(c: &ExperimentConfig) -> Self {
        Self {
            metrics: c.eval.metrics.clone(),
            samples: c.eval.samples,
            seed: c.eval.seed,
            radius: c.eval.radius,
            extractor_seed: c.eval.extractor_seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub values: Vec<(String, f64)>,
    /// Discriminator features, real rows first then fake rows, when FDDF
    /// was computed.
    pub features: Option<Tensor>,
}

impl EvalReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn to_line(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `n` real samples for evaluation. Synthetic datasets are sampled afresh;
/// image folders yield a seeded random subset.
pub fn eval_reals(data: &DatasetSpec, n: usize, rng: &mut impl RngCore) -> Result<Tensor> {
    match data {
        DatasetSpec::ImageFolder { .. } => {
            let all = data.generate(0, 0)?;
            let have = all.shape()[0];
            if have < n {
                return Err(contract_err!("image folder has {have} images, {n} requested"));
            }
            let mut idx: Vec<usize> = (0..have).collect();
            idx.shuffle(rng);
            idx.truncate(n);
            all.gather_first(&idx)
        }
        _ => data.generate(n, rng.next_u64()),
    }
}

/// Last-layer discriminator features for `x`, in chunks. A Siamese
/// discriminator pairs row `i` with reference row `i`.
pub fn disc_features(model: &Model, x: &Tensor, references: Option<&Tensor>) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let xc = x.gather_first(&idx)?;
        let rc = references.map(|r| r.gather_first(&idx)).transpose()?;
        parts.push(model.disc.evaluate(&model.d_params, &xc, rc.as_ref())?.1);
        start = end;
    }
    Tensor::cat_first(&parts)
}

/// FDDF from a saved features tensor (real rows first, then fake rows).
pub fn fddf_from_features(features: &Tensor) -> Result<f64> {
    let n = features.shape()[0] / 2;
    let real = features.gather_first(&(0..n).collect::<Vec<_>>())?;
    let fake = features.gather_first(&(n..2 * n).collect::<Vec<_>>())?;
    frechet_distance(&feature_stats(&real)?, &feature_stats(&fake)?)
}

/// Computes the requested metrics with fresh samples drawn from `spec.seed`.
pub fn evaluate(model: &Model, spec: &EvalSpec) -> Result<EvalReport> {
    let data = &model.config.data;
    let points = data.is_points();
    if !points && spec.metrics.contains(&Metric::ModeCoverage) {
        return Err(contract_err!(
            "mode_coverage needs a point dataset, got {}",
            data.kind()
        ));
    }
    if points && spec.metrics.contains(&Metric::Ffd) {
        return Err(contract_err!("ffd needs an image dataset, got {}", data.kind()));
    }
    let n = spec.samples;
    let mut rng = seeded(spec.seed, stream::EVAL);
    let reals = eval_reals(data, n, &mut rng)?;
    let fakes = model.sample(n, &mut rng)?;

    let mut report = EvalReport::default();
    for m in &spec.metrics {
        match m {
            Metric::Ffd => {
                let v = ffd(spec.extractor_seed, &reals, &fakes, n)?;
                report.values.push(("ffd".into(), v));
            }
            Metric::Fddf => {
                let refs = if model.disc.is_siamese() {
                    let extra = eval_reals(data, n, &mut rng)?;
                    Some(extra)
                } else {
                    None
                };
                let fr = disc_features(model, &reals, refs.as_ref())?;
                let ff = disc_features(model, &fakes, refs.as_ref())?;
                let features = Tensor::cat_first(&[fr, ff])?;
                report.values.push(("fddf".into(), fddf_from_features(&features)?));
                report.features = Some(features);
            }
            Metric::ModeCoverage => {
                let modes = data.modes().expect("point datasets have modes");
                let c = mode_coverage(&fakes, &modes, spec.radius)?;
                report.values.push(("modes_hit".into(), c.modes_hit as f64));
                report
                    .values
                    .push(("high_quality_fraction".into(), c.high_quality_fraction));
            }
        }
    }
    Ok(report)
}

/// Places an `s×s` patch map centered on `(i, j)` into an `h×w` grid,
/// dropping entries that fall outside it.
pub fn embed_patch_map(patch: &Tensor, h: usize, w: usize, i: usize, j: usize) -> Tensor {
    let s = patch.shape()[0];
    let r = (s / 2) as i64;
    let mut out = vec![0.0; h * w];
    for a in 0..s {
        for b in 0..s {
            let (y, x) = (i as i64 + a as i64 - r, j as i64 + b as i64 - r);
            if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                out[y as usize * w + x as usize] = patch.data()[a * s + b];
            }
        }
    }
    Tensor::new(&[h, w], out).expect("map values are finite")
}

/// Writes, for `n` samples, `sample_<k>.ppm` and per queried feature-map
/// position `(i, j)` the attention map as `attn_<k>_<i>_<j>.ntf` (at feature
/// resolution) and `attn_<k>_<i>_<j>.pgm` (bilinearly upsampled to the
/// image size).
pub fn dump_attention(
    model: &Model,
    n: usize,
    positions: &[(usize, usize)],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let block = model
        .gen
        .attention()
        .ok_or_else(|| contract_err!("generator has no attention block"))?;
    let g_params = model.sampling_params();
    let params = AttentionParams::from_store(block.config, g_params, &block.prefix)?;
    let mut rng = seeded(seed, stream::EVAL);
    let z = sample_latent(n, model.config.net.latent_dim, &mut rng);
    let (images, taps) = model.gen.generate_tapped(g_params, &z)?;
    let size = model.config.net.image_size;
    let (h, w) = (taps.shape()[1], taps.shape()[2]);

    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for k in 0..n {
        let img = images.select_first(k)?;
        let p = out_dir.join(format!("sample_{k}.ppm"));
        save_ppm(&p, &img)?;
        written.push(p);
        let tap = taps.select_first(k)?;
        for &(i, j) in positions {
            let map = attention_map(&params, AttnInputs::Single(&tap), i, j)?;
            let grid = if block.config.mode == AttentionMode::SoftmaxBaseline {
                map
            } else {
                embed_patch_map(&map, h, w, i, j)
            };
            let stem = format!("attn_{k}_{i}_{j}");
            let ntf = out_dir.join(format!("{stem}.ntf"));
            save_tensor(&ntf, &grid)?;
            let up = resize_bilinear(grid.data(), h, w, 1, size, size);
            let pgm = out_dir.join(format!("{stem}.pgm"));
            save_pgm(&pgm, &Tensor::new(&[size, size], up)?)?;
            written.extend([ntf, pgm]);
        }
    }
    Ok(written)
}
