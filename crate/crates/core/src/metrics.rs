//! Fréchet distances between Gaussian feature summaries, and 2D mode
//! coverage.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{Conv2d, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn feature_stats(features: &Tensor) -> Result<FeatureStats> {
    let (n, f) = match *features.shape() {
        [n, f] => (n, f),
        ref s => return Err(shape_err!("features must be N×f, got {s:?}")),
    };
    if n < 2 {
        return Err(contract_err!("need at least 2 feature rows, got {n}"));
    }
    if !features.is_finite() {
        return Err(Error::Numeric {
            node: 0,
            op: "feature_stats",
            detail: "non-finite feature".into(),
        });
    }
    let x = DMatrix::from_row_slice(n, f, features.data());
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    symmetrize(&mut cov);
    Ok(FeatureStats { mean, cov, count: n })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, f64::EPSILON, 10_000).ok_or_else(|| Error::Numeric {
        node: 0,
        op: "frechet_distance",
        detail: format!("eigendecomposition of {what} did not converge"),
    })
}

/// PSD square root of a symmetric matrix, clamping negative eigenvalues.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let e = eigen(s, "covariance")?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½)`.
///
/// The trace of the cross term is taken as `Tr((A Σ₂ A)^½)` with
/// `A = Σ₁^½`, which has the same eigenvalues as `Σ₁Σ₂` but is symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(shape_err!("feature dims differ: {} vs {}", a.dim(), b.dim()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let root_a = sqrtm_psd(&a.cov)?;
    let mut inner = &root_a * &b.cov * &root_a;
    symmetrize(&mut inner);
    let cross: f64 = eigen(inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn take_rows(x: &Tensor, n: usize, what: &str) -> Result<Tensor> {
    if n < 2 {
        return Err(contract_err!("sample count must be at least 2, got {n}"));
    }
    let have = x.shape().first().copied().unwrap_or(0);
    if have < n {
        return Err(contract_err!("{what} has {have} samples, {n} requested"));
    }
    if have == n {
        return Ok(x.clone());
    }
    x.gather_first(&(0..n).collect::<Vec<_>>())
}

/// Runs `extract` over `x` in chunks and stacks the resulting rows.
pub fn batched_features<F>(x: &Tensor, chunk: usize, mut extract: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let n = x.shape().first().copied().unwrap_or(0);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let part = x.gather_first(&(start..end).collect::<Vec<_>>())?;
        parts.push(extract(&part)?);
        start = end;
    }
    Tensor::cat_first(&parts)
}

/// Fréchet distance between discriminator features of the first `n` real
/// and `n` fake samples. `extract` maps a batch to its last-layer features.
pub fn fddf<F>(mut extract: F, real: &Tensor, fake: &Tensor, n: usize) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let real = take_rows(real, n, "real set")?;
    let fake = take_rows(fake, n, "fake set")?;
    let fr = batched_features(&real, 256, &mut extract)?;
    let ff = batched_features(&fake, 256, &mut extract)?;
    frechet_distance(&feature_stats(&fr)?, &feature_stats(&ff)?)
}

/// Fixed, randomly initialized convolutional feature extractor used by
/// [`ffd`]. The weights are a pure function of the seed.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layers: Vec<Conv2d>,
    params: ParamStore,
}

impl FeatureExtractor {
    pub const FEATURES: usize = 64;

    pub fn new(seed: u64) -> Self {
        let layers = vec![
            Conv2d::new("ffd.conv0", 3, 3, 16),
            Conv2d::new("ffd.conv1", 3, 16, 32),
            Conv2d::new("ffd.conv2", 3, 32, Self::FEATURES),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for l in &layers {
            l.init(&mut params, &mut rng);
        }
        Self { layers, params }
    }

    /// `N×h×w×3` images to `N×64` features (spatial means of the last
    /// activation map).
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let n = match *images.shape() {
            [n, _, _, 3] => n,
            ref s => return Err(shape_err!("extractor input must be N×h×w×3, got {s:?}")),
        };
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let mut x = g.constant(images.clone());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&mut g, &p, x)?;
            x = g.leaky_relu(x, LEAKY_SLOPE)?;
            let s = g.shape(x).to_vec();
            if i < last && s[1] >= 8 && s[1] % 2 == 0 && s[2] % 2 == 0 {
                x = g.avg_pool2(x)?;
            }
        }
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[n, s[1] * s[2], Self::FEATURES])?;
        let sum = g.sum_axis(x, 1)?;
        let mean = g.scale(sum, 1.0 / (s[1] * s[2]) as f64)?;
        Ok(g.value(mean).clone())
    }
}

/// Fréchet feature distance on the seed-determined extractor.
pub fn ffd(extractor_seed: u64, real: &Tensor, fake: &Tensor, n: usize) -> Result<f64> {
    let ex = FeatureExtractor::new(extractor_seed);
    fddf(|x| ex.features(x), real, fake, n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeCoverage {
    pub modes_hit: usize,
    pub high_quality_fraction: f64,
}

/// A mode counts as hit when at least `max(1, 0.1·N/K)` samples lie within
/// `radius` of it; the high-quality fraction is the share of samples within
/// `radius` of any mode.
pub fn mode_coverage(samples: &Tensor, modes: &Tensor, radius: f64) -> Result<ModeCoverage> {
    let n = match *samples.shape() {
        [n, 2] => n,
        ref s => return Err(shape_err!("samples must be N×2, got {s:?}")),
    };
    let k = match *modes.shape() {
        [k, 2] => k,
        ref s => return Err(shape_err!("modes must be K×2, got {s:?}")),
    };
    if k == 0 {
        return Err(contract_err!("mode set is empty"));
    }
    if !(radius > 0.0) {
        return Err(contract_err!("radius must be positive, got {radius}"));
    }
    let r2 = radius * radius;
    let mut hits = vec![0usize; k];
    let mut good = 0usize;
    for s in samples.data().chunks_exact(2) {
        let mut any = false;
        for (m, c) in modes.data().chunks_exact(2).enumerate() {
            let d2 = (s[0] - c[0]).powi(2) + (s[1] - c[1]).powi(2);
            if d2 <= r2 {
                hits[m] += 1;
                any = true;
            }
        }
        good += any as usize;
    }
    let threshold = (0.1 * n as f64 / k as f64).max(1.0);
    Ok(ModeCoverage {
        modes_hit: hits.iter().filter(|&&h| h as f64 >= threshold).count(),
        high_quality_fraction: if n == 0 { 0.0 } else { good as f64 / n as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: &[f64], cov: &[f64]) -> FeatureStats {
        let f = mean.len();
        FeatureStats {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_row_slice(f, f, cov),
            count: 10,
        }
    }

    #[test]
    fn two_rows() {
        let s = feature_stats(&Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.cov[(0, 0)], 2.0);
        let s = feature_stats(&Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
        assert!(matches!(
            feature_stats(&Tensor::zeros(&[1, 3])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scalar_frechet() {
        let d = frechet_distance(&stats(&[0.0], &[1.0]), &stats(&[3.0], &[1.0])).unwrap();
        assert!((d - 9.0).abs() < 1e-12, "{d}");
        let a = stats(&[1.0, 2.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
        assert!(matches!(
            frechet_distance(&a, &stats(&[0.0], &[1.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn coverage_fixtures() {
        let modes: Vec<f64> = (0..8)
            .flat_map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 8.0;
                [2.0 * t.cos(), 2.0 * t.sin()]
            })
            .collect();
        let modes = Tensor::new(&[8, 2], modes).unwrap();
        let all = Tensor::cat_first(&[modes.clone(), modes.clone()]).unwrap();
        let c = mode_coverage(&all, &modes, 0.06).unwrap();
        assert_eq!((c.modes_hit, c.high_quality_fraction), (8, 1.0));

        let one = Tensor::new(&[16, 2], [2.0, 0.0].repeat(16)).unwrap();
        let c = mode_coverage(&one, &modes, 0.06).unwrap();
        assert_eq!((c.modes_hit, c.high_quality_fraction), (1, 1.0));

        let far = Tensor::full(&[16, 2], 50.0);
        let half = Tensor::cat_first(&[all, far]).unwrap();
        assert_eq!(mode_coverage(&half, &modes, 0.06).unwrap().high_quality_fraction, 0.5);

        assert!(matches!(
            mode_coverage(&one, &Tensor::zeros(&[0, 2]), 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn extractor_is_deterministic() {
        let x = Tensor::uniform(&[3, 16, 16, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let a = FeatureExtractor::new(7).features(&x).unwrap();
        let b = FeatureExtractor::new(7).features(&x).unwrap();
        assert_eq!(a.shape(), &[3, FeatureExtractor::FEATURES]);
        assert_eq!(a, b);
        assert_ne!(a, FeatureExtractor::new(8).features(&x).unwrap());
    }
}
