//! Registered gradient-check suites.
//!
//! Every suite builds a small random problem from a seed and compares
//! analytic gradients against central differences for all of its inputs
//! and parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionBlock, AttentionConfig, AttentionMode, AttnInputs};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::losses::{dual_contrastive_fake, dual_contrastive_real, gan_loss, r1_penalty, LossKind, Role};
use crate::networks::{AttnPlacement, Discriminator, NetworkConfig};
use crate::nn::{conv2d, Bound, Conv2d, Dense, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: [u64; 3] = [0, 1, 2];

pub struct GradSuite {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// Perturbs every parameter so that no gradient is structurally zero.
fn generic(store: &ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        let noise = Tensor::randn(t.shape(), 0.2, rng);
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        out.insert(name, Tensor::new(t.shape(), data).expect("finite"));
    }
    out
}

/// Runs `f` with `inputs` followed by every parameter of `store` as checked
/// variables.
fn check_with_params<F>(store: &ParamStore, inputs: Vec<Tensor>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let k = inputs.len();
    let mut points = inputs;
    points.extend(store.iter().map(|(_, t)| t.clone()));
    grad_check_many(
        |g, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars[k..].iter().copied()));
            f(g, &bound, &vars[..k])
        },
        &points,
        STEP,
        TOLERANCE,
    )
}

/// Weighted sum `Σ w ⊙ x` with fixed random weights, so the scalar depends
/// on every output element differently.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(x), 1.0, &mut rng(seed.wrapping_add(77)));
    let wv = g.constant(w);
    let p = g.mul(x, wv)?;
    g.sum_all(p)
}

fn logits(seed: u64, n: usize) -> Tensor {
    Tensor::randn(&[n], 2.0, &mut rng(seed))
}

fn dc_real(seed: u64) -> Result<GradCheckReport> {
    let (r, f) = (logits(seed, 5), logits(seed + 100, 7));
    grad_check_many(|g, v| dual_contrastive_real(g, v[0], v[1]), &[r, f], STEP, TOLERANCE)
}

fn dc_fake(seed: u64) -> Result<GradCheckReport> {
    let (r, f) = (logits(seed, 5), logits(seed + 100, 7));
    grad_check_many(|g, v| dual_contrastive_fake(g, v[0], v[1]), &[r, f], STEP, TOLERANCE)
}

fn smooth_losses(seed: u64) -> Result<GradCheckReport> {
    let (r, f) = (logits(seed, 4), logits(seed + 100, 6));
    grad_check_many(
        |g, v| {
            let mut total = g.constant(Tensor::scalar(0.0));
            for kind in [LossKind::NonSaturating, LossKind::Saturating, LossKind::Wasserstein] {
                for role in [Role::Discriminator, Role::Generator] {
                    let l = gan_loss(g, kind, role, Some(v[0]), v[1])?;
                    total = g.add(total, l)?;
                }
            }
            Ok(total)
        },
        &[r, f],
        STEP,
        TOLERANCE,
    )
}

fn conv(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::randn(&[2, 4, 6, 3], 1.0, &mut r);
    let w = Tensor::randn(&[27, 2], 0.5, &mut r);
    let b = Tensor::randn(&[2], 0.5, &mut r);
    grad_check_many(
        |g, v| {
            let y = conv2d(g, v[0], v[1], v[2], 3)?;
            let y = g.leaky_relu(y, LEAKY_SLOPE)?;
            let y = g.avg_pool2(y)?;
            let y = g.upsample2(y)?;
            project(g, y, seed)
        },
        &[x, w, b],
        STEP,
        TOLERANCE,
    )
}

fn attention(mode: AttentionMode, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let cfg = AttentionConfig::new(4, 3, mode).with_heads(2);
    let block = AttentionBlock::new("", cfg);
    let mut store = ParamStore::new();
    block.init(&mut store, &mut r);
    let store = generic(&store, &mut r);
    let primary = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r);
    let mut inputs = vec![primary];
    if mode.is_reference() {
        inputs.push(Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r));
    }
    check_with_params(&store, inputs, |g, p, v| {
        let inp = if v.len() == 2 {
            AttnInputs::Pair {
                reference: v[1],
                primary: v[0],
            }
        } else {
            AttnInputs::Single(v[0])
        };
        let out = block.forward(g, p, inp)?;
        project(g, out, seed)
    })
}

macro_rules! attention_suite {
    ($fn:ident, $mode:expr) => {
        fn $fn(seed: u64) -> Result<GradCheckReport> {
            attention($mode, seed)
        }
    };
}

attention_suite!(attn_self, AttentionMode::SelfAttention);
attention_suite!(attn_ref_kq, AttentionMode::RefKeyQuery);
attention_suite!(attn_ref_qv, AttentionMode::RefQueryValue);
attention_suite!(attn_ref_q, AttentionMode::RefQuery);
attention_suite!(attn_softmax, AttentionMode::SoftmaxBaseline);

/// Small conv critic used by the R1 suites.
fn r1_critic(g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
    let h = Conv2d::new("c", 3, 2, 3).forward(g, p, x)?;
    let h = g.tanh(h)?;
    let h = g.avg_pool2(h)?;
    let n = g.shape(h)[0];
    let h = g.reshape(h, &[n, 12])?;
    let h = Dense::new("d", 12, 1).forward(g, p, h)?;
    g.reshape(h, &[n])
}

fn r1_store(r: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    Conv2d::new("c", 3, 2, 3).init(&mut store, r);
    Dense::new("d", 12, 1).init(&mut store, r);
    generic(&store, r)
}

/// Gradient of the critic with respect to its input, the quantity the
/// penalty squares.
fn r1_inner(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let store = r1_store(&mut r);
    let x = Tensor::randn(&[2, 4, 4, 2], 1.0, &mut r);
    check_with_params(&store, vec![x], |g, p, v| {
        let d = r1_critic(g, p, v[0])?;
        g.sum_all(d)
    })
}

/// Penalty value differentiated with respect to the critic parameters
/// (double backpropagation).
fn r1_outer(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let store = r1_store(&mut r);
    let x = Tensor::randn(&[2, 4, 4, 2], 1.0, &mut r);
    check_with_params(&store, vec![], |g, p, _| {
        r1_penalty(g, &x, 10.0, |g, xv| r1_critic(g, p, xv))
    })
}

/// Warm-up plus dual contrastive discriminator objectives through the
/// Siamese discriminator, with respect to primary images, references and
/// every parameter. The dual contrastive term alone is invariant to a
/// common logit shift, which leaves some gradients exactly zero.
fn siamese_d_loss(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let cfg = NetworkConfig {
        latent_dim: 4,
        image_size: 8,
        base_channels: 2,
        max_channels: 4,
        feature_dim: 4,
        d_attn: Some(AttnPlacement {
            resolution: 4,
            mode: AttentionMode::RefKeyQuery,
            patch_size: 3,
            heads: Some(1),
        }),
        ref_fusion_resolution: 4,
        ..NetworkConfig::default()
    };
    let disc = Discriminator::new(&cfg)?;
    let store = generic(&disc.init(&mut r), &mut r);
    let real = Tensor::uniform(&[2, 8, 8, 3], -1.0, 1.0, &mut r);
    let fake = Tensor::uniform(&[2, 8, 8, 3], -1.0, 1.0, &mut r);
    let refs = Tensor::uniform(&[2, 8, 8, 3], -1.0, 1.0, &mut r);
    check_with_params(&store, vec![real, fake, refs], |g, p, v| {
        let (rl, _) = disc.forward(g, p, v[0], Some(v[2]))?;
        let (fl, _) = disc.forward(g, p, v[1], Some(v[2]))?;
        let main = gan_loss(g, LossKind::DualContrastive, Role::Discriminator, Some(rl), fl)?;
        let warm = gan_loss(g, LossKind::NonSaturating, Role::Discriminator, Some(rl), fl)?;
        g.add(main, warm)
    })
}

/// Every registered suite.
pub fn suites() -> Vec<GradSuite> {
    vec![
        GradSuite {
            name: "dual_contrastive_real",
            run: dc_real,
        },
        GradSuite {
            name: "dual_contrastive_fake",
            run: dc_fake,
        },
        GradSuite {
            name: "smooth_gan_losses",
            run: smooth_losses,
        },
        GradSuite {
            name: "conv_pool_upsample",
            run: conv,
        },
        GradSuite {
            name: "attention_self",
            run: attn_self,
        },
        GradSuite {
            name: "attention_ref_kq",
            run: attn_ref_kq,
        },
        GradSuite {
            name: "attention_ref_qv",
            run: attn_ref_qv,
        },
        GradSuite {
            name: "attention_ref_q",
            run: attn_ref_q,
        },
        GradSuite {
            name: "attention_softmax",
            run: attn_softmax,
        },
        GradSuite {
            name: "r1_inner_gradient",
            run: r1_inner,
        },
        GradSuite {
            name: "r1_penalty_params",
            run: r1_outer,
        },
        GradSuite {
            name: "siamese_d_loss",
            run: siamese_d_loss,
        },
    ]
}

/// Result of one suite over every seed in [`SEEDS`].
#[derive(Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub reports: Vec<(u64, Result<GradCheckReport>)>,
}

impl SuiteOutcome {
    pub fn pass(&self) -> bool {
        self.reports.iter().all(|(_, r)| r.as_ref().is_ok_and(|r| r.pass))
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.reports
            .iter()
            .filter_map(|(_, r)| r.as_ref().ok().map(|r| r.max_rel_err))
            .fold(0.0, f64::max)
    }
}

pub fn run_suite(suite: &GradSuite) -> SuiteOutcome {
    SuiteOutcome {
        name: suite.name,
        reports: SEEDS.iter().map(|&s| (s, (suite.run)(s))).collect(),
    }
}
