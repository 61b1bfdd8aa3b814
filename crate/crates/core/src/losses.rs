//! Adversarial objectives.
//!
//! Every loss is expressed as a quantity to *minimize* for the given role.
//! The dual contrastive loss treats each real logit as the positive of a
//! softmax classification against the whole fake batch, and each fake logit
//! as the positive against the whole real batch (with logits negated). Both
//! directions are evaluated as `logsumexp` over the extended set
//! `{0} ∪ {fake_j - real_i}`, which only ever sees logit differences.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    NonSaturating,
    Saturating,
    Wasserstein,
    Hinge,
    DualContrastive,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::NonSaturating,
        LossKind::Saturating,
        LossKind::Wasserstein,
        LossKind::Hinge,
        LossKind::DualContrastive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::NonSaturating => "non_saturating",
            LossKind::Saturating => "saturating",
            LossKind::Wasserstein => "wasserstein",
            LossKind::Hinge => "hinge",
            LossKind::DualContrastive => "dual_contrastive",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown loss kind {s:?} (expected one of {})",
                LossKind::ALL.map(LossKind::as_str).join(", ")
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Discriminator,
    Generator,
}

/// Discriminator logits for a real batch and a fake batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitBatch {
    real: Vec<f64>,
    fake: Vec<f64>,
}

impl LogitBatch {
    pub fn new(real: Vec<f64>, fake: Vec<f64>) -> Result<Self> {
        if real.is_empty() || fake.is_empty() {
            return Err(contract_err!(
                "logit batch needs at least one real and one fake value (got {} and {})",
                real.len(),
                fake.len()
            ));
        }
        if !real.iter().chain(&fake).all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                node: 0,
                op: "logit_batch",
                detail: "non-finite logit".into(),
            });
        }
        Ok(Self { real, fake })
    }

    pub fn real(&self) -> &[f64] {
        &self.real
    }

    pub fn fake(&self) -> &[f64] {
        &self.fake
    }

    fn eval(&self, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
        let mut g = Graph::inference();
        let r = g.constant(Tensor::from_slice(&self.real)?);
        let fk = g.constant(Tensor::from_slice(&self.fake)?);
        let out = f(&mut g, r, fk)?;
        g.value(out).item()
    }

    pub fn dual_contrastive_real(&self) -> Result<f64> {
        self.eval(dual_contrastive_real)
    }

    pub fn dual_contrastive_fake(&self) -> Result<f64> {
        self.eval(dual_contrastive_fake)
    }

    pub fn gan_loss(&self, kind: LossKind, role: Role) -> Result<f64> {
        self.eval(|g, r, f| gan_loss(g, kind, role, Some(r), f))
    }
}

fn vector_len(g: &Graph, v: Var, what: &str) -> Result<usize> {
    match *g.shape(v) {
        [n] if n >= 1 => Ok(n),
        [0] => Err(contract_err!("empty {what} logit set")),
        ref s => Err(shape_err!("{what} logits must be a vector, got {s:?}")),
    }
}

/// `rows × cols` matrix of `fake[j] - real[i]` with rows indexing the
/// anchor side, followed by the per-anchor contrastive term.
fn contrast(g: &mut Graph, anchors: Var, others: Var, anchor_is_real: bool) -> Result<Var> {
    let rows = g.shape(anchors)[0];
    let cols = g.shape(others)[0];
    let a = g.expand_axis(anchors, 1, cols)?;
    let o = g.expand_axis(others, 0, rows)?;
    // the exponent is always fake - real
    let diff = if anchor_is_real { g.sub(o, a)? } else { g.sub(a, o)? };
    let zero = g.constant(Tensor::zeros(&[rows, 1]));
    let ext = g.concat_last(&[zero, diff])?;
    let lse = g.logsumexp(ext, 1)?;
    let m = g.mean_all(lse)?;
    g.neg(m)
}

/// Real-anchor term: `mean_i -log(1 + Σ_j exp(fake_j - real_i))`. Always ≤ 0.
pub fn dual_contrastive_real(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    vector_len(g, real, "real")?;
    vector_len(g, fake, "fake")?;
    contrast(g, real, fake, true)
}

/// Fake-anchor term: `mean_j -log(1 + Σ_i exp(fake_j - real_i))`. Always ≤ 0.
pub fn dual_contrastive_fake(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    vector_len(g, real, "real")?;
    vector_len(g, fake, "fake")?;
    contrast(g, fake, real, false)
}

fn mean_softplus(g: &mut Graph, x: Var, negate: bool) -> Result<Var> {
    let x = if negate { g.neg(x)? } else { x };
    let s = g.softplus(x)?;
    g.mean_all(s)
}

fn mean_hinge(g: &mut Graph, x: Var, sign: f64) -> Result<Var> {
    // mean max(0, 1 + sign·x)
    let y = g.scale(x, sign)?;
    let y = g.add_scalar(y, 1.0)?;
    let y = g.relu(y)?;
    g.mean_all(y)
}

/// The objective `role` minimizes under `kind`. `real` may be omitted for
/// generator roles that only look at fake logits.
pub fn gan_loss(g: &mut Graph, kind: LossKind, role: Role, real: Option<Var>, fake: Var) -> Result<Var> {
    vector_len(g, fake, "fake")?;
    let need_real = || real.ok_or_else(|| contract_err!("{kind} loss for {role:?} needs real logits"));
    match (kind, role) {
        (LossKind::DualContrastive, _) => {
            let real = need_real()?;
            let a = dual_contrastive_real(g, real, fake)?;
            let b = dual_contrastive_fake(g, real, fake)?;
            let sum = g.add(a, b)?;
            match role {
                Role::Discriminator => g.neg(sum),
                Role::Generator => Ok(sum),
            }
        }
        (LossKind::NonSaturating | LossKind::Saturating, Role::Discriminator) => {
            let real = need_real()?;
            vector_len(g, real, "real")?;
            let a = mean_softplus(g, real, true)?;
            let b = mean_softplus(g, fake, false)?;
            g.add(a, b)
        }
        (LossKind::NonSaturating, Role::Generator) => mean_softplus(g, fake, true),
        (LossKind::Saturating, Role::Generator) => {
            let s = mean_softplus(g, fake, false)?;
            g.neg(s)
        }
        (LossKind::Hinge, Role::Discriminator) => {
            let real = need_real()?;
            vector_len(g, real, "real")?;
            let a = mean_hinge(g, real, -1.0)?;
            let b = mean_hinge(g, fake, 1.0)?;
            g.add(a, b)
        }
        (LossKind::Wasserstein, Role::Discriminator) => {
            let real = need_real()?;
            vector_len(g, real, "real")?;
            let a = g.mean_all(fake)?;
            let b = g.mean_all(real)?;
            g.sub(a, b)
        }
        (LossKind::Hinge | LossKind::Wasserstein, Role::Generator) => {
            let m = g.mean_all(fake)?;
            g.neg(m)
        }
    }
}

/// `(γ/2) · mean_n ‖∇ₓ D(xₙ)‖²`, recorded so that it can be differentiated
/// with respect to the discriminator parameters.
///
/// `disc` maps the (gradient-tracked) image batch to one logit per image.
pub fn r1_penalty<F>(g: &mut Graph, real_images: &Tensor, gamma: f64, disc: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let n = *real_images
        .shape()
        .first()
        .ok_or_else(|| shape_err!("r1 penalty needs a batch"))?;
    let x = g.param(real_images.clone());
    let logits = disc(g, x)?;
    let total = g.sum_all(logits)?;
    let grad = g.grad(total, &[x], true).map_err(|e| match e {
        Error::Numeric { node, op, detail } => Error::Numeric {
            node,
            op,
            detail: format!("r1 gradient: {detail}"),
        },
        other => other,
    })?[0];
    let Some(grad) = grad else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let sq = g.square(grad)?;
    let s = g.sum_all(sq)?;
    g.scale(s, gamma / (2.0 * n as f64))
}
