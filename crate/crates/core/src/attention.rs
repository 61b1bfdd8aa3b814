//! Patch-adaptive attention blocks.
//!
//! For every spatial position the block builds a vector from the `s×s` key
//! patch around it and the query at the position, maps it through a
//! two-layer MLP to per-position, per-channel weights over the `s×s` value
//! patch, and adds the weighted sum back onto a residual input. The
//! reference-attention modes draw the key, query and value tensors from two
//! different feature maps (a real reference image and the primary image);
//! the residual always comes from the primary input.
//!
//! Two views of the same computation live here: the vectorized graph path
//! ([`AttentionBlock::forward`]) used for training, and the per-position
//! functions ([`patch_concat`], [`weight_mlp`], [`aggregate`]) that spell out
//! one position at a time.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{add_bias, conv2d, Bound, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Upper bound on the per-head MLP width `s²·(c/g)` used to pick a default
/// head count.
pub const MAX_HEAD_WIDTH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Key, query and value from one input.
    SelfAttention,
    /// Key and query from the reference, value from the primary.
    RefKeyQuery,
    /// Key from the primary, query and value from the reference.
    RefQueryValue,
    /// Key and value from the primary, query from the reference.
    RefQuery,
    /// Global dot-product softmax attention with a learned residual gain.
    SoftmaxBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Primary,
    Reference,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 5] = [
        AttentionMode::SelfAttention,
        AttentionMode::RefKeyQuery,
        AttentionMode::RefQueryValue,
        AttentionMode::RefQuery,
        AttentionMode::SoftmaxBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::SelfAttention => "self",
            AttentionMode::RefKeyQuery => "ref_kq",
            AttentionMode::RefQueryValue => "ref_qv",
            AttentionMode::RefQuery => "ref_q",
            AttentionMode::SoftmaxBaseline => "softmax",
        }
    }

    /// Whether the mode consumes a (reference, primary) pair.
    pub fn is_reference(self) -> bool {
        matches!(
            self,
            AttentionMode::RefKeyQuery | AttentionMode::RefQueryValue | AttentionMode::RefQuery
        )
    }

    fn sources(self) -> [Source; 3] {
        use Source::*;
        match self {
            AttentionMode::SelfAttention | AttentionMode::SoftmaxBaseline => [Primary; 3],
            AttentionMode::RefKeyQuery => [Reference, Reference, Primary],
            AttentionMode::RefQueryValue => [Primary, Reference, Reference],
            AttentionMode::RefQuery => [Primary, Reference, Primary],
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown attention mode {s:?} (expected one of {})",
                AttentionMode::ALL.map(AttentionMode::as_str).join(", ")
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub patch_size: usize,
    pub heads: usize,
    pub mode: AttentionMode,
}

impl AttentionConfig {
    /// Config with the default head count for `channels` and `patch_size`.
    pub fn new(channels: usize, patch_size: usize, mode: AttentionMode) -> Self {
        Self {
            channels,
            patch_size,
            heads: default_heads(channels, patch_size),
            mode,
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(contract_err!("attention needs at least one channel"));
        }
        if self.patch_size % 2 == 0 {
            return Err(contract_err!("patch size {} must be odd", self.patch_size));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(contract_err!(
                "{} heads do not divide {} channels",
                self.heads,
                self.channels
            ));
        }
        Ok(())
    }

    pub fn head_channels(&self) -> usize {
        self.channels / self.heads
    }

    /// Width `s²·(c/g)` of one head's weight vector.
    pub fn head_width(&self) -> usize {
        self.patch_size * self.patch_size * self.head_channels()
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let proj = 3 * (c * c + c);
        if self.mode == AttentionMode::SoftmaxBaseline {
            return proj + 1;
        }
        let (w, ch) = (self.head_width(), self.head_channels());
        proj + self.heads * ((w + ch) * w + w + w * w + w)
    }
}

/// Smallest head count dividing `channels` that keeps `s²·(c/g)` within
/// [`MAX_HEAD_WIDTH`] (or one channel per head if none does).
pub fn default_heads(channels: usize, patch_size: usize) -> usize {
    (1..=channels.max(1))
        .filter(|g| channels % g == 0)
        .find(|g| patch_size * patch_size * (channels / g) <= MAX_HEAD_WIDTH)
        .unwrap_or(channels.max(1))
}

/// Learnable parameters of one block, keyed `key.*`, `query.*`, `value.*`,
/// `head{h}.{w1,b1,w2,b2}` and (softmax baseline only) `gain`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub config: AttentionConfig,
    pub store: ParamStore,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(config: AttentionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        AttentionBlock::new("", config).init(&mut store, rng);
        Ok(Self { config, store })
    }

    /// Takes the block's entries out of a larger store.
    pub fn from_store(config: AttentionConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let scoped = store.scoped(prefix);
        let params = Self { config, store: scoped };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let expected = {
            let mut s = ParamStore::new();
            AttentionBlock::new("", self.config).shapes(&mut s);
            s
        };
        for (name, t) in expected.iter() {
            let have = self.store.get(name)?;
            if have.shape() != t.shape() {
                return Err(shape_err!("{name}: expected {:?}, got {:?}", t.shape(), have.shape()));
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.store.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let old = self.store.get(name)?;
        if old.shape() != value.shape() {
            return Err(shape_err!(
                "{name}: expected {:?}, got {:?}",
                old.shape(),
                value.shape()
            ));
        }
        self.store.insert(name, value);
        Ok(())
    }

    /// Zeroes every weight-MLP matrix and bias, turning the block into its
    /// residual path.
    pub fn zero_weight_mlp(&mut self) {
        self.store = self.store.map_values(|name, t| {
            if name.starts_with("head") {
                Tensor::zeros(t.shape())
            } else {
                t.clone()
            }
        });
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }
}

/// Block inputs: one feature map, or a (reference, primary) pair of equal
/// shape.
#[derive(Clone, Copy, Debug)]
pub enum AttnInputs<T> {
    Single(T),
    Pair { reference: T, primary: T },
}

impl<T: Copy> AttnInputs<T> {
    fn resolve(self, mode: AttentionMode) -> Result<(T, T)> {
        match (self, mode.is_reference()) {
            (AttnInputs::Single(x), false) => Ok((x, x)),
            (AttnInputs::Pair { reference, primary }, true) => Ok((reference, primary)),
            (AttnInputs::Single(_), true) => Err(contract_err!("{mode} attention needs a (reference, primary) pair")),
            (AttnInputs::Pair { .. }, false) => Err(contract_err!("{mode} attention takes exactly one input")),
        }
    }
}

/// Graph-side attention block whose parameters live under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub prefix: String,
    pub config: AttentionConfig,
}

impl AttentionBlock {
    pub fn new(prefix: impl Into<String>, config: AttentionConfig) -> Self {
        Self {
            prefix: prefix.into(),
            config,
        }
    }

    fn name(&self, s: &str) -> String {
        format!("{}{s}", self.prefix)
    }

    fn shapes(&self, store: &mut ParamStore) {
        let c = self.config.channels;
        for p in ["key", "query", "value"] {
            store.insert(self.name(&format!("{p}.weight")), Tensor::zeros(&[c, c]));
            store.insert(self.name(&format!("{p}.bias")), Tensor::zeros(&[c]));
        }
        if self.config.mode == AttentionMode::SoftmaxBaseline {
            store.insert(self.name("gain"), Tensor::zeros(&[1]));
            return;
        }
        let (w, ch) = (self.config.head_width(), self.config.head_channels());
        for h in 0..self.config.heads {
            store.insert(self.name(&format!("head{h}.w1")), Tensor::zeros(&[w + ch, w]));
            store.insert(self.name(&format!("head{h}.b1")), Tensor::zeros(&[w]));
            store.insert(self.name(&format!("head{h}.w2")), Tensor::zeros(&[w, w]));
            store.insert(self.name(&format!("head{h}.b2")), Tensor::zeros(&[w]));
        }
    }

    /// Projections get `N(0, 1/c)` weights; the first MLP layer
    /// `N(0, 1/fan_in)`, the second a tenth of that, biases zero. The block
    /// therefore starts close to its residual path.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.config.channels;
        for p in ["key", "query", "value"] {
            store.insert(
                self.name(&format!("{p}.weight")),
                Tensor::randn(&[c, c], (1.0 / c as f64).sqrt(), rng),
            );
            store.insert(self.name(&format!("{p}.bias")), Tensor::zeros(&[c]));
        }
        if self.config.mode == AttentionMode::SoftmaxBaseline {
            store.insert(self.name("gain"), Tensor::zeros(&[1]));
            return;
        }
        let (w, ch) = (self.config.head_width(), self.config.head_channels());
        for h in 0..self.config.heads {
            let std1 = (1.0 / (w + ch) as f64).sqrt();
            let std2 = 0.1 * (1.0 / w as f64).sqrt();
            store.insert(
                self.name(&format!("head{h}.w1")),
                Tensor::randn(&[w + ch, w], std1, rng),
            );
            store.insert(self.name(&format!("head{h}.b1")), Tensor::zeros(&[w]));
            store.insert(self.name(&format!("head{h}.w2")), Tensor::randn(&[w, w], std2, rng));
            store.insert(self.name(&format!("head{h}.b2")), Tensor::zeros(&[w]));
        }
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    fn project(&self, g: &mut Graph, p: &Bound, which: &str, x: Var) -> Result<Var> {
        let w = p.get(&self.name(&format!("{which}.weight")))?;
        let b = p.get(&self.name(&format!("{which}.bias")))?;
        let y = conv2d(g, x, w, b, 1)?;
        g.leaky_relu(y, LEAKY_SLOPE)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<[usize; 4]> {
        match *g.shape(x) {
            [n, h, w, c] if c == self.config.channels => Ok([n, h, w, c]),
            ref s => Err(shape_err!(
                "attention over {} channels got input {s:?}",
                self.config.channels
            )),
        }
    }

    /// `(K, Q, V)` for the block's mode.
    pub fn kqv(&self, g: &mut Graph, p: &Bound, inputs: AttnInputs<Var>) -> Result<(Var, Var, Var)> {
        let (reference, primary) = inputs.resolve(self.config.mode)?;
        let rs = self.check_input(g, reference)?;
        let ps = self.check_input(g, primary)?;
        if rs != ps {
            return Err(shape_err!("reference {rs:?} and primary {ps:?} differ"));
        }
        let pick = |s: Source| match s {
            Source::Primary => primary,
            Source::Reference => reference,
        };
        let [ks, qs, vs] = self.config.mode.sources();
        let k = self.project(g, p, "key", pick(ks))?;
        let q = self.project(g, p, "query", pick(qs))?;
        let v = self.project(g, p, "value", pick(vs))?;
        Ok((k, q, v))
    }

    fn head_slice(&self, g: &mut Graph, x: Var, h: usize) -> Result<Var> {
        if self.config.heads == 1 {
            return Ok(x);
        }
        let ch = self.config.head_channels();
        g.narrow_last(x, h * ch, ch)
    }

    /// Per-position aggregation weights of head `h` as an
    /// `(N·H·W) × (s²·c/g)` matrix.
    fn head_weights(&self, g: &mut Graph, p: &Bound, k: Var, q: Var, h: usize) -> Result<Var> {
        let s = self.config.patch_size;
        let kh = self.head_slice(g, k, h)?;
        let qh = self.head_slice(g, q, h)?;
        let [n, hh, ww, ch] = self.check_shape4(g, kh)?;
        let rows = n * hh * ww;
        let kc = g.im2col(kh, s)?;
        let qf = g.reshape(qh, &[rows, ch])?;
        let pv = g.concat_last(&[kc, qf])?;
        let w1 = p.get(&self.name(&format!("head{h}.w1")))?;
        let b1 = p.get(&self.name(&format!("head{h}.b1")))?;
        let w2 = p.get(&self.name(&format!("head{h}.w2")))?;
        let b2 = p.get(&self.name(&format!("head{h}.b2")))?;
        let hidden = g.matmul(pv, w1)?;
        let hidden = add_bias(g, hidden, b1)?;
        let hidden = g.leaky_relu(hidden, LEAKY_SLOPE)?;
        let wt = g.matmul(hidden, w2)?;
        add_bias(g, wt, b2)
    }

    fn check_shape4(&self, g: &Graph, x: Var) -> Result<[usize; 4]> {
        match *g.shape(x) {
            [n, h, w, c] => Ok([n, h, w, c]),
            ref s => Err(shape_err!("expected N×H×W×C, got {s:?}")),
        }
    }

    /// Full aggregation weights `(N·H·W) × s² × c`, heads laid side by side
    /// along the channel axis.
    pub fn weights(&self, g: &mut Graph, p: &Bound, inputs: AttnInputs<Var>) -> Result<Var> {
        if self.config.mode == AttentionMode::SoftmaxBaseline {
            return Err(contract_err!("softmax baseline has no patch weights"));
        }
        let (k, q, _) = self.kqv(g, p, inputs)?;
        let [n, hh, ww, _] = self.check_shape4(g, k)?;
        let s2 = self.config.patch_size * self.config.patch_size;
        let ch = self.config.head_channels();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let wt = self.head_weights(g, p, k, q, h)?;
            heads.push(g.reshape(wt, &[n * hh * ww, s2, ch])?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            g.concat_last(&heads)
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: AttnInputs<Var>) -> Result<Var> {
        let (_, primary) = inputs.resolve(self.config.mode)?;
        let (k, q, v) = self.kqv(g, p, inputs)?;
        let attended = if self.config.mode == AttentionMode::SoftmaxBaseline {
            self.softmax_attend(g, p, k, q, v)?
        } else {
            self.patch_attend(g, p, k, q, v)?
        };
        g.add(attended, primary)
    }

    fn patch_attend(&self, g: &mut Graph, p: &Bound, k: Var, q: Var, v: Var) -> Result<Var> {
        let s = self.config.patch_size;
        let [n, hh, ww, c] = self.check_shape4(g, v)?;
        let rows = n * hh * ww;
        let ch = self.config.head_channels();
        let mut outs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let wt = self.head_weights(g, p, k, q, h)?;
            let vh = self.head_slice(g, v, h)?;
            let vc = g.im2col(vh, s)?;
            let prod = g.mul(wt, vc)?;
            let prod = g.reshape(prod, &[rows, s * s, ch])?;
            outs.push(g.sum_axis(prod, 1)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_last(&outs)?
        };
        g.reshape(o, &[n, hh, ww, c])
    }

    fn softmax_attend(&self, g: &mut Graph, p: &Bound, k: Var, q: Var, v: Var) -> Result<Var> {
        let [n, hh, ww, c] = self.check_shape4(g, v)?;
        let hw = hh * ww;
        let probs = self.softmax_probs(g, k, q)?;
        let vf = g.reshape(v, &[n, hw, c])?;
        let o = g.matmul(probs, vf)?;
        let o = g.reshape(o, &[n, hh, ww, c])?;
        let gain = p.get(&self.name("gain"))?;
        let gain = g.broadcast(gain, &[n, hh, ww, c])?;
        g.mul(o, gain)
    }

    /// Row-stochastic `N × HW × HW` attention of the softmax baseline.
    fn softmax_probs(&self, g: &mut Graph, k: Var, q: Var) -> Result<Var> {
        let [n, hh, ww, c] = self.check_shape4(g, k)?;
        let hw = hh * ww;
        let kf = g.reshape(k, &[n, hw, c])?;
        let qf = g.reshape(q, &[n, hw, c])?;
        let logits = g.matmul_t(qf, kf, false, true)?;
        let logits = g.scale(logits, 1.0 / (c as f64).sqrt())?;
        let lse = g.logsumexp(logits, 2)?;
        let lse = g.expand_axis(lse, 2, hw)?;
        let centered = g.sub(logits, lse)?;
        g.exp(centered)
    }
}

fn batched(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [h, w, c] => x.reshape(&[1, h, w, c]),
        [_, _, _, _] => Ok(x.clone()),
        ref s => Err(shape_err!("expected h×w×c or N×h×w×c, got {s:?}")),
    }
}

fn unbatch_like(x: Tensor, like: &Tensor) -> Result<Tensor> {
    x.reshape(like.shape())
}

/// Key, query and value of a single feature map: `leakyReLU(1×1 conv + bias)`
/// with the block's three projections. Accepts `h×w×c` or `N×h×w×c`.
pub fn kqv_project(input: &Tensor, params: &AttentionParams) -> Result<(Tensor, Tensor, Tensor)> {
    let x = batched(input)?;
    let mut g = Graph::inference();
    let p = params.store.bind(&mut g, false);
    let block = AttentionBlock::new("", params.config);
    let xv = g.constant(x);
    let project = |g: &mut Graph, which: &str| -> Result<Tensor> {
        let y = block.project(g, &p, which, xv)?;
        unbatch_like(g.value(y).clone(), input)
    };
    if block.check_input(&g, xv).is_err() {
        return Err(shape_err!(
            "input {:?} does not have {} channels",
            input.shape(),
            params.config.channels
        ));
    }
    let k = project(&mut g, "key")?;
    let q = project(&mut g, "query")?;
    let v = project(&mut g, "value")?;
    Ok((k, q, v))
}

fn hwc(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(shape_err!("{what} must be h×w×c, got {s:?}")),
    }
}

fn check_position(h: usize, w: usize, i: usize, j: usize) -> Result<()> {
    if i >= h || j >= w {
        return Err(shape_err!("position ({i}, {j}) outside {h}×{w}"));
    }
    Ok(())
}

/// Values of the `s×s` patch of `x` centred at `(i, j)`, zero outside the map,
/// flattened row-major over the window and then by channel.
fn patch(x: &Tensor, i: usize, j: usize, s: usize) -> Result<Vec<f64>> {
    let (h, w, c) = hwc(x, "patch source")?;
    check_position(h, w, i, j)?;
    let r = (s / 2) as isize;
    let mut out = vec![0.0; s * s * c];
    for m in 0..s {
        for n in 0..s {
            let (y, xx) = (i as isize + m as isize - r, j as isize + n as isize - r);
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                continue;
            }
            let src = (y as usize * w + xx as usize) * c;
            out[(m * s + n) * c..(m * s + n + 1) * c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Ok(out)
}

/// `concat(flatten(K patch at (i, j)), Q[i, j])`, length `s²c + c`.
pub fn patch_concat(k: &Tensor, q: &Tensor, i: usize, j: usize, s: usize) -> Result<Vec<f64>> {
    if k.shape() != q.shape() {
        return Err(shape_err!("K {:?} and Q {:?} differ", k.shape(), q.shape()));
    }
    if s % 2 == 0 {
        return Err(shape_err!("patch size {s} must be odd"));
    }
    let (_, w, c) = hwc(q, "Q")?;
    let mut p = patch(k, i, j, s)?;
    let at = (i * w + j) * c;
    p.extend_from_slice(&q.data()[at..at + c]);
    Ok(p)
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

/// Head `head`'s weight MLP on one concatenated vector, reshaped to
/// `s×s×(c/g)`. Only the hidden layer is followed by the leaky ReLU.
pub fn weight_mlp(p: &[f64], params: &AttentionParams, head: usize) -> Result<Tensor> {
    let cfg = params.config;
    if cfg.mode == AttentionMode::SoftmaxBaseline {
        return Err(contract_err!("softmax baseline has no weight MLP"));
    }
    if head >= cfg.heads {
        return Err(shape_err!("head {head} of {}", cfg.heads));
    }
    let (w, ch) = (cfg.head_width(), cfg.head_channels());
    if p.len() != w + ch {
        return Err(shape_err!("weight MLP expects length {}, got {}", w + ch, p.len()));
    }
    let w1 = params.tensor(&format!("head{head}.w1"))?;
    let b1 = params.tensor(&format!("head{head}.b1"))?;
    let w2 = params.tensor(&format!("head{head}.w2"))?;
    let b2 = params.tensor(&format!("head{head}.b2"))?;
    let mut hidden = b1.to_vec();
    for (r, &pv) in p.iter().enumerate() {
        let row = &w1.data()[r * w..(r + 1) * w];
        for (hv, &wv) in hidden.iter_mut().zip(row) {
            *hv += pv * wv;
        }
    }
    let mut out = b2.to_vec();
    for (r, hv) in hidden.iter().map(|&v| leaky(v)).enumerate() {
        let row = &w2.data()[r * w..(r + 1) * w];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += hv * wv;
        }
    }
    let s = cfg.patch_size;
    Tensor::new(&[s, s, ch], out)
}

/// `o[ch] = Σ_{m,n} w[m,n,ch] · v[m,n,ch]` over the `s×s` patch of `v`
/// centred at `(i, j)`.
pub fn aggregate(w: &Tensor, v: &Tensor, i: usize, j: usize) -> Result<Vec<f64>> {
    let (s, s2, c) = hwc(w, "weights")?;
    let (_, _, vc) = hwc(v, "V")?;
    if s != s2 || c != vc || s % 2 == 0 {
        return Err(shape_err!("weights {:?} against V {:?}", w.shape(), v.shape()));
    }
    let vp = patch(v, i, j, s)?;
    let mut o = vec![0.0; c];
    for (idx, (&wv, &vv)) in w.data().iter().zip(&vp).enumerate() {
        o[idx % c] += wv * vv;
    }
    Ok(o)
}

fn single_images(inputs: AttnInputs<&Tensor>, mode: AttentionMode) -> Result<(Tensor, Tensor)> {
    let (r, p) = inputs.resolve(mode)?;
    if r.shape() != p.shape() {
        return Err(shape_err!(
            "reference {:?} and primary {:?} differ",
            r.shape(),
            p.shape()
        ));
    }
    Ok((r.clone(), p.clone()))
}

/// Applies the block to `h×w×c` or `N×h×w×c` inputs. Output has the primary
/// input's shape.
pub fn attention_block(inputs: AttnInputs<&Tensor>, params: &AttentionParams) -> Result<Tensor> {
    let (r, p) = single_images(inputs, params.config.mode)?;
    let mut g = Graph::inference();
    let bound = params.store.bind(&mut g, false);
    let block = AttentionBlock::new("", params.config);
    let pv = g.constant(batched(&p)?);
    let vars = if params.config.mode.is_reference() {
        let rv = g.constant(batched(&r)?);
        AttnInputs::Pair {
            reference: rv,
            primary: pv,
        }
    } else {
        AttnInputs::Single(pv)
    };
    let out = block.forward(&mut g, &bound, vars)?;
    unbatch_like(g.value(out).clone(), &p)
}

/// Aggregation weights `s×s×c` at `(i, j)` of a single `h×w×c` input (pair),
/// assembled per head from [`patch_concat`] and [`weight_mlp`].
pub fn attention_weights_at(
    params: &AttentionParams,
    inputs: AttnInputs<&Tensor>,
    i: usize,
    j: usize,
) -> Result<Tensor> {
    let cfg = params.config;
    if cfg.mode == AttentionMode::SoftmaxBaseline {
        return Err(contract_err!("softmax baseline has no patch weights"));
    }
    let (r, p) = single_images(inputs, cfg.mode)?;
    let (h, w, _) = hwc(&p, "input")?;
    check_position(h, w, i, j)?;
    let [ks, qs, _] = cfg.mode.sources();
    let (kr, qr, _) = kqv_project(&r, params)?;
    let (kp, qp, _) = kqv_project(&p, params)?;
    let k = if ks == Source::Primary { kp } else { kr };
    let q = if qs == Source::Primary { qp } else { qr };
    let (s, ch) = (cfg.patch_size, cfg.head_channels());
    let mut full = vec![0.0; s * s * cfg.channels];
    for head in 0..cfg.heads {
        let kh = k.narrow_last(head * ch, ch)?;
        let qh = q.narrow_last(head * ch, ch)?;
        let pv = patch_concat(&kh, &qh, i, j, s)?;
        let wh = weight_mlp(&pv, params, head)?;
        for pos in 0..s * s {
            full[pos * cfg.channels + head * ch..pos * cfg.channels + (head + 1) * ch]
                .copy_from_slice(&wh.data()[pos * ch..(pos + 1) * ch]);
        }
    }
    Tensor::new(&[s, s, cfg.channels], full)
}

/// Channel-wise L2 norm of an `s×s×c` weight tensor, scaled so that its
/// maximum is 1. An all-zero input gives an all-zero map.
pub fn normalized_norm_map(w: &Tensor) -> Result<Tensor> {
    let (s1, s2, c) = hwc(w, "weights")?;
    let norms: Vec<f64> = w
        .data()
        .chunks(c.max(1))
        .map(|ch| ch.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let data = if max > 0.0 {
        norms.iter().map(|v| v / max).collect()
    } else {
        norms
    };
    Tensor::new(&[s1, s2], data)
}

/// Normalized attention map at `(i, j)`: `s×s` weight norms for the patch
/// modes; for the softmax baseline the `h×w` attention probabilities of the
/// query at `(i, j)`, scaled to a maximum of 1.
pub fn attention_map(params: &AttentionParams, inputs: AttnInputs<&Tensor>, i: usize, j: usize) -> Result<Tensor> {
    if params.config.mode != AttentionMode::SoftmaxBaseline {
        let w = attention_weights_at(params, inputs, i, j)?;
        return normalized_norm_map(&w);
    }
    let (_, p) = single_images(inputs, params.config.mode)?;
    let (h, w, _) = hwc(&p, "input")?;
    check_position(h, w, i, j)?;
    let mut g = Graph::inference();
    let bound = params.store.bind(&mut g, false);
    let block = AttentionBlock::new("", params.config);
    let pv = g.constant(batched(&p)?);
    let (k, q, _) = block.kqv(&mut g, &bound, AttnInputs::Single(pv))?;
    let probs = block.softmax_probs(&mut g, k, q)?;
    let row = i * w + j;
    let vals = g.value(probs).data()[row * h * w..(row + 1) * h * w].to_vec();
    let max = vals.iter().cloned().fold(0.0, f64::max);
    Tensor::new(&[h, w], vals.iter().map(|v| v / max).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn default_heads_respect_width() {
        assert_eq!(default_heads(8, 7), 1);
        assert_eq!(default_heads(16, 7), 2);
        assert_eq!(default_heads(32, 7), 4);
        assert_eq!(default_heads(16, 3), 1);
    }

    #[test]
    fn param_count_matches_store() {
        for mode in AttentionMode::ALL {
            let cfg = AttentionConfig::new(8, 3, mode).with_heads(2);
            let p = AttentionParams::init(cfg, &mut rng(0)).unwrap();
            assert_eq!(p.param_count(), cfg.param_count(), "{mode}");
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(AttentionConfig::new(8, 4, AttentionMode::SelfAttention)
            .validate()
            .is_err());
        let cfg = AttentionConfig::new(8, 3, AttentionMode::SelfAttention).with_heads(3);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_projection_gives_zero_kqv() {
        let cfg = AttentionConfig::new(4, 3, AttentionMode::SelfAttention);
        let mut p = AttentionParams::init(cfg, &mut rng(1)).unwrap();
        for n in ["key", "query", "value"] {
            p.set(&format!("{n}.weight"), Tensor::zeros(&[4, 4])).unwrap();
        }
        let x = Tensor::randn(&[3, 3, 4], 1.0, &mut rng(2));
        let (k, q, v) = kqv_project(&x, &p).unwrap();
        for t in [k, q, v] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_projection_on_nonnegative_input() {
        let cfg = AttentionConfig::new(3, 3, AttentionMode::SelfAttention);
        let mut p = AttentionParams::init(cfg, &mut rng(1)).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        p.set("key.weight", Tensor::new(&[3, 3], eye).unwrap()).unwrap();
        let x = Tensor::uniform(&[2, 2, 3], 0.0, 1.0, &mut rng(3));
        let (k, _, _) = kqv_project(&x, &p).unwrap();
        assert_eq!(k, x);
    }

    #[test]
    fn channel_mismatch() {
        let cfg = AttentionConfig::new(4, 3, AttentionMode::SelfAttention);
        let p = AttentionParams::init(cfg, &mut rng(1)).unwrap();
        let x = Tensor::zeros(&[3, 3, 5]);
        assert!(matches!(kqv_project(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn patch_concat_length_and_border() {
        let k = Tensor::ones(&[4, 4, 8]);
        let q = Tensor::ones(&[4, 4, 8]);
        let p = patch_concat(&k, &q, 1, 2, 3).unwrap();
        assert_eq!(p.len(), 80);
        let p = patch_concat(&k, &q, 0, 0, 3).unwrap();
        let nonzero_slots = (0..9)
            .filter(|s| p[s * 8..(s + 1) * 8].iter().any(|&v| v != 0.0))
            .count();
        assert_eq!(nonzero_slots, 4);
        assert!(matches!(patch_concat(&k, &q, 4, 0, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn weight_mlp_bias_passthrough() {
        let cfg = AttentionConfig::new(2, 3, AttentionMode::SelfAttention);
        let mut p = AttentionParams::init(cfg, &mut rng(4)).unwrap();
        p.zero_weight_mlp();
        let input = vec![0.3; 20];
        let w = weight_mlp(&input, &p, 0).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
        p.set("head0.b2", Tensor::ones(&[18])).unwrap();
        let w = weight_mlp(&input, &p, 0).unwrap();
        assert_eq!(w.shape(), &[3, 3, 2]);
        assert!(w.data().iter().all(|&v| v == 1.0));
        assert!(matches!(weight_mlp(&input[..19], &p, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn aggregate_delta_and_zero() {
        let v = Tensor::randn(&[4, 5, 3], 1.0, &mut rng(5));
        let mut delta = vec![0.0; 27];
        for c in 0..3 {
            delta[4 * 3 + c] = 1.0;
        }
        let w = Tensor::new(&[3, 3, 3], delta).unwrap();
        let o = aggregate(&w, &v, 2, 3).unwrap();
        assert_eq!(o, v.data()[(2 * 5 + 3) * 3..(2 * 5 + 4) * 3].to_vec());
        let o = aggregate(&Tensor::zeros(&[3, 3, 3]), &v, 0, 0).unwrap();
        assert_eq!(o, vec![0.0; 3]);
        assert!(aggregate(&Tensor::zeros(&[3, 3, 2]), &v, 0, 0).is_err());
    }

    #[test]
    fn residual_identity_when_mlp_is_zero() {
        let x = Tensor::randn(&[4, 4, 8], 1.0, &mut rng(6));
        let r = Tensor::randn(&[4, 4, 8], 1.0, &mut rng(7));
        let cfg = AttentionConfig::new(8, 3, AttentionMode::SelfAttention).with_heads(2);
        let mut p = AttentionParams::init(cfg, &mut rng(8)).unwrap();
        p.zero_weight_mlp();
        assert_eq!(attention_block(AttnInputs::Single(&x), &p).unwrap(), x);

        let cfg = AttentionConfig::new(8, 3, AttentionMode::RefKeyQuery);
        let mut p = AttentionParams::init(cfg, &mut rng(8)).unwrap();
        p.zero_weight_mlp();
        let out = attention_block(
            AttnInputs::Pair {
                reference: &r,
                primary: &x,
            },
            &p,
        )
        .unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn arity_and_shape_errors() {
        let x = Tensor::zeros(&[4, 4, 8]);
        let y = Tensor::zeros(&[2, 4, 8]);
        let cfg = AttentionConfig::new(8, 3, AttentionMode::RefKeyQuery);
        let p = AttentionParams::init(cfg, &mut rng(0)).unwrap();
        assert!(matches!(
            attention_block(AttnInputs::Single(&x), &p),
            Err(Error::Contract(_))
        ));
        let pair = AttnInputs::Pair {
            reference: &y,
            primary: &x,
        };
        assert!(matches!(attention_block(pair, &p), Err(Error::Shape(_))));
        let cfg = AttentionConfig::new(8, 3, AttentionMode::SelfAttention);
        let p = AttentionParams::init(cfg, &mut rng(0)).unwrap();
        let pair = AttnInputs::Pair {
            reference: &x,
            primary: &x,
        };
        assert!(matches!(attention_block(pair, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_baseline_starts_as_identity() {
        let x = Tensor::randn(&[3, 3, 4], 1.0, &mut rng(9));
        let cfg = AttentionConfig::new(4, 3, AttentionMode::SoftmaxBaseline);
        let mut p = AttentionParams::init(cfg, &mut rng(10)).unwrap();
        assert_eq!(attention_block(AttnInputs::Single(&x), &p).unwrap(), x);
        p.set("gain", Tensor::from_slice(&[0.5]).unwrap()).unwrap();
        assert_ne!(attention_block(AttnInputs::Single(&x), &p).unwrap(), x);
        let map = attention_map(&p, AttnInputs::Single(&x), 1, 1).unwrap();
        assert_eq!(map.shape(), &[3, 3]);
        assert_eq!(map.data().iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn norm_maps() {
        let mut d = vec![0.0; 27];
        d[4 * 3] = 2.0;
        let m = normalized_norm_map(&Tensor::new(&[3, 3, 3], d).unwrap()).unwrap();
        let mut want = vec![0.0; 9];
        want[4] = 1.0;
        assert_eq!(m.data(), &want[..]);
        let m = normalized_norm_map(&Tensor::full(&[3, 3, 2], -0.7)).unwrap();
        assert!(m.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let m = normalized_norm_map(&Tensor::zeros(&[3, 3, 2])).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }
}
