//! Generator and discriminator networks.
//!
//! The convolutional pair is a plain stack: the generator maps a latent
//! vector to a 4×4 feature map and alternates nearest-neighbour upsampling
//! with 3×3 convolutions up to the image size; the discriminator mirrors it
//! with 3×3 convolutions and average pooling down to 4×4, followed by a
//! dense feature layer and a dense logit. An attention block can be
//! inserted after the convolution at any visited resolution. When the
//! discriminator's attention uses a reference mode it becomes a Siamese
//! network: primary and reference images run through the same trunk
//! parameters and fuse in the attention block.
//!
//! The MLP pair is used for low-dimensional point data.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{default_heads, AttentionBlock, AttentionConfig, AttentionMode, AttnInputs};
use crate::autograd::{Graph, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{Bound, Conv2d, Dense, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Smallest feature-map side of the convolutional networks.
pub const BASE_RESOLUTION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Conv,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnPlacement {
    pub resolution: usize,
    pub mode: AttentionMode,
    pub patch_size: usize,
    /// `None` picks the default head count for the channel width.
    pub heads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub arch: Arch,
    pub latent_dim: usize,
    pub image_size: usize,
    pub image_channels: usize,
    /// Channel width at full resolution; doubles at every halving.
    pub base_channels: usize,
    pub max_channels: usize,
    pub feature_dim: usize,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub data_dim: usize,
    pub g_attn: Option<AttnPlacement>,
    pub d_attn: Option<AttnPlacement>,
    /// Side length at which the Siamese branches fuse.
    pub ref_fusion_resolution: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Conv,
            latent_dim: 64,
            image_size: 32,
            image_channels: 3,
            base_channels: 8,
            max_channels: 64,
            feature_dim: 64,
            mlp_hidden: 128,
            mlp_layers: 3,
            data_dim: 2,
            g_attn: None,
            d_attn: None,
            ref_fusion_resolution: 4,
        }
    }
}

impl NetworkConfig {
    pub fn channels_at(&self, resolution: usize) -> usize {
        (self.base_channels * self.image_size / resolution).min(self.max_channels)
    }

    /// Resolutions visited by the convolutional stacks, smallest first.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut r = BASE_RESOLUTION;
        let mut out = Vec::new();
        while r <= self.image_size {
            out.push(r);
            r *= 2;
        }
        out
    }

    /// Whether the discriminator takes (primary, reference) pairs.
    pub fn is_siamese(&self) -> bool {
        self.d_attn.is_some_and(|a| a.mode.is_reference())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 {
            return err("net.latent_dim must be positive".into());
        }
        match self.arch {
            Arch::Mlp => {
                if self.g_attn.is_some() || self.d_attn.is_some() {
                    return err("attention needs the convolutional networks".into());
                }
                if self.mlp_hidden == 0 || self.mlp_layers == 0 || self.data_dim == 0 {
                    return err("MLP widths and depth must be positive".into());
                }
            }
            Arch::Conv => {
                if !self.image_size.is_power_of_two() || self.image_size < BASE_RESOLUTION {
                    return err(format!(
                        "image size {} must be a power of two ≥ {BASE_RESOLUTION}",
                        self.image_size
                    ));
                }
                if self.base_channels == 0 || self.image_channels == 0 || self.feature_dim == 0 {
                    return err("channel counts must be positive".into());
                }
                let visited = self.resolutions();
                for (who, a) in [("g", self.g_attn), ("d", self.d_attn)] {
                    let Some(a) = a else { continue };
                    if a.mode.is_reference() && who == "g" {
                        return err("generator attention cannot use a reference mode".into());
                    }
                    let res = if who == "d" && a.mode.is_reference() {
                        self.ref_fusion_resolution
                    } else {
                        a.resolution
                    };
                    if !visited.contains(&res) {
                        return err(format!(
                            "net.{who}.attn resolution {res} is not visited (have {visited:?})"
                        ));
                    }
                    if a.patch_size % 2 == 0 {
                        return err(format!("net.{who}.attn.patch_size must be odd"));
                    }
                }
            }
        }
        Ok(())
    }

    fn attention_config(&self, a: AttnPlacement, channels: usize) -> Result<AttentionConfig> {
        let cfg = AttentionConfig {
            channels,
            patch_size: a.patch_size,
            heads: a.heads.unwrap_or_else(|| default_heads(channels, a.patch_size)),
            mode: a.mode,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// `z ~ N(0, I_d)` for a batch of `n`.
pub fn sample_latent<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Tensor {
    let data = (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(&[n, dim], data).expect("normal samples are finite")
}

#[derive(Clone, Debug)]
enum GenBody {
    Conv {
        fc: Dense,
        convs: Vec<(usize, Conv2d)>,
        to_rgb: Conv2d,
    },
    Mlp {
        layers: Vec<Dense>,
        out: Dense,
    },
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: NetworkConfig,
    body: GenBody,
    attn: Option<(usize, AttentionBlock)>,
}

impl Generator {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (body, attn) = match c.arch {
            Arch::Mlp => {
                let mut layers = vec![Dense::new("g.fc0", c.latent_dim, c.mlp_hidden)];
                for i in 1..c.mlp_layers {
                    layers.push(Dense::new(format!("g.fc{i}"), c.mlp_hidden, c.mlp_hidden));
                }
                let out = Dense::new("g.out", c.mlp_hidden, c.data_dim);
                (GenBody::Mlp { layers, out }, None)
            }
            Arch::Conv => {
                let c4 = c.channels_at(BASE_RESOLUTION);
                let fc = Dense::new("g.fc", c.latent_dim, BASE_RESOLUTION * BASE_RESOLUTION * c4);
                let convs = c
                    .resolutions()
                    .into_iter()
                    .map(|r| {
                        let cin = if r == BASE_RESOLUTION { c4 } else { c.channels_at(r / 2) };
                        (r, Conv2d::new(format!("g.conv{r}"), 3, cin, c.channels_at(r)))
                    })
                    .collect();
                let to_rgb = Conv2d::new("g.to_rgb", 1, c.channels_at(c.image_size), c.image_channels);
                let attn = match c.g_attn {
                    Some(a) => {
                        let cfg = c.attention_config(a, c.channels_at(a.resolution))?;
                        Some((a.resolution, AttentionBlock::new("g.attn.", cfg)))
                    }
                    None => None,
                };
                (GenBody::Conv { fc, convs, to_rgb }, attn)
            }
        };
        Ok(Self {
            config: config.clone(),
            body,
            attn,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn attention(&self) -> Option<&AttentionBlock> {
        self.attn.as_ref().map(|(_, b)| b)
    }

    pub fn attention_resolution(&self) -> Option<usize> {
        self.attn.as_ref().map(|(r, _)| *r)
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut s = ParamStore::new();
        match &self.body {
            GenBody::Mlp { layers, out } => {
                layers.iter().for_each(|l| l.init(&mut s, rng));
                out.init(&mut s, rng);
            }
            GenBody::Conv { fc, convs, to_rgb } => {
                fc.init(&mut s, rng);
                convs.iter().for_each(|(_, l)| l.init(&mut s, rng));
                to_rgb.init(&mut s, rng);
            }
        }
        if let Some((_, b)) = &self.attn {
            b.init(&mut s, rng);
        }
        s
    }

    pub fn param_count(&self) -> usize {
        let body = match &self.body {
            GenBody::Mlp { layers, out } => layers.iter().map(Dense::param_count).sum::<usize>() + out.param_count(),
            GenBody::Conv { fc, convs, to_rgb } => {
                fc.param_count() + convs.iter().map(|(_, l)| l.param_count()).sum::<usize>() + to_rgb.param_count()
            }
        };
        body + self.attn.as_ref().map_or(0, |(_, b)| b.param_count())
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        Ok(self.forward_tapped(g, p, z)?.0)
    }

    /// Output plus the feature map entering the attention block, if any.
    pub fn forward_tapped(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<(Var, Option<Var>)> {
        let n = match *g.shape(z) {
            [n, d] if d == self.config.latent_dim => n,
            ref s => {
                return Err(shape_err!(
                    "latent batch must be N×{}, got {s:?}",
                    self.config.latent_dim
                ))
            }
        };
        match &self.body {
            GenBody::Mlp { layers, out } => {
                let mut h = z;
                for l in layers {
                    h = l.forward(g, p, h)?;
                    h = g.leaky_relu(h, LEAKY_SLOPE)?;
                }
                Ok((out.forward(g, p, h)?, None))
            }
            GenBody::Conv { fc, convs, to_rgb } => {
                let c4 = self.config.channels_at(BASE_RESOLUTION);
                let mut h = fc.forward(g, p, z)?;
                h = g.reshape(h, &[n, BASE_RESOLUTION, BASE_RESOLUTION, c4])?;
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
                let mut tap = None;
                for (r, conv) in convs {
                    if *r > BASE_RESOLUTION {
                        h = g.upsample2(h)?;
                    }
                    h = conv.forward(g, p, h)?;
                    h = g.leaky_relu(h, LEAKY_SLOPE)?;
                    if let Some((ar, block)) = &self.attn {
                        if ar == r {
                            tap = Some(h);
                            h = block.forward(g, p, AttnInputs::Single(h))?;
                        }
                    }
                }
                let img = to_rgb.forward(g, p, h)?;
                Ok((g.tanh(img)?, tap))
            }
        }
    }

    /// Runs the generator without gradient tracking.
    pub fn generate(&self, params: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &p, zv)?;
        Ok(g.value(out).clone())
    }

    /// Images and the attention block's input feature map.
    pub fn generate_tapped(&self, params: &ParamStore, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let (out, tap) = self.forward_tapped(&mut g, &p, zv)?;
        let tap = tap.ok_or_else(|| contract_err!("generator has no attention block"))?;
        Ok((g.value(out).clone(), g.value(tap).clone()))
    }
}

#[derive(Clone, Debug)]
enum DiscBody {
    Conv {
        from_rgb: Conv2d,
        convs: Vec<(usize, Conv2d)>,
        fc: Dense,
    },
    Mlp {
        layers: Vec<Dense>,
    },
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: NetworkConfig,
    body: DiscBody,
    out: Dense,
    attn: Option<(usize, AttentionBlock)>,
}

impl Discriminator {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (body, out, attn) = match c.arch {
            Arch::Mlp => {
                let mut layers = vec![Dense::new("d.fc0", c.data_dim, c.mlp_hidden)];
                for i in 1..c.mlp_layers {
                    layers.push(Dense::new(format!("d.fc{i}"), c.mlp_hidden, c.mlp_hidden));
                }
                (DiscBody::Mlp { layers }, Dense::new("d.out", c.mlp_hidden, 1), None)
            }
            Arch::Conv => {
                let from_rgb = Conv2d::new("d.from_rgb", 1, c.image_channels, c.channels_at(c.image_size));
                let convs: Vec<(usize, Conv2d)> = c
                    .resolutions()
                    .into_iter()
                    .rev()
                    .map(|r| {
                        let cout = Self::out_channels(c, r);
                        (r, Conv2d::new(format!("d.conv{r}"), 3, c.channels_at(r), cout))
                    })
                    .collect();
                let c4 = c.channels_at(BASE_RESOLUTION);
                let fc = Dense::new("d.fc", BASE_RESOLUTION * BASE_RESOLUTION * c4, c.feature_dim);
                let attn = match c.d_attn {
                    Some(a) => {
                        let r = if a.mode.is_reference() {
                            c.ref_fusion_resolution
                        } else {
                            a.resolution
                        };
                        let cfg = c.attention_config(a, Self::out_channels(c, r))?;
                        Some((r, AttentionBlock::new("d.attn.", cfg)))
                    }
                    None => None,
                };
                (
                    DiscBody::Conv { from_rgb, convs, fc },
                    Dense::new("d.out", c.feature_dim, 1),
                    attn,
                )
            }
        };
        Ok(Self {
            config: config.clone(),
            body,
            out,
            attn,
        })
    }

    /// Channels produced by the convolution at resolution `r`.
    fn out_channels(c: &NetworkConfig, r: usize) -> usize {
        if r > BASE_RESOLUTION {
            c.channels_at(r / 2)
        } else {
            c.channels_at(BASE_RESOLUTION)
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn is_siamese(&self) -> bool {
        self.attn.as_ref().is_some_and(|(_, b)| b.config.mode.is_reference())
    }

    pub fn attention(&self) -> Option<&AttentionBlock> {
        self.attn.as_ref().map(|(_, b)| b)
    }

    pub fn feature_dim(&self) -> usize {
        match self.config.arch {
            Arch::Conv => self.config.feature_dim,
            Arch::Mlp => self.config.mlp_hidden,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut s = ParamStore::new();
        match &self.body {
            DiscBody::Mlp { layers } => layers.iter().for_each(|l| l.init(&mut s, rng)),
            DiscBody::Conv { from_rgb, convs, fc } => {
                from_rgb.init(&mut s, rng);
                convs.iter().for_each(|(_, l)| l.init(&mut s, rng));
                fc.init(&mut s, rng);
            }
        }
        self.out.init(&mut s, rng);
        if let Some((_, b)) = &self.attn {
            b.init(&mut s, rng);
        }
        s
    }

    pub fn param_count(&self) -> usize {
        let body = match &self.body {
            DiscBody::Mlp { layers } => layers.iter().map(Dense::param_count).sum::<usize>(),
            DiscBody::Conv { from_rgb, convs, fc } => {
                from_rgb.param_count() + convs.iter().map(|(_, l)| l.param_count()).sum::<usize>() + fc.param_count()
            }
        };
        body + self.out.param_count() + self.attn.as_ref().map_or(0, |(_, b)| b.param_count())
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<usize> {
        let c = &self.config;
        match (c.arch, g.shape(x)) {
            (Arch::Mlp, &[n, d]) if d == c.data_dim => Ok(n),
            (Arch::Conv, &[n, h, w, ch]) if h == c.image_size && w == c.image_size && ch == c.image_channels => Ok(n),
            (_, s) => Err(shape_err!("discriminator input {s:?} does not match config")),
        }
    }

    /// Runs layers up to and including the convolution at `until` (the
    /// attention insertion point).
    fn trunk(&self, g: &mut Graph, p: &Bound, x: Var, until: usize) -> Result<Var> {
        let DiscBody::Conv { from_rgb, convs, .. } = &self.body else {
            unreachable!("trunk is only used by the convolutional discriminator")
        };
        let mut h = from_rgb.forward(g, p, x)?;
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
        for (r, conv) in convs {
            if *r < until {
                break;
            }
            if *r < self.config.image_size {
                h = g.avg_pool2(h)?;
            }
            h = conv.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        Ok(h)
    }

    /// Continues from the output of the convolution at `from`.
    fn rest(&self, g: &mut Graph, p: &Bound, mut h: Var, from: usize) -> Result<(Var, Var)> {
        let DiscBody::Conv { convs, fc, .. } = &self.body else {
            unreachable!("rest is only used by the convolutional discriminator")
        };
        for (r, conv) in convs {
            if *r >= from {
                continue;
            }
            h = g.avg_pool2(h)?;
            h = conv.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let n = g.shape(h)[0];
        let flat = g.value(h).numel() / n.max(1);
        let h = g.reshape(h, &[n, flat])?;
        let f = fc.forward(g, p, h)?;
        let f = g.leaky_relu(f, LEAKY_SLOPE)?;
        let logit = self.out.forward(g, p, f)?;
        Ok((g.reshape(logit, &[n])?, f))
    }

    /// Logits (`N`) and last-layer features (`N×f`). `reference` must be
    /// given exactly when the discriminator is Siamese.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, reference: Option<Var>) -> Result<(Var, Var)> {
        let n = self.check_input(g, x)?;
        if let Some(r) = reference {
            if g.shape(r) != g.shape(x) {
                return Err(shape_err!(
                    "reference {:?} and primary {:?} differ",
                    g.shape(r),
                    g.shape(x)
                ));
            }
        }
        match (&self.body, self.is_siamese(), reference) {
            (_, true, None) => Err(contract_err!("Siamese discriminator needs reference images")),
            (_, false, Some(_)) => Err(contract_err!("discriminator takes no reference images")),
            (DiscBody::Mlp { layers }, _, None) => {
                let mut h = x;
                for l in layers {
                    h = l.forward(g, p, h)?;
                    h = g.leaky_relu(h, LEAKY_SLOPE)?;
                }
                let logit = self.out.forward(g, p, h)?;
                Ok((g.reshape(logit, &[n])?, h))
            }
            (DiscBody::Conv { .. }, false, None) => {
                let at = self.attn.as_ref().map_or(BASE_RESOLUTION, |(r, _)| *r);
                let mut t = self.trunk(g, p, x, at)?;
                if let Some((_, block)) = &self.attn {
                    t = block.forward(g, p, AttnInputs::Single(t))?;
                }
                self.rest(g, p, t, at)
            }
            (DiscBody::Conv { .. }, true, Some(reference)) => {
                let (at, block) = self.attn.as_ref().expect("Siamese discriminator has attention");
                let primary = self.trunk(g, p, x, *at)?;
                let reference = self.trunk(g, p, reference, *at)?;
                let fused = block.forward(g, p, AttnInputs::Pair { reference, primary })?;
                self.rest(g, p, fused, *at)
            }
            (DiscBody::Mlp { .. }, true, Some(_)) => unreachable!("MLP discriminators have no attention"),
        }
    }

    /// Output of the shared trunk for one branch (Siamese encoders).
    pub fn encode(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if self.config.arch != Arch::Conv {
            return Err(contract_err!("only the convolutional discriminator has a trunk"));
        }
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        self.check_input(&g, xv)?;
        let at = self.attn.as_ref().map_or(BASE_RESOLUTION, |(r, _)| *r);
        let t = self.trunk(&mut g, &p, xv, at)?;
        Ok(g.value(t).clone())
    }

    /// Logits and features without gradient tracking.
    pub fn evaluate(&self, params: &ParamStore, x: &Tensor, reference: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let p = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let rv = reference.map(|r| g.constant(r.clone()));
        let (l, f) = self.forward(&mut g, &p, xv, rv)?;
        Ok((g.value(l).clone(), g.value(f).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetworkConfig {
        NetworkConfig {
            latent_dim: 8,
            image_size: 16,
            base_channels: 2,
            max_channels: 8,
            feature_dim: 6,
            ..NetworkConfig::default()
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn generator_shape_and_range() {
        let cfg = NetworkConfig {
            latent_dim: 16,
            ..NetworkConfig::default()
        };
        let gen = Generator::new(&cfg).unwrap();
        let params = gen.init(&mut rng(0));
        assert_eq!(params.count(), gen.param_count());
        let z = sample_latent(2, 16, &mut rng(1));
        let img = gen.generate(&params, &z).unwrap();
        assert_eq!(img.shape(), &[2, 32, 32, 3]);
        assert!(img.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zero_generator_outputs_zero() {
        let gen = Generator::new(&small()).unwrap();
        let params = gen.init(&mut rng(0)).map_values(|_, t| Tensor::zeros(t.shape()));
        let img = gen.generate(&params, &sample_latent(3, 8, &mut rng(2))).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_mismatch_is_shape_error() {
        let gen = Generator::new(&small()).unwrap();
        let params = gen.init(&mut rng(0));
        assert!(matches!(
            gen.generate(&params, &Tensor::zeros(&[2, 7])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn discriminator_outputs() {
        let d = Discriminator::new(&small()).unwrap();
        let params = d.init(&mut rng(3));
        assert_eq!(params.count(), d.param_count());
        let x = Tensor::randn(&[4, 16, 16, 3], 0.5, &mut rng(4));
        let (l, f) = d.evaluate(&params, &x, None).unwrap();
        assert_eq!(l.shape(), &[4]);
        assert_eq!(f.shape(), &[4, 6]);

        let mut zeroed = params.map_values(|_, t| Tensor::zeros(t.shape()));
        zeroed.insert("d.out.bias", Tensor::from_slice(&[0.25]).unwrap());
        let (l, _) = d.evaluate(&zeroed, &x, None).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.25));

        let perm = [2, 0, 3, 1];
        let (lp, _) = d.evaluate(&params, &x.gather_first(&perm).unwrap(), None).unwrap();
        let (l, _) = d.evaluate(&params, &x, None).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(lp.data()[k], l.data()[i]);
        }
        assert!(d.evaluate(&params, &Tensor::zeros(&[1, 8, 8, 3]), None).is_err());
    }

    #[test]
    fn mlp_pair() {
        let cfg = NetworkConfig {
            arch: Arch::Mlp,
            latent_dim: 4,
            mlp_hidden: 16,
            mlp_layers: 2,
            ..NetworkConfig::default()
        };
        let gen = Generator::new(&cfg).unwrap();
        let d = Discriminator::new(&cfg).unwrap();
        let gp = gen.init(&mut rng(0));
        let dp = d.init(&mut rng(1));
        let pts = gen.generate(&gp, &sample_latent(5, 4, &mut rng(2))).unwrap();
        assert_eq!(pts.shape(), &[5, 2]);
        let (l, f) = d.evaluate(&dp, &pts, None).unwrap();
        assert_eq!((l.shape(), f.shape()), (&[5][..], &[5, 16][..]));
    }

    #[test]
    fn attention_placement_must_be_visited() {
        let mut cfg = small();
        cfg.g_attn = Some(AttnPlacement {
            resolution: 64,
            mode: AttentionMode::SelfAttention,
            patch_size: 3,
            heads: None,
        });
        assert!(matches!(Generator::new(&cfg), Err(Error::Config(_))));
        cfg.g_attn = Some(AttnPlacement {
            resolution: 8,
            mode: AttentionMode::RefKeyQuery,
            patch_size: 3,
            heads: None,
        });
        assert!(matches!(Generator::new(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn siamese_requires_reference() {
        let mut cfg = small();
        cfg.d_attn = Some(AttnPlacement {
            resolution: 4,
            mode: AttentionMode::RefKeyQuery,
            patch_size: 3,
            heads: None,
        });
        let d = Discriminator::new(&cfg).unwrap();
        assert!(d.is_siamese());
        let params = d.init(&mut rng(0));
        let x = Tensor::zeros(&[2, 16, 16, 3]);
        assert!(matches!(d.evaluate(&params, &x, None), Err(Error::Contract(_))));
        let bad = Tensor::zeros(&[3, 16, 16, 3]);
        assert!(matches!(d.evaluate(&params, &x, Some(&bad)), Err(Error::Shape(_))));
        let (l, _) = d.evaluate(&params, &x, Some(&x)).unwrap();
        assert!(l.is_finite());
    }
}
