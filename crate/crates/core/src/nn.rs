//! Named parameter storage, the basic layers shared by every network, and
//! the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::tensor::Tensor;

/// Leaky ReLU slope used throughout.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Ordered map of parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| contract_err!("missing parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn scoped(&self, prefix: &str) -> ParamStore {
        let map = self
            .map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamStore { map }
    }

    /// Entries whose name starts with `prefix`, names unchanged.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let map = self
            .map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { map }
    }

    /// Inserts every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.map {
            self.map.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn map_values(&self, f: impl Fn(&str, &Tensor) -> Tensor) -> ParamStore {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), f(k, v))).collect(),
        }
    }

    /// Registers every parameter as a graph leaf; `trainable` decides whether
    /// they receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let map = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { map }
    }
}

/// Parameters bound into a particular graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    map: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds names to existing graph variables.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| contract_err!("parameter {name:?} not bound"))
    }

    /// Collects the gradients of the bound parameters by name.
    pub fn gradients(&self, grads: &Gradients, g: &Graph) -> BTreeMap<String, Tensor> {
        self.map
            .iter()
            .map(|(k, &v)| {
                let t = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (k.clone(), t)
            })
            .collect()
    }
}

/// `x + b` with `b` broadcast along every axis but the last.
pub fn add_bias(g: &mut Graph, x: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = *shape.last().ok_or_else(|| shape_err!("bias on scalar"))?;
    if g.shape(b) != [c] {
        return Err(shape_err!("bias {:?} for input {:?}", g.shape(b), shape));
    }
    let rows = g.value(x).numel() / c.max(1);
    let tiled = g.expand_axis(b, 0, rows)?;
    let tiled = g.reshape(tiled, &shape)?;
    g.add(x, tiled)
}

/// Same-padded stride-1 convolution of an `N×H×W×Cin` tensor with a
/// `(k·k·Cin)×Cout` kernel matrix.
pub fn conv2d(g: &mut Graph, x: Var, weight: Var, bias: Var, k: usize) -> Result<Var> {
    let (n, h, w, cin) = match *g.shape(x) {
        [n, h, w, c] => (n, h, w, c),
        ref s => return Err(shape_err!("conv2d input must be N×H×W×C, got {s:?}")),
    };
    let wshape = g.shape(weight).to_vec();
    if wshape.len() != 2 || wshape[0] != k * k * cin {
        return Err(shape_err!("conv2d kernel {wshape:?} for {cin} channels, k={k}"));
    }
    let cols = if k == 1 {
        g.reshape(x, &[n * h * w, cin])?
    } else {
        g.im2col(x, k)?
    };
    let y = g.matmul(cols, weight)?;
    let y = add_bias(g, y, bias)?;
    g.reshape(y, &[n, h, w, wshape[1]])
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, k: usize, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            k,
            cin,
            cout,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let fan_in = self.k * self.k * self.cin;
        store.insert(
            format!("{}.weight", self.name),
            Tensor::randn(&[fan_in, self.cout], he_std(fan_in), rng),
        );
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        conv2d(g, x, w, b, self.k)
    }

    pub fn param_count(&self) -> usize {
        self.k * self.k * self.cin * self.cout + self.cout
    }
}

/// Fully connected layer on `N×din` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(
            format!("{}.weight", self.name),
            Tensor::randn(&[self.din, self.dout], he_std(self.din), rng),
        );
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.dout]));
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        let y = g.matmul(x, w)?;
        add_bias(g, y, b)
    }

    pub fn param_count(&self) -> usize {
        self.din * self.dout + self.dout
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let p = params.get(name)?;
            if p.shape() != grad.shape() {
                return Err(shape_err!(
                    "gradient {:?} for parameter {name} {:?}",
                    grad.shape(),
                    p.shape()
                ));
            }
            let n = p.numel();
            let m_prev = self.m.get(name).map(Tensor::to_vec).unwrap_or_else(|_| vec![0.0; n]);
            let v_prev = self.v.get(name).map(Tensor::to_vec).unwrap_or_else(|_| vec![0.0; n]);
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let gi = grad.data()[i];
                let mi = self.beta1 * m_prev[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v_prev[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                out.push(p.data()[i] - update);
                m.push(mi);
                v.push(vi);
            }
            let shape = p.shape().to_vec();
            params.insert(name.clone(), Tensor::new(&shape, out)?);
            self.m.insert(name.clone(), Tensor::new(&shape, m)?);
            self.v.insert(name.clone(), Tensor::new(&shape, v)?);
        }
        Ok(())
    }

    /// Moment estimates and step counter as named tensors.
    pub fn state(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.extend_prefixed("m.", &self.m);
        s.extend_prefixed("v.", &self.v);
        s.insert("t", Tensor::scalar(self.t as f64));
        s
    }

    pub fn load_state(&mut self, state: &ParamStore) -> Result<()> {
        self.m = state.scoped("m.");
        self.v = state.scoped("v.");
        self.t = state.get("t")?.item()? as u64;
        Ok(())
    }
}
