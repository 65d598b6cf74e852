//! Parameter storage, layers, and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by name and are bound onto a
//! [`Tape`] per step, either as differentiable leaves or as frozen
//! constants. Layer structs hold names and hyperparameters only, so a model
//! is its store plus a forward function.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::arrayio::{ArrayIoError, Container};
use crate::autodiff::{Tape, Var};

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name:?}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &self.values[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &mut self.values[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Bind every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Bind every parameter as a frozen constant.
    pub fn bind_frozen(&self, tape: &Tape) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Sha256 over names and value bits; detects any parameter change.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.names.iter().zip(self.values.iter()) {
            h.update(name.as_bytes());
            for &x in value.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), ArrayIoError> {
        let mut c = Container::new();
        self.save_into(&mut c);
        c.write(path)
    }

    pub fn save_into(&self, c: &mut Container) {
        // numbered prefix keeps registration order across the sorted container
        for (i, (name, value)) in self.names.iter().zip(self.values.iter()).enumerate() {
            c.insert_f64(&format!("param.{i:05}.{name}"), value.clone());
        }
    }

    pub fn load(path: &Path) -> Result<Self, ArrayIoError> {
        let c = Container::read(path)?;
        Self::load_from(path, &c)
    }

    pub fn load_from(path: &Path, c: &Container) -> Result<Self, ArrayIoError> {
        let mut store = Self::new();
        for name in c.names() {
            if let Some(rest) = name.strip_prefix("param.") {
                let bare = rest
                    .split_once('.')
                    .map(|(_, n)| n.to_string())
                    .unwrap_or_else(|| rest.to_string());
                let arr = c.f64(path, name)?.clone();
                store.insert(&bare, arr);
            }
        }
        Ok(store)
    }
}

/// Parameter vars bound to one tape.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown bound parameter {name:?}"));
        self.vars[i]
    }
}

// ----------------------------------------------------------------- adam

/// Adam with bias correction and optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the whole store. `grads[i]` pairs with parameter `i`
    /// in registration order; `None` leaves that parameter untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f64>>]) {
        assert_eq!(grads.len(), store.values.len());
        if self.m.is_empty() {
            self.m = store
                .values
                .iter()
                .map(|p| ArrayD::zeros(p.raw_dim()))
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let scale = if let Some(max_norm) = self.clip_norm {
            let total: f64 = grads
                .iter()
                .flatten()
                .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                .sum();
            let norm = total.sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let g = if scale != 1.0 {
                g.mapv(|x| x * scale)
            } else {
                g.clone()
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(&g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let p = &mut store.values[i];
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    pub fn save_into(&self, c: &mut Container) {
        c.insert_i64("adam.step", ndarray::arr0(self.step as i64));
        for (i, (m, v)) in self.m.iter().zip(self.v.iter()).enumerate() {
            c.insert_f64(&format!("adam.m.{i}"), m.clone());
            c.insert_f64(&format!("adam.v.{i}"), v.clone());
        }
    }

    pub fn load_from(&mut self, path: &Path, c: &Container, n_params: usize) -> Result<(), ArrayIoError> {
        self.step = c.i64(path, "adam.step")?[IxDyn(&[])] as u64;
        self.m.clear();
        self.v.clear();
        for i in 0..n_params {
            self.m.push(c.f64(path, &format!("adam.m.{i}"))?.clone());
            self.v.push(c.f64(path, &format!("adam.v.{i}"))?.clone());
        }
        Ok(())
    }
}

/// Collect per-parameter gradients for a bound store after backward.
pub fn collect_grads(
    bound: &Bound,
    store: &ParamStore,
    grads: &crate::autodiff::Gradients,
) -> Vec<Option<ArrayD<f64>>> {
    store
        .names
        .iter()
        .map(|name| grads.get(bound.var(name)).cloned())
        .collect()
}

// ---------------------------------------------------------------- layers

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller from two uniforms keeps the draw count per element fixed.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// 3x3-style convolution layer: weight `{name}.w`, bias `{name}.b`.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w = kaiming(&[cout, cin, k, k], cin * k * k, rng);
        store.insert(&format!("{name}.w"), w);
        store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Self {
            name: name.to_string(),
            stride,
            pad,
        }
    }

    /// All-zero weights and bias; the layer outputs exactly zero until
    /// trained.
    #[allow(clippy::too_many_arguments)]
    pub fn init_zero(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        store.insert(&format!("{name}.w"), ArrayD::zeros(IxDyn(&[cout, cin, k, k])));
        store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Self {
            name: name.to_string(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var) -> Var {
        let y = t.conv2d(x, p.var(&format!("{}.w", self.name)), self.stride, self.pad);
        t.add_chan_bias(y, p.var(&format!("{}.b", self.name)))
    }
}

/// Dense layer: `x (T, in) -> x W + b`, weight `(in, out)`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
}

impl LinearLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        store.insert(&format!("{name}.w"), kaiming(&[cin, cout], cin, rng));
        store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Self {
            name: name.to_string(),
        }
    }

    pub fn init_zero(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        store.insert(&format!("{name}.w"), ArrayD::zeros(IxDyn(&[cin, cout])));
        store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Self {
            name: name.to_string(),
        }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var) -> Var {
        let y = t.matmul(x, p.var(&format!("{}.w", self.name)));
        t.add_last_bias(y, p.var(&format!("{}.b", self.name)))
    }
}

/// Group normalization over NCHW with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNormLayer {
    pub name: String,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormLayer {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        store.insert(&format!("{name}.g"), ArrayD::from_elem(IxDyn(&[channels]), 1.0));
        store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[channels])));
        Self {
            name: name.to_string(),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var) -> Var {
        let shape = t.shape(x);
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        debug_assert_eq!(c % self.groups, 0);
        let per = c / self.groups * h * w;
        let grouped = t.reshape(x, &[b, self.groups, per]);
        let mean = t.mean_last(grouped);
        let centered = t.sub(grouped, t.broadcast_last(mean, per));
        let var = t.mean_last(t.mul(centered, centered));
        // rsqrt(var + eps) via exp(-0.5 ln(var + eps))
        let rstd = t.exp(t.scale(t.ln(t.add_scalar(var, self.eps)), -0.5));
        let normed = t.mul(centered, t.broadcast_last(rstd, per));
        let back = t.reshape(normed, &[b, c, h, w]);
        let scaled = t.mul_chan(back, p.var(&format!("{}.g", self.name)));
        t.add_chan_bias(scaled, p.var(&format!("{}.b", self.name)))
    }
}

/// Layer norm over the last axis with affine.
#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub name: String,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        store.insert(&format!("{name}.g"), ArrayD::from_elem(IxDyn(&[dim]), 1.0));
        store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[dim])));
        Self {
            name: name.to_string(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var) -> Var {
        let shape = t.shape(x);
        let c = *shape.last().unwrap();
        let mean = t.mean_last(x);
        let centered = t.sub(x, t.broadcast_last(mean, c));
        let var = t.mean_last(t.mul(centered, centered));
        let rstd = t.exp(t.scale(t.ln(t.add_scalar(var, self.eps)), -0.5));
        let normed = t.mul(centered, t.broadcast_last(rstd, c));
        // per-feature affine via a diagonal "linear": mul by g then add b
        let g = p.var(&format!("{}.g", self.name));
        let b = p.var(&format!("{}.b", self.name));
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = t.reshape(normed, &[rows, c]);
        let gb = t.reshape(g, &[1, c]);
        let gmat = t.broadcast_rows(gb, rows);
        let scaled = t.mul(flat, gmat);
        let biased = t.add_last_bias(scaled, b);
        t.reshape(biased, &shape)
    }
}

/// Embedding table looked up by row.
#[derive(Debug, Clone)]
pub struct EmbeddingLayer {
    pub name: String,
}

impl EmbeddingLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w = kaiming(&[rows, dim], dim, rng).mapv(|x| x * 0.1);
        store.insert(&format!("{name}.w"), w);
        Self {
            name: name.to_string(),
        }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, idx: &[usize]) -> Var {
        t.index_select(p.var(&format!("{}.w", self.name)), idx)
    }
}

impl Tape {
    /// Repeat a `(1, c)` row out to `(rows, c)`. Helper for affine layers.
    pub fn broadcast_rows(&self, a: Var, rows: usize) -> Var {
        let shape = self.shape(a);
        debug_assert_eq!(shape[0], 1);
        let idx = vec![0usize; rows];
        self.index_select(a, &idx)
    }
}
