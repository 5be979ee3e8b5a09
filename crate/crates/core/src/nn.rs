//! A small hand-differentiated network stack: parameter storage, 3×3/1×1
//! convolutions, linear layers, pooling, a tiny encoder–decoder trunk and
//! AdamW.
//!
//! Layers never own weights. They hold [`ParamId`]s into a [`ParamStore`], so
//! one trunk can be reused at several hierarchy levels with its gradients
//! accumulating into the same storage.

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Serialized form of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let grad = ArrayD::zeros(value.raw_dim());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, f64> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("parameter is a matrix")
    }

    pub fn vector(&self, id: ParamId) -> ndarray::ArrayView1<'_, f64> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("parameter is a vector")
    }

    /// Scalar count over every parameter.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad *= factor;
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.iter().all(|g| g.is_finite()))
    }

    pub fn values_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.params
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites values from records; names and shapes must match exactly.
    pub fn load_records(&mut self, records: &[ParamRecord]) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, model has {}",
                records.len(),
                self.params.len()
            )));
        }
        for (p, r) in self.params.iter_mut().zip(records) {
            if p.name != r.name || p.value.shape() != r.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "checkpoint parameter '{}' {:?} does not match model parameter '{}' {:?}",
                    r.name,
                    r.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = ArrayD::from_shape_vec(IxDyn(&r.shape), r.data.clone())
                .map_err(|e| Error::Shape(format!("parameter '{}': {e}", r.name)))?;
        }
        Ok(())
    }
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

/// Square convolution with stride 1 and "same" zero padding; `kernel` is odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    height: usize,
    width: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), he_normal(rng, &[out_channels, fan_in], fan_in));
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// Zero-initialized variant.
    pub fn zeros(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), ArrayD::zeros(IxDyn(&[out_channels, fan_in])));
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        if self.kernel == 1 {
            return x.to_shape((c, h * w)).expect("element count").into_owned();
        }
        let k = self.kernel;
        let r = (k / 2) as isize;
        let mut cols = Array2::zeros((c * k * k, h * w));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ci * k * k + ky * k + kx;
                    let dy = ky as isize - r;
                    let dx = kx as isize - r;
                    let mut out = cols.row_mut(row);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        for xx in x0..x1 {
                            out[y * w + xx] = x[[ci, sy as usize, (xx as isize + dx) as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
        let c = self.in_channels;
        if self.kernel == 1 {
            return cols.to_shape((c, h, w)).expect("element count").into_owned();
        }
        let k = self.kernel;
        let r = (k / 2) as isize;
        let mut x = Array3::zeros((c, h, w));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = cols.row(ci * k * k + ky * k + kx);
                    let dy = ky as isize - r;
                    let dx = kx as isize - r;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        for xx in x0..x1 {
                            x[[ci, sy as usize, (xx as isize + dx) as usize]] += row[y * w + xx];
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let cols = self.im2col(x);
        let mut out = store.matrix(self.weight).dot(&cols);
        let bias = store.vector(self.bias);
        for (mut row, b) in out.outer_iter_mut().zip(bias.iter()) {
            row += *b;
        }
        let out = out.to_shape((self.out_channels, h, w)).expect("element count").into_owned();
        (out, ConvCache { cols, height: h, width: w })
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, store: &mut ParamStore, cache: &ConvCache, grad_out: &Array3<f64>) -> Array3<f64> {
        let hw = cache.height * cache.width;
        let g = grad_out.to_shape((self.out_channels, hw)).expect("element count");
        {
            let dw = g.dot(&cache.cols.t());
            let wgrad = &mut store.get_mut(self.weight).grad;
            *wgrad += &dw.into_dyn();
        }
        {
            let db = g.sum_axis(Axis(1));
            let bgrad = &mut store.get_mut(self.bias).grad;
            *bgrad += &db.into_dyn();
        }
        let dcols = store.matrix(self.weight).t().dot(&g);
        self.col2im(&dcols, cache.height, cache.width)
    }

    pub fn num_scalars(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
    }
}

/// Fully connected layer on vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(rng, &[out_features, in_features], in_features),
        );
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_features])));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), ArrayD::zeros(IxDyn(&[out_features, in_features])));
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_features])));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array1<f64>) -> Array1<f64> {
        store.matrix(self.weight).dot(x) + store.vector(self.bias)
    }

    pub fn backward(&self, store: &mut ParamStore, x: &Array1<f64>, grad_out: &Array1<f64>) -> Array1<f64> {
        let dw = grad_out
            .view()
            .insert_axis(Axis(1))
            .dot(&x.view().insert_axis(Axis(0)));
        store.get_mut(self.weight).grad += &dw.into_dyn();
        store.get_mut(self.bias).grad += &grad_out.clone().into_dyn();
        store.matrix(self.weight).t().dot(grad_out)
    }

    pub fn num_scalars(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Array3<f64>, grad: &Array3<f64>) -> Array3<f64> {
    let mut g = grad.clone();
    g.zip_mut_with(out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

/// 2×2 average pooling; height and width must be even.
pub fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, xx)| {
        0.25 * (x[[ci, 2 * y, 2 * xx]]
            + x[[ci, 2 * y + 1, 2 * xx]]
            + x[[ci, 2 * y, 2 * xx + 1]]
            + x[[ci, 2 * y + 1, 2 * xx + 1]])
    })
}

pub fn avg_pool2_backward(grad: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = grad.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, x)| 0.25 * grad[[ci, y / 2, x / 2]])
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2_backward(grad: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = grad.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, x)| {
        grad[[ci, 2 * y, 2 * x]] + grad[[ci, 2 * y + 1, 2 * x]] + grad[[ci, 2 * y, 2 * x + 1]] + grad[[ci, 2 * y + 1, 2 * x + 1]]
    })
}

pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial size")
}

pub fn split_channels(x: &Array3<f64>, first: usize) -> (Array3<f64>, Array3<f64>) {
    (x.slice(s![..first, .., ..]).to_owned(), x.slice(s![first.., .., ..]).to_owned())
}

/// A dense feature extractor mapping `C_in×H×W` to `F×H×W`.
pub trait Backbone {
    type Cache;

    fn input_channels(&self) -> usize;
    fn feature_channels(&self) -> usize;
    /// Height and width must be multiples of this.
    fn size_multiple(&self) -> usize;
    fn num_scalars(&self) -> usize;
    fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, Self::Cache);
    fn backward(&self, store: &mut ParamStore, cache: &Self::Cache, grad: &Array3<f64>) -> Array3<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyUNetConfig {
    pub input_channels: usize,
    pub widths: [usize; 3],
    pub feature_channels: usize,
}

impl Default for TinyUNetConfig {
    fn default() -> Self {
        TinyUNetConfig {
            input_channels: 8,
            widths: [10, 20, 40],
            feature_channels: 8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvRelu(Conv2d);

#[derive(Debug, Clone)]
struct ConvReluCache {
    conv: ConvCache,
    out: Array3<f64>,
}

impl ConvRelu {
    fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, ConvReluCache) {
        let (z, conv) = self.0.forward(store, x);
        let out = relu(&z);
        (out.clone(), ConvReluCache { conv, out })
    }

    fn backward(&self, store: &mut ParamStore, cache: &ConvReluCache, grad: &Array3<f64>) -> Array3<f64> {
        let g = relu_backward(&cache.out, grad);
        self.0.backward(store, &cache.conv, &g)
    }
}

/// Three-scale encoder–decoder with skip connections.
#[derive(Debug, Clone)]
pub struct TinyUNet {
    config: TinyUNetConfig,
    enc1: [ConvRelu; 2],
    enc2: [ConvRelu; 2],
    bottleneck: [ConvRelu; 2],
    dec2: [ConvRelu; 2],
    dec1: [ConvRelu; 2],
}

#[derive(Debug, Clone)]
pub struct TinyUNetCache {
    enc1: [ConvReluCache; 2],
    enc2: [ConvReluCache; 2],
    bottleneck: [ConvReluCache; 2],
    dec2: [ConvReluCache; 2],
    dec1: [ConvReluCache; 2],
}

impl TinyUNet {
    pub fn new(store: &mut ParamStore, prefix: &str, config: TinyUNetConfig, rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = config.widths;
        let mut conv = |name: &str, cin: usize, cout: usize| {
            ConvRelu(Conv2d::new(store, &format!("{prefix}.{name}"), cin, cout, 3, rng))
        };
        let enc1 = [conv("enc1.0", config.input_channels, c1), conv("enc1.1", c1, c1)];
        let enc2 = [conv("enc2.0", c1, c2), conv("enc2.1", c2, c2)];
        let bottleneck = [conv("mid.0", c2, c3), conv("mid.1", c3, c3)];
        let dec2 = [conv("dec2.0", c3 + c2, c2), conv("dec2.1", c2, c2)];
        let dec1 = [conv("dec1.0", c2 + c1, c1), conv("dec1.1", c1, config.feature_channels)];
        TinyUNet {
            config,
            enc1,
            enc2,
            bottleneck,
            dec2,
            dec1,
        }
    }

    pub fn config(&self) -> TinyUNetConfig {
        self.config
    }

    fn pair(
        layers: &[ConvRelu; 2],
        store: &ParamStore,
        x: &Array3<f64>,
    ) -> (Array3<f64>, [ConvReluCache; 2]) {
        let (a, ca) = layers[0].forward(store, x);
        let (b, cb) = layers[1].forward(store, &a);
        (b, [ca, cb])
    }

    fn pair_backward(
        layers: &[ConvRelu; 2],
        store: &mut ParamStore,
        cache: &[ConvReluCache; 2],
        grad: &Array3<f64>,
    ) -> Array3<f64> {
        let g = layers[1].backward(store, &cache[1], grad);
        layers[0].backward(store, &cache[0], &g)
    }
}

impl Backbone for TinyUNet {
    type Cache = TinyUNetCache;

    fn input_channels(&self) -> usize {
        self.config.input_channels
    }

    fn feature_channels(&self) -> usize {
        self.config.feature_channels
    }

    fn size_multiple(&self) -> usize {
        4
    }

    fn num_scalars(&self) -> usize {
        [&self.enc1, &self.enc2, &self.bottleneck, &self.dec2, &self.dec1]
            .iter()
            .flat_map(|p| p.iter())
            .map(|c| c.0.num_scalars())
            .sum()
    }

    fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, TinyUNetCache) {
        let (e1, enc1) = Self::pair(&self.enc1, store, x);
        let (e2, enc2) = Self::pair(&self.enc2, store, &avg_pool2(&e1));
        let (b, bottleneck) = Self::pair(&self.bottleneck, store, &avg_pool2(&e2));
        let (d2, dec2) = Self::pair(&self.dec2, store, &concat_channels(&upsample2(&b), &e2));
        let (d1, dec1) = Self::pair(&self.dec1, store, &concat_channels(&upsample2(&d2), &e1));
        (
            d1,
            TinyUNetCache {
                enc1,
                enc2,
                bottleneck,
                dec2,
                dec1,
            },
        )
    }

    fn backward(&self, store: &mut ParamStore, cache: &TinyUNetCache, grad: &Array3<f64>) -> Array3<f64> {
        let [c1, c2, c3] = self.config.widths;
        let g = Self::pair_backward(&self.dec1, store, &cache.dec1, grad);
        let (g_up1, mut g_e1) = split_channels(&g, c2);
        let g = Self::pair_backward(&self.dec2, store, &cache.dec2, &upsample2_backward(&g_up1));
        let (g_up2, mut g_e2) = split_channels(&g, c3);
        let g_p2 = Self::pair_backward(&self.bottleneck, store, &cache.bottleneck, &upsample2_backward(&g_up2));
        g_e2 += &avg_pool2_backward(&g_p2);
        let g_p1 = Self::pair_backward(&self.enc2, store, &cache.enc2, &g_e2);
        g_e1 += &avg_pool2_backward(&g_p1);
        debug_assert_eq!(g_e1.dim().0, c1);
        Self::pair_backward(&self.enc1, store, &cache.enc1, &g_e1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.as_slice().expect("standard layout");
            let values = p.value.as_slice_mut().expect("standard layout");
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                values[i] -= lr * weight_decay * values[i];
                values[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
    }
}
