//! Hierarchical wrapper around a dense backbone, and the flat baseline.
//!
//! The hierarchical model runs the shared trunk once per tree level. Level 0
//! sees the image alone; level `ℓ > 0` sees the image concatenated with the
//! (restricted) pre-activation logits of level `ℓ - 1`. Each level has its own
//! 1×1 input adapter and 1×1 output head, and non-root levels modulate the
//! trunk features with a FiLM generator driven by the spatial mean of the
//! parent-level probabilities.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composition::{
    compose_level, compose_level_backward, level_gate, root_activation, root_activation_backward, ComposedLevel,
    CompositionConfig, HierarchyLayout, ProbPyramid, RestrictedPyramid, LOGIT_SENTINEL,
};
use crate::dataprep::{HierTargetStack, LossWeights};
use crate::error::{Error, Result};
use crate::hierarchy::ClassTree;
use crate::losses::{self, LevelLoss, LossBreakdown, LossConfig};
use crate::nn::{
    concat_channels, Backbone, Conv2d, ConvCache, Linear, ParamRecord, ParamStore, TinyUNet, TinyUNetConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Hierarchical,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Hierarchical => "hierarchical",
        })
    }
}

/// Which logits of level `ℓ - 1` are appended to the input of level `ℓ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    /// Logits with gated-off pixels replaced by the sentinel.
    #[default]
    Restricted,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: TinyUNetConfig,
    pub film: bool,
    pub feedback: Feedback,
    pub composition: CompositionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: TinyUNetConfig::default(),
            film: true,
            feedback: Feedback::Restricted,
            composition: CompositionConfig::default(),
        }
    }
}

/// Two-layer perceptron producing per-channel scale and shift. The output
/// layer starts at zero, so `γ = 1` and `β = 0` until trained.
#[derive(Debug, Clone, Copy)]
pub struct FilmGenerator {
    hidden: Linear,
    out: Linear,
    features: usize,
}

#[derive(Debug, Clone)]
pub struct FilmCache {
    summary: Array1<f64>,
    hidden: Array1<f64>,
    gamma: Array1<f64>,
}

impl FilmGenerator {
    pub fn new(store: &mut ParamStore, name: &str, parents: usize, features: usize, rng: &mut ChaCha8Rng) -> Self {
        FilmGenerator {
            hidden: Linear::new(store, &format!("{name}.hidden"), parents, features, rng),
            out: Linear::zeros(store, &format!("{name}.out"), features, 2 * features),
            features,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.hidden.num_scalars() + self.out.num_scalars()
    }

    /// `(γ, β)` for a parent-probability summary.
    pub fn generate(&self, store: &ParamStore, summary: &Array1<f64>) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let hidden = self.hidden.forward(store, summary).mapv(|v| v.max(0.0));
        let out = self.out.forward(store, &hidden);
        let gamma = out.slice(s![..self.features]).mapv(|v| 1.0 + v);
        let beta = out.slice(s![self.features..]).to_owned();
        (gamma, beta, hidden)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        features: &Array3<f64>,
        parent_probs: &Array3<f64>,
    ) -> Result<(Array3<f64>, FilmCache)> {
        if features.dim().0 != self.features || parent_probs.dim().0 != self.hidden.in_features {
            return Err(Error::Shape(format!(
                "FiLM expects {} feature and {} parent planes, got {} and {}",
                self.features,
                self.hidden.in_features,
                features.dim().0,
                parent_probs.dim().0
            )));
        }
        let summary = spatial_mean(parent_probs);
        let (gamma, beta, hidden) = self.generate(store, &summary);
        let out = film_apply(features, &gamma, &beta);
        Ok((out, FilmCache { summary, hidden, gamma }))
    }

    /// Returns `(dL/dfeatures, dL/dsummary)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &FilmCache,
        features: &Array3<f64>,
        grad_out: &Array3<f64>,
    ) -> (Array3<f64>, Array1<f64>) {
        let f = self.features;
        let mut grad_features = grad_out.clone();
        let mut grad_gen = Array1::zeros(2 * f);
        for c in 0..f {
            let g = grad_out.index_axis(Axis(0), c);
            let x = features.index_axis(Axis(0), c);
            grad_gen[c] = (&g * &x).sum();
            grad_gen[f + c] = g.sum();
            grad_features.index_axis_mut(Axis(0), c).mapv_inplace(|v| v * cache.gamma[c]);
        }
        let mut grad_hidden = self.out.backward(store, &cache.hidden, &grad_gen);
        grad_hidden.zip_mut_with(&cache.hidden, |g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
        let grad_summary = self.hidden.backward(store, &cache.summary, &grad_hidden);
        (grad_features, grad_summary)
    }
}

pub fn spatial_mean(planes: &Array3<f64>) -> Array1<f64> {
    let (_, h, w) = planes.dim();
    planes.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}

/// Channel `f` becomes `γ_f · features_f + β_f`.
pub fn film_apply(features: &Array3<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array3<f64> {
    let mut out = features.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        plane.mapv_inplace(|v| gamma[c] * v + beta[c]);
    }
    out
}

#[derive(Debug, Clone)]
struct LevelModules {
    adapter: Conv2d,
    head: Conv2d,
    film: Option<FilmGenerator>,
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ParameterReport {
    pub trunk: usize,
    pub adapters: usize,
    pub heads: usize,
    pub film: usize,
    pub total: usize,
}

impl ParameterReport {
    pub fn wrapper(&self) -> usize {
        self.adapters + self.heads + self.film
    }
}

/// Everything one level's backward pass needs.
pub struct LevelTrace<C> {
    pub input: Array3<f64>,
    adapter_cache: ConvCache,
    trunk_cache: C,
    /// Trunk output before FiLM.
    pub features: Array3<f64>,
    film_cache: Option<FilmCache>,
    head_cache: ConvCache,
}

pub struct ForwardTrace<C> {
    pub levels: Vec<LevelTrace<C>>,
    pub pyramid: ProbPyramid,
    pub restricted: RestrictedPyramid,
}

fn check_image(image: &Array2<f64>, multiple: usize) -> Result<()> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(Error::Shape(format!(
            "image {h}×{w} must have sides that are positive multiples of {multiple}"
        )));
    }
    Ok(())
}

fn image_plane(image: &Array2<f64>) -> Array3<f64> {
    image.clone().insert_axis(Axis(0))
}

/// Per-level binary predictions in tree level order.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub levels: Vec<Array3<bool>>,
}

/// A trainable segmenter the trainer can drive.
pub trait Segmenter {
    fn variant(&self) -> Variant;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Forward and backward for one image; gradients accumulate in the store.
    fn accumulate(
        &mut self,
        image: &Array2<f64>,
        targets: &HierTargetStack,
        weights: &LossWeights,
        loss: &LossConfig,
    ) -> Result<LossBreakdown>;
    fn predict(&self, image: &Array2<f64>) -> Result<Prediction>;
    fn parameter_report(&self) -> ParameterReport;
}

/// Hierarchical wrapper with a shared trunk.
#[derive(Debug, Clone)]
pub struct HierModel<B = TinyUNet> {
    store: ParamStore,
    backbone: B,
    levels: Vec<LevelModules>,
    layout: HierarchyLayout,
    film: bool,
    feedback: Feedback,
    composition: CompositionConfig,
}

impl HierModel<TinyUNet> {
    pub fn tiny(tree: &ClassTree, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = TinyUNet::new(&mut store, "trunk", config.backbone, &mut rng);
        Self::with_backbone(tree, store, backbone, config, &mut rng)
    }
}

impl<B: Backbone> HierModel<B> {
    /// Wraps a backbone whose parameters are already registered in `store`.
    pub fn with_backbone(
        tree: &ClassTree,
        mut store: ParamStore,
        backbone: B,
        config: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layout = HierarchyLayout::from_tree(tree);
        let cin = backbone.input_channels();
        let f = backbone.feature_channels();
        let mut levels = Vec::with_capacity(layout.depth());
        for level in 0..layout.depth() {
            let parents = if level == 0 { 0 } else { layout.levels[level - 1].size };
            let adapter = Conv2d::new(&mut store, &format!("adapter{level}"), 1 + parents, cin, 1, rng);
            let head = Conv2d::new(&mut store, &format!("head{level}"), f, layout.levels[level].size, 1, rng);
            let film = (level > 0 && config.film)
                .then(|| FilmGenerator::new(&mut store, &format!("film{level}"), parents, f, rng));
            levels.push(LevelModules { adapter, head, film });
        }
        HierModel {
            store,
            backbone,
            levels,
            layout,
            film: config.film,
            feedback: config.feedback,
            composition: config.composition,
        }
    }

    pub fn layout(&self) -> &HierarchyLayout {
        &self.layout
    }

    pub fn backbone(&self) -> &B {
        &self.backbone
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn film_enabled(&self) -> bool {
        self.film
    }

    pub fn forward(&self, image: &Array2<f64>) -> Result<ForwardTrace<B::Cache>> {
        check_image(image, self.backbone.size_multiple())?;
        if self.levels.is_empty() {
            return Err(Error::Shape("model has no levels".into()));
        }
        let store = &self.store;
        let img = image_plane(image);
        let depth = self.levels.len();
        let mut traces = Vec::with_capacity(depth);
        let mut logits = Vec::with_capacity(depth);
        let mut qs = Vec::with_capacity(depth);
        let mut probs: Vec<Array3<f64>> = Vec::with_capacity(depth);
        let mut r_probs: Vec<Array3<f64>> = Vec::with_capacity(depth);
        let mut r_logits: Vec<Array3<f64>> = Vec::with_capacity(depth);
        let mut gates = Vec::with_capacity(depth);

        for (level, modules) in self.levels.iter().enumerate() {
            let input = if level == 0 {
                img.clone()
            } else {
                let fed = match self.feedback {
                    Feedback::Restricted => &r_logits[level - 1],
                    Feedback::Raw => &logits[level - 1],
                };
                concat_channels(&img, fed)
            };
            let (adapted, adapter_cache) = modules.adapter.forward(store, &input);
            let (features, trunk_cache) = self.backbone.forward(store, &adapted);
            let (filmed, film_cache) = match &modules.film {
                Some(film) => {
                    let (out, cache) = film.forward(store, &features, &probs[level - 1])?;
                    (out, Some(cache))
                }
                None => (features.clone(), None),
            };
            let (z, head_cache) = modules.head.forward(store, &filmed);
            if level == 0 {
                let p = root_activation(z.view());
                r_probs.push(p.clone());
                r_logits.push(z.clone());
                gates.push(Array3::ones(p.dim()));
                probs.push(p);
                qs.push(None);
            } else {
                let spec = &self.layout.levels[level];
                let ComposedLevel { q, probs: p } = compose_level(z.view(), probs[level - 1].view(), spec, &self.composition);
                let gate = level_gate(r_probs[level - 1].view(), spec, self.composition.threshold);
                let mut rz = z.clone();
                rz.zip_mut_with(&gate, |v, &g| {
                    if g == 0.0 {
                        *v = LOGIT_SENTINEL;
                    }
                });
                r_probs.push(&p * &gate);
                r_logits.push(rz);
                gates.push(gate);
                probs.push(p);
                qs.push(Some(q));
            }
            logits.push(z);
            traces.push(LevelTrace {
                input,
                adapter_cache,
                trunk_cache,
                features,
                film_cache,
                head_cache,
            });
        }
        Ok(ForwardTrace {
            levels: traces,
            pyramid: ProbPyramid { logits, q: qs, probs },
            restricted: RestrictedPyramid {
                probs: r_probs,
                logits: r_logits,
                gates,
            },
        })
    }

    /// Accumulates parameter gradients given `dL/dP` for every level's
    /// composed probabilities. Returns `dL/dZ` per level, including the
    /// contributions that arrive through the feedback path.
    pub fn backward(&mut self, trace: &ForwardTrace<B::Cache>, grad_probs: &[Array3<f64>]) -> Vec<Array3<f64>> {
        let depth = self.levels.len();
        let mut grad_p: Vec<Array3<f64>> = grad_probs.to_vec();
        let mut grad_z_extra: Vec<Array3<f64>> = trace.pyramid.logits.iter().map(|z| Array3::zeros(z.dim())).collect();
        let mut grad_z_out = vec![Array3::zeros((0, 0, 0)); depth];
        for level in (0..depth).rev() {
            let modules = self.levels[level].clone();
            let lt = &trace.levels[level];
            let mut grad_z = if level == 0 {
                root_activation_backward(trace.pyramid.probs[0].view(), grad_p[0].view())
            } else {
                let composed = ComposedLevel {
                    q: trace.pyramid.q[level].clone().expect("non-root level has Q"),
                    probs: trace.pyramid.probs[level].clone(),
                };
                let (gz, gp) = compose_level_backward(
                    &composed,
                    trace.pyramid.probs[level - 1].view(),
                    &self.layout.levels[level],
                    &self.composition,
                    grad_p[level].view(),
                );
                grad_p[level - 1] += &gp;
                gz
            };
            grad_z += &grad_z_extra[level];
            grad_z_out[level] = grad_z.clone();

            let mut grad_feat = modules.head.backward(&mut self.store, &lt.head_cache, &grad_z);
            if let (Some(film), Some(cache)) = (&modules.film, &lt.film_cache) {
                let (gf, gs) = film.backward(&mut self.store, cache, &lt.features, &grad_feat);
                grad_feat = gf;
                let parent = &mut grad_p[level - 1];
                let (_, h, w) = parent.dim();
                let n = (h * w) as f64;
                for (c, mut plane) in parent.outer_iter_mut().enumerate() {
                    plane += gs[c] / n;
                }
            }
            let grad_adapted = self.backbone.backward(&mut self.store, &lt.trunk_cache, &grad_feat);
            let grad_input = modules.adapter.backward(&mut self.store, &lt.adapter_cache, &grad_adapted);
            if level > 0 {
                let mut fed = grad_input.slice(s![1.., .., ..]).to_owned();
                if self.feedback == Feedback::Restricted {
                    fed *= &trace.restricted.gates[level - 1];
                }
                grad_z_extra[level - 1] += &fed;
            }
        }
        grad_z_out
    }

    /// Threshold-gated probabilities of every level.
    pub fn predict_probs(&self, image: &Array2<f64>) -> Result<Vec<Array3<f64>>> {
        Ok(self.forward(image)?.restricted.probs)
    }
}

impl<B: Backbone> Segmenter for HierModel<B> {
    fn variant(&self) -> Variant {
        Variant::Hierarchical
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn accumulate(
        &mut self,
        image: &Array2<f64>,
        targets: &HierTargetStack,
        weights: &LossWeights,
        loss: &LossConfig,
    ) -> Result<LossBreakdown> {
        let trace = self.forward(image)?;
        let (breakdown, grads) = losses::loss_and_grad(&trace.pyramid, targets, weights, &self.layout, loss)?;
        self.backward(&trace, &grads);
        Ok(breakdown)
    }

    fn predict(&self, image: &Array2<f64>) -> Result<Prediction> {
        let probs = self.predict_probs(image)?;
        let t = self.composition.threshold;
        Ok(Prediction {
            levels: probs.iter().map(|p| p.mapv(|v| v >= t)).collect(),
        })
    }

    fn parameter_report(&self) -> ParameterReport {
        let trunk = self.backbone.num_scalars();
        let adapters = self.levels.iter().map(|l| l.adapter.num_scalars()).sum();
        let heads = self.levels.iter().map(|l| l.head.num_scalars()).sum();
        let film = self.levels.iter().filter_map(|l| l.film).map(|f| f.num_scalars()).sum();
        ParameterReport {
            trunk,
            adapters,
            heads,
            film,
            total: self.store.num_scalars(),
        }
    }
}

/// Leaf position in the tree: `(level, position within level)`.
fn leaf_positions(tree: &ClassTree) -> Vec<(usize, usize)> {
    tree.leaves()
        .iter()
        .map(|n| tree.position(&n.name).expect("leaf belongs to the tree"))
        .collect()
}

fn softmax_channels(z: &Array3<f64>) -> Array3<f64> {
    let mut p = z.clone();
    for mut lane in p.lanes_mut(Axis(0)) {
        let max = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane /= sum;
    }
    p
}

/// Single pass, one softmax over the leaf classes.
#[derive(Debug, Clone)]
pub struct BaselineModel<B = TinyUNet> {
    store: ParamStore,
    backbone: B,
    adapter: Conv2d,
    head: Conv2d,
    leaves: Vec<(usize, usize)>,
    level_sizes: Vec<usize>,
    layout: HierarchyLayout,
    threshold: f64,
}

impl BaselineModel<TinyUNet> {
    pub fn tiny(tree: &ClassTree, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = TinyUNet::new(&mut store, "trunk", config.backbone, &mut rng);
        Self::with_backbone(tree, store, backbone, config, &mut rng)
    }
}

impl<B: Backbone> BaselineModel<B> {
    pub fn with_backbone(
        tree: &ClassTree,
        mut store: ParamStore,
        backbone: B,
        config: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let leaves = leaf_positions(tree);
        let adapter = Conv2d::new(&mut store, "adapter0", 1, backbone.input_channels(), 1, rng);
        let head = Conv2d::new(&mut store, "head0", backbone.feature_channels(), leaves.len(), 1, rng);
        BaselineModel {
            store,
            backbone,
            adapter,
            head,
            leaves,
            level_sizes: (0..tree.depth()).map(|l| tree.level_size(l)).collect(),
            layout: HierarchyLayout::from_tree(tree),
            threshold: config.composition.threshold,
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.leaves.len()
    }

    /// Leaf probabilities in leaf order, with the intermediate caches.
    fn forward(&self, image: &Array2<f64>) -> Result<(Array3<f64>, ConvCache, B::Cache, ConvCache)> {
        check_image(image, self.backbone.size_multiple())?;
        let (a, ac) = self.adapter.forward(&self.store, &image_plane(image));
        let (f, tc) = self.backbone.forward(&self.store, &a);
        let (z, hc) = self.head.forward(&self.store, &f);
        Ok((softmax_channels(&z), ac, tc, hc))
    }

    pub fn predict_leaf_probs(&self, image: &Array2<f64>) -> Result<Array3<f64>> {
        Ok(self.forward(image)?.0)
    }

    /// One-hot leaf targets from a hierarchical target stack.
    pub fn leaf_targets(&self, targets: &HierTargetStack) -> Array3<i8> {
        let (h, w) = (targets.height(), targets.width());
        let mut out = Array3::zeros((self.leaves.len(), h, w));
        for (i, &(level, pos)) in self.leaves.iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .assign(&targets.level(level).index_axis(Axis(0), pos).mapv(|t| i8::from(t == 1)));
        }
        out
    }
}

impl<B: Backbone> Segmenter for BaselineModel<B> {
    fn variant(&self) -> Variant {
        Variant::Baseline
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `weights` holds a single level with one weight per leaf.
    fn accumulate(
        &mut self,
        image: &Array2<f64>,
        targets: &HierTargetStack,
        weights: &LossWeights,
        loss: &LossConfig,
    ) -> Result<LossBreakdown> {
        let w = weights.levels.first().filter(|w| w.len() == self.leaves.len()).ok_or_else(|| {
            Error::Shape(format!("baseline expects one weight per leaf ({})", self.leaves.len()))
        })?;
        let (p, ac, tc, hc) = self.forward(image)?;
        let y = self.leaf_targets(targets);
        let dice = losses::hier_dice(p.view(), y.view(), w, loss.dice_eps);
        let ce = losses::hier_ce(p.view(), y.view(), w, loss);
        let g = losses::hier_dice_grad(p.view(), y.view(), w, loss.dice_eps) + losses::hier_ce_grad(p.view(), y.view(), w, loss);
        // Softmax Jacobian: dz = p ⊙ (g - Σ p g).
        let mut dz = &p * &g;
        let dot = dz.sum_axis(Axis(0));
        for (mut plane, pc) in dz.outer_iter_mut().zip(p.outer_iter()) {
            plane -= &(&pc * &dot);
        }
        let gf = self.head.backward(&mut self.store, &hc, &dz);
        let ga = self.backbone.backward(&mut self.store, &tc, &gf);
        self.adapter.backward(&mut self.store, &ac, &ga);
        Ok(LossBreakdown {
            levels: vec![LevelLoss { dice, ce }],
            consistency: 0.0,
            total: dice + ce,
        })
    }

    /// Leaves are thresholded; every parent is the union of its children.
    fn predict(&self, image: &Array2<f64>) -> Result<Prediction> {
        let p = self.predict_leaf_probs(image)?;
        let (_, h, w) = p.dim();
        let mut levels: Vec<Array3<bool>> = self.level_sizes.iter().map(|&n| Array3::from_elem((n, h, w), false)).collect();
        for (i, &(level, pos)) in self.leaves.iter().enumerate() {
            let t = self.threshold;
            levels[level]
                .index_axis_mut(Axis(0), pos)
                .assign(&p.index_axis(Axis(0), i).mapv(|v| v >= t));
        }
        for level in (1..levels.len()).rev() {
            let (upper, lower) = levels.split_at_mut(level);
            for g in &self.layout.levels[level].groups {
                for &c in &g.children {
                    let child = lower[0].index_axis(Axis(0), c).to_owned();
                    upper[level - 1]
                        .index_axis_mut(Axis(0), g.parent)
                        .zip_mut_with(&child, |a, &b| *a |= b);
                }
            }
        }
        Ok(Prediction { levels })
    }

    fn parameter_report(&self) -> ParameterReport {
        ParameterReport {
            trunk: self.backbone.num_scalars(),
            adapters: self.adapter.num_scalars(),
            heads: self.head.num_scalars(),
            film: 0,
            total: self.store.num_scalars(),
        }
    }
}

/// Parameters the hierarchical wrapper adds over the flat baseline on the same trunk.
pub fn wrapper_overhead(hier: &ParameterReport, baseline: &ParameterReport) -> i64 {
    hier.total as i64 - baseline.total as i64
}

/// Either model variant on the reference trunk.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Baseline(BaselineModel),
    Hierarchical(HierModel),
}

impl AnyModel {
    pub fn new(variant: Variant, tree: &ClassTree, config: &ModelConfig, seed: u64) -> Self {
        match variant {
            Variant::Baseline => AnyModel::Baseline(BaselineModel::tiny(tree, config, seed)),
            Variant::Hierarchical => AnyModel::Hierarchical(HierModel::tiny(tree, config, seed)),
        }
    }

    fn inner(&self) -> &dyn Segmenter {
        match self {
            AnyModel::Baseline(m) => m,
            AnyModel::Hierarchical(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Segmenter {
        match self {
            AnyModel::Baseline(m) => m,
            AnyModel::Hierarchical(m) => m,
        }
    }
}

impl Segmenter for AnyModel {
    fn variant(&self) -> Variant {
        self.inner().variant()
    }

    fn store(&self) -> &ParamStore {
        self.inner().store()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().store_mut()
    }

    fn accumulate(
        &mut self,
        image: &Array2<f64>,
        targets: &HierTargetStack,
        weights: &LossWeights,
        loss: &LossConfig,
    ) -> Result<LossBreakdown> {
        self.inner_mut().accumulate(image, targets, weights, loss)
    }

    fn predict(&self, image: &Array2<f64>) -> Result<Prediction> {
        self.inner().predict(image)
    }

    fn parameter_report(&self) -> ParameterReport {
        self.inner().parameter_report()
    }
}

pub const CHECKPOINT_FORMAT: &str = "hierseg-checkpoint/1";

/// Serialized weights plus everything needed to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub variant: Variant,
    pub tree_fingerprint: String,
    pub class_tree: String,
    pub class_map: String,
    pub model: ModelConfig,
    pub epoch: Option<usize>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn capture(model: &AnyModel, tree: &ClassTree, config: &ModelConfig, epoch: Option<usize>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            variant: model.variant(),
            tree_fingerprint: tree.fingerprint(),
            class_tree: tree.to_json(),
            class_map: tree.class_map().to_csv(),
            model: *config,
            epoch,
            params: model.store().to_records(),
        }
    }

    /// Rebuilds the model, refusing checkpoints trained on a different tree.
    pub fn restore(&self, tree: &ClassTree) -> Result<AnyModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format '{}'", self.format)));
        }
        let found = tree.fingerprint();
        if found != self.tree_fingerprint {
            // `expected` is the dataset's tree, `found` the checkpoint's.
            return Err(Error::FingerprintMismatch {
                expected: found,
                found: self.tree_fingerprint.clone(),
            });
        }
        let mut model = AnyModel::new(self.variant, tree, &self.model, 0);
        model.store_mut().load_records(&self.params)?;
        Ok(model)
    }

    /// The class tree the checkpoint was trained on.
    pub fn tree(&self) -> Result<ClassTree> {
        let map = crate::hierarchy::parse_class_map(&self.class_map)?;
        crate::hierarchy::parse_class_tree(&self.class_tree, &map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::dataprep::io::write_bytes(path, self.to_json().as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&crate::dataprep::io::read_text(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::tl_pano_tree;
    use ndarray::arr1;

    #[test]
    fn film_examples() {
        let features = Array3::from_elem((2, 3, 3), 0.5);
        let out = film_apply(&features, &arr1(&[2.0, 2.0]), &arr1(&[1.0, 1.0]));
        assert!(out.iter().all(|&v| v == 2.0));
        let parent = Array3::from_elem((4, 10, 10), 0.3);
        assert!(spatial_mean(&parent).iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let film = FilmGenerator::new(&mut store, "film", 4, 2, &mut rng);
        let features = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y * x) as f64 * 0.1);
        let (out, _) = film.forward(&store, &features, &parent).unwrap();
        assert_eq!(out, features);
        assert!(film.forward(&store, &features, &Array3::zeros((3, 3, 3))).is_err());
    }

    #[test]
    fn reference_shapes_and_overhead() {
        let tree = tl_pano_tree();
        let config = ModelConfig::default();
        let hier = HierModel::tiny(&tree, &config, 0);
        let trace = hier.forward(&Array2::zeros((16, 16))).unwrap();
        assert_eq!(trace.levels[0].input.dim(), (1, 16, 16));
        assert_eq!(trace.levels[1].input.dim(), (5, 16, 16));
        assert_eq!(trace.pyramid.logits[1].dim(), (4, 16, 16));
        let base = BaselineModel::tiny(&tree, &config, 0);
        assert_eq!(base.num_outputs(), 7);
        let (h, b) = (hier.parameter_report(), base.parameter_report());
        assert_eq!(h.trunk, b.trunk);
        assert_eq!(h.total, h.trunk + h.wrapper());
        let overhead = wrapper_overhead(&h, &b);
        assert!(overhead > 0 && (overhead as f64) < 0.01 * h.trunk as f64);
        assert_eq!(HierModel::tiny(&tree, &config, 0).parameter_report(), h);
    }

    #[test]
    fn rejects_bad_image_sizes() {
        let hier = HierModel::tiny(&tl_pano_tree(), &ModelConfig::default(), 0);
        assert!(matches!(hier.forward(&Array2::zeros((10, 16))), Err(Error::Shape(_))));
    }
}
