//! Three-branch dual-view classifier.
//!
//! The frontal and lateral branches each run a convolutional feature
//! extractor followed by their own fully-connected head. The merge branch
//! concatenates both feature maps along the channel axis, applies its own
//! conv/pool stages and head. Parameter names are
//! `<branch>.features.<i>.{weight,bias}` and
//! `<branch>.classifier.<i>.{weight,bias}`, where `<i>` counts
//! parameterized layers only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvCache, Linear, Tensor3};
use crate::view::{SourceBranch, View};
use crate::N_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub out_channels: usize,
    pub n_convs: usize,
}

/// Conv stages (3x3 convs, then 2x2 max pooling) and the fully-connected
/// widths of the head, ending in the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub stages: Vec<Stage>,
    pub classifier: Vec<usize>,
}

impl BackboneSpec {
    /// Three single-conv stages of 16, 32 and 64 channels with a two-layer
    /// head.
    pub fn desk() -> Self {
        Self {
            stages: [16, 32, 64]
                .into_iter()
                .map(|out_channels| Stage { out_channels, n_convs: 1 })
                .collect(),
            classifier: vec![64, N_CLASSES],
        }
    }

    pub fn vgg16() -> Self {
        Self {
            stages: [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)]
                .into_iter()
                .map(|(out_channels, n_convs)| Stage { out_channels, n_convs })
                .collect(),
            classifier: vec![4096, 4096, N_CLASSES],
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }
}

/// Full architecture: shared backbone shape for both view branches plus
/// the merge branch's conv widths (one pooled stage each) and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub backbone: BackboneSpec,
    pub merge_convs: Vec<usize>,
    pub merge_classifier: Vec<usize>,
    #[serde(default)]
    pub input_norm: InputNorm,
}

/// Pixels enter the network as `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    /// ImageNet statistics averaged over the three colour channels.
    fn default() -> Self {
        Self { mean: 0.449, std: 0.226 }
    }
}

impl InputNorm {
    pub fn apply(&self, image: &Image) -> Tensor3 {
        let mut t = image.to_tensor();
        let inv = 1.0 / self.std;
        t.data.iter_mut().for_each(|x| *x = (*x - self.mean) * inv);
        t
    }
}

impl ArchitectureSpec {
    pub fn desk(image_size: usize) -> Self {
        Self {
            image_height: image_size,
            image_width: image_size,
            backbone: BackboneSpec::desk(),
            merge_convs: vec![64, 64],
            merge_classifier: vec![64, N_CLASSES],
            input_norm: InputNorm::default(),
        }
    }

    pub fn vgg16(image_size: usize) -> Self {
        Self {
            image_height: image_size,
            image_width: image_size,
            backbone: BackboneSpec::vgg16(),
            merge_convs: vec![512, 512],
            merge_classifier: vec![4096, 4096, N_CLASSES],
            input_norm: InputNorm::default(),
        }
    }

    /// Spatial size after `pools` halvings.
    fn pooled(&self, pools: usize) -> (usize, usize) {
        (self.image_height >> pools, self.image_width >> pools)
    }

    /// `(channels, height, width)` of each view branch's feature map.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.pooled(self.backbone.stages.len());
        (self.backbone.feature_channels(), h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.input_norm.std > 0.0 && self.input_norm.std.is_finite() && self.input_norm.mean.is_finite()) {
            return bad("input_norm needs a finite mean and a positive std".into());
        }
        if self.backbone.stages.is_empty() {
            return bad("backbone needs at least one stage".into());
        }
        if self.backbone.stages.iter().any(|s| s.out_channels == 0 || s.n_convs == 0) {
            return bad("backbone stages need positive channel and conv counts".into());
        }
        if self.merge_convs.is_empty() || self.merge_convs.contains(&0) {
            return bad("merge branch needs at least one conv layer with positive width".into());
        }
        for (name, head) in [("backbone", &self.backbone.classifier), ("merge", &self.merge_classifier)] {
            if head.last() != Some(&N_CLASSES) || head.contains(&0) {
                return bad(format!("{name} classifier must be positive widths ending in {N_CLASSES}"));
            }
        }
        let (_, h, w) = self.feature_shape();
        if h == 0 || w == 0 {
            return bad(format!(
                "{}x{} input vanishes after {} pooling stages",
                self.image_height,
                self.image_width,
                self.backbone.stages.len()
            ));
        }
        let (mh, mw) = self.pooled(self.backbone.stages.len() + self.merge_convs.len());
        if mh == 0 || mw == 0 {
            return bad(format!(
                "{}x{} input vanishes in the merge branch after {} further pooling stages",
                self.image_height,
                self.image_width,
                self.merge_convs.len()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum FeatureLayer {
    Conv(Conv2d),
    Pool,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv(ConvCache),
    Pool { argmax: Vec<usize>, input_shape: (usize, usize, usize) },
}

/// Stack of 3x3 convolutions (ReLU) and 2x2 max pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<FeatureLayer>,
}

impl FeatureExtractor {
    fn new<R: Rng + ?Sized>(in_channels: usize, stages: &[Stage], rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut c = in_channels;
        for stage in stages {
            for _ in 0..stage.n_convs {
                layers.push(FeatureLayer::Conv(Conv2d::new(c, stage.out_channels, rng)));
                c = stage.out_channels;
            }
            layers.push(FeatureLayer::Pool);
        }
        Self { layers }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().filter_map(|l| match l {
            FeatureLayer::Conv(c) => Some(c),
            FeatureLayer::Pool => None,
        })
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.layers.iter_mut().filter_map(|l| match l {
            FeatureLayer::Conv(c) => Some(c),
            FeatureLayer::Pool => None,
        })
    }

    fn forward(&self, x: &Tensor3) -> Tensor3 {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                FeatureLayer::Conv(conv) => conv.forward(&h),
                FeatureLayer::Pool => nn::max_pool(&h).0,
            };
        }
        h
    }

    fn forward_train(&self, x: &Tensor3) -> (Tensor3, Vec<LayerCache>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = match layer {
                FeatureLayer::Conv(conv) => {
                    let (out, cache) = conv.forward_train(&h);
                    caches.push(LayerCache::Conv(cache));
                    out
                }
                FeatureLayer::Pool => {
                    let input_shape = (h.channels, h.height, h.width);
                    let (out, argmax) = nn::max_pool(&h);
                    caches.push(LayerCache::Pool { argmax, input_shape });
                    out
                }
            };
        }
        (h, caches)
    }

    fn backward(&self, caches: &[LayerCache], grad: Tensor3, grads: &mut FeatureExtractor) -> Tensor3 {
        let mut g = grad;
        for ((layer, cache), grad_layer) in self.layers.iter().zip(caches).zip(grads.layers.iter_mut()).rev() {
            g = match (layer, cache, grad_layer) {
                (FeatureLayer::Conv(conv), LayerCache::Conv(c), FeatureLayer::Conv(gc)) => conv.backward(c, g, gc),
                (FeatureLayer::Pool, LayerCache::Pool { argmax, input_shape }, FeatureLayer::Pool) => {
                    nn::max_pool_backward(&g, argmax, *input_shape)
                }
                _ => unreachable!("cache and layer kinds always align"),
            };
        }
        g
    }
}

/// Fully-connected head with ReLU between layers and raw logits out.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    layers: Vec<Linear>,
}

struct HeadCache {
    /// `activations[0]` is the flattened input, `activations[i + 1]` the
    /// output of layer `i`.
    activations: Vec<Vec<f64>>,
}

impl Classifier {
    fn new<R: Rng + ?Sized>(in_features: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_features;
        for &w in widths {
            layers.push(Linear::new(prev, w, rng));
            prev = w;
        }
        Self { layers }
    }

    fn is_hidden(&self, i: usize) -> bool {
        i + 1 < self.layers.len()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, self.is_hidden(i));
        }
        h
    }

    fn forward_train(&self, x: &[f64]) -> (Vec<f64>, HeadCache) {
        let mut activations = vec![x.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(activations.last().expect("non-empty"), self.is_hidden(i));
            activations.push(out);
        }
        let logits = activations.last().expect("non-empty").clone();
        (logits, HeadCache { activations })
    }

    fn backward(&self, cache: &HeadCache, grad_logits: &[f64], grads: &mut Classifier) -> Vec<f64> {
        let mut g = grad_logits.to_vec();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(
                &cache.activations[i],
                &cache.activations[i + 1],
                self.is_hidden(i),
                &g,
                &mut grads.layers[i],
            );
        }
        g
    }
}

/// Visits named parameter tensors in a fixed order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    /// Snapshot of every tensor as `(name, shape, values)`.
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, v| out.push((name.to_string(), shape.to_vec(), v.to_vec())));
        out
    }

    /// `self += other`, tensor by tensor. Both must share a layout.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let mut sources = Vec::new();
        other.visit(&mut |_, _, v| sources.push(v.to_vec()));
        let mut it = sources.into_iter();
        self.visit_mut(&mut |_, _, v| {
            let src = it.next().expect("same layout");
            for (a, b) in v.iter_mut().zip(src) {
                *a += b;
            }
        });
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, _, v| v.iter_mut().for_each(|x| *x *= factor));
    }
}

/// Feature extractor plus classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    features: FeatureExtractor,
    classifier: Classifier,
}

pub(crate) struct BranchCache {
    features: Vec<LayerCache>,
    head: HeadCache,
    feature_shape: (usize, usize, usize),
}

impl Branch {
    fn view_branch<R: Rng + ?Sized>(spec: &ArchitectureSpec, rng: &mut R) -> Self {
        let features = FeatureExtractor::new(1, &spec.backbone.stages, rng);
        let (c, h, w) = spec.feature_shape();
        let classifier = Classifier::new(c * h * w, &spec.backbone.classifier, rng);
        Self { features, classifier }
    }

    fn merge_branch<R: Rng + ?Sized>(spec: &ArchitectureSpec, rng: &mut R) -> Self {
        let (c, _, _) = spec.feature_shape();
        let stages: Vec<Stage> = spec
            .merge_convs
            .iter()
            .map(|&out_channels| Stage { out_channels, n_convs: 1 })
            .collect();
        let features = FeatureExtractor::new(2 * c, &stages, rng);
        let (h, w) = spec.pooled(spec.backbone.stages.len() + stages.len());
        let last = *spec.merge_convs.last().expect("validated non-empty");
        let classifier = Classifier::new(last * h * w, &spec.merge_classifier, rng);
        Self { features, classifier }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale(0.0);
        z
    }

    pub(crate) fn extract(&self, x: &Tensor3) -> Tensor3 {
        self.features.forward(x)
    }

    pub(crate) fn head(&self, features: &Tensor3) -> Vec<f64> {
        self.classifier.forward(&features.data)
    }

    pub(crate) fn forward(&self, x: &Tensor3) -> Vec<f64> {
        self.head(&self.extract(x))
    }

    /// Forward pass that keeps intermediates; returns `(features, logits)`.
    pub(crate) fn forward_train(&self, x: &Tensor3) -> (Tensor3, Vec<f64>, BranchCache) {
        let (feat, features) = self.features.forward_train(x);
        let (logits, head) = self.classifier.forward_train(&feat.data);
        let feature_shape = (feat.channels, feat.height, feat.width);
        (
            feat,
            logits,
            BranchCache {
                features,
                head,
                feature_shape,
            },
        )
    }

    /// Gradient of the head with respect to the feature map.
    pub(crate) fn backward_head(&self, cache: &BranchCache, grad_logits: &[f64], grads: &mut Branch) -> Tensor3 {
        let g = self.classifier.backward(&cache.head, grad_logits, &mut grads.classifier);
        let (c, h, w) = cache.feature_shape;
        Tensor3::from_vec(c, h, w, g)
    }

    pub(crate) fn backward_features(&self, cache: &BranchCache, grad: Tensor3, grads: &mut Branch) -> Tensor3 {
        self.features.backward(&cache.features, grad, &mut grads.features)
    }

    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, conv) in self.features.convs().enumerate() {
            f(&format!("{prefix}.features.{i}.weight"), &conv.weight_shape(), &conv.weight);
            f(&format!("{prefix}.features.{i}.bias"), &[conv.out_channels], &conv.bias);
        }
        for (i, lin) in self.classifier.layers.iter().enumerate() {
            f(&format!("{prefix}.classifier.{i}.weight"), &lin.weight_shape(), &lin.weight);
            f(&format!("{prefix}.classifier.{i}.bias"), &[lin.out_features], &lin.bias);
        }
    }

    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, conv) in self.features.convs_mut().enumerate() {
            let shape = conv.weight_shape();
            f(&format!("{prefix}.features.{i}.weight"), &shape, &mut conv.weight);
            f(&format!("{prefix}.features.{i}.bias"), &[conv.out_channels], &mut conv.bias);
        }
        for (i, lin) in self.classifier.layers.iter_mut().enumerate() {
            let shape = lin.weight_shape();
            f(&format!("{prefix}.classifier.{i}.weight"), &shape, &mut lin.weight);
            f(&format!("{prefix}.classifier.{i}.bias"), &[lin.out_features], &mut lin.bias);
        }
    }
}

impl Parameters for Branch {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.visit_prefixed("", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.visit_prefixed_mut("", f);
    }
}

/// Per-branch logits; each is present only when its inputs were supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLogits {
    pub frontal: Option<Vec<f64>>,
    pub lateral: Option<Vec<f64>>,
    pub merge: Option<Vec<f64>>,
}

/// Per-branch class probabilities and the dispatched final label.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub frontal: Option<Vec<f64>>,
    pub lateral: Option<Vec<f64>>,
    pub merge: Option<Vec<f64>>,
    pub final_label: usize,
    pub source_branch: SourceBranch,
}

impl Prediction {
    /// Merge output when both views were seen, otherwise the single
    /// available branch. Ties go to the lowest class index.
    pub fn from_logits(logits: &BranchLogits) -> Result<Self> {
        let frontal = logits.frontal.as_deref().map(nn::softmax);
        let lateral = logits.lateral.as_deref().map(nn::softmax);
        let merge = logits.merge.as_deref().map(nn::softmax);
        let (probs, source_branch) = match (&merge, &frontal, &lateral) {
            (Some(m), _, _) => (m, SourceBranch::Merge),
            (None, Some(f), None) => (f, SourceBranch::Frontal),
            (None, None, Some(l)) => (l, SourceBranch::Lateral),
            (None, None, None) => return Err(Error::MissingInput),
            (None, Some(_), Some(_)) => {
                return Err(Error::TrainingContract("merge logits whenever both views are present".into()))
            }
        };
        Ok(Self {
            final_label: nn::argmax(probs),
            source_branch,
            frontal,
            lateral,
            merge,
        })
    }

    /// Probabilities of the branch that produced `final_label`.
    pub fn probabilities(&self) -> &[f64] {
        match self.source_branch {
            SourceBranch::Merge => self.merge.as_deref(),
            SourceBranch::Frontal => self.frontal.as_deref(),
            SourceBranch::Lateral => self.lateral.as_deref(),
        }
        .expect("source branch is always populated")
    }
}

fn check_image(spec: &ArchitectureSpec, view: View, image: &Image) -> Result<()> {
    if (image.height, image.width) != (spec.image_height, spec.image_width) {
        return Err(Error::Shape {
            what: format!("{view} image"),
            expected: format!("{}x{}", spec.image_height, spec.image_width),
            actual: format!("{}x{}", image.height, image.width),
        });
    }
    Ok(())
}

/// Sum of the three branch cross-entropies against label `y`.
pub fn joint_loss(logits: &BranchLogits, y: usize) -> Result<f64> {
    match (&logits.frontal, &logits.lateral, &logits.merge) {
        (Some(f), Some(l), Some(m)) => Ok(nn::cross_entropy(f, y) + nn::cross_entropy(l, y) + nn::cross_entropy(m, y)),
        _ => Err(Error::TrainingContract("frontal, lateral and merge logits".into())),
    }
}

/// Mean [`joint_loss`] over a batch.
pub fn joint_loss_batch(logits: &[BranchLogits], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::TrainingContract("a non-empty batch with one label per sample".into()));
    }
    let total = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| joint_loss(l, y))
        .sum::<Result<f64>>()?;
    Ok(total / logits.len() as f64)
}

/// Cross-entropy of one branch's logits against label `y`.
pub fn single_view_loss(logits: &[f64], y: usize) -> f64 {
    nn::cross_entropy(logits, y)
}

/// The dual-view network: frontal, lateral and merge branches.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewModel {
    spec: ArchitectureSpec,
    frontal: Branch,
    lateral: Branch,
    merge: Branch,
}

impl MultiviewModel {
    /// Randomly initialized model; branches are drawn in frontal, lateral,
    /// merge order from `rng`.
    pub fn new<R: Rng + ?Sized>(spec: ArchitectureSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let frontal = Branch::view_branch(&spec, rng);
        let lateral = Branch::view_branch(&spec, rng);
        let merge = Branch::merge_branch(&spec, rng);
        Ok(Self {
            spec,
            frontal,
            lateral,
            merge,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn branch(&self, which: SourceBranch) -> &Branch {
        match which {
            SourceBranch::Frontal => &self.frontal,
            SourceBranch::Lateral => &self.lateral,
            SourceBranch::Merge => &self.merge,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale(0.0);
        z
    }

    pub fn forward(&self, frontal: Option<&Image>, lateral: Option<&Image>) -> Result<BranchLogits> {
        if frontal.is_none() && lateral.is_none() {
            return Err(Error::MissingInput);
        }
        if let Some(img) = frontal {
            check_image(&self.spec, View::Frontal, img)?;
        }
        if let Some(img) = lateral {
            check_image(&self.spec, View::Lateral, img)?;
        }
        let f_feat = frontal.map(|img| self.frontal.extract(&self.spec.input_norm.apply(img)));
        let l_feat = lateral.map(|img| self.lateral.extract(&self.spec.input_norm.apply(img)));
        let merge = match (&f_feat, &l_feat) {
            (Some(f), Some(l)) => Some(self.merge.forward(&Tensor3::concat_channels(f, l))),
            _ => None,
        };
        Ok(BranchLogits {
            frontal: f_feat.as_ref().map(|f| self.frontal.head(f)),
            lateral: l_feat.as_ref().map(|l| self.lateral.head(l)),
            merge,
        })
    }

    pub fn predict(&self, frontal: Option<&Image>, lateral: Option<&Image>) -> Result<Prediction> {
        Prediction::from_logits(&self.forward(frontal, lateral)?)
    }

    /// Joint loss for one sample; its gradient is added into `grads`.
    pub fn accumulate_gradient(&self, frontal: &Image, lateral: &Image, y: usize, grads: &mut MultiviewModel) -> Result<f64> {
        check_image(&self.spec, View::Frontal, frontal)?;
        check_image(&self.spec, View::Lateral, lateral)?;
        let (f_feat, f_logits, f_cache) = self.frontal.forward_train(&self.spec.input_norm.apply(frontal));
        let (l_feat, l_logits, l_cache) = self.lateral.forward_train(&self.spec.input_norm.apply(lateral));
        let joined = Tensor3::concat_channels(&f_feat, &l_feat);
        let (_, m_logits, m_cache) = self.merge.forward_train(&joined);

        let loss = nn::cross_entropy(&f_logits, y) + nn::cross_entropy(&l_logits, y) + nn::cross_entropy(&m_logits, y);

        let g_merge = self.merge.backward_head(&m_cache, &nn::cross_entropy_grad(&m_logits, y), &mut grads.merge);
        let g_joined = self.merge.backward_features(&m_cache, g_merge, &mut grads.merge);
        let (g_f_from_merge, g_l_from_merge) = g_joined.split_channels(f_feat.channels);

        let mut g_f = self
            .frontal
            .backward_head(&f_cache, &nn::cross_entropy_grad(&f_logits, y), &mut grads.frontal);
        let mut g_l = self
            .lateral
            .backward_head(&l_cache, &nn::cross_entropy_grad(&l_logits, y), &mut grads.lateral);
        for (a, b) in g_f.data.iter_mut().zip(&g_f_from_merge.data) {
            *a += b;
        }
        for (a, b) in g_l.data.iter_mut().zip(&g_l_from_merge.data) {
            *a += b;
        }
        self.frontal.backward_features(&f_cache, g_f, &mut grads.frontal);
        self.lateral.backward_features(&l_cache, g_l, &mut grads.lateral);
        Ok(loss)
    }
}

impl Parameters for MultiviewModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.frontal.visit_prefixed("frontal", f);
        self.lateral.visit_prefixed("lateral", f);
        self.merge.visit_prefixed("merge", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.frontal.visit_prefixed_mut("frontal", f);
        self.lateral.visit_prefixed_mut("lateral", f);
        self.merge.visit_prefixed_mut("merge", f);
    }
}

/// A standalone view branch, shaped exactly like the matching branch of a
/// [`MultiviewModel`] built from the same spec. Its parameters are named
/// `<view>.features.*` / `<view>.classifier.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleViewModel {
    spec: ArchitectureSpec,
    view: View,
    branch: Branch,
}

impl SingleViewModel {
    pub fn new<R: Rng + ?Sized>(spec: ArchitectureSpec, view: View, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let branch = Branch::view_branch(&spec, rng);
        Ok(Self { spec, view, branch })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn branch(&self) -> &Branch {
        &self.branch
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale(0.0);
        z
    }

    pub fn forward(&self, image: &Image) -> Result<Vec<f64>> {
        check_image(&self.spec, self.view, image)?;
        Ok(self.branch.forward(&self.spec.input_norm.apply(image)))
    }

    pub fn predict(&self, image: &Image) -> Result<Prediction> {
        let logits = self.forward(image)?;
        let (frontal, lateral) = match self.view {
            View::Frontal => (Some(logits), None),
            View::Lateral => (None, Some(logits)),
        };
        Prediction::from_logits(&BranchLogits {
            frontal,
            lateral,
            merge: None,
        })
    }

    pub fn accumulate_gradient(&self, image: &Image, y: usize, grads: &mut SingleViewModel) -> Result<f64> {
        check_image(&self.spec, self.view, image)?;
        let (_, logits, cache) = self.branch.forward_train(&self.spec.input_norm.apply(image));
        let g = self
            .branch
            .backward_head(&cache, &nn::cross_entropy_grad(&logits, y), &mut grads.branch);
        self.branch.backward_features(&cache, g, &mut grads.branch);
        Ok(nn::cross_entropy(&logits, y))
    }
}

impl Parameters for SingleViewModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.branch.visit_prefixed(self.view.name(), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let prefix = self.view.name();
        self.branch.visit_prefixed_mut(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            image_height: 16,
            image_width: 16,
            backbone: BackboneSpec {
                stages: vec![Stage { out_channels: 2, n_convs: 1 }, Stage { out_channels: 3, n_convs: 1 }],
                classifier: vec![5, 3],
            },
            merge_convs: vec![4, 4],
            merge_classifier: vec![4, 3],
            input_norm: Default::default(),
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
        Image::new(size, size, (0..size * size).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn desk_and_vgg_specs_validate() {
        ArchitectureSpec::desk(64).validate().unwrap();
        ArchitectureSpec::vgg16(224).validate().unwrap();
        assert!(ArchitectureSpec::desk(4).validate().is_err());
        let mut bad = ArchitectureSpec::desk(64);
        bad.backbone.classifier = vec![64, 4];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = MultiviewModel::new(tiny_spec(), &mut rng).unwrap();
        let f = random_image(&mut rng, 16);
        let l = random_image(&mut rng, 16);
        let both = model.forward(Some(&f), Some(&l)).unwrap();
        assert_eq!(both.frontal.as_ref().unwrap().len(), 3);
        assert_eq!(both.lateral.as_ref().unwrap().len(), 3);
        assert_eq!(both.merge.as_ref().unwrap().len(), 3);

        let front_only = model.forward(Some(&f), None).unwrap();
        assert!(front_only.lateral.is_none() && front_only.merge.is_none());
        assert_eq!(front_only.frontal, both.frontal);

        let lat_only = model.forward(None, Some(&l)).unwrap();
        assert!(lat_only.frontal.is_none() && lat_only.merge.is_none());
        assert_eq!(lat_only.lateral, both.lateral);

        assert!(matches!(model.forward(None, None), Err(Error::MissingInput)));
        let wrong = random_image(&mut rng, 20);
        let err = model.forward(Some(&wrong), Some(&l)).unwrap_err();
        assert!(err.to_string().contains("expected 16x16, got 20x20"), "{err}");
    }

    #[test]
    fn branches_ignore_the_other_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = MultiviewModel::new(tiny_spec(), &mut rng).unwrap();
        let f = random_image(&mut rng, 16);
        let l1 = random_image(&mut rng, 16);
        let l2 = random_image(&mut rng, 16);
        let a = model.forward(Some(&f), Some(&l1)).unwrap();
        let b = model.forward(Some(&f), Some(&l2)).unwrap();
        assert_eq!(a.frontal, b.frontal);
        assert_ne!(a.lateral, b.lateral);
    }

    #[test]
    fn prediction_dispatch() {
        let ln = |p: [f64; 3]| p.iter().map(|v: &f64| v.ln()).collect::<Vec<_>>();
        let merged = Prediction::from_logits(&BranchLogits {
            frontal: Some(ln([0.8, 0.1, 0.1])),
            lateral: Some(ln([0.8, 0.1, 0.1])),
            merge: Some(ln([0.1, 0.7, 0.2])),
        })
        .unwrap();
        assert_eq!((merged.final_label, merged.source_branch), (1, SourceBranch::Merge));

        let lateral = Prediction::from_logits(&BranchLogits {
            frontal: None,
            lateral: Some(ln([0.6, 0.3, 0.1])),
            merge: None,
        })
        .unwrap();
        assert_eq!((lateral.final_label, lateral.source_branch), (0, SourceBranch::Lateral));

        let tie = Prediction::from_logits(&BranchLogits {
            frontal: Some(vec![0.0, 0.0, f64::NEG_INFINITY]),
            lateral: None,
            merge: None,
        })
        .unwrap();
        assert_eq!(tie.final_label, 0);
        assert_eq!(tie.probabilities(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn loss_values() {
        let confident = vec![0.0, 800.0, 0.0];
        let logits = BranchLogits {
            frontal: Some(confident.clone()),
            lateral: Some(confident.clone()),
            merge: Some(confident),
        };
        assert_eq!(joint_loss(&logits, 1).unwrap(), 0.0);

        let flat = BranchLogits {
            frontal: Some(vec![0.3; 3]),
            lateral: Some(vec![-1.0; 3]),
            merge: Some(vec![5.0; 3]),
        };
        assert!((joint_loss(&flat, 2).unwrap() - 3.0 * 3f64.ln()).abs() < 1e-12);
        assert!((joint_loss(&flat, 2).unwrap() - 3.2958).abs() < 1e-4);
        assert!((single_view_loss(&[0.3; 3], 0) - 3f64.ln()).abs() < 1e-12);
        assert_eq!(single_view_loss(&[-900.0, 0.0, -900.0], 1), 0.0);

        let missing = BranchLogits {
            frontal: Some(vec![0.0; 3]),
            lateral: None,
            merge: Some(vec![0.0; 3]),
        };
        assert!(matches!(joint_loss(&missing, 0), Err(Error::TrainingContract(_))));
    }

    #[test]
    fn joint_loss_decomposes_into_single_view_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut draw = || (0..3).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<f64>>();
            let (f, l, m) = (draw(), draw(), draw());
            let y = 1;
            let logits = BranchLogits {
                frontal: Some(f.clone()),
                lateral: Some(l.clone()),
                merge: Some(m.clone()),
            };
            let rest = single_view_loss(&l, y) + single_view_loss(&m, y);
            assert!((joint_loss(&logits, y).unwrap() - rest - single_view_loss(&f, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_names_partition_by_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = MultiviewModel::new(tiny_spec(), &mut rng).unwrap();
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        assert!(names.iter().all(|n| n.starts_with("frontal.") || n.starts_with("lateral.") || n.starts_with("merge.")));
        assert!(names.contains(&"frontal.classifier.0.weight".to_string()));
        assert!(names.contains(&"merge.features.1.bias".to_string()));
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        let merge_in: Vec<usize> = model
            .named_tensors()
            .into_iter()
            .find(|(n, _, _)| n == "merge.features.0.weight")
            .map(|(_, s, _)| s)
            .unwrap();
        assert_eq!(merge_in, vec![4, 6, 3, 3]);
    }

    #[test]
    fn frontal_head_gradient_ignores_lateral_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = MultiviewModel::new(tiny_spec(), &mut rng).unwrap();
        let f = random_image(&mut rng, 16);
        let l1 = random_image(&mut rng, 16);
        let l2 = random_image(&mut rng, 16);
        let mut g1 = model.zeros_like();
        let mut g2 = model.zeros_like();
        model.accumulate_gradient(&f, &l1, 2, &mut g1).unwrap();
        model.accumulate_gradient(&f, &l2, 2, &mut g2).unwrap();
        assert_eq!(g1.frontal.classifier, g2.frontal.classifier);
    }
}
