//! Stage-2 embedding-level MIL classifier: a shared CNN encodes each patch
//! into a feature vector and a scalar attention score, softmax-normalized
//! attention weights pool the features into one global feature, and a
//! single-neuron logistic head produces the image-level probability.

use crate::error::{Error, Result};
use crate::nn::layers::{
    global_avg_pool, global_avg_pool_backward, maxpool2, maxpool2_backward, relu, relu_backward,
    sigmoid, Conv2d, Dense,
};
use crate::nn::{HasParams, Tensor4};
use crate::num::Scalar;
use crate::types::{Label, PatchBag};
use ndarray::{Array1, Array2, Array4, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Probability clamp used by the bag-level binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

/// How the scalar attention score is computed from a patch embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Single linear map from the embedding.
    Linear,
    /// Tanh/sigmoid gated two-branch attention.
    TanhGated,
}

/// Patch encoder architecture: `conv_filters.len()` blocks of 3x3
/// convolution + rectified-linear + 2x2 max pooling, then global average
/// pooling and a linear map to `embedding_dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchEncoderConfig {
    pub conv_filters: Vec<usize>,
    pub embedding_dim: usize,
    pub patch_size: usize,
    pub attention: AttentionKind,
    /// Hidden width of the gated attention branches.
    pub gated_hidden: usize,
}

impl Default for PatchEncoderConfig {
    fn default() -> Self {
        PatchEncoderConfig {
            conv_filters: vec![32, 64, 128, 256],
            embedding_dim: 512,
            patch_size: crate::PATCH_SIZE,
            attention: AttentionKind::Linear,
            gated_hidden: 128,
        }
    }
}

impl PatchEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.is_empty() || self.embedding_dim == 0 {
            return Err(Error::config("patch encoder needs conv blocks and a positive embedding"));
        }
        let div = 1usize << self.conv_filters.len();
        if self.patch_size % div != 0 || self.patch_size / div == 0 {
            return Err(Error::config(format!(
                "patch size {} not divisible by 2^{} pooling stages",
                self.patch_size,
                self.conv_filters.len()
            )));
        }
        Ok(())
    }
}

enum Attention<S: Scalar> {
    Linear(Dense<S>),
    Gated {
        v: Dense<S>,
        u: Dense<S>,
        w: Dense<S>,
    },
}

enum AttCache<S: Scalar> {
    Linear,
    Gated { t: Array2<S>, g: Array2<S> },
}

impl<S: Scalar> Attention<S> {
    fn score(&self, f: &Array2<S>) -> (S, AttCache<S>) {
        match self {
            Attention::Linear(d) => (d.forward(f)[[0, 0]], AttCache::Linear),
            Attention::Gated { v, u, w } => {
                let t = v.forward(f).map(|&z| z.tanh());
                let g = u.forward(f).map(|&z| sigmoid(z));
                let h = &t * &g;
                (w.forward(&h)[[0, 0]], AttCache::Gated { t, g })
            }
        }
    }

    fn backward(&mut self, f: &Array2<S>, cache: &AttCache<S>, dscore: S) -> Array2<S> {
        let ds = Array2::from_elem((1, 1), dscore);
        match (self, cache) {
            (Attention::Linear(d), AttCache::Linear) => d.backward(f, &ds),
            (Attention::Gated { v, u, w }, AttCache::Gated { t, g }) => {
                let h = t * g;
                let dh = w.backward(&h, &ds);
                let one = S::one();
                let dzv = &dh * g * &t.map(|&tv| one - tv * tv);
                let dzu = &dh * t * &g.map(|&gv| gv * (one - gv));
                let mut df = v.backward(f, &dzv);
                df += &u.backward(f, &dzu);
                df
            }
            _ => unreachable!("attention cache kind mismatch"),
        }
    }
}

/// Result of classifying one bag.
#[derive(Debug, Clone)]
pub struct BagOutput<S: Scalar> {
    /// Per-patch embeddings, shape `(N, embedding_dim)`.
    pub features: Array2<S>,
    /// Pre-softmax attention scores.
    pub raw_scores: Array1<S>,
    /// Softmax-normalized attention weights (sum to 1).
    pub weights: Array1<S>,
    /// Attention-weighted average of the features.
    pub global_feature: Array1<S>,
    /// Image-level malignancy probability.
    pub probability: S,
}

struct BlockCache<S: Scalar> {
    input: Tensor4<S>,
    pre_relu: Tensor4<S>,
    relu_out: Tensor4<S>,
}

struct PatchCache<S: Scalar> {
    blocks: Vec<BlockCache<S>>,
    gap_in_shape: (usize, usize, usize, usize),
    gap_out: Array2<S>,
    feature_row: Array2<S>,
    att: AttCache<S>,
}

/// The MIL classifier: shared patch encoder, attention pooling, logistic
/// head.
pub struct MilNet<S: Scalar> {
    pub cfg: PatchEncoderConfig,
    blocks: Vec<Conv2d<S>>,
    embed: Dense<S>,
    att: Attention<S>,
    head: Dense<S>,
}

impl<S: Scalar> MilNet<S> {
    pub fn new<R: Rng>(cfg: &PatchEncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.conv_filters.len());
        let mut in_ch = 1usize;
        for &f in &cfg.conv_filters {
            blocks.push(Conv2d::new(in_ch, f, 3, rng));
            in_ch = f;
        }
        let embed = Dense::new(in_ch, cfg.embedding_dim, rng);
        let att = match cfg.attention {
            AttentionKind::Linear => Attention::Linear(Dense::new(cfg.embedding_dim, 1, rng)),
            AttentionKind::TanhGated => Attention::Gated {
                v: Dense::new(cfg.embedding_dim, cfg.gated_hidden, rng),
                u: Dense::new(cfg.embedding_dim, cfg.gated_hidden, rng),
                w: Dense::new(cfg.gated_hidden, 1, rng),
            },
        };
        let head = Dense::new(cfg.embedding_dim, 1, rng);
        Ok(MilNet {
            cfg: cfg.clone(),
            blocks,
            embed,
            att,
            head,
        })
    }

    fn encode_with_cache(&mut self, patch: &Array2<S>) -> Result<(Array1<S>, S, PatchCache<S>)> {
        let ps = self.cfg.patch_size;
        if patch.dim() != (ps, ps) {
            return Err(Error::ShapeMismatch(format!(
                "patch {:?}, encoder expects {ps}x{ps}",
                patch.dim()
            )));
        }
        let mut x = Array4::zeros((1, 1, ps, ps));
        x.index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), 0)
            .assign(patch);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut cur = x;
        for conv in self.blocks.iter_mut() {
            let z = conv.forward(&cur);
            let r = relu(&z);
            let pooled = maxpool2(&r);
            blocks.push(BlockCache {
                input: cur,
                pre_relu: z,
                relu_out: r,
            });
            cur = pooled;
        }
        let gap_in_shape = cur.dim();
        let gap_out = global_avg_pool(&cur);
        let feature_row = self.embed.forward(&gap_out);
        let (score, att) = self.att.score(&feature_row);
        let feature = feature_row.index_axis(Axis(0), 0).to_owned();
        Ok((
            feature,
            score,
            PatchCache {
                blocks,
                gap_in_shape,
                gap_out,
                feature_row,
                att,
            },
        ))
    }

    /// Encode one patch into its embedding and raw attention score. Takes
    /// `&mut self` only to reuse convolution scratch buffers.
    pub fn encode_patch(&mut self, patch: &Array2<S>) -> Result<(Array1<S>, S)> {
        let (f, s, _) = self.encode_with_cache(patch)?;
        Ok((f, s))
    }

    fn backward_patch(&mut self, cache: &PatchCache<S>, dfeature: &Array1<S>, dscore: S) {
        let mut df = Array2::zeros((1, self.cfg.embedding_dim));
        df.index_axis_mut(Axis(0), 0).assign(dfeature);
        df += &self.att.backward(&cache.feature_row, &cache.att, dscore);
        let dgap = self.embed.backward(&cache.gap_out, &df);
        let mut d = global_avg_pool_backward(&dgap, cache.gap_in_shape);
        for (conv, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let dr = maxpool2_backward(&bc.relu_out, &d);
            let dz = relu_backward(&bc.pre_relu, &dr);
            d = conv.backward(&bc.input, &dz);
        }
    }

    /// Classify raw patch arrays (shape checks against the encoder config,
    /// not the standard 64x64 bag contract).
    pub fn classify_patches(&mut self, patches: &[Array2<S>], deterministic: bool) -> Result<BagOutput<S>> {
        if patches.is_empty() {
            return Err(Error::validation("cannot classify an empty bag"));
        }
        let n = patches.len();
        let mut features = Array2::zeros((n, self.cfg.embedding_dim));
        let mut raw = Array1::zeros(n);
        for (i, p) in patches.iter().enumerate() {
            let (f, s) = self.encode_patch(p)?;
            features.index_axis_mut(Axis(0), i).assign(&f);
            raw[i] = s;
        }
        let (weights, global) = aggregate_bag(&features, &raw, deterministic);
        let mut g_row = Array2::zeros((1, self.cfg.embedding_dim));
        g_row.index_axis_mut(Axis(0), 0).assign(&global);
        let z = self.head.forward(&g_row)[[0, 0]];
        Ok(BagOutput {
            features,
            raw_scores: raw,
            weights,
            global_feature: global,
            probability: sigmoid(z),
        })
    }

    /// Classify a standard patch bag.
    pub fn classify_bag(&mut self, bag: &PatchBag<S>, deterministic: bool) -> Result<BagOutput<S>> {
        bag.validate()?;
        self.classify_patches(&bag.patches, deterministic)
    }

    /// One training forward/backward pass over a bag; gradients accumulate
    /// into the layers. Returns `(loss, probability)`.
    pub fn train_step(
        &mut self,
        patches: &[Array2<S>],
        label: Label,
        deterministic: bool,
    ) -> Result<(f64, f64)> {
        if patches.is_empty() {
            return Err(Error::validation("cannot train on an empty bag"));
        }
        let n = patches.len();
        let mut features = Array2::zeros((n, self.cfg.embedding_dim));
        let mut raw = Array1::zeros(n);
        let mut caches = Vec::with_capacity(n);
        for (i, p) in patches.iter().enumerate() {
            let (f, s, c) = self.encode_with_cache(p)?;
            features.index_axis_mut(Axis(0), i).assign(&f);
            raw[i] = s;
            caches.push(c);
        }
        let (weights, global) = aggregate_bag(&features, &raw, deterministic);
        let mut g_row = Array2::zeros((1, self.cfg.embedding_dim));
        g_row.index_axis_mut(Axis(0), 0).assign(&global);
        let z = self.head.forward(&g_row)[[0, 0]];
        let p = sigmoid(z);
        let pf = p.as_f64();
        let y = label.target::<S>().as_f64();
        let loss = bag_bce_loss(pf, label);

        // d(loss)/dz for clamped BCE composed with the logistic function;
        // inside the clamp this is exactly p - y.
        let dz = if pf > PROB_CLAMP && pf < 1.0 - PROB_CLAMP {
            S::of_f64(pf - y)
        } else {
            S::zero()
        };
        let dz_row = Array2::from_elem((1, 1), dz);
        let dg_row = self.head.backward(&g_row, &dz_row);
        let dg = dg_row.index_axis(Axis(0), 0).to_owned();

        // Softmax-weighted-average backward.
        let fg_dot: Vec<S> = (0..n)
            .map(|i| features.index_axis(Axis(0), i).dot(&dg))
            .collect();
        let g_dot = global.dot(&dg);
        for i in 0..n {
            let dfeat = dg.map(|&v| v * weights[i]);
            let dscore = weights[i] * (fg_dot[i] - g_dot);
            self.backward_patch(&caches[i], &dfeat, dscore);
        }
        Ok((loss, pf))
    }
}

impl<S: Scalar> HasParams<S> for MilNet<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<S>, ArrayViewMutD<S>)) {
        for (i, conv) in self.blocks.iter_mut().enumerate() {
            f(
                &format!("block{i}.w"),
                conv.w.view_mut().into_dyn(),
                conv.gw.view_mut().into_dyn(),
            );
            f(
                &format!("block{i}.b"),
                conv.b.view_mut().into_dyn(),
                conv.gb.view_mut().into_dyn(),
            );
        }
        let dense = |name: &str, d: &mut Dense<S>, f: &mut dyn FnMut(&str, ArrayViewMutD<S>, ArrayViewMutD<S>)| {
            f(
                &format!("{name}.w"),
                d.w.view_mut().into_dyn(),
                d.gw.view_mut().into_dyn(),
            );
            f(
                &format!("{name}.b"),
                d.b.view_mut().into_dyn(),
                d.gb.view_mut().into_dyn(),
            );
        };
        dense("embed", &mut self.embed, f);
        match &mut self.att {
            Attention::Linear(d) => dense("att", d, f),
            Attention::Gated { v, u, w } => {
                dense("att.v", v, f);
                dense("att.u", u, f);
                dense("att.w", w, f);
            }
        }
        dense("head", &mut self.head, f);
    }
}

/// Softmax-normalize the raw scores and average the features with the
/// resulting weights. In deterministic mode all reductions run in a
/// canonical order (descending score, features as tie-break), which makes
/// the result bitwise invariant under bag permutation.
pub fn aggregate_bag<S: Scalar>(
    features: &Array2<S>,
    raw_scores: &Array1<S>,
    deterministic: bool,
) -> (Array1<S>, Array1<S>) {
    let n = raw_scores.len();
    assert_eq!(features.dim().0, n, "features/scores length mismatch");
    let order: Vec<usize> = if deterministic {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            raw_scores[b]
                .partial_cmp(&raw_scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    let fa = features.index_axis(Axis(0), a);
                    let fb = features.index_axis(Axis(0), b);
                    for (x, y) in fa.iter().zip(fb.iter()) {
                        match x.partial_cmp(y) {
                            Some(std::cmp::Ordering::Equal) | None => continue,
                            Some(o) => return o,
                        }
                    }
                    std::cmp::Ordering::Equal
                })
        });
        idx
    } else {
        (0..n).collect()
    };

    let max = raw_scores
        .iter()
        .cloned()
        .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut exps = Array1::zeros(n);
    let mut denom = S::zero();
    for &i in &order {
        let e = (raw_scores[i] - max).exp();
        exps[i] = e;
        denom += e;
    }
    let mut weights = Array1::zeros(n);
    for &i in &order {
        weights[i] = exps[i] / denom;
    }
    let dim = features.dim().1;
    let mut global = Array1::zeros(dim);
    for &i in &order {
        let w = weights[i];
        let f = features.index_axis(Axis(0), i);
        for (g, &v) in global.iter_mut().zip(f.iter()) {
            *g += w * v;
        }
    }
    (weights, global)
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with the probability clamped.
pub fn bag_bce_loss(probability: f64, label: Label) -> f64 {
    let p = probability.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    match label {
        Label::Malignant => -p.ln(),
        Label::Benign => -(1.0 - p).ln(),
    }
}

/// One entry of an oversampled epoch sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OversampleEntry {
    /// Index into the caller's image list.
    pub index: usize,
    /// 0 for the first presentation; repetitions > 0 get fresh
    /// augmentation.
    pub repetition: u32,
}

/// Build one epoch's shuffled sample sequence with the malignant images
/// repeated until `malignant : benign` reaches `target_ratio`. Repetition
/// counts differ by at most one across malignant images; which images get
/// the extra repetition is drawn from the rng.
pub fn oversample_schedule<R: Rng>(
    labels: &[(String, Label)],
    target_ratio: f64,
    rng: &mut R,
) -> Result<Vec<OversampleEntry>> {
    let benign: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, (_, l))| *l == Label::Benign)
        .map(|(i, _)| i)
        .collect();
    let mut malignant: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, (_, l))| *l == Label::Malignant)
        .map(|(i, _)| i)
        .collect();
    if benign.is_empty() || malignant.is_empty() {
        return Err(Error::validation(
            "oversampling needs both classes present",
        ));
    }
    let m = malignant.len();
    let target_total = ((benign.len() as f64) * target_ratio).round() as usize;
    let (base, extra) = if target_total <= m {
        (1usize, 0usize)
    } else {
        (target_total / m, target_total % m)
    };
    // Shuffle to pick which malignant images receive the extra repetition.
    for i in (1..malignant.len()).rev() {
        malignant.swap(i, rng.gen_range(0..=i));
    }
    let mut seq: Vec<OversampleEntry> = benign
        .iter()
        .map(|&index| OversampleEntry {
            index,
            repetition: 0,
        })
        .collect();
    for (pos, &index) in malignant.iter().enumerate() {
        let reps = base + usize::from(pos < extra);
        for r in 0..reps {
            seq.push(OversampleEntry {
                index,
                repetition: r as u32,
            });
        }
    }
    for i in (1..seq.len()).rev() {
        seq.swap(i, rng.gen_range(0..=i));
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> PatchEncoderConfig {
        PatchEncoderConfig {
            conv_filters: vec![2, 4],
            embedding_dim: 8,
            patch_size: 16,
            attention: AttentionKind::Linear,
            gated_hidden: 4,
        }
    }

    fn rand_patch(size: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((size, size), |_| randn(rng))
    }

    #[test]
    fn default_encoder_emits_512d_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MilNet::<f64>::new(&PatchEncoderConfig::default(), &mut rng).unwrap();
        let p = rand_patch(64, &mut rng);
        let (f, _) = net.encode_patch(&p).unwrap();
        assert_eq!(f.len(), 512);
    }

    #[test]
    fn identical_patches_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = MilNet::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        let p = rand_patch(16, &mut rng);
        let (f1, s1) = net.encode_patch(&p).unwrap();
        let (f2, s2) = net.encode_patch(&p).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn wrong_patch_shape_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MilNet::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        assert!(net.encode_patch(&Array2::zeros((8, 16))).is_err());
    }

    #[test]
    fn zero_final_linear_layers_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = MilNet::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        net.embed.w.fill(0.0);
        net.embed.b.fill(0.0);
        if let Attention::Linear(d) = &mut net.att {
            d.w.fill(0.0);
            d.b.fill(0.0);
        }
        let p = rand_patch(16, &mut rng);
        let (f, s) = net.encode_patch(&p).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        assert_eq!(s, 0.0);
    }

    #[test]
    fn aggregate_singleton() {
        let f = Array2::from_shape_fn((1, 4), |(_, j)| j as f64);
        let s = Array1::from_vec(vec![0.7]);
        let (w, g) = aggregate_bag(&f, &s, false);
        assert_eq!(w[0], 1.0);
        assert_eq!(g, f.index_axis(Axis(0), 0).to_owned());
    }

    #[test]
    fn aggregate_equal_scores_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Array2::from_shape_fn((4, 3), |_| randn(&mut rng));
        let s = Array1::from_elem(4, 1.3);
        let (w, g) = aggregate_bag(&f, &s, false);
        for &wi in w.iter() {
            assert!((wi - 0.25).abs() < 1e-15);
        }
        let mean = f.sum_axis(Axis(0)) / 4.0;
        for (a, b) in g.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_ln3_example() {
        let f = Array2::ones((2, 2));
        let s = Array1::from_vec(vec![3.0f64.ln(), 0.0]);
        let (w, _) = aggregate_bag(&f, &s, false);
        assert!((w[0] - 0.75).abs() < 1e-12);
        assert!((w[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Array2::from_shape_fn((5, 3), |_| randn(&mut rng));
        let s = Array1::from_shape_fn(5, |_| randn(&mut rng));
        let shifted = s.map(|&v| v + 123.456);
        let (w1, _) = aggregate_bag(&f, &s, false);
        let (w2, _) = aggregate_bag(&f, &shifted, false);
        for (a, b) in w1.iter().zip(w2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((w1.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariance_exact_in_deterministic_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = MilNet::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        let patches: Vec<Array2<f64>> = (0..7).map(|_| rand_patch(16, &mut rng)).collect();
        let out = net.classify_patches(&patches, true).unwrap();
        let mut permuted = patches.clone();
        permuted.reverse();
        permuted.swap(0, 3);
        let out2 = net.classify_patches(&permuted, true).unwrap();
        assert_eq!(out.probability, out2.probability);
    }

    #[test]
    fn duplication_invariance_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = MilNet::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        let patches: Vec<Array2<f64>> = (0..4).map(|_| rand_patch(16, &mut rng)).collect();
        let out = net.classify_patches(&patches, false).unwrap();
        let mut doubled = patches.clone();
        doubled.extend(patches.iter().cloned());
        let out2 = net.classify_patches(&doubled, false).unwrap();
        assert!((out.probability - out2.probability).abs() < 1e-6);
    }

    #[test]
    fn head_bias_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = MilNet::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        net.head.b.fill(50.0);
        net.head.w.fill(0.0);
        let patches = vec![rand_patch(16, &mut rng)];
        let out = net.classify_patches(&patches, false).unwrap();
        assert!(out.probability > 1.0 - 1e-9);
    }

    #[test]
    fn empty_bag_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = MilNet::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        assert!(net.classify_patches(&[], false).is_err());
    }

    #[test]
    fn bag_output_invariants_on_random_bags() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = MilNet::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        for _ in 0..10 {
            use rand::Rng;
            let n = rng.gen_range(1..6);
            let patches: Vec<Array2<f64>> = (0..n).map(|_| rand_patch(16, &mut rng)).collect();
            let out = net.classify_patches(&patches, false).unwrap();
            assert!((out.weights.sum() - 1.0).abs() < 1e-6);
            // global = sum w_i f_i, recomputed directly.
            let mut manual = Array1::<f64>::zeros(8);
            for i in 0..n {
                manual += &(out.features.index_axis(Axis(0), i).to_owned() * out.weights[i]);
            }
            for (a, b) in manual.iter().zip(out.global_feature.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
            // Convex-combination norm bound.
            let gnorm = out.global_feature.dot(&out.global_feature).sqrt();
            let max_f = (0..n)
                .map(|i| {
                    let f = out.features.index_axis(Axis(0), i);
                    f.dot(&f).sqrt()
                })
                .fold(0.0f64, f64::max);
            assert!(gnorm <= max_f * (1.0 + 1e-9) + 1e-9);
        }
    }

    #[test]
    fn gated_attention_forward_and_training_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = PatchEncoderConfig {
            attention: AttentionKind::TanhGated,
            ..tiny_cfg()
        };
        let mut net = MilNet::<f64>::new(&cfg, &mut rng).unwrap();
        let patches: Vec<Array2<f64>> = (0..3).map(|_| rand_patch(16, &mut rng)).collect();
        let out = net.classify_patches(&patches, false).unwrap();
        assert!((out.weights.sum() - 1.0).abs() < 1e-9);
        crate::nn::zero_grads(&mut net);
        let (loss, _) = net.train_step(&patches, Label::Malignant, false).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn bce_hand_values() {
        assert!(bag_bce_loss(1.0, Label::Malignant) < 1.1e-7);
        assert!(bag_bce_loss(0.0, Label::Benign) < 1.1e-7);
        assert!((bag_bce_loss(0.5, Label::Malignant) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bag_bce_loss(0.5, Label::Benign) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bag_bce_loss(0.9, Label::Benign) - 10.0f64.ln()).abs() < 1e-12);
    }

    fn label_list(benign: usize, malignant: usize) -> Vec<(String, Label)> {
        let mut v = Vec::new();
        for i in 0..benign {
            v.push((format!("b{i}"), Label::Benign));
        }
        for i in 0..malignant {
            v.push((format!("m{i}"), Label::Malignant));
        }
        v
    }

    #[test]
    fn oversample_counting_oracle() {
        let labels = label_list(310, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let seq = oversample_schedule(&labels, 1.0, &mut rng).unwrap();
        let mut counts = std::collections::HashMap::new();
        for e in &seq {
            *counts.entry(e.index).or_insert(0usize) += 1;
        }
        // Every benign image once.
        for i in 0..310 {
            assert_eq!(counts[&i], 1);
        }
        // Malignant images appear 3 or 4 times; exactly 10 of them 4 times.
        let mut fours = 0;
        let mut total_mal = 0;
        for i in 310..410 {
            let c = counts[&i];
            assert!(c == 3 || c == 4, "count {c}");
            total_mal += c;
            if c == 4 {
                fours += 1;
            }
        }
        assert_eq!(total_mal, 310);
        assert_eq!(fours, 10);
    }

    #[test]
    fn oversample_balanced_identity_and_determinism() {
        let labels = label_list(5, 5);
        let mut r1 = ChaCha8Rng::seed_from_u64(14);
        let seq = oversample_schedule(&labels, 1.0, &mut r1).unwrap();
        assert_eq!(seq.len(), 10);
        let mut seen: Vec<usize> = seq.iter().map(|e| e.index).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());

        let mut r2 = ChaCha8Rng::seed_from_u64(14);
        let seq2 = oversample_schedule(&labels, 1.0, &mut r2).unwrap();
        assert_eq!(seq, seq2);
    }

    #[test]
    fn oversample_single_class_errors() {
        let labels = label_list(4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        assert!(oversample_schedule(&labels, 1.0, &mut rng).is_err());
    }
}
