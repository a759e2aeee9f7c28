//! Stage-1 localization network: an encoder-decoder fully convolutional
//! network with skip connections that outputs a per-pixel mass-probability
//! softmap, plus its training loss (weighted binary cross-entropy combined
//! with soft Dice).

use crate::error::{Error, Result};
use crate::nn::layers::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, sigmoid, split_channels,
    upsample2, upsample2_backward, BatchNorm2, BnCache, Conv2d,
};
use crate::nn::{HasParams, Tensor4};
use crate::num::Scalar;
use crate::types::{BoundingBox, SoftMap};
use ndarray::{Array2, Array4, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the
/// cross-entropy losses.
pub const PROB_CLAMP: f64 = 1e-7;

/// Feature normalization applied after each convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    Batch,
}

/// Architecture of the localization network. Channel width doubles at each
/// of `depth` encoder levels starting from `base_filters`; every
/// convolution is `kernel x kernel` with rectified-linear activation, the
/// decoder concatenates the matching encoder features, and the final layer
/// is a 1x1 convolution with a logistic activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocNetConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub convs_per_block: usize,
    pub kernel: usize,
    pub norm: NormKind,
}

impl Default for LocNetConfig {
    fn default() -> Self {
        LocNetConfig {
            depth: 4,
            base_filters: 16,
            convs_per_block: 2,
            kernel: 3,
            norm: NormKind::Batch,
        }
    }
}

impl LocNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_filters < 1 || self.convs_per_block < 1 {
            return Err(Error::config(
                "locnet depth, base_filters and convs_per_block must be >= 1",
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("locnet kernel size must be odd"));
        }
        Ok(())
    }
}

/// Composite loss weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocLossConfig {
    pub wce_weight: f64,
    pub dice_weight: f64,
    pub positive_class_weight: f64,
    pub dice_smooth: f64,
}

impl Default for LocLossConfig {
    fn default() -> Self {
        LocLossConfig {
            wce_weight: 0.8,
            dice_weight: 0.2,
            positive_class_weight: 28.0,
            dice_smooth: 1.0,
        }
    }
}

impl LocLossConfig {
    pub fn validate(&self) -> Result<()> {
        if ((self.wce_weight + self.dice_weight) - 1.0).abs() > 1e-9 {
            return Err(Error::config("wce_weight + dice_weight must equal 1"));
        }
        if self.positive_class_weight <= 0.0 || self.dice_smooth <= 0.0 {
            return Err(Error::config(
                "positive_class_weight and dice_smooth must be positive",
            ));
        }
        Ok(())
    }
}

/// One convolution with optional normalization and rectified-linear
/// activation.
struct ConvUnit<S: Scalar> {
    conv: Conv2d<S>,
    bn: Option<BatchNorm2<S>>,
}

struct UnitCache<S: Scalar> {
    input: Tensor4<S>,
    conv_out: Option<Tensor4<S>>,
    bn: Option<BnCache<S>>,
    pre_relu: Tensor4<S>,
}

impl<S: Scalar> ConvUnit<S> {
    fn new<R: Rng>(in_ch: usize, out_ch: usize, k: usize, norm: NormKind, rng: &mut R) -> Self {
        ConvUnit {
            conv: Conv2d::new(in_ch, out_ch, k, rng),
            bn: match norm {
                NormKind::Batch => Some(BatchNorm2::new(out_ch)),
                NormKind::None => None,
            },
        }
    }

    fn forward_train(&mut self, x: &Tensor4<S>) -> (Tensor4<S>, UnitCache<S>) {
        let z = self.conv.forward(x);
        let (pre_relu, conv_out, bn_cache) = match self.bn.as_mut() {
            Some(bn) => {
                let (h, c) = bn.forward_train(&z);
                (h, Some(z), Some(c))
            }
            None => (z, None, None),
        };
        let y = relu(&pre_relu);
        (
            y,
            UnitCache {
                input: x.clone(),
                conv_out,
                bn: bn_cache,
                pre_relu,
            },
        )
    }

    fn forward_eval(&mut self, x: &Tensor4<S>) -> Tensor4<S> {
        let z = self.conv.forward(x);
        let h = match self.bn.as_ref() {
            Some(bn) => bn.forward_eval(&z),
            None => z,
        };
        relu(&h)
    }

    fn backward(&mut self, cache: &UnitCache<S>, dy: &Tensor4<S>) -> Tensor4<S> {
        let dh = relu_backward(&cache.pre_relu, dy);
        let dz = match (self.bn.as_mut(), cache.bn.as_ref(), cache.conv_out.as_ref()) {
            (Some(bn), Some(c), Some(z)) => bn.backward(z, c, &dh),
            _ => dh,
        };
        self.conv.backward(&cache.input, &dz)
    }
}

type Block<S> = Vec<ConvUnit<S>>;

fn block_forward_train<S: Scalar>(
    block: &mut Block<S>,
    x: &Tensor4<S>,
) -> (Tensor4<S>, Vec<UnitCache<S>>) {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(block.len());
    for unit in block.iter_mut() {
        let (y, c) = unit.forward_train(&cur);
        caches.push(c);
        cur = y;
    }
    (cur, caches)
}

fn block_forward_eval<S: Scalar>(block: &mut [ConvUnit<S>], x: &Tensor4<S>) -> Tensor4<S> {
    let mut cur = x.clone();
    for unit in block.iter_mut() {
        cur = unit.forward_eval(&cur);
    }
    cur
}

fn block_backward<S: Scalar>(
    block: &mut Block<S>,
    caches: &[UnitCache<S>],
    dy: &Tensor4<S>,
) -> Tensor4<S> {
    let mut d = dy.clone();
    for (unit, cache) in block.iter_mut().zip(caches).rev() {
        d = unit.backward(cache, &d);
    }
    d
}

/// Encoder-decoder softmap network.
pub struct LocNet<S: Scalar> {
    pub cfg: LocNetConfig,
    pub input_hw: (usize, usize),
    enc: Vec<Block<S>>,
    bottleneck: Block<S>,
    dec: Vec<Block<S>>,
    final_conv: Conv2d<S>,
}

/// Intermediate activations needed by [`LocNet::backward`].
pub struct LocNetCache<S: Scalar> {
    enc: Vec<(Vec<UnitCache<S>>, Tensor4<S>)>,
    bottleneck: Vec<UnitCache<S>>,
    dec: Vec<(usize, Vec<UnitCache<S>>)>,
    final_input: Tensor4<S>,
    pub probs: Tensor4<S>,
}

impl<S: Scalar> LocNet<S> {
    /// Build the network for a fixed input shape. The spatial shape must be
    /// divisible by `2^depth`.
    pub fn new<R: Rng>(cfg: &LocNetConfig, input_hw: (usize, usize), rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let div = 1usize << cfg.depth;
        if input_hw.0 % div != 0 || input_hw.1 % div != 0 {
            return Err(Error::config(format!(
                "input shape {}x{} not divisible by 2^depth = {div}",
                input_hw.0, input_hw.1
            )));
        }
        let width = |level: usize| cfg.base_filters << level;
        let mut enc = Vec::with_capacity(cfg.depth);
        let mut in_ch = 1usize;
        for level in 0..cfg.depth {
            let mut block = Vec::new();
            for c in 0..cfg.convs_per_block {
                let ic = if c == 0 { in_ch } else { width(level) };
                block.push(ConvUnit::new(ic, width(level), cfg.kernel, cfg.norm, rng));
            }
            in_ch = width(level);
            enc.push(block);
        }
        let mut bottleneck = Vec::new();
        for c in 0..cfg.convs_per_block {
            let ic = if c == 0 { in_ch } else { width(cfg.depth) };
            bottleneck.push(ConvUnit::new(ic, width(cfg.depth), cfg.kernel, cfg.norm, rng));
        }
        let mut dec = Vec::with_capacity(cfg.depth);
        for j in 0..cfg.depth {
            let level = cfg.depth - 1 - j;
            let up_ch = width(level + 1);
            let mut block = Vec::new();
            for c in 0..cfg.convs_per_block {
                let ic = if c == 0 {
                    up_ch + width(level)
                } else {
                    width(level)
                };
                block.push(ConvUnit::new(ic, width(level), cfg.kernel, cfg.norm, rng));
            }
            dec.push(block);
        }
        let final_conv = Conv2d::new(cfg.base_filters, 1, 1, rng);
        Ok(LocNet {
            cfg: cfg.clone(),
            input_hw,
            enc,
            bottleneck,
            dec,
            final_conv,
        })
    }

    fn check_input(&self, x: &Tensor4<S>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 1 || (h, w) != self.input_hw {
            return Err(Error::ShapeMismatch(format!(
                "locnet input {:?}, expected (N, 1, {}, {})",
                x.dim(),
                self.input_hw.0,
                self.input_hw.1
            )));
        }
        Ok(())
    }

    /// Training-mode forward over a batch `(N, 1, H, W)`.
    pub fn forward_train(&mut self, x: &Tensor4<S>) -> Result<(Tensor4<S>, LocNetCache<S>)> {
        self.check_input(x)?;
        let depth = self.cfg.depth;
        let mut enc_caches = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for block in self.enc.iter_mut() {
            let (y, caches) = block_forward_train(block, &cur);
            cur = maxpool2(&y);
            skips.push(y.clone());
            enc_caches.push((caches, y));
        }
        let (mut cur, bott_caches) = block_forward_train(&mut self.bottleneck, &cur);
        let mut dec_caches = Vec::with_capacity(depth);
        for (j, block) in self.dec.iter_mut().enumerate() {
            let level = depth - 1 - j;
            let up = upsample2(&cur);
            let up_ch = up.dim().1;
            let cat = concat_channels(&up, &skips[level]);
            let (y, caches) = block_forward_train(block, &cat);
            dec_caches.push((up_ch, caches));
            cur = y;
        }
        let z = self.final_conv.forward(&cur);
        let probs = z.map(|&v| sigmoid(v));
        Ok((
            probs.clone(),
            LocNetCache {
                enc: enc_caches,
                bottleneck: bott_caches,
                dec: dec_caches,
                final_input: cur,
                probs,
            },
        ))
    }

    /// Backpropagate `dL/dprobs`, accumulating parameter gradients.
    pub fn backward(&mut self, cache: &LocNetCache<S>, dprobs: &Tensor4<S>) {
        let one = S::one();
        let mut dz = dprobs.clone();
        ndarray::Zip::from(&mut dz)
            .and(&cache.probs)
            .for_each(|d, &p| {
                *d = *d * p * (one - p);
            });
        let mut d = self.final_conv.backward(&cache.final_input, &dz);

        let depth = self.cfg.depth;
        let mut dskips: Vec<Option<Tensor4<S>>> = (0..depth).map(|_| None).collect();
        for j in (0..depth).rev() {
            let level = depth - 1 - j;
            let (up_ch, caches) = &cache.dec[j];
            d = block_backward(&mut self.dec[j], caches, &d);
            let (dup, dskip) = split_channels(&d, *up_ch);
            dskips[level] = Some(dskip);
            d = upsample2_backward(&dup);
        }
        d = block_backward(&mut self.bottleneck, &cache.bottleneck, &d);
        for level in (0..depth).rev() {
            let (caches, pre_pool) = &cache.enc[level];
            let mut dpre = maxpool2_backward(pre_pool, &d);
            if let Some(ds) = dskips[level].take() {
                dpre += &ds;
            }
            d = block_backward(&mut self.enc[level], caches, &dpre);
        }
    }

    /// Inference-mode forward over a batch. Takes `&mut self` only to
    /// reuse internal scratch buffers; parameters are untouched.
    pub fn forward_eval(&mut self, x: &Tensor4<S>) -> Result<Tensor4<S>> {
        self.check_input(x)?;
        let depth = self.cfg.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for block in self.enc.iter_mut() {
            let y = block_forward_eval(block, &cur);
            cur = maxpool2(&y);
            skips.push(y);
        }
        cur = block_forward_eval(&mut self.bottleneck, &cur);
        for (j, block) in self.dec.iter_mut().enumerate() {
            let level = depth - 1 - j;
            let up = upsample2(&cur);
            let cat = concat_channels(&up, &skips[level]);
            cur = block_forward_eval(block, &cat);
        }
        let z = self.final_conv.forward(&cur);
        Ok(z.map(|&v| sigmoid(v)))
    }

    /// Softmap for a single whitened image.
    pub fn forward_softmap(&mut self, image: &Array2<S>) -> Result<SoftMap<S>> {
        let (h, w) = image.dim();
        if (h, w) != self.input_hw {
            return Err(Error::ShapeMismatch(format!(
                "image {h}x{w}, locnet expects {}x{}",
                self.input_hw.0, self.input_hw.1
            )));
        }
        let mut x = Array4::zeros((1, 1, h, w));
        x.index_axis_mut(ndarray::Axis(0), 0)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(image);
        let probs = self.forward_eval(&x)?;
        let map = probs
            .index_axis(ndarray::Axis(0), 0)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        SoftMap::new(map)
    }

    /// Zero the final-layer weights and push the bias strongly negative;
    /// used by saturation tests.
    pub fn saturate_off(&mut self) {
        self.final_conv.w.fill(S::zero());
        self.final_conv.b.fill(S::of_f64(-30.0));
    }
}

impl<S: Scalar> HasParams<S> for LocNet<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<S>, ArrayViewMutD<S>)) {
        fn visit_block<S: Scalar>(
            prefix: &str,
            block: &mut Block<S>,
            f: &mut dyn FnMut(&str, ArrayViewMutD<S>, ArrayViewMutD<S>),
        ) {
            for (i, unit) in block.iter_mut().enumerate() {
                f(
                    &format!("{prefix}.c{i}.w"),
                    unit.conv.w.view_mut().into_dyn(),
                    unit.conv.gw.view_mut().into_dyn(),
                );
                f(
                    &format!("{prefix}.c{i}.b"),
                    unit.conv.b.view_mut().into_dyn(),
                    unit.conv.gb.view_mut().into_dyn(),
                );
                if let Some(bn) = unit.bn.as_mut() {
                    f(
                        &format!("{prefix}.c{i}.gamma"),
                        bn.gamma.view_mut().into_dyn(),
                        bn.ggamma.view_mut().into_dyn(),
                    );
                    f(
                        &format!("{prefix}.c{i}.beta"),
                        bn.beta.view_mut().into_dyn(),
                        bn.gbeta.view_mut().into_dyn(),
                    );
                }
            }
        }
        for (l, block) in self.enc.iter_mut().enumerate() {
            visit_block(&format!("enc{l}"), block, f);
        }
        visit_block("bott", &mut self.bottleneck, f);
        for (l, block) in self.dec.iter_mut().enumerate() {
            visit_block(&format!("dec{l}"), block, f);
        }
        f(
            "final.w",
            self.final_conv.w.view_mut().into_dyn(),
            self.final_conv.gw.view_mut().into_dyn(),
        );
        f(
            "final.b",
            self.final_conv.b.view_mut().into_dyn(),
            self.final_conv.gb.view_mut().into_dyn(),
        );
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        fn visit_block<S: Scalar>(
            prefix: &str,
            block: &mut Block<S>,
            f: &mut dyn FnMut(&str, ArrayViewMutD<f64>),
        ) {
            for (i, unit) in block.iter_mut().enumerate() {
                if let Some(bn) = unit.bn.as_mut() {
                    f(
                        &format!("{prefix}.c{i}.running_mean"),
                        bn.running_mean.view_mut().into_dyn(),
                    );
                    f(
                        &format!("{prefix}.c{i}.running_var"),
                        bn.running_var.view_mut().into_dyn(),
                    );
                }
            }
        }
        for (l, block) in self.enc.iter_mut().enumerate() {
            visit_block(&format!("enc{l}"), block, f);
        }
        visit_block("bott", &mut self.bottleneck, f);
        for (l, block) in self.dec.iter_mut().enumerate() {
            visit_block(&format!("dec{l}"), block, f);
        }
    }
}

// --- losses ---------------------------------------------------------------

fn check_shapes<S: Scalar>(softmap: &Array2<S>, target: &Array2<bool>) -> Result<()> {
    if softmap.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "softmap {:?} vs target {:?}",
            softmap.dim(),
            target.dim()
        )));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean over pixels of `-[w * y * ln(p) + (1 - y) * ln(1 - p)]` with
/// probabilities clamped away from 0 and 1.
pub fn wce_loss<S: Scalar>(
    softmap: &Array2<S>,
    target: &Array2<bool>,
    pos_weight: f64,
) -> Result<f64> {
    check_shapes(softmap, target)?;
    let n = softmap.len() as f64;
    let mut sum = 0.0f64;
    for (&p, &y) in softmap.iter().zip(target.iter()) {
        let p = clamp_prob(p.as_f64());
        sum += if y {
            -pos_weight * p.ln()
        } else {
            -(1.0 - p).ln()
        };
    }
    Ok(sum / n)
}

/// `1 - (2 * sum(p*y) + smooth) / (sum(p) + sum(y) + smooth)`.
pub fn soft_dice_loss<S: Scalar>(
    softmap: &Array2<S>,
    target: &Array2<bool>,
    smooth: f64,
) -> Result<f64> {
    check_shapes(softmap, target)?;
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut ysum = 0.0f64;
    for (&p, &y) in softmap.iter().zip(target.iter()) {
        let p = p.as_f64();
        psum += p;
        if y {
            inter += p;
            ysum += 1.0;
        }
    }
    Ok(1.0 - (2.0 * inter + smooth) / (psum + ysum + smooth))
}

/// `wce_weight * wce + dice_weight * dice`.
pub fn composite_loss<S: Scalar>(
    softmap: &Array2<S>,
    target: &Array2<bool>,
    cfg: &LocLossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let wce = wce_loss(softmap, target, cfg.positive_class_weight)?;
    let dice = soft_dice_loss(softmap, target, cfg.dice_smooth)?;
    Ok(cfg.wce_weight * wce + cfg.dice_weight * dice)
}

/// Rasterize the union of half-open boxes into a binary mask.
pub fn boxes_to_mask(boxes: &[BoundingBox], shape: (usize, usize)) -> Array2<bool> {
    let mut mask = Array2::from_elem(shape, false);
    for b in boxes {
        let y1 = (b.y_max as usize).min(shape.0);
        let x1 = (b.x_max as usize).min(shape.1);
        for y in b.y_min as usize..y1 {
            for x in b.x_min as usize..x1 {
                mask[[y, x]] = true;
            }
        }
    }
    mask
}

/// Batch-mean composite loss and its gradient with respect to the softmap.
pub fn composite_loss_batch_with_grad<S: Scalar>(
    probs: &Tensor4<S>,
    targets: &[Array2<bool>],
    cfg: &LocLossConfig,
) -> Result<(f64, Tensor4<S>)> {
    cfg.validate()?;
    let (n, c, h, w) = probs.dim();
    if c != 1 || n != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "probs {:?} vs {} targets",
            probs.dim(),
            targets.len()
        )));
    }
    let mut grad = Array4::<S>::zeros(probs.raw_dim());
    let mut total = 0.0f64;
    let npix = (h * w) as f64;
    let batch_scale = 1.0 / n as f64;
    let wp = cfg.positive_class_weight;
    for i in 0..n {
        let t = &targets[i];
        if t.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "target {:?} vs probs {h}x{w}",
                t.dim()
            )));
        }
        let p3 = probs.index_axis(ndarray::Axis(0), i);
        let p2 = p3.index_axis(ndarray::Axis(0), 0);

        let mut inter = 0.0f64;
        let mut psum = 0.0f64;
        let mut ysum = 0.0f64;
        let mut wce_sum = 0.0f64;
        for (&p, &y) in p2.iter().zip(t.iter()) {
            let pf = p.as_f64();
            psum += pf;
            let pc = clamp_prob(pf);
            if y {
                inter += pf;
                ysum += 1.0;
                wce_sum += -wp * pc.ln();
            } else {
                wce_sum += -(1.0 - pc).ln();
            }
        }
        let a = 2.0 * inter + cfg.dice_smooth;
        let b = psum + ysum + cfg.dice_smooth;
        let wce = wce_sum / npix;
        let dice = 1.0 - a / b;
        total += cfg.wce_weight * wce + cfg.dice_weight * dice;

        let mut g3 = grad.index_axis_mut(ndarray::Axis(0), i);
        let mut g2 = g3.index_axis_mut(ndarray::Axis(0), 0);
        for ((g, &p), &y) in g2.iter_mut().zip(p2.iter()).zip(t.iter()) {
            let pf = p.as_f64();
            let dwce = if pf > PROB_CLAMP && pf < 1.0 - PROB_CLAMP {
                if y {
                    -wp / pf / npix
                } else {
                    1.0 / (1.0 - pf) / npix
                }
            } else {
                0.0
            };
            let yv = if y { 1.0 } else { 0.0 };
            let ddice = -(2.0 * yv * b - a) / (b * b);
            *g = S::of_f64((cfg.wce_weight * dwce + cfg.dice_weight * ddice) * batch_scale);
        }
    }
    Ok((total * batch_scale, grad))
}
