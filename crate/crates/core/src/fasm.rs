//! Split-aggregation residual bottleneck with dual feature selection.
//!
//! The buildup: [`FamBlock`] aggregates multi-scale context by chaining 3x3
//! convolutions across channel splits (each split sees the accumulated
//! output of the previous one, so later splits have larger receptive fields
//! at a fraction of a full conv's parameter cost). [`FsmBlock`] produces two
//! attention maps over a feature tensor: a per-position map computed by 1x1
//! convolutions (location branch) and a per-channel vector computed from
//! pooled statistics (channel branch). [`FasmBottleneck`] runs the
//! aggregation path, rescales it with both attention branches, and adds the
//! identity back in.

use crate::error::{invalid, shape_err, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, batchnorm_infer, conv2d_backward, conv2d_forward,
    dense_backward, dense_forward, param_name, pool_backward, pool_forward, relu_backward,
    relu_forward, sigmoid_backward, sigmoid_forward, BatchNormLayer, BnCache, BnMode, ConvLayer,
    DenseLayer, Gradients, HasParams, PoolCache, PoolKind,
};
use crate::tensor::{elementwise, split_channels, concat_channels, ElemOp, Rng, Scalar, Shape, Tensor};

/// Weight count of the split 3x3 convolutions: (s-1) kernels over c/s
/// channels each, versus 9c^2 for one full-width 3x3 conv.
pub fn fam_param_count(c: usize, s: usize) -> usize {
    assert!(s >= 1 && c % s == 0, "channels must divide by split count");
    (s - 1) * 9 * (c / s) * (c / s)
}

/// Multi-scale aggregation block: 1x1 reduce, split recurrence, 1x1 expand.
#[derive(Debug, Clone)]
pub struct FamBlock<T: Scalar> {
    pub s: usize,
    /// 1x1 reduction; carries the block stride.
    pub pre_conv: ConvLayer<T>,
    /// s-1 shape-preserving 3x3 convs; g[i] handles split i+2.
    pub g: Vec<ConvLayer<T>>,
    /// 1x1 expansion back to the block's output width.
    pub post_conv: ConvLayer<T>,
}

/// Saved activations for one [`FamBlock`] forward pass.
#[derive(Debug, Clone)]
pub struct FamCache<T: Scalar> {
    x: Tensor<T>,
    /// Input to g[i] (split i+2 plus the previous split's output).
    z: Vec<Tensor<T>>,
    cat: Tensor<T>,
}

impl<T: Scalar> FamBlock<T> {
    pub fn new(
        in_c: usize,
        mid_c: usize,
        out_c: usize,
        s: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<FamBlock<T>> {
        if s < 2 {
            return invalid(format!("split count {s} must be at least 2"));
        }
        if mid_c % s != 0 {
            return invalid(format!("mid channels {mid_c} not divisible by s={s}"));
        }
        let group = mid_c / s;
        let mut g = Vec::with_capacity(s - 1);
        for _ in 0..s - 1 {
            g.push(ConvLayer::new(group, group, 3, 1, 1, 1, rng)?);
        }
        Ok(FamBlock {
            s,
            pre_conv: ConvLayer::new(in_c, mid_c, 1, stride, 0, 1, rng)?,
            g,
            post_conv: ConvLayer::new(mid_c, out_c, 1, 1, 0, 1, rng)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.post_conv.out_channels()
    }

    /// Reduce, run the split recurrence (first split passes through
    /// unconvolved, each later split is convolved together with its
    /// predecessor's output), concatenate, expand.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FamCache<T>)> {
        let u = conv2d_forward(&self.pre_conv, x)?;
        let xs = split_channels(&u, self.s)?;
        let mut ys: Vec<Tensor<T>> = Vec::with_capacity(self.s);
        let mut zs: Vec<Tensor<T>> = Vec::with_capacity(self.s - 1);
        ys.push(xs[0].clone());
        for i in 1..self.s {
            let z = elementwise(ElemOp::Add, &xs[i], &ys[i - 1])?;
            ys.push(conv2d_forward(&self.g[i - 1], &z)?);
            zs.push(z);
        }
        let cat = concat_channels(&ys)?;
        let out = conv2d_forward(&self.post_conv, &cat)?;
        Ok((out, FamCache { x: x.clone(), z: zs, cat }))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(x)?.0)
    }

    /// Reverse the recurrence: each split's gradient feeds both its own
    /// 3x3 conv and the previous split's accumulator.
    pub fn backward(
        &self,
        cache: &FamCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let gpost = conv2d_backward(&self.post_conv, &cache.cat, grad_out)?;
        let gcat = gpost.into_input_grad(&param_name(prefix, "post"), grads)?;
        let mut gy = split_channels(&gcat, self.s)?;
        let mut gxs: Vec<Tensor<T>> = vec![Tensor::zeros(gy[0].shape()); self.s];
        for i in (1..self.s).rev() {
            let gconv = conv2d_backward(&self.g[i - 1], &cache.z[i - 1], &gy[i])?;
            let gz =
                gconv.into_input_grad(&param_name(prefix, &format!("g{}", i + 1)), grads)?;
            gy[i - 1].acc(&gz)?;
            gxs[i] = gz;
        }
        gxs[0] = gy[0].clone();
        let gu = concat_channels(&gxs)?;
        let gpre = conv2d_backward(&self.pre_conv, &cache.x, &gu)?;
        gpre.into_input_grad(&param_name(prefix, "pre"), grads)
    }
}

impl<T: Scalar> HasParams<T> for FamBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.pre_conv.visit_params(&param_name(prefix, "pre"), f);
        for (i, conv) in self.g.iter().enumerate() {
            conv.visit_params(&param_name(prefix, &format!("g{}", i + 2)), f);
        }
        self.post_conv.visit_params(&param_name(prefix, "post"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.pre_conv.visit_params_mut(&param_name(prefix, "pre"), f);
        for (i, conv) in self.g.iter_mut().enumerate() {
            conv.visit_params_mut(&param_name(prefix, &format!("g{}", i + 2)), f);
        }
        self.post_conv.visit_params_mut(&param_name(prefix, "post"), f);
    }
}

/// Dual attention block: location branch (1x1 convs over positions) and
/// channel branch (dense pair over pooled statistics).
#[derive(Debug, Clone)]
pub struct FsmBlock<T: Scalar> {
    /// Location branch: squeeze channels to a single map, then mix.
    pub lss_conv1: ConvLayer<T>,
    pub lss_conv2: ConvLayer<T>,
    /// Channel branch: bottlenecked dense pair over pooled channel stats.
    pub cs_fc1: DenseLayer<T>,
    pub cs_fc2: DenseLayer<T>,
}

impl<T: Scalar> FsmBlock<T> {
    /// `r_fc` is the channel-branch bottleneck ratio (hidden width c/r_fc,
    /// floored at 1).
    pub fn new(c: usize, r_fc: usize, rng: &mut Rng) -> Result<FsmBlock<T>> {
        if r_fc == 0 {
            return invalid("fc reduction ratio must be positive");
        }
        let hidden = (c / r_fc).max(1);
        Ok(FsmBlock {
            lss_conv1: ConvLayer::new(c, 1, 1, 1, 0, 1, rng)?,
            lss_conv2: ConvLayer::new(1, 1, 1, 1, 0, 1, rng)?,
            cs_fc1: DenseLayer::new(c, hidden, rng),
            cs_fc2: DenseLayer::new(hidden, c, rng),
        })
    }
}

impl<T: Scalar> HasParams<T> for FsmBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.lss_conv1.visit_params(&param_name(prefix, "lss1"), f);
        self.lss_conv2.visit_params(&param_name(prefix, "lss2"), f);
        self.cs_fc1.visit_params(&param_name(prefix, "cs1"), f);
        self.cs_fc2.visit_params(&param_name(prefix, "cs2"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.lss_conv1.visit_params_mut(&param_name(prefix, "lss1"), f);
        self.lss_conv2.visit_params_mut(&param_name(prefix, "lss2"), f);
        self.cs_fc1.visit_params_mut(&param_name(prefix, "cs1"), f);
        self.cs_fc2.visit_params_mut(&param_name(prefix, "cs2"), f);
    }
}

/// Saved activations for the location branch.
#[derive(Debug, Clone)]
pub struct LssCache<T: Scalar> {
    x: Tensor<T>,
    a1: Tensor<T>,
    q1: Tensor<T>,
    a2: Tensor<T>,
    beta: Tensor<T>,
}

/// Saved activations for the channel branch.
#[derive(Debug, Clone)]
pub struct CsCache<T: Scalar> {
    x: Tensor<T>,
    avg_cache: PoolCache,
    max_cache: PoolCache,
    z: Tensor<T>,
    h1: Tensor<T>,
    r1: Tensor<T>,
    alpha: Tensor<T>,
}

/// Location-sensitive rescaling: beta = sigmoid(relu(W2(relu(W1(x))))),
/// shape (n,1,h,w); returns (x + beta*x, beta).
pub fn lss_forward<T: Scalar>(
    block: &FsmBlock<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (out, cache) = lss_forward_train(block, x)?;
    Ok((out, cache.beta))
}

pub fn lss_forward_train<T: Scalar>(
    block: &FsmBlock<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, LssCache<T>)> {
    let a1 = conv2d_forward(&block.lss_conv1, x)?;
    let q1 = relu_forward(&a1);
    let a2 = conv2d_forward(&block.lss_conv2, &q1)?;
    let q2 = relu_forward(&a2);
    let beta = sigmoid_forward(&q2);
    let scaled = elementwise(ElemOp::Mul, x, &beta)?;
    let out = elementwise(ElemOp::Add, x, &scaled)?;
    Ok((out, LssCache { x: x.clone(), a1, q1, a2, beta }))
}

pub fn lss_backward<T: Scalar>(
    block: &FsmBlock<T>,
    cache: &LssCache<T>,
    grad_out: &Tensor<T>,
    prefix: &str,
    grads: &mut Gradients<T>,
) -> Result<Tensor<T>> {
    // out = x + beta*x with beta broadcast over channels.
    let mut gx = elementwise(ElemOp::Mul, grad_out, &cache.beta)?;
    gx.acc(grad_out)?;
    let gbeta = sum_channels(&elementwise(ElemOp::Mul, grad_out, &cache.x)?);
    // beta = sigmoid(relu(a2)); sigmoid_backward consumes the saved output.
    let q2 = relu_forward(&cache.a2);
    let gq2 = sigmoid_backward(&sigmoid_forward(&q2), &gbeta)?;
    let ga2 = relu_backward(&cache.a2, &gq2)?;
    let g2 = conv2d_backward(&block.lss_conv2, &cache.q1, &ga2)?;
    let gq1 = g2.into_input_grad(&param_name(prefix, "lss2"), grads)?;
    let ga1 = relu_backward(&cache.a1, &gq1)?;
    let g1 = conv2d_backward(&block.lss_conv1, &cache.x, &ga1)?;
    let gx_conv = g1.into_input_grad(&param_name(prefix, "lss1"), grads)?;
    gx.acc(&gx_conv)?;
    Ok(gx)
}

/// Channel-wise rescaling: z = global_avg(x) + global_max(x); alpha =
/// sigmoid(W2(relu(W1(z)))), shape (n,c,1,1); returns (x + alpha*x, alpha).
pub fn cs_forward<T: Scalar>(
    block: &FsmBlock<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (out, cache) = cs_forward_train(block, x)?;
    Ok((out, cache.alpha))
}

pub fn cs_forward_train<T: Scalar>(
    block: &FsmBlock<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, CsCache<T>)> {
    let (avg, avg_cache) = pool_forward(PoolKind::GlobalAvg, x)?;
    let (max, max_cache) = pool_forward(PoolKind::GlobalMax, x)?;
    let z = elementwise(ElemOp::Add, &avg, &max)?;
    let h1 = dense_forward(&block.cs_fc1, &z)?;
    let r1 = relu_forward(&h1);
    let h2 = dense_forward(&block.cs_fc2, &r1)?;
    let alpha = sigmoid_forward(&h2);
    let scaled = elementwise(ElemOp::Mul, x, &alpha)?;
    let out = elementwise(ElemOp::Add, x, &scaled)?;
    Ok((out, CsCache { x: x.clone(), avg_cache, max_cache, z, h1, r1, alpha }))
}

pub fn cs_backward<T: Scalar>(
    block: &FsmBlock<T>,
    cache: &CsCache<T>,
    grad_out: &Tensor<T>,
    prefix: &str,
    grads: &mut Gradients<T>,
) -> Result<Tensor<T>> {
    let mut gx = elementwise(ElemOp::Mul, grad_out, &cache.alpha)?;
    gx.acc(grad_out)?;
    let galpha = sum_spatial(&elementwise(ElemOp::Mul, grad_out, &cache.x)?);
    let gh2 = sigmoid_backward(&cache.alpha, &galpha)?;
    let g2 = dense_backward(&block.cs_fc2, &cache.r1, &gh2)?;
    grads.accumulate(&param_name(prefix, "cs2.weight"), g2.weight)?;
    grads.accumulate(&param_name(prefix, "cs2.bias"), g2.bias)?;
    let gh1 = relu_backward(&cache.h1, &g2.x)?;
    let g1 = dense_backward(&block.cs_fc1, &cache.z, &gh1)?;
    grads.accumulate(&param_name(prefix, "cs1.weight"), g1.weight)?;
    grads.accumulate(&param_name(prefix, "cs1.bias"), g1.bias)?;
    // z = avg + max, so the dense input gradient feeds both pool backwards.
    gx.acc(&pool_backward(PoolKind::GlobalAvg, &cache.avg_cache, &g1.x)?)?;
    gx.acc(&pool_backward(PoolKind::GlobalMax, &cache.max_cache, &g1.x)?)?;
    Ok(gx)
}

/// Sum over the channel axis, keeping (n,1,h,w).
fn sum_channels<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let sh = t.shape();
    let mut out = Tensor::zeros(Shape::new(sh.n, 1, sh.h, sh.w));
    for n in 0..sh.n {
        for c in 0..sh.c {
            let base = t.offset(n, c, 0, 0);
            let obase = out.offset(n, 0, 0, 0);
            for i in 0..sh.h * sh.w {
                let v = t.data()[base + i];
                out.data_mut()[obase + i] += v;
            }
        }
    }
    out
}

/// Sum over the spatial axes, keeping (n,c,1,1).
fn sum_spatial<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let sh = t.shape();
    let mut out = Tensor::zeros(Shape::new(sh.n, sh.c, 1, 1));
    for n in 0..sh.n {
        for c in 0..sh.c {
            let base = t.offset(n, c, 0, 0);
            let mut acc = T::zero();
            for i in 0..sh.h * sh.w {
                acc += t.data()[base + i];
            }
            let idx = out.offset(n, c, 0, 0);
            out.data_mut()[idx] = acc;
        }
    }
    out
}

/// How the two attention branches are applied to the aggregated features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsmOrder {
    /// Both branches read the same features; their rescaled outputs are
    /// summed. This is the primary configuration.
    Parallel,
    /// Channel branch first, location branch on its output (ablation).
    CsLss,
    /// Location branch first, channel branch on its output (ablation).
    LssCs,
}

impl FsmOrder {
    pub fn parse(s: &str) -> Result<FsmOrder> {
        match s {
            "parallel" => Ok(FsmOrder::Parallel),
            "cs-lss" => Ok(FsmOrder::CsLss),
            "lss-cs" => Ok(FsmOrder::LssCs),
            other => invalid(format!("unknown fsm order {other:?}")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FsmOrder::Parallel => "parallel",
            FsmOrder::CsLss => "cs-lss",
            FsmOrder::LssCs => "lss-cs",
        }
    }
}

/// Residual interior: either the split-aggregation block or a plain
/// reduce / 3x3 / expand chain of the same shape (used when aggregation is
/// ablated away).
#[derive(Debug, Clone)]
pub enum ResidualPath<T: Scalar> {
    Fam(FamBlock<T>),
    Plain {
        reduce: ConvLayer<T>,
        mid: ConvLayer<T>,
        expand: ConvLayer<T>,
    },
}

#[derive(Debug, Clone)]
pub enum PathCache<T: Scalar> {
    Fam(FamCache<T>),
    Plain { x: Tensor<T>, r: Tensor<T>, m: Tensor<T> },
}

impl<T: Scalar> ResidualPath<T> {
    fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PathCache<T>)> {
        match self {
            ResidualPath::Fam(fam) => {
                let (out, cache) = fam.forward_train(x)?;
                Ok((out, PathCache::Fam(cache)))
            }
            ResidualPath::Plain { reduce, mid, expand } => {
                let r = conv2d_forward(reduce, x)?;
                let m = conv2d_forward(mid, &r)?;
                let out = conv2d_forward(expand, &m)?;
                Ok((out, PathCache::Plain { x: x.clone(), r, m }))
            }
        }
    }

    fn backward(
        &self,
        cache: &PathCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        match (self, cache) {
            (ResidualPath::Fam(fam), PathCache::Fam(c)) => {
                fam.backward(c, grad_out, prefix, grads)
            }
            (ResidualPath::Plain { reduce, mid, expand }, PathCache::Plain { x, r, m }) => {
                let ge = conv2d_backward(expand, m, grad_out)?;
                let gm = ge.into_input_grad(&param_name(prefix, "expand"), grads)?;
                let gmid = conv2d_backward(mid, r, &gm)?;
                let gr = gmid.into_input_grad(&param_name(prefix, "mid"), grads)?;
                let gred = conv2d_backward(reduce, x, &gr)?;
                gred.into_input_grad(&param_name(prefix, "reduce"), grads)
            }
            _ => invalid("path cache does not match path kind"),
        }
    }
}

impl<T: Scalar> HasParams<T> for ResidualPath<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            ResidualPath::Fam(fam) => fam.visit_params(prefix, f),
            ResidualPath::Plain { reduce, mid, expand } => {
                reduce.visit_params(&param_name(prefix, "reduce"), f);
                mid.visit_params(&param_name(prefix, "mid"), f);
                expand.visit_params(&param_name(prefix, "expand"), f);
            }
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            ResidualPath::Fam(fam) => fam.visit_params_mut(prefix, f),
            ResidualPath::Plain { reduce, mid, expand } => {
                reduce.visit_params_mut(&param_name(prefix, "reduce"), f);
                mid.visit_params_mut(&param_name(prefix, "mid"), f);
                expand.visit_params_mut(&param_name(prefix, "expand"), f);
            }
        }
    }
}

/// Construction parameters for one bottleneck.
#[derive(Debug, Clone)]
pub struct BottleneckSpec {
    pub in_c: usize,
    pub out_c: usize,
    /// Interior width between reduce and expand.
    pub mid_c: usize,
    pub s: usize,
    pub stride: usize,
    /// Use the split-aggregation interior (false = plain 3x3 interior).
    pub fam: bool,
    /// Attach the dual attention block (false = conventional residual).
    pub fsm: bool,
    pub fsm_order: FsmOrder,
    pub r_fc: usize,
}

/// Residual bottleneck: interior path, one batch norm on the path output,
/// optional dual attention, then relu over the recombined identity.
#[derive(Debug, Clone)]
pub struct FasmBottleneck<T: Scalar> {
    pub path: ResidualPath<T>,
    pub bn: BatchNormLayer<T>,
    pub fsm: Option<FsmBlock<T>>,
    pub fsm_order: FsmOrder,
    /// 1x1 projection + norm, present when shape or stride changes.
    pub shortcut: Option<(ConvLayer<T>, BatchNormLayer<T>)>,
}

/// Saved activations for one bottleneck forward pass.
#[derive(Debug, Clone)]
pub struct BottleneckCache<T: Scalar> {
    x: Tensor<T>,
    path: PathCache<T>,
    bn: BnCache<T>,
    fsm: Option<FsmTrace<T>>,
    shortcut_bn: Option<BnCache<T>>,
    pre_act: Tensor<T>,
}

impl<T: Scalar> BottleneckCache<T> {
    /// Smallest distance of any activation to a gradient discontinuity
    /// (relu inputs; gap between the two largest values under a global max
    /// pool). Finite-difference checks are only meaningful when this margin
    /// exceeds the probe step times the local sensitivity.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        let mut relu_margin = |t: &Tensor<T>| {
            for &v in t.data() {
                margin = margin.min(v.as_f64().abs());
            }
        };
        relu_margin(&self.pre_act);
        match &self.fsm {
            Some(FsmTrace::Parallel { cs, lss }) => {
                margin = margin.min(cs_margin(cs)).min(lss_margin(lss));
            }
            Some(FsmTrace::Serial { first, second }) => {
                for stage in [first, second] {
                    margin = margin.min(match stage {
                        SerialStage::Cs(c) => cs_margin(c),
                        SerialStage::Lss(c) => lss_margin(c),
                    });
                }
            }
            None => {}
        }
        margin
    }
}

fn lss_margin<T: Scalar>(c: &LssCache<T>) -> f64 {
    let mut m = f64::INFINITY;
    for t in [&c.a1, &c.a2] {
        for &v in t.data() {
            m = m.min(v.as_f64().abs());
        }
    }
    m
}

fn cs_margin<T: Scalar>(c: &CsCache<T>) -> f64 {
    let mut m = f64::INFINITY;
    for &v in c.h1.data() {
        m = m.min(v.as_f64().abs());
    }
    // Distance between the two largest values per channel map: below this,
    // a perturbation can flip the max-pool argmax.
    let sh = c.x.shape();
    for n in 0..sh.n {
        for ch in 0..sh.c {
            let base = c.x.offset(n, ch, 0, 0);
            let mut top = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for i in 0..sh.h * sh.w {
                let v = c.x.data()[base + i].as_f64();
                if v > top {
                    second = top;
                    top = v;
                } else if v > second {
                    second = v;
                }
            }
            if second.is_finite() {
                m = m.min(top - second);
            }
        }
    }
    m
}

#[derive(Debug, Clone)]
enum FsmTrace<T: Scalar> {
    Parallel { cs: CsCache<T>, lss: LssCache<T> },
    /// Serial orders store the first stage's cache and the second stage's
    /// cache (whose input is the first stage's output).
    Serial { first: SerialStage<T>, second: SerialStage<T> },
}

#[derive(Debug, Clone)]
enum SerialStage<T: Scalar> {
    Cs(CsCache<T>),
    Lss(LssCache<T>),
}

/// The dual-branch recombination: y = id + (f + alpha*f) + (f + beta*f),
/// out = relu(id + y). Returns (y, out). The identity enters twice; that is
/// the block's defining recombination, kept literal.
pub fn dual_branch_combine<T: Scalar>(
    id: &Tensor<T>,
    f: &Tensor<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let b_cs = elementwise(ElemOp::Add, f, &elementwise(ElemOp::Mul, f, alpha)?)?;
    let b_lss = elementwise(ElemOp::Add, f, &elementwise(ElemOp::Mul, f, beta)?)?;
    let mut y = id.clone();
    y.acc(&b_cs)?;
    y.acc(&b_lss)?;
    let mut pre = id.clone();
    pre.acc(&y)?;
    Ok((y, relu_forward(&pre)))
}

impl<T: Scalar> FasmBottleneck<T> {
    pub fn new(spec: &BottleneckSpec, rng: &mut Rng) -> Result<FasmBottleneck<T>> {
        if spec.stride == 0 {
            return invalid("stride must be positive");
        }
        let path = if spec.fam {
            ResidualPath::Fam(FamBlock::new(
                spec.in_c, spec.mid_c, spec.out_c, spec.s, spec.stride, rng,
            )?)
        } else {
            ResidualPath::Plain {
                reduce: ConvLayer::new(spec.in_c, spec.mid_c, 1, spec.stride, 0, 1, rng)?,
                mid: ConvLayer::new(spec.mid_c, spec.mid_c, 3, 1, 1, 1, rng)?,
                expand: ConvLayer::new(spec.mid_c, spec.out_c, 1, 1, 0, 1, rng)?,
            }
        };
        let fsm = if spec.fsm {
            Some(FsmBlock::new(spec.out_c, spec.r_fc, rng)?)
        } else {
            None
        };
        let shortcut = if spec.in_c != spec.out_c || spec.stride != 1 {
            Some((
                ConvLayer::new(spec.in_c, spec.out_c, 1, spec.stride, 0, 1, rng)?,
                BatchNormLayer::new(spec.out_c),
            ))
        } else {
            None
        };
        Ok(FasmBottleneck {
            path,
            bn: BatchNormLayer::new(spec.out_c),
            fsm,
            fsm_order: spec.fsm_order,
            shortcut,
        })
    }

    /// Set every batch-norm layer in the block to the given mode.
    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn.mode = mode;
        if let Some((_, bn)) = &mut self.shortcut {
            bn.mode = mode;
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BottleneckCache<T>)> {
        let (p, path_cache) = self.path.forward_train(x)?;
        let (f, bn_cache) = batchnorm_forward(&mut self.bn, &p)?;
        let (id, shortcut_bn) = match &mut self.shortcut {
            Some((conv, bn)) => {
                let projected = conv2d_forward(conv, x)?;
                let (normed, cache) = batchnorm_forward(bn, &projected)?;
                (normed, Some(cache))
            }
            None => (x.clone(), None),
        };
        if id.shape() != f.shape() {
            return shape_err(format!(
                "identity {} does not match residual path output {}",
                id.shape(),
                f.shape()
            ));
        }
        let (pre_act, out, fsm_trace) = match (&self.fsm, self.fsm_order) {
            (None, _) => {
                let mut pre = id.clone();
                pre.acc(&f)?;
                let out = relu_forward(&pre);
                (pre, out, None)
            }
            (Some(fsm), FsmOrder::Parallel) => {
                let (b_cs, cs) = cs_forward_train(fsm, &f)?;
                let (b_lss, lss) = lss_forward_train(fsm, &f)?;
                let mut y = id.clone();
                y.acc(&b_cs)?;
                y.acc(&b_lss)?;
                let mut pre = id.clone();
                pre.acc(&y)?;
                let out = relu_forward(&pre);
                (pre, out, Some(FsmTrace::Parallel { cs, lss }))
            }
            (Some(fsm), order) => {
                let (mid, out_t, first, second) = match order {
                    FsmOrder::CsLss => {
                        let (x1, c1) = cs_forward_train(fsm, &f)?;
                        let (x2, c2) = lss_forward_train(fsm, &x1)?;
                        (x1, x2, SerialStage::Cs(c1), SerialStage::Lss(c2))
                    }
                    FsmOrder::LssCs => {
                        let (x1, c1) = lss_forward_train(fsm, &f)?;
                        let (x2, c2) = cs_forward_train(fsm, &x1)?;
                        (x1, x2, SerialStage::Lss(c1), SerialStage::Cs(c2))
                    }
                    FsmOrder::Parallel => unreachable!(),
                };
                let _ = mid;
                let mut y = id.clone();
                y.acc(&out_t)?;
                let mut pre = id.clone();
                pre.acc(&y)?;
                let out = relu_forward(&pre);
                (pre, out, Some(FsmTrace::Serial { first, second }))
            }
        };
        let cache = BottleneckCache {
            x: x.clone(),
            path: path_cache,
            bn: bn_cache,
            fsm: fsm_trace,
            shortcut_bn,
            pre_act,
        };
        Ok((out, cache))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        // Same wiring as forward_train but through the pure inference path.
        let p = match &self.path {
            ResidualPath::Fam(fam) => fam.forward(x)?,
            ResidualPath::Plain { reduce, mid, expand } => {
                conv2d_forward(expand, &conv2d_forward(mid, &conv2d_forward(reduce, x)?)?)?
            }
        };
        let f = batchnorm_infer(&self.bn, &p)?;
        let id = match &self.shortcut {
            Some((conv, bn)) => batchnorm_infer(bn, &conv2d_forward(conv, x)?)?,
            None => x.clone(),
        };
        if id.shape() != f.shape() {
            return shape_err(format!(
                "identity {} does not match residual path output {}",
                id.shape(),
                f.shape()
            ));
        }
        match (&self.fsm, self.fsm_order) {
            (None, _) => {
                let mut pre = id.clone();
                pre.acc(&f)?;
                Ok(relu_forward(&pre))
            }
            (Some(fsm), FsmOrder::Parallel) => {
                let (_, alpha) = cs_forward(fsm, &f)?;
                let (_, beta) = lss_forward(fsm, &f)?;
                Ok(dual_branch_combine(&id, &f, &alpha, &beta)?.1)
            }
            (Some(fsm), order) => {
                let chained = match order {
                    FsmOrder::CsLss => lss_forward(fsm, &cs_forward(fsm, &f)?.0)?.0,
                    FsmOrder::LssCs => cs_forward(fsm, &lss_forward(fsm, &f)?.0)?.0,
                    FsmOrder::Parallel => unreachable!(),
                };
                let mut y = id.clone();
                y.acc(&chained)?;
                let mut pre = id.clone();
                pre.acc(&y)?;
                Ok(relu_forward(&pre))
            }
        }
    }

    /// Forward pass that also surfaces the attention maps and the
    /// aggregated features, for offline inspection dumps.
    pub fn forward_inspect(&self, x: &Tensor<T>) -> Result<BottleneckInspection<T>> {
        let p = match &self.path {
            ResidualPath::Fam(fam) => fam.forward(x)?,
            ResidualPath::Plain { reduce, mid, expand } => {
                conv2d_forward(expand, &conv2d_forward(mid, &conv2d_forward(reduce, x)?)?)?
            }
        };
        let f = batchnorm_infer(&self.bn, &p)?;
        let (alpha, beta) = match &self.fsm {
            Some(fsm) => {
                let a = match self.fsm_order {
                    FsmOrder::Parallel | FsmOrder::CsLss => cs_forward(fsm, &f)?.1,
                    FsmOrder::LssCs => cs_forward(fsm, &lss_forward(fsm, &f)?.0)?.1,
                };
                let b = match self.fsm_order {
                    FsmOrder::Parallel | FsmOrder::LssCs => lss_forward(fsm, &f)?.1,
                    FsmOrder::CsLss => lss_forward(fsm, &cs_forward(fsm, &f)?.0)?.1,
                };
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let out = self.forward_eval(x)?;
        Ok(BottleneckInspection { features: f, alpha, beta, out })
    }

    pub fn backward(
        &self,
        cache: &BottleneckCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let gpre = relu_backward(&cache.pre_act, grad_out)?;
        // Gradients wrt the (possibly projected) identity and the bn'd path
        // output f, depending on the recombination that ran.
        let (gid, gf) = match (&self.fsm, &cache.fsm) {
            (None, None) => (gpre.clone(), gpre.clone()),
            (Some(fsm), Some(FsmTrace::Parallel { cs, lss })) => {
                // pre = 2*id + B_cs + B_lss, both branches read f.
                let mut gf = cs_backward(fsm, cs, &gpre, prefix_fsm(prefix).as_str(), grads)?;
                gf.acc(&lss_backward(fsm, lss, &gpre, prefix_fsm(prefix).as_str(), grads)?)?;
                let gid = gpre.scale(T::from_f64(2.0));
                (gid, gf)
            }
            (Some(fsm), Some(FsmTrace::Serial { first, second })) => {
                let g_mid = match second {
                    SerialStage::Cs(c) => {
                        cs_backward(fsm, c, &gpre, prefix_fsm(prefix).as_str(), grads)?
                    }
                    SerialStage::Lss(c) => {
                        lss_backward(fsm, c, &gpre, prefix_fsm(prefix).as_str(), grads)?
                    }
                };
                let gf = match first {
                    SerialStage::Cs(c) => {
                        cs_backward(fsm, c, &g_mid, prefix_fsm(prefix).as_str(), grads)?
                    }
                    SerialStage::Lss(c) => {
                        lss_backward(fsm, c, &g_mid, prefix_fsm(prefix).as_str(), grads)?
                    }
                };
                let gid = gpre.scale(T::from_f64(2.0));
                (gid, gf)
            }
            _ => return invalid("bottleneck cache does not match fsm configuration"),
        };
        let (gp, ggamma, gbeta) = batchnorm_backward(&self.bn, &cache.bn, &gf)?;
        grads.accumulate(&param_name(prefix, "bn.gamma"), ggamma)?;
        grads.accumulate(&param_name(prefix, "bn.beta"), gbeta)?;
        let mut gx = self.path.backward(&cache.path, &gp, &param_name(prefix, "path"), grads)?;
        match (&self.shortcut, &cache.shortcut_bn) {
            (Some((conv, bn)), Some(bn_cache)) => {
                let (gproj, ggamma, gbeta) = batchnorm_backward(bn, bn_cache, &gid)?;
                grads.accumulate(&param_name(prefix, "sc.bn.gamma"), ggamma)?;
                grads.accumulate(&param_name(prefix, "sc.bn.beta"), gbeta)?;
                let gconv = conv2d_backward(conv, &cache.x, &gproj)?;
                let gsc = gconv.into_input_grad(&param_name(prefix, "sc.conv"), grads)?;
                gx.acc(&gsc)?;
            }
            (None, None) => gx.acc(&gid)?,
            _ => return invalid("bottleneck cache does not match shortcut configuration"),
        }
        Ok(gx)
    }
}

fn prefix_fsm(prefix: &str) -> String {
    param_name(prefix, "fsm")
}

/// Inspection dump of one bottleneck: aggregated features plus (when the
/// attention block is present) the channel and location maps.
#[derive(Debug, Clone)]
pub struct BottleneckInspection<T: Scalar> {
    pub features: Tensor<T>,
    pub alpha: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
    pub out: Tensor<T>,
}

impl<T: Scalar> HasParams<T> for FasmBottleneck<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.path.visit_params(&param_name(prefix, "path"), f);
        self.bn.visit_params(&param_name(prefix, "bn"), f);
        if let Some(fsm) = &self.fsm {
            fsm.visit_params(&param_name(prefix, "fsm"), f);
        }
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit_params(&param_name(prefix, "sc.conv"), f);
            bn.visit_params(&param_name(prefix, "sc.bn"), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.path.visit_params_mut(&param_name(prefix, "path"), f);
        self.bn.visit_params_mut(&param_name(prefix, "bn"), f);
        if let Some(fsm) = &mut self.fsm {
            fsm.visit_params_mut(&param_name(prefix, "fsm"), f);
        }
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_params_mut(&param_name(prefix, "sc.conv"), f);
            bn.visit_params_mut(&param_name(prefix, "sc.bn"), f);
        }
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.path.visit_state(&param_name(prefix, "path"), f);
        self.bn.visit_state(&param_name(prefix, "bn"), f);
        if let Some(fsm) = &self.fsm {
            fsm.visit_state(&param_name(prefix, "fsm"), f);
        }
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit_state(&param_name(prefix, "sc.conv"), f);
            bn.visit_state(&param_name(prefix, "sc.bn"), f);
        }
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.path.visit_state_mut(&param_name(prefix, "path"), f);
        self.bn.visit_state_mut(&param_name(prefix, "bn"), f);
        if let Some(fsm) = &mut self.fsm {
            fsm.visit_state_mut(&param_name(prefix, "fsm"), f);
        }
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_state_mut(&param_name(prefix, "sc.conv"), f);
            bn.visit_state_mut(&param_name(prefix, "sc.bn"), f);
        }
    }
}
