//! Full network assembly: stem, bottleneck encoder stages, low/high feature
//! fusion, prediction heads and the auxiliary supervision head.
//!
//! The forward graph is: stem (3x3 conv + norm + relu) -> encoder stages of
//! residual bottlenecks -> optionally fuse the first stage's output (the
//! "low" tap) with the deepest features -> prediction head. The default head
//! upsamples purely by channel-to-space rearrangement followed by a per-map
//! spatial softmax; the baseline head is a stack of transposed convolutions.

pub mod checkpoint;
pub mod config;

pub use checkpoint::{dump_named_tensor, load_checkpoint, load_into, read_manifest, save_checkpoint};
pub use config::{HeadKind, NetworkConfig};

use crate::error::{invalid, shape_err, Result};
use crate::fasm::{BottleneckInspection, BottleneckSpec, FasmBottleneck, BottleneckCache};
use crate::layers::{
    conv2d_backward, conv2d_forward, param_name, spatial_softmax_backward,
    spatial_softmax_forward, upsample_nearest_backward, upsample_nearest_forward,
    BatchNormLayer, BnMode, ConvLayer, DeconvLayer, GradTape, Gradients, HasParams, SeqOp,
    Sequential,
};
use crate::tensor::{depth_to_space, space_to_depth, Rng, Scalar, Shape, Tensor};

/// Low/high feature fusion: upsample the deep features to the low tap's
/// resolution (nearest neighbor), lift the low tap to the deep channel
/// width with a 1x1 conv, concatenate, and fuse with another 1x1 conv.
#[derive(Debug, Clone)]
pub struct FfmBlock<T: Scalar> {
    /// 1x1 projection of the low tap up to the deep channel width.
    pub proj: ConvLayer<T>,
    /// 1x1 fusion of [projected low | upsampled deep] back to deep width.
    pub fuse: ConvLayer<T>,
}

/// Saved activations for one fusion forward pass.
#[derive(Debug, Clone)]
pub struct FfmCache<T: Scalar> {
    low: Tensor<T>,
    cat: Tensor<T>,
    fy: usize,
    fx: usize,
}

impl<T: Scalar> FfmBlock<T> {
    pub fn new(low_c: usize, deep_c: usize, rng: &mut Rng) -> Result<FfmBlock<T>> {
        Ok(FfmBlock {
            proj: ConvLayer::new(low_c, deep_c, 1, 1, 0, 1, rng)?,
            fuse: ConvLayer::new(2 * deep_c, deep_c, 1, 1, 0, 1, rng)?,
        })
    }

    fn factors(low: Shape, deep: Shape) -> Result<(usize, usize)> {
        if low.h % deep.h != 0 || low.w % deep.w != 0 {
            return shape_err(format!(
                "fusion: low {}x{} not a multiple of deep {}x{}",
                low.h, low.w, deep.h, deep.w
            ));
        }
        Ok((low.h / deep.h, low.w / deep.w))
    }

    pub fn forward(&self, low: &Tensor<T>, deep: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, _) = self.forward_train(low, deep)?;
        Ok(out)
    }

    pub fn forward_train(
        &self,
        low: &Tensor<T>,
        deep: &Tensor<T>,
    ) -> Result<(Tensor<T>, FfmCache<T>)> {
        let (fy, fx) = Self::factors(low.shape(), deep.shape())?;
        let up = upsample_nearest_forward(deep, fy, fx)?;
        let p = conv2d_forward(&self.proj, low)?;
        let cat = crate::tensor::concat_channels(&[p, up])?;
        let out = conv2d_forward(&self.fuse, &cat)?;
        Ok((out, FfmCache { low: low.clone(), cat, fy, fx }))
    }

    /// Returns (grad wrt low tap, grad wrt deep features).
    pub fn backward(
        &self,
        cache: &FfmCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut Gradients<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let gfuse = conv2d_backward(&self.fuse, &cache.cat, grad_out)?;
        let gcat = gfuse.into_input_grad(&param_name(prefix, "fuse"), grads)?;
        let halves = crate::tensor::split_channels(&gcat, 2)?;
        let gproj = conv2d_backward(&self.proj, &cache.low, &halves[0])?;
        let glow = gproj.into_input_grad(&param_name(prefix, "proj"), grads)?;
        let gdeep = upsample_nearest_backward(&halves[1], cache.fy, cache.fx)?;
        Ok((glow, gdeep))
    }
}

impl<T: Scalar> HasParams<T> for FfmBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.proj.visit_params(&param_name(prefix, "proj"), f);
        self.fuse.visit_params(&param_name(prefix, "fuse"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.proj.visit_params_mut(&param_name(prefix, "proj"), f);
        self.fuse.visit_params_mut(&param_name(prefix, "fuse"), f);
    }
}

/// One op of the rearrangement head, exposed as data so tests can check the
/// graph contains no zero-insertion upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DucOp {
    Conv1x1,
    DepthToSpace,
    SpatialSoftmax,
}

const DUC_OPS: [DucOp; 3] = [DucOp::Conv1x1, DucOp::DepthToSpace, DucOp::SpatialSoftmax];

/// Rearrangement head: 1x1 conv to factor^2 * K channels, channel-to-space
/// shuffle by `factor`, then a spatial softmax per joint map. All upsampling
/// is pure data movement.
#[derive(Debug, Clone)]
pub struct DucHead<T: Scalar> {
    pub conv: ConvLayer<T>,
    pub factor: usize,
}

/// Saved activations for one head forward pass: the head input and the
/// softmax output (softmax backward runs from its own output).
#[derive(Debug, Clone)]
pub struct DucCache<T: Scalar> {
    x: Tensor<T>,
    y: Tensor<T>,
}

impl<T: Scalar> DucHead<T> {
    pub fn new(in_c: usize, factor: usize, k: usize, rng: &mut Rng) -> Result<DucHead<T>> {
        if factor == 0 || k == 0 {
            return invalid("head factor and joint count must be positive");
        }
        Ok(DucHead { conv: ConvLayer::new(in_c, factor * factor * k, 1, 1, 0, 1, rng)?, factor })
    }

    pub fn joints(&self) -> usize {
        self.conv.out_channels() / (self.factor * self.factor)
    }

    /// The head's op graph in execution order.
    pub fn ops(&self) -> &'static [DucOp] {
        &DUC_OPS
    }

    fn apply(&self, op: DucOp, x: &Tensor<T>) -> Result<Tensor<T>> {
        match op {
            DucOp::Conv1x1 => conv2d_forward(&self.conv, x),
            DucOp::DepthToSpace => depth_to_space(x, self.factor),
            DucOp::SpatialSoftmax => Ok(spatial_softmax_forward(x)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut t = x.clone();
        for &op in self.ops() {
            t = self.apply(op, &t)?;
        }
        Ok(t)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DucCache<T>)> {
        let y = self.forward(x)?;
        Ok((y.clone(), DucCache { x: x.clone(), y }))
    }

    pub fn backward(
        &self,
        cache: &DucCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let gsoft = spatial_softmax_backward(&cache.y, grad_out)?;
        let gshuf = space_to_depth(&gsoft, self.factor)?;
        let g = conv2d_backward(&self.conv, &cache.x, &gshuf)?;
        g.into_input_grad(&param_name(prefix, "conv"), grads)
    }
}

impl<T: Scalar> HasParams<T> for DucHead<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv.visit_params(&param_name(prefix, "conv"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_params_mut(&param_name(prefix, "conv"), f);
    }
}

/// Baseline head: three stride-2 4x4 transposed convolutions (each followed
/// by batch norm and relu) and a final 1x1 conv to K maps.
pub fn build_sbn_head<T: Scalar>(
    in_c: usize,
    filters: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Sequential<T>> {
    let mut seq = Sequential::new();
    let mut c = in_c;
    for i in 1..=3 {
        seq.push(format!("deconv{i}"), SeqOp::Deconv(DeconvLayer::new(c, filters, 4, 2, 1, rng)?));
        seq.push(format!("bn{i}"), SeqOp::BatchNorm(BatchNormLayer::new(filters)));
        seq.push(format!("relu{i}"), SeqOp::Relu);
        c = filters;
    }
    seq.push("out", SeqOp::Conv(ConvLayer::new(c, k, 1, 1, 0, 1, rng)?));
    Ok(seq)
}

/// Prediction head variants.
#[derive(Debug, Clone)]
pub enum Head<T: Scalar> {
    Duc(DucHead<T>),
    Sbn(Sequential<T>),
}

/// Saved activations for one head forward pass.
#[derive(Debug, Clone)]
pub enum HeadTape<T: Scalar> {
    Duc(DucCache<T>),
    Sbn(GradTape<T>),
}

impl<T: Scalar> Head<T> {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Duc(_) => HeadKind::Duc,
            Head::Sbn(_) => HeadKind::SbnDeconv,
        }
    }

    /// Names of the ops in the head graph, in execution order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        match self {
            Head::Duc(h) => h
                .ops()
                .iter()
                .map(|op| match op {
                    DucOp::Conv1x1 => "conv1x1",
                    DucOp::DepthToSpace => "depth_to_space",
                    DucOp::SpatialSoftmax => "spatial_softmax",
                })
                .collect(),
            Head::Sbn(seq) => seq
                .ops()
                .iter()
                .map(|(_, op)| match op {
                    SeqOp::Conv(_) => "conv",
                    SeqOp::Deconv(_) => "deconv",
                    SeqOp::BatchNorm(_) => "batchnorm",
                    SeqOp::Relu => "relu",
                })
                .collect(),
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Head::Duc(h) => h.forward(x),
            Head::Sbn(seq) => seq.forward_eval(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, HeadTape<T>)> {
        match self {
            Head::Duc(h) => {
                let (y, cache) = h.forward_train(x)?;
                Ok((y, HeadTape::Duc(cache)))
            }
            Head::Sbn(seq) => {
                let (y, tape) = seq.forward_train(x)?;
                Ok((y, HeadTape::Sbn(tape)))
            }
        }
    }

    pub fn backward(
        &self,
        tape: &HeadTape<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        match (self, tape) {
            (Head::Duc(h), HeadTape::Duc(cache)) => h.backward(cache, grad_out, prefix, grads),
            (Head::Sbn(seq), HeadTape::Sbn(t)) => seq.backward(t, prefix, grad_out, grads),
            _ => invalid("head tape does not match head kind"),
        }
    }
}

impl<T: Scalar> HasParams<T> for Head<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            Head::Duc(h) => h.visit_params(prefix, f),
            Head::Sbn(seq) => seq.visit_params(prefix, f),
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            Head::Duc(h) => h.visit_params_mut(prefix, f),
            Head::Sbn(seq) => seq.visit_params_mut(prefix, f),
        }
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            Head::Duc(h) => h.visit_params(prefix, f),
            Head::Sbn(seq) => seq.visit_state(prefix, f),
        }
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            Head::Duc(h) => h.visit_params_mut(prefix, f),
            Head::Sbn(seq) => seq.visit_state_mut(prefix, f),
        }
    }
}

/// Everything a forward pass produces: the final heatmaps, the auxiliary
/// heatmaps when auxiliary supervision is on, and the raw low/deep feature
/// taps for inspection and fusion diagnostics.
#[derive(Debug, Clone)]
pub struct ForwardArtifacts<T: Scalar> {
    pub heatmaps: Tensor<T>,
    pub aux_heatmaps: Option<Tensor<T>>,
    pub low: Tensor<T>,
    pub deep: Tensor<T>,
}

/// Saved activations of one full forward pass, consumed by `backward`.
#[derive(Debug)]
pub struct NetTape<T: Scalar> {
    stem: GradTape<T>,
    stages: Vec<Vec<BottleneckCache<T>>>,
    ffm: Option<FfmCache<T>>,
    head: HeadTape<T>,
    aux: Option<AuxTape<T>>,
}

#[derive(Debug)]
struct AuxTape<T: Scalar> {
    x: Tensor<T>,
    fy: usize,
    fx: usize,
}

impl<T: Scalar> NetTape<T> {
    /// Smallest relu/max margin across the whole pass. Finite-difference
    /// probes reject evaluation points where this is tiny.
    pub fn kink_margin(&self) -> f64 {
        let mut m = self.stem.relu_kink_margin();
        for stage in &self.stages {
            for cache in stage {
                m = m.min(cache.kink_margin());
            }
        }
        if let HeadTape::Sbn(t) = &self.head {
            m = m.min(t.relu_kink_margin());
        }
        m
    }
}

/// The assembled model.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub config: NetworkConfig,
    pub stem: Sequential<T>,
    pub stages: Vec<Vec<FasmBottleneck<T>>>,
    pub ffm: Option<FfmBlock<T>>,
    pub head: Head<T>,
    pub aux: Option<ConvLayer<T>>,
}

impl<T: Scalar> Network<T> {
    /// Build a network from its config. Construction order is fixed (stem,
    /// stages, fusion, auxiliary head, prediction head) so two configs that
    /// differ only in the head draw identical weights for everything else
    /// from the same seeded rng.
    pub fn new(config: NetworkConfig, rng: &mut Rng) -> Result<Network<T>> {
        config.validate()?;
        let widths = &config.stage_widths;
        let deep_c = *widths.last().expect("validated non-empty");

        let mut stem = Sequential::new();
        stem.push(
            "conv",
            SeqOp::Conv(ConvLayer::new(
                config.input_channels,
                widths[0],
                3,
                config.stem_stride(),
                1,
                1,
                rng,
            )?),
        );
        stem.push("bn", SeqOp::BatchNorm(BatchNormLayer::new(widths[0])));
        stem.push("relu", SeqOp::Relu);

        let strides = config.stage_strides()?;
        let mut stages = Vec::with_capacity(widths.len());
        let mut prev = widths[0];
        for (i, (&out_c, &count)) in widths.iter().zip(config.blocks.iter()).enumerate() {
            let mut blocks = Vec::with_capacity(count);
            for b in 0..count {
                let spec = BottleneckSpec {
                    in_c: if b == 0 { prev } else { out_c },
                    out_c,
                    mid_c: config.mid_width(out_c),
                    s: config.s,
                    stride: if b == 0 { strides[i] } else { 1 },
                    fam: config.fam,
                    fsm: config.fsm,
                    fsm_order: config.fsm_order,
                    r_fc: config.r_fc,
                };
                blocks.push(FasmBottleneck::new(&spec, rng)?);
            }
            stages.push(blocks);
            prev = out_c;
        }

        let ffm = if config.ffm { Some(FfmBlock::new(widths[0], deep_c, rng)?) } else { None };

        let fused_to_head =
            config.ffm && config.ffm_to_head && config.head == HeadKind::Duc;
        let aux = if config.aux_weight > 0.0 {
            let fused_to_aux = config.ffm && !fused_to_head;
            let aux_in = if fused_to_aux { deep_c } else { widths[0] };
            Some(ConvLayer::new(aux_in, config.k, 1, 1, 0, 1, rng)?)
        } else {
            None
        };

        let head = match config.head {
            HeadKind::Duc => {
                // Fed from the fused features the head sits at the low tap's
                // resolution, otherwise at the deepest one.
                let factor = if fused_to_head { config.stem_stride() } else { config.f };
                Head::Duc(DucHead::new(deep_c, factor, config.k, rng)?)
            }
            HeadKind::SbnDeconv => {
                Head::Sbn(build_sbn_head(deep_c, config.sbn_filters, config.k, rng)?)
            }
        };

        Ok(Network { config, stem, stages, ffm, head, aux })
    }

    /// (fused features feed the head, fused features feed the aux head).
    /// Fusion output goes to the rearrangement head when configured, else it
    /// supports the auxiliary path; the baseline head always reads the
    /// deepest features directly.
    fn fusion_roles(&self) -> (bool, bool) {
        let to_head = self.ffm.is_some()
            && self.config.ffm_to_head
            && matches!(self.head, Head::Duc(_));
        let to_aux = self.ffm.is_some() && !to_head && self.aux.is_some();
        (to_head, to_aux)
    }

    fn validate_input(&self, x: &Tensor<T>) -> Result<()> {
        let sh = x.shape();
        if sh.c != self.config.input_channels {
            return shape_err(format!(
                "expected {} input channels, got {}",
                self.config.input_channels, sh.c
            ));
        }
        if sh.h == 0 || sh.w == 0 || sh.h % self.config.f != 0 || sh.w % self.config.f != 0 {
            return invalid(format!(
                "input {}x{} not divisible by downsampling factor {}",
                sh.h, sh.w, self.config.f
            ));
        }
        Ok(())
    }

    /// Switch every batch norm in the model (encoder, shortcut and head).
    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for (_, op) in self.stem.ops_mut() {
            if let SeqOp::BatchNorm(bn) = op {
                bn.mode = mode;
            }
        }
        for stage in &mut self.stages {
            for block in stage {
                block.set_bn_mode(mode);
            }
        }
        if let Head::Sbn(seq) = &mut self.head {
            for (_, op) in seq.ops_mut() {
                if let SeqOp::BatchNorm(bn) = op {
                    bn.mode = mode;
                }
            }
        }
    }

    /// Encoder only: stem and stages. Returns the deepest features plus one
    /// tap per stage (tap 0 is the "low" tap the fusion branch consumes).
    pub fn encoder_forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.validate_input(x)?;
        let mut t = self.stem.forward_eval(x)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                t = block.forward_eval(&t)?;
            }
            taps.push(t.clone());
        }
        Ok((t, taps))
    }

    fn aux_forward(&self, conv: &ConvLayer<T>, x: &Tensor<T>, heat: Shape) -> Result<(Tensor<T>, usize, usize)> {
        let maps = conv2d_forward(conv, x)?;
        let msh = maps.shape();
        if heat.h % msh.h != 0 || heat.w % msh.w != 0 {
            return shape_err(format!(
                "auxiliary maps {}x{} do not divide heatmaps {}x{}",
                msh.h, msh.w, heat.h, heat.w
            ));
        }
        let (fy, fx) = (heat.h / msh.h, heat.w / msh.w);
        Ok((upsample_nearest_forward(&maps, fy, fx)?, fy, fx))
    }

    /// Inference pass; batch norm uses running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<ForwardArtifacts<T>> {
        let (deep, taps) = self.encoder_forward(x)?;
        let low = taps[0].clone();
        let (to_head, to_aux) = self.fusion_roles();
        let fused = if to_head || to_aux {
            Some(self.ffm.as_ref().expect("roles imply fusion").forward(&low, &deep)?)
        } else {
            None
        };
        let head_in = if to_head { fused.as_ref().expect("to_head") } else { &deep };
        let heatmaps = self.head.forward_eval(head_in)?;
        let aux_heatmaps = match &self.aux {
            Some(conv) => {
                let ax = if to_aux { fused.as_ref().expect("to_aux") } else { &low };
                Some(self.aux_forward(conv, ax, heatmaps.shape())?.0)
            }
            None => None,
        };
        Ok(ForwardArtifacts { heatmaps, aux_heatmaps, low, deep })
    }

    /// Training pass; batch norms honor their mode and the returned tape
    /// holds everything `backward` needs.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(ForwardArtifacts<T>, NetTape<T>)> {
        self.validate_input(x)?;
        let (mut t, stem_tape) = self.stem.forward_train(x)?;
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (y, cache) = block.forward_train(&t)?;
                t = y;
                caches.push(cache);
            }
            stage_caches.push(caches);
            taps.push(t.clone());
        }
        let deep = t;
        let low = taps[0].clone();

        let (to_head, to_aux) = self.fusion_roles();
        let (fused, ffm_cache) = if to_head || to_aux {
            let (f, c) = self
                .ffm
                .as_ref()
                .expect("roles imply fusion")
                .forward_train(&low, &deep)?;
            (Some(f), Some(c))
        } else {
            (None, None)
        };

        let head_in = if to_head { fused.as_ref().expect("to_head") } else { &deep };
        let head_in = head_in.clone();
        let (heatmaps, head_tape) = self.head.forward_train(&head_in)?;

        let (aux_heatmaps, aux_tape) = match &self.aux {
            Some(conv) => {
                let ax = if to_aux { fused.as_ref().expect("to_aux") } else { &low };
                let (maps, fy, fx) = self.aux_forward(conv, ax, heatmaps.shape())?;
                (Some(maps), Some(AuxTape { x: ax.clone(), fy, fx }))
            }
            None => (None, None),
        };

        Ok((
            ForwardArtifacts { heatmaps, aux_heatmaps, low, deep },
            NetTape {
                stem: stem_tape,
                stages: stage_caches,
                ffm: ffm_cache,
                head: head_tape,
                aux: aux_tape,
            },
        ))
    }

    /// Backpropagate from heatmap (and optional auxiliary) gradients down to
    /// the input, accumulating parameter gradients. Returns grad wrt input.
    pub fn backward(
        &self,
        tape: &NetTape<T>,
        grad_heatmaps: &Tensor<T>,
        grad_aux: Option<&Tensor<T>>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let (to_head, to_aux) = self.fusion_roles();
        let ghead_in = self.head.backward(&tape.head, grad_heatmaps, "head", grads)?;

        let mut gdeep: Option<Tensor<T>> = None;
        let mut glow: Option<Tensor<T>> = None;
        let mut gfused: Option<Tensor<T>> = None;
        let route = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| -> Result<()> {
            match slot {
                Some(acc) => acc.acc(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };

        route(if to_head { &mut gfused } else { &mut gdeep }, ghead_in)?;

        if let (Some(conv), Some(at), Some(ga)) = (&self.aux, &tape.aux, grad_aux) {
            let gmaps = upsample_nearest_backward(ga, at.fy, at.fx)?;
            let g = conv2d_backward(conv, &at.x, &gmaps)?;
            let gax = g.into_input_grad("aux", grads)?;
            route(if to_aux { &mut gfused } else { &mut glow }, gax)?;
        }

        if let (Some(ffm), Some(cache), Some(gf)) = (&self.ffm, &tape.ffm, gfused) {
            let (gl, gd) = ffm.backward(cache, &gf, "ffm", grads)?;
            route(&mut glow, gl)?;
            route(&mut gdeep, gd)?;
        }

        let mut g = gdeep.ok_or_else(|| {
            crate::error::Error::Validation("no gradient reached the encoder".into())
        })?;
        for i in (0..self.stages.len()).rev() {
            // Entering iteration i, g is the gradient wrt stage i's output.
            if i == 0 {
                if let Some(gl) = &glow {
                    g.acc(gl)?;
                }
            }
            for (j, block) in self.stages[i].iter().enumerate().rev() {
                let prefix = format!("stage{}.block{}", i + 1, j + 1);
                g = block.backward(&tape.stages[i][j], &g, &prefix, grads)?;
            }
        }
        self.stem.backward(&tape.stem, "stem", &g, grads)
    }

    /// Per-bottleneck attention/feature dump in execution order, keyed by
    /// the block's parameter prefix. Inference mode.
    pub fn inspect_attention(
        &self,
        x: &Tensor<T>,
    ) -> Result<Vec<(String, BottleneckInspection<T>)>> {
        self.validate_input(x)?;
        let mut t = self.stem.forward_eval(x)?;
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                let ins = block.forward_inspect(&t)?;
                t = block.forward_eval(&t)?;
                out.push((format!("stage{}.block{}", i + 1, j + 1), ins));
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> HasParams<T> for Network<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stem.visit_params(&param_name(prefix, "stem"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.visit_params(&param_name(prefix, &format!("stage{}.block{}", i + 1, j + 1)), f);
            }
        }
        if let Some(ffm) = &self.ffm {
            ffm.visit_params(&param_name(prefix, "ffm"), f);
        }
        self.head.visit_params(&param_name(prefix, "head"), f);
        if let Some(aux) = &self.aux {
            aux.visit_params(&param_name(prefix, "aux"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem.visit_params_mut(&param_name(prefix, "stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_params_mut(
                    &param_name(prefix, &format!("stage{}.block{}", i + 1, j + 1)),
                    f,
                );
            }
        }
        if let Some(ffm) = &mut self.ffm {
            ffm.visit_params_mut(&param_name(prefix, "ffm"), f);
        }
        self.head.visit_params_mut(&param_name(prefix, "head"), f);
        if let Some(aux) = &mut self.aux {
            aux.visit_params_mut(&param_name(prefix, "aux"), f);
        }
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stem.visit_state(&param_name(prefix, "stem"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.visit_state(&param_name(prefix, &format!("stage{}.block{}", i + 1, j + 1)), f);
            }
        }
        if let Some(ffm) = &self.ffm {
            ffm.visit_state(&param_name(prefix, "ffm"), f);
        }
        self.head.visit_state(&param_name(prefix, "head"), f);
        if let Some(aux) = &self.aux {
            aux.visit_state(&param_name(prefix, "aux"), f);
        }
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem.visit_state_mut(&param_name(prefix, "stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_state_mut(
                    &param_name(prefix, &format!("stage{}.block{}", i + 1, j + 1)),
                    f,
                );
            }
        }
        if let Some(ffm) = &mut self.ffm {
            ffm.visit_state_mut(&param_name(prefix, "ffm"), f);
        }
        self.head.visit_state_mut(&param_name(prefix, "head"), f);
        if let Some(aux) = &mut self.aux {
            aux.visit_state_mut(&param_name(prefix, "aux"), f);
        }
    }
}
