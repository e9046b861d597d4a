//! Compilation of an [`ArchitectureSpec`] into an executable two-exit
//! model.
//!
//! A compiled model is a trunk (the spec's layer list, possibly with a
//! concatenation head spliced in before the final pooling layer) plus an
//! optional early-exit branch hanging off the attach point. Layers are
//! partitioned into the common block (shared by both exits), the
//! early-exit block, and the final block; inference cost is attributed to
//! blocks along that partition.

use crate::arch::{ArchitectureSpec, EeVariant, LayerCfg};
use crate::error::{Error, Result};
use crate::ops::{self, BnCache, Padding};
use crate::params::ParamSet;
use crate::rng::{Rng, Stream};
use crate::tensor::{Scalar, Tensor};

/// Which block of the two-exit partition a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Common,
    EarlyExit,
    Final,
}

#[derive(Debug, Clone)]
pub(crate) struct ResProj {
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

/// Layer with resolved dimensions.
#[derive(Debug, Clone)]
pub(crate) enum LayerOp {
    Conv {
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
        cin: usize,
        cout: usize,
    },
    Depthwise {
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
        c: usize,
    },
    Pointwise {
        cin: usize,
        cout: usize,
    },
    BatchNorm {
        c: usize,
    },
    Relu,
    ResidualAdd {
        from: usize,
        proj: Option<ResProj>,
    },
    Pool,
    Dense {
        n: usize,
        m: usize,
    },
    Flatten,
    /// Early-view head: depthwise-convolve the first `c_ef` channels of the
    /// input and concatenate the result onto it.
    EarlyView {
        c_ef: usize,
        c_in: usize,
    },
    /// Ablation head: average-pool the early-exit depthwise output down to
    /// the input's spatial dims and concatenate it onto the input.
    FmapConcat {
        factor_h: usize,
        factor_w: usize,
        ee_layer: usize,
        ee_c: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub name: String,
    pub op: LayerOp,
    /// Activation shape without the batch dim: `[h, w, c]` or `[d]`.
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub block: Block,
}

/// Forward/infer mode. Train mode uses mini-batch statistics in batch norm
/// and records the state the backward pass needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Both heads' logits and softmax outputs. `early` fields are `None` for
/// models without an early exit.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits_ee: Option<Tensor<T>>,
    pub probs_ee: Option<Tensor<T>>,
    pub logits_ef: Tensor<T>,
    pub probs_ef: Tensor<T>,
}

/// Saved activations from one forward pass, consumed by [`GraphModel::backward`].
pub struct Trace<T> {
    mode: Mode,
    input: Tensor<T>,
    acts: Vec<Tensor<T>>,
    ee_acts: Vec<Tensor<T>>,
    bn_caches: Vec<Option<BnCache<T>>>,
    /// Number of layer executions in the pass; the common block is shared,
    /// so this equals trunk + branch length exactly.
    pub layer_runs: usize,
}

impl<T> Trace<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Compiled two-exit model.
#[derive(Debug, Clone)]
pub struct GraphModel<T: Scalar> {
    arch: ArchitectureSpec,
    trunk: Vec<Layer>,
    ee: Vec<Layer>,
    params: ParamSet<T>,
    /// Trunk layer index whose output feeds the early-exit branch.
    attach: Option<usize>,
    configured_attach: Option<usize>,
    num_classes: usize,
    input_shape: [usize; 3],
    seed: u64,
    ev: Option<EvInfo>,
    fmap: bool,
}

#[derive(Debug, Clone)]
pub struct EvInfo {
    pub c_ef: usize,
    /// Trunk index of the early-view layer.
    pub trunk_idx: usize,
}

impl ArchitectureSpec {
    fn to_layers(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, cfg)| {
                let op = match *cfg {
                    LayerCfg::Conv { filters, kernel, stride, padding } => LayerOp::Conv {
                        kh: kernel[0],
                        kw: kernel[1],
                        stride,
                        padding,
                        cin: 0,
                        cout: filters,
                    },
                    LayerCfg::Depthwise { kernel, stride, padding } => LayerOp::Depthwise {
                        kh: kernel[0],
                        kw: kernel[1],
                        stride,
                        padding,
                        c: 0,
                    },
                    LayerCfg::Pointwise { filters } => LayerOp::Pointwise { cin: 0, cout: filters },
                    LayerCfg::Batchnorm => LayerOp::BatchNorm { c: 0 },
                    LayerCfg::Relu => LayerOp::Relu,
                    LayerCfg::ResidualAdd { from, projection } => LayerOp::ResidualAdd {
                        from,
                        proj: projection.then_some(ResProj { stride: 0, cin: 0, cout: 0 }),
                    },
                    LayerCfg::Pool => LayerOp::Pool,
                    LayerCfg::Dense { units } => LayerOp::Dense { n: 0, m: units },
                    LayerCfg::Flatten => LayerOp::Flatten,
                };
                Layer {
                    name: format!("{}{}", cfg.kind_name(), i),
                    op,
                    in_shape: vec![],
                    out_shape: vec![],
                    block: Block::Common,
                }
            })
            .collect()
    }
}

/// Walk the layer list, fill in per-layer shapes, and resolve dimensions
/// that derive from the input chain.
fn resolve(layers: &mut [Layer], input_shape: &[usize]) -> Result<()> {
    let mut cur = input_shape.to_vec();
    // out_shapes seen so far, for residual references.
    let mut outs: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter_mut().enumerate() {
        let lname = layer.name.clone();
        let fail = |msg: String| Error::Graph { index: i, name: lname.clone(), msg };
        layer.in_shape = cur.clone();
        let rank3 = cur.len() == 3;
        let next = match &mut layer.op {
            LayerOp::Conv { kh, kw, stride, padding, cin, cout } => {
                if !rank3 {
                    return Err(fail(format!("conv needs h×w×c input, got {cur:?}")));
                }
                *cin = cur[2];
                let (oh, _) = padding.out_and_pad(cur[0], *kh, *stride)?;
                let (ow, _) = padding.out_and_pad(cur[1], *kw, *stride)?;
                vec![oh, ow, *cout]
            }
            LayerOp::Depthwise { kh, kw, stride, padding, c } => {
                if !rank3 {
                    return Err(fail(format!("depthwise needs h×w×c input, got {cur:?}")));
                }
                *c = cur[2];
                let (oh, _) = padding.out_and_pad(cur[0], *kh, *stride)?;
                let (ow, _) = padding.out_and_pad(cur[1], *kw, *stride)?;
                vec![oh, ow, *c]
            }
            LayerOp::Pointwise { cin, cout } => {
                if !rank3 {
                    return Err(fail(format!("pointwise needs h×w×c input, got {cur:?}")));
                }
                *cin = cur[2];
                vec![cur[0], cur[1], *cout]
            }
            LayerOp::BatchNorm { c } => {
                if !rank3 {
                    return Err(fail(format!("batchnorm needs h×w×c input, got {cur:?}")));
                }
                *c = cur[2];
                cur.clone()
            }
            LayerOp::Relu => cur.clone(),
            LayerOp::ResidualAdd { from, proj } => {
                if *from >= i {
                    return Err(fail(format!("residual reference {from} is not an earlier layer")));
                }
                let src = &outs[*from];
                if src.len() != 3 || !rank3 {
                    return Err(fail("residual needs h×w×c activations on both sides".into()));
                }
                match proj {
                    None => {
                        if *src != cur {
                            return Err(fail(format!(
                                "residual shapes differ ({src:?} vs {cur:?}); use projection"
                            )));
                        }
                    }
                    Some(p) => {
                        if src[0] % cur[0] != 0 || src[1] % cur[1] != 0 {
                            return Err(fail(format!(
                                "projection stride must be integral ({src:?} -> {cur:?})"
                            )));
                        }
                        let sh = src[0] / cur[0];
                        let sw = src[1] / cur[1];
                        if sh != sw || sh == 0 {
                            return Err(fail(format!(
                                "projection needs equal integral strides ({src:?} -> {cur:?})"
                            )));
                        }
                        // ceil(src/stride) must land exactly on cur.
                        if src[0].div_ceil(sh) != cur[0] || src[1].div_ceil(sw) != cur[1] {
                            return Err(fail(format!(
                                "projection stride {sh} does not map {src:?} onto {cur:?}"
                            )));
                        }
                        p.stride = sh;
                        p.cin = src[2];
                        p.cout = cur[2];
                    }
                }
                cur.clone()
            }
            LayerOp::Pool => {
                if !rank3 {
                    return Err(fail(format!("pool needs h×w×c input, got {cur:?}")));
                }
                vec![cur[2]]
            }
            LayerOp::Dense { n, m } => {
                if cur.len() != 1 {
                    return Err(fail(format!("dense needs a flat input, got {cur:?}")));
                }
                *n = cur[0];
                vec![*m]
            }
            LayerOp::Flatten => {
                if rank3 {
                    vec![cur[0] * cur[1] * cur[2]]
                } else {
                    cur.clone()
                }
            }
            LayerOp::EarlyView { c_ef, c_in } => {
                if !rank3 {
                    return Err(fail(format!("early view needs h×w×c input, got {cur:?}")));
                }
                *c_in = cur[2];
                if cur[2] < *c_ef {
                    return Err(fail(format!(
                        "final block has {} channels, fewer than the early-view width {}",
                        cur[2], c_ef
                    )));
                }
                vec![cur[0], cur[1], cur[2] + *c_ef]
            }
            LayerOp::FmapConcat { ee_c, .. } => {
                if !rank3 {
                    return Err(fail(format!("feature-map concat needs h×w×c input, got {cur:?}")));
                }
                vec![cur[0], cur[1], cur[2] + *ee_c]
            }
        };
        layer.out_shape = next.clone();
        outs.push(next.clone());
        cur = next;
    }
    Ok(())
}

fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::<T>::zeros(shape);
    for v in t.data_mut() {
        *v = T::from_f64c(rng.uniform(-limit, limit));
    }
    t
}

/// Build the baseline model (trunk only) from a spec, with parameters
/// initialized deterministically from `seed`: He-uniform kernels, zero
/// biases/shifts, unit scales.
pub fn build_model<T: Scalar>(spec: &ArchitectureSpec, seed: u64) -> Result<GraphModel<T>> {
    spec.validate()?;
    let mut trunk = spec.to_layers();
    resolve(&mut trunk, &spec.input_shape)?;
    let last = trunk.last().expect("validated non-empty");
    if last.out_shape != [spec.num_classes] {
        return Err(Error::Graph {
            index: trunk.len() - 1,
            name: last.name.clone(),
            msg: format!(
                "trunk must end in a dense layer with {} units, got output {:?}",
                spec.num_classes, last.out_shape
            ),
        });
    }

    let mut params = ParamSet::new();
    let mut rng = Rng::new(seed, Stream::Init);
    for layer in &trunk {
        create_layer_params(&mut params, layer, &mut rng)?;
    }

    let mut arch = spec.clone();
    arch.attach_index = None;
    arch.ee_variant = EeVariant::None;
    arch.early_view = false;
    arch.fmap_concat = false;

    Ok(GraphModel {
        arch,
        trunk,
        ee: Vec::new(),
        params,
        attach: None,
        configured_attach: spec.attach_index,
        num_classes: spec.num_classes,
        input_shape: spec.input_shape,
        seed,
        ev: None,
        fmap: false,
    })
}

fn create_layer_params<T: Scalar>(
    params: &mut ParamSet<T>,
    layer: &Layer,
    rng: &mut Rng,
) -> Result<()> {
    let name = &layer.name;
    match &layer.op {
        LayerOp::Conv { kh, kw, stride: _, padding: _, cin, cout } => {
            let fan_in = kh * kw * cin;
            params.insert(&format!("{name}/kernel"), he_uniform(vec![*kh, *kw, *cin, *cout], fan_in, rng), true)?;
            params.insert(&format!("{name}/bias"), Tensor::zeros(vec![*cout]), true)?;
        }
        LayerOp::Depthwise { kh, kw, c, .. } => {
            let fan_in = kh * kw;
            params.insert(&format!("{name}/kernel"), he_uniform(vec![*kh, *kw, *c], fan_in, rng), true)?;
            params.insert(&format!("{name}/bias"), Tensor::zeros(vec![*c]), true)?;
        }
        LayerOp::Pointwise { cin, cout } => {
            params.insert(&format!("{name}/kernel"), he_uniform(vec![1, 1, *cin, *cout], *cin, rng), true)?;
            params.insert(&format!("{name}/bias"), Tensor::zeros(vec![*cout]), true)?;
        }
        LayerOp::BatchNorm { c } => {
            params.insert(&format!("{name}/gamma"), Tensor::full(vec![*c], T::one()), true)?;
            params.insert(&format!("{name}/beta"), Tensor::zeros(vec![*c]), true)?;
            params.insert(&format!("{name}/moving_mean"), Tensor::zeros(vec![*c]), false)?;
            params.insert(&format!("{name}/moving_var"), Tensor::full(vec![*c], T::one()), false)?;
        }
        LayerOp::ResidualAdd { proj: Some(p), .. } => {
            params.insert(&format!("{name}/proj_kernel"), he_uniform(vec![1, 1, p.cin, p.cout], p.cin, rng), true)?;
            params.insert(&format!("{name}/proj_bias"), Tensor::zeros(vec![p.cout]), true)?;
        }
        LayerOp::Dense { n, m } => {
            params.insert(&format!("{name}/kernel"), he_uniform(vec![*n, *m], *n, rng), true)?;
            params.insert(&format!("{name}/bias"), Tensor::zeros(vec![*m]), true)?;
        }
        LayerOp::EarlyView { c_ef, .. } => {
            params.insert(&format!("{name}/kernel"), he_uniform(vec![3, 3, *c_ef], 9, rng), true)?;
            params.insert(&format!("{name}/bias"), Tensor::zeros(vec![*c_ef]), true)?;
        }
        _ => {}
    }
    Ok(())
}

impl<T: Scalar> GraphModel<T> {
    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn has_early_exit(&self) -> bool {
        self.attach.is_some()
    }

    pub fn early_view(&self) -> Option<&EvInfo> {
        self.ev.as_ref()
    }

    /// Early-exit branch channel width (trecx variant: pointwise output).
    pub fn ee_width(&self) -> Option<usize> {
        self.ee.iter().find_map(|l| match l.op {
            LayerOp::Depthwise { c, .. } => Some(c),
            _ => None,
        })
    }

    /// Input width of the final classifier (dense layer of the trunk).
    pub fn final_dense_width(&self) -> usize {
        self.trunk
            .iter()
            .rev()
            .find_map(|l| match l.op {
                LayerOp::Dense { n, .. } => Some(n),
                _ => None,
            })
            .expect("trunk ends in dense")
    }

    /// Trunk position of the final pooling layer after the attach point.
    fn final_pool_idx(&self) -> Result<usize> {
        let start = self.attach.map(|a| a + 1).unwrap_or(0);
        self.trunk[start..]
            .iter()
            .position(|l| matches!(l.op, LayerOp::Pool))
            .map(|p| p + start)
            .ok_or_else(|| Error::Config("no pooling layer in the final block".into()))
    }

    /// Attach an early-exit block after the configured attach index.
    ///
    /// The trecx variant inserts pointwise (doubling channels) → relu →
    /// depthwise 3×3 stride 2 → relu → pool → dense; the baseline variant
    /// inserts pool → dense only.
    pub fn attach_early_exit(&mut self, variant: EeVariant) -> Result<()> {
        if self.attach.is_some() {
            return Err(Error::Config("early exit already attached".into()));
        }
        if variant == EeVariant::None {
            return Err(Error::Config("cannot attach ee_variant \"none\"".into()));
        }
        let attach = self
            .configured_attach
            .ok_or_else(|| Error::Config("architecture has no attach_index".into()))?;
        if attach + 1 >= self.trunk.len() {
            return Err(Error::Config(format!("attach_index {attach} leaves no final block")));
        }
        let attach_shape = self.trunk[attach].out_shape.clone();
        if attach_shape.len() != 3 {
            return Err(Error::Config(format!(
                "attach point must carry h×w×c activations, got {attach_shape:?}"
            )));
        }
        let c = attach_shape[2];
        let k = self.num_classes;

        let mut branch = Vec::new();
        match variant {
            EeVariant::Trecx => {
                branch.push(("ee_pconv", LayerOp::Pointwise { cin: c, cout: 2 * c }));
                branch.push(("ee_relu_a", LayerOp::Relu));
                branch.push((
                    "ee_dconv",
                    LayerOp::Depthwise { kh: 3, kw: 3, stride: 2, padding: Padding::Same, c: 2 * c },
                ));
                branch.push(("ee_relu_b", LayerOp::Relu));
                branch.push(("ee_pool", LayerOp::Pool));
                branch.push(("ee_dense", LayerOp::Dense { n: 2 * c, m: k }));
            }
            EeVariant::BaselineEe => {
                branch.push(("ee_pool", LayerOp::Pool));
                branch.push(("ee_dense", LayerOp::Dense { n: c, m: k }));
            }
            EeVariant::None => unreachable!(),
        }
        let mut ee: Vec<Layer> = branch
            .into_iter()
            .map(|(name, op)| Layer {
                name: name.to_string(),
                op,
                in_shape: vec![],
                out_shape: vec![],
                block: Block::EarlyExit,
            })
            .collect();
        resolve(&mut ee, &attach_shape)?;

        let mut rng = Rng::new(self.seed, Stream::EarlyExitInit);
        for layer in &ee {
            create_layer_params(&mut self.params, layer, &mut rng)?;
        }

        for (i, layer) in self.trunk.iter_mut().enumerate() {
            layer.block = if i <= attach { Block::Common } else { Block::Final };
        }
        self.ee = ee;
        self.attach = Some(attach);
        self.arch.attach_index = Some(attach);
        self.arch.ee_variant = variant;
        Ok(())
    }

    /// Splice a concatenation head into the trunk right before the final
    /// pooling layer and widen the final classifier accordingly.
    fn splice_concat_head(&mut self, layer: Layer, stream: Stream) -> Result<usize> {
        let pool_idx = self.final_pool_idx()?;
        self.trunk.insert(pool_idx, layer);
        // Residual references to layers at or past the insertion point shift.
        for l in self.trunk.iter_mut() {
            if let LayerOp::ResidualAdd { from, .. } = &mut l.op {
                if *from >= pool_idx {
                    *from += 1;
                }
            }
        }
        resolve(&mut self.trunk, &self.input_shape.to_vec())?;

        let mut rng = Rng::new(self.seed, stream);
        // Create params for the new head (if any), then re-create the final
        // dense kernel at its widened input dimension.
        let inserted = self.trunk[pool_idx].clone();
        if !self.params.contains(&format!("{}/kernel", inserted.name)) {
            create_layer_params(&mut self.params, &inserted, &mut rng)?;
        }
        let dense_idx = self
            .trunk
            .iter()
            .rposition(|l| matches!(l.op, LayerOp::Dense { .. }))
            .expect("trunk ends in dense");
        let (n, m) = match self.trunk[dense_idx].op {
            LayerOp::Dense { n, m } => (n, m),
            _ => unreachable!(),
        };
        let dense_name = format!("{}/kernel", self.trunk[dense_idx].name);
        if self.params.value(&dense_name).shape() != [n, m] {
            self.params.replace(&dense_name, he_uniform(vec![n, m], n, &mut rng))?;
        }
        Ok(pool_idx)
    }

    /// Attach the early-view head: a stride-1 depthwise clone at half the
    /// early-exit channel width, fed by the leading channel slice of the
    /// final convolution block's output and concatenated back onto it.
    pub fn attach_early_view(&mut self) -> Result<()> {
        if self.arch.ee_variant != EeVariant::Trecx {
            return Err(Error::Config("early view requires an attached trecx early exit".into()));
        }
        if self.ev.is_some() {
            return Err(Error::Config("early view already attached".into()));
        }
        if self.fmap {
            return Err(Error::Config("early view and feature-map concat are exclusive".into()));
        }
        let ee_width = self.ee_width().ok_or_else(|| Error::Config("no depthwise layer in the early-exit block".into()))?;
        let c_ef = ee_width / 2;
        let layer = Layer {
            name: "early_view".to_string(),
            op: LayerOp::EarlyView { c_ef, c_in: 0 },
            in_shape: vec![],
            out_shape: vec![],
            block: Block::Final,
        };
        let trunk_idx = self.splice_concat_head(layer, Stream::EarlyViewInit)?;
        self.ev = Some(EvInfo { c_ef, trunk_idx });
        self.arch.early_view = true;
        Ok(())
    }

    /// Attach the ablation head that concatenates the (pooled) early-exit
    /// depthwise feature maps onto the final convolution block's output.
    pub fn attach_fmap_concat(&mut self) -> Result<()> {
        if self.arch.ee_variant != EeVariant::Trecx {
            return Err(Error::Config("feature-map concat requires an attached trecx early exit".into()));
        }
        if self.ev.is_some() || self.fmap {
            return Err(Error::Config("a concat head is already attached".into()));
        }
        let ee_layer = self
            .ee
            .iter()
            .position(|l| matches!(l.op, LayerOp::Depthwise { .. }))
            .ok_or_else(|| Error::Config("no depthwise layer in the early-exit block".into()))?;
        let ee_shape = self.ee[ee_layer].out_shape.clone();
        let pool_idx = self.final_pool_idx()?;
        let final_shape = self.trunk[pool_idx].in_shape.clone();
        let (eh, ew, ec) = (ee_shape[0], ee_shape[1], ee_shape[2]);
        let (fh, fw) = (final_shape[0], final_shape[1]);
        if eh % fh != 0 || ew % fw != 0 {
            return Err(Error::Config(format!(
                "no integral stride alignment from early-exit maps {eh}×{ew} to final maps {fh}×{fw}"
            )));
        }
        let layer = Layer {
            name: "fmap_concat".to_string(),
            op: LayerOp::FmapConcat { factor_h: eh / fh, factor_w: ew / fw, ee_layer, ee_c: ec },
            in_shape: vec![],
            out_shape: vec![],
            block: Block::Final,
        };
        self.splice_concat_head(layer, Stream::FmapConcatInit)?;
        self.fmap = true;
        self.arch.fmap_concat = true;
        Ok(())
    }

    pub(crate) fn trunk(&self) -> &[Layer] {
        &self.trunk
    }

    pub(crate) fn ee_layers(&self) -> &[Layer] {
        &self.ee
    }

    /// `(block, per-sample FLOPs)` for every layer in execution order.
    pub(crate) fn layer_costs(&self) -> Vec<(Block, u64)> {
        self.trunk
            .iter()
            .chain(self.ee.iter())
            .map(|l| (l.block, layer_flops(l)))
            .collect()
    }
}

/// Per-sample FLOPs of one layer under the documented convention.
pub(crate) fn layer_flops(layer: &Layer) -> u64 {
    let out = &layer.out_shape;
    let inp = &layer.in_shape;
    match &layer.op {
        LayerOp::Conv { kh, kw, cin, cout, .. } => {
            let positions = (out[0] * out[1]) as u64;
            2 * (kh * kw * cin * cout) as u64 * positions + (*cout as u64) * positions
        }
        LayerOp::Depthwise { kh, kw, c, .. } => {
            let positions = (out[0] * out[1]) as u64;
            2 * (kh * kw * c) as u64 * positions + (*c as u64) * positions
        }
        LayerOp::Pointwise { cin, cout } => {
            let positions = (out[0] * out[1]) as u64;
            2 * (cin * cout) as u64 * positions + (*cout as u64) * positions
        }
        LayerOp::BatchNorm { .. } | LayerOp::Relu | LayerOp::Flatten => 0,
        LayerOp::ResidualAdd { proj, .. } => match proj {
            None => 0,
            Some(p) => {
                let positions = (out[0] * out[1]) as u64;
                2 * (p.cin * p.cout) as u64 * positions + (p.cout as u64) * positions
            }
        },
        LayerOp::Pool => (inp[0] * inp[1] * inp[2]) as u64,
        LayerOp::Dense { n, m } => 2 * (n * m) as u64 + *m as u64,
        LayerOp::EarlyView { c_ef, .. } => {
            let positions = (inp[0] * inp[1]) as u64;
            2 * (3 * 3 * c_ef) as u64 * positions + (*c_ef as u64) * positions
        }
        LayerOp::FmapConcat { factor_h, factor_w, ee_c, .. } => {
            // Pool input elements: the early-exit maps being averaged down.
            (inp[0] * factor_h * inp[1] * factor_w * ee_c) as u64
        }
    }
}

/// Build a model and attach the heads the spec asks for.
pub fn compile<T: Scalar>(spec: &ArchitectureSpec, seed: u64) -> Result<GraphModel<T>> {
    let mut model = build_model(spec, seed)?;
    match spec.ee_variant {
        EeVariant::None => {}
        variant => model.attach_early_exit(variant)?,
    }
    if spec.early_view {
        model.attach_early_view()?;
    }
    if spec.fmap_concat {
        model.attach_fmap_concat()?;
    }
    Ok(model)
}

// ───────────────────────────── execution ─────────────────────────────

struct ExecResult<T: Scalar> {
    out: ForwardOutput<T>,
    trace: Trace<T>,
    bn_updates: Vec<(String, Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> GraphModel<T> {
    fn batched(&self, shape: &[usize], b: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(shape.len() + 1);
        s.push(b);
        s.extend_from_slice(shape);
        s
    }

    fn exec_layer(
        &self,
        layer: &Layer,
        input: &Tensor<T>,
        mode: Mode,
        ctx: Option<(&[Tensor<T>], &Tensor<T>, &[Tensor<T>])>,
        bn_updates: &mut Vec<(String, Tensor<T>, Tensor<T>)>,
        bn_cache: &mut Option<BnCache<T>>,
    ) -> Result<Tensor<T>> {
        let name = &layer.name;
        match &layer.op {
            LayerOp::Conv { stride, padding, .. } => ops::conv2d(
                input,
                self.params.value(&format!("{name}/kernel")),
                Some(self.params.value(&format!("{name}/bias"))),
                *stride,
                *padding,
            ),
            LayerOp::Depthwise { stride, padding, .. } => ops::depthwise_conv2d(
                input,
                self.params.value(&format!("{name}/kernel")),
                Some(self.params.value(&format!("{name}/bias"))),
                *stride,
                *padding,
            ),
            LayerOp::Pointwise { .. } => ops::pointwise_conv2d(
                input,
                self.params.value(&format!("{name}/kernel")),
                Some(self.params.value(&format!("{name}/bias"))),
            ),
            LayerOp::BatchNorm { .. } => {
                let gamma = self.params.value(&format!("{name}/gamma"));
                let beta = self.params.value(&format!("{name}/beta"));
                match mode {
                    Mode::Train => {
                        let mut mean = self.params.value(&format!("{name}/moving_mean")).clone();
                        let mut var = self.params.value(&format!("{name}/moving_var")).clone();
                        let (out, cache) = ops::batch_norm_train(input, gamma, beta, &mut mean, &mut var)?;
                        bn_updates.push((name.clone(), mean, var));
                        *bn_cache = Some(cache);
                        Ok(out)
                    }
                    Mode::Infer => ops::batch_norm_infer(
                        input,
                        gamma,
                        beta,
                        self.params.value(&format!("{name}/moving_mean")),
                        self.params.value(&format!("{name}/moving_var")),
                    ),
                }
            }
            LayerOp::Relu => Ok(ops::relu(input)),
            LayerOp::ResidualAdd { from, proj } => {
                let (acts, _, _) = ctx.expect("residual only occurs in the trunk");
                let src = &acts[*from];
                match proj {
                    None => input.add(src),
                    Some(p) => {
                        let projected = ops::conv2d(
                            src,
                            self.params.value(&format!("{name}/proj_kernel")),
                            Some(self.params.value(&format!("{name}/proj_bias"))),
                            p.stride,
                            Padding::Same,
                        )?;
                        input.add(&projected)
                    }
                }
            }
            LayerOp::Pool => ops::global_avg_pool(input),
            LayerOp::Dense { .. } => ops::dense(
                input,
                self.params.value(&format!("{name}/kernel")),
                Some(self.params.value(&format!("{name}/bias"))),
            ),
            LayerOp::Flatten => ops::flatten(input),
            LayerOp::EarlyView { c_ef, .. } => {
                let sliced = input.slice_last(0, *c_ef)?;
                let y = ops::depthwise_conv2d(
                    &sliced,
                    self.params.value(&format!("{name}/kernel")),
                    Some(self.params.value(&format!("{name}/bias"))),
                    1,
                    Padding::Same,
                )?;
                input.concat_last(&y)
            }
            LayerOp::FmapConcat { factor_h, factor_w, ee_layer, .. } => {
                let (_, _, ee_acts) = ctx.expect("fmap concat only occurs in the trunk");
                let pooled = avg_pool_factor(&ee_acts[*ee_layer], *factor_h, *factor_w)?;
                input.concat_last(&pooled)
            }
        }
    }

    fn exec_forward(&self, batch: &Tensor<T>, mode: Mode) -> Result<ExecResult<T>> {
        if batch.rank() != 4 || batch.shape()[1..] != self.input_shape {
            return Err(Error::shape("forward", batch.shape(), &self.input_shape));
        }
        let b = batch.dim(0);
        let mut bn_updates = Vec::new();
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.trunk.len());
        let mut bn_caches: Vec<Option<BnCache<T>>> = Vec::with_capacity(self.trunk.len());
        let mut ee_acts: Vec<Tensor<T>> = Vec::with_capacity(self.ee.len());
        let mut layer_runs = 0usize;

        // Common + early-exit branch first so the fmap-concat head can see
        // the branch activations; then the rest of the trunk.
        let attach_end = self.attach.map(|a| a + 1).unwrap_or(self.trunk.len());
        for layer in &self.trunk[..attach_end] {
            let input = acts.last().unwrap_or(batch);
            let mut cache = None;
            let out = self.exec_layer(layer, input, mode, Some((&acts, batch, &ee_acts)), &mut bn_updates, &mut cache)?;
            debug_assert_eq!(&out.shape()[1..], layer.out_shape.as_slice(), "{}", layer.name);
            acts.push(out);
            bn_caches.push(cache);
            layer_runs += 1;
        }

        let mut logits_ee = None;
        if self.attach.is_some() {
            let branch_input_idx = acts.len() - 1;
            for (j, layer) in self.ee.iter().enumerate() {
                let input = if j == 0 { &acts[branch_input_idx] } else { &ee_acts[j - 1] };
                let mut cache = None;
                let out = self.exec_layer(layer, input, mode, None, &mut bn_updates, &mut cache)?;
                ee_acts.push(out);
                layer_runs += 1;
            }
            logits_ee = Some(ee_acts.last().expect("branch non-empty").clone());
        }

        for layer in &self.trunk[attach_end..] {
            let input = acts.last().unwrap_or(batch);
            let mut cache = None;
            let out = self.exec_layer(layer, input, mode, Some((&acts, batch, &ee_acts)), &mut bn_updates, &mut cache)?;
            debug_assert_eq!(&out.shape()[1..], layer.out_shape.as_slice(), "{}", layer.name);
            acts.push(out);
            bn_caches.push(cache);
            layer_runs += 1;
        }

        let logits_ef = acts.last().expect("trunk non-empty").clone();
        debug_assert_eq!(logits_ef.shape(), &[b, self.num_classes]);
        let probs_ef = ops::softmax(&logits_ef)?;
        let probs_ee = logits_ee.as_ref().map(ops::softmax).transpose()?;

        Ok(ExecResult {
            out: ForwardOutput { logits_ee, probs_ee, logits_ef, probs_ef },
            trace: Trace { mode, input: batch.clone(), acts, ee_acts, bn_caches, layer_runs },
            bn_updates,
        })
    }

    /// Run both heads on a batch. Train mode updates batch-norm running
    /// statistics, which is why this takes `&mut self`.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<(ForwardOutput<T>, Trace<T>)> {
        let ExecResult { out, trace, bn_updates } = self.exec_forward(batch, mode)?;
        for (layer, mean, var) in bn_updates {
            *self.params.get_mut(&format!("{layer}/moving_mean")).value_mut() = mean;
            *self.params.get_mut(&format!("{layer}/moving_var")).value_mut() = var;
        }
        Ok((out, trace))
    }

    /// Inference-only forward pass; safe to call concurrently on a shared
    /// model reference.
    pub fn forward_infer(&self, batch: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let ExecResult { out, bn_updates, .. } = self.exec_forward(batch, Mode::Infer)?;
        debug_assert!(bn_updates.is_empty());
        Ok(out)
    }

    /// Accumulate parameter gradients from per-head logit gradients.
    /// Requires a train-mode trace (infer-mode batch norm has no adjoint
    /// state).
    pub fn backward(
        &mut self,
        trace: &Trace<T>,
        d_logits_ee: Option<&Tensor<T>>,
        d_logits_ef: Option<&Tensor<T>>,
    ) -> Result<()> {
        if trace.mode != Mode::Train {
            return Err(Error::Train(
                "backward requires a train-mode forward trace (infer-mode batch norm has no saved statistics)".into(),
            ));
        }
        if d_logits_ee.is_some() && self.attach.is_none() {
            return Err(Error::Train("early-head gradient given but model has no early exit".into()));
        }

        let mut gacts: Vec<Option<Tensor<T>>> = vec![None; self.trunk.len()];
        let mut ee_gacts: Vec<Option<Tensor<T>>> = vec![None; self.ee.len()];
        if let Some(g) = d_logits_ef {
            *gacts.last_mut().expect("trunk non-empty") = Some(g.clone());
        }
        if let Some(g) = d_logits_ee {
            *ee_gacts.last_mut().expect("branch non-empty") = Some(g.clone());
        }

        let split = self.attach.map(|a| a + 1).unwrap_or(0);
        for i in (split..self.trunk.len()).rev() {
            self.backward_trunk_layer(i, trace, &mut gacts, &mut ee_gacts)?;
        }
        if self.attach.is_some() {
            self.backward_branch(trace, &mut gacts, &mut ee_gacts)?;
        }
        for i in (0..split).rev() {
            self.backward_trunk_layer(i, trace, &mut gacts, &mut ee_gacts)?;
        }
        Ok(())
    }

    fn backward_trunk_layer(
        &mut self,
        i: usize,
        trace: &Trace<T>,
        gacts: &mut [Option<Tensor<T>>],
        ee_gacts: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let Some(g) = gacts[i].take() else { return Ok(()) };
        let input = if i == 0 { &trace.input } else { &trace.acts[i - 1] };
        let layer = &self.trunk[i];
        let name = layer.name.clone();
        let mut d_extra: Vec<(usize, Tensor<T>, bool)> = Vec::new(); // (slot, grad, is_branch)

        let d_input = match &layer.op {
            LayerOp::Conv { stride, padding, .. } => {
                let (di, dk, db) = {
                    let kernel = self.params.value(&format!("{name}/kernel"));
                    ops::conv2d_backward(input, kernel, true, &g, *stride, *padding)?
                };
                self.params.add_grad(&format!("{name}/kernel"), &dk)?;
                self.params.add_grad(&format!("{name}/bias"), &db.expect("bias"))?;
                Some(di)
            }
            LayerOp::Depthwise { stride, padding, .. } => {
                let (di, dk, db) = {
                    let kernel = self.params.value(&format!("{name}/kernel"));
                    ops::depthwise_conv2d_backward(input, kernel, true, &g, *stride, *padding)?
                };
                self.params.add_grad(&format!("{name}/kernel"), &dk)?;
                self.params.add_grad(&format!("{name}/bias"), &db.expect("bias"))?;
                Some(di)
            }
            LayerOp::Pointwise { .. } => {
                let (di, dk, db) = {
                    let kernel = self.params.value(&format!("{name}/kernel"));
                    ops::pointwise_conv2d_backward(input, kernel, true, &g)?
                };
                self.params.add_grad(&format!("{name}/kernel"), &dk)?;
                self.params.add_grad(&format!("{name}/bias"), &db.expect("bias"))?;
                Some(di)
            }
            LayerOp::BatchNorm { .. } => {
                let cache = trace.bn_caches[i]
                    .as_ref()
                    .ok_or_else(|| Error::Train(format!("{name}: no batch-norm cache in trace")))?;
                let (di, dgamma, dbeta) = {
                    let gamma = self.params.value(&format!("{name}/gamma"));
                    ops::batch_norm_backward(cache, gamma, &g)?
                };
                self.params.add_grad(&format!("{name}/gamma"), &dgamma)?;
                self.params.add_grad(&format!("{name}/beta"), &dbeta)?;
                Some(di)
            }
            LayerOp::Relu => Some(ops::relu_backward(input, &g)?),
            LayerOp::ResidualAdd { from, proj } => {
                match proj {
                    None => d_extra.push((*from, g.clone(), false)),
                    Some(p) => {
                        let src = &trace.acts[*from];
                        let (dsrc, dk, db) = {
                            let kernel = self.params.value(&format!("{name}/proj_kernel"));
                            ops::conv2d_backward(src, kernel, true, &g, p.stride, Padding::Same)?
                        };
                        self.params.add_grad(&format!("{name}/proj_kernel"), &dk)?;
                        self.params.add_grad(&format!("{name}/proj_bias"), &db.expect("bias"))?;
                        d_extra.push((*from, dsrc, false));
                    }
                }
                Some(g)
            }
            LayerOp::Pool => Some(ops::global_avg_pool_backward(input.shape(), &g)?),
            LayerOp::Dense { .. } => {
                let (di, dw, db) = {
                    let kernel = self.params.value(&format!("{name}/kernel"));
                    ops::dense_backward(input, kernel, true, &g)?
                };
                self.params.add_grad(&format!("{name}/kernel"), &dw)?;
                self.params.add_grad(&format!("{name}/bias"), &db.expect("bias"))?;
                Some(di)
            }
            LayerOp::Flatten => Some(ops::flatten_backward(input.shape(), &g)?),
            LayerOp::EarlyView { c_ef, c_in } => {
                let g_main = g.slice_last(0, *c_in)?;
                let g_branch = g.slice_last(*c_in, c_in + c_ef)?;
                let sliced_in = input.slice_last(0, *c_ef)?;
                let (d_sliced, dk, db) = {
                    let kernel = self.params.value(&format!("{name}/kernel"));
                    ops::depthwise_conv2d_backward(&sliced_in, kernel, true, &g_branch, 1, Padding::Same)?
                };
                self.params.add_grad(&format!("{name}/kernel"), &dk)?;
                self.params.add_grad(&format!("{name}/bias"), &db.expect("bias"))?;
                let mut di = g_main;
                di.add_into_leading_channels(&d_sliced)?;
                Some(di)
            }
            LayerOp::FmapConcat { factor_h, factor_w, ee_layer, ee_c } => {
                let c_in = layer.in_shape[2];
                let g_main = g.slice_last(0, c_in)?;
                let g_pooled = g.slice_last(c_in, c_in + ee_c)?;
                let g_ee = avg_pool_factor_backward(&g_pooled, *factor_h, *factor_w)?;
                d_extra.push((*ee_layer, g_ee, true));
                Some(g_main)
            }
        };

        if let Some(di) = d_input {
            if i == 0 {
                // Gradient w.r.t. the network input is not propagated further.
            } else {
                add_opt(&mut gacts[i - 1], di)?;
            }
        }
        for (slot, grad, is_branch) in d_extra {
            if is_branch {
                add_opt(&mut ee_gacts[slot], grad)?;
            } else {
                add_opt(&mut gacts[slot], grad)?;
            }
        }
        Ok(())
    }

    fn backward_branch(
        &mut self,
        trace: &Trace<T>,
        gacts: &mut [Option<Tensor<T>>],
        ee_gacts: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let attach = self.attach.expect("branch backward needs an attach point");
        for j in (0..self.ee.len()).rev() {
            let Some(g) = ee_gacts[j].take() else { continue };
            let input = if j == 0 { &trace.acts[attach] } else { &trace.ee_acts[j - 1] };
            let layer = &self.ee[j];
            let name = layer.name.clone();
            let di = match &layer.op {
                LayerOp::Pointwise { .. } => {
                    let (di, dk, db) = {
                        let kernel = self.params.value(&format!("{name}/kernel"));
                        ops::pointwise_conv2d_backward(input, kernel, true, &g)?
                    };
                    self.params.add_grad(&format!("{name}/kernel"), &dk)?;
                    self.params.add_grad(&format!("{name}/bias"), &db.expect("bias"))?;
                    di
                }
                LayerOp::Depthwise { stride, padding, .. } => {
                    let (di, dk, db) = {
                        let kernel = self.params.value(&format!("{name}/kernel"));
                        ops::depthwise_conv2d_backward(input, kernel, true, &g, *stride, *padding)?
                    };
                    self.params.add_grad(&format!("{name}/kernel"), &dk)?;
                    self.params.add_grad(&format!("{name}/bias"), &db.expect("bias"))?;
                    di
                }
                LayerOp::Relu => ops::relu_backward(input, &g)?,
                LayerOp::Pool => ops::global_avg_pool_backward(input.shape(), &g)?,
                LayerOp::Dense { .. } => {
                    let (di, dw, db) = {
                        let kernel = self.params.value(&format!("{name}/kernel"));
                        ops::dense_backward(input, kernel, true, &g)?
                    };
                    self.params.add_grad(&format!("{name}/kernel"), &dw)?;
                    self.params.add_grad(&format!("{name}/bias"), &db.expect("bias"))?;
                    di
                }
                other => {
                    return Err(Error::Train(format!(
                        "unsupported early-exit layer {other:?} in backward"
                    )));
                }
            };
            if j == 0 {
                add_opt(&mut gacts[attach], di)?;
            } else {
                add_opt(&mut ee_gacts[j - 1], di)?;
            }
        }
        Ok(())
    }
}

fn add_opt<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&t),
        None => {
            *slot = Some(t);
            Ok(())
        }
    }
}

/// Non-overlapping average pooling with kernel == stride == factor.
fn avg_pool_factor<T: Scalar>(input: &Tensor<T>, fh: usize, fw: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if h % fh != 0 || w % fw != 0 {
        return Err(Error::op("avg_pool_factor", format!("{h}×{w} not divisible by {fh}×{fw}")));
    }
    let (oh, ow) = (h / fh, w / fw);
    let inv_area = T::one() / T::from_f64c((fh * fw) as f64);
    let mut out = Tensor::<T>::zeros(vec![b, oh, ow, c]);
    let idata = input.data();
    let odata = out.data_mut();
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((n * oh + oy) * ow + ox) * c;
                for dy in 0..fh {
                    for dx in 0..fw {
                        let ibase = ((n * h + oy * fh + dy) * w + ox * fw + dx) * c;
                        for ci in 0..c {
                            odata[obase + ci] = odata[obase + ci] + idata[ibase + ci];
                        }
                    }
                }
                for ci in 0..c {
                    odata[obase + ci] = odata[obase + ci] * inv_area;
                }
            }
        }
    }
    Ok(out)
}

fn avg_pool_factor_backward<T: Scalar>(upstream: &Tensor<T>, fh: usize, fw: usize) -> Result<Tensor<T>> {
    let (b, oh, ow, c) = (upstream.dim(0), upstream.dim(1), upstream.dim(2), upstream.dim(3));
    let (h, w) = (oh * fh, ow * fw);
    let inv_area = T::one() / T::from_f64c((fh * fw) as f64);
    let mut out = Tensor::<T>::zeros(vec![b, h, w, c]);
    let gdata = upstream.data();
    let odata = out.data_mut();
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let gbase = ((n * oh + oy) * ow + ox) * c;
                for dy in 0..fh {
                    for dx in 0..fw {
                        let obase = ((n * h + oy * fh + dy) * w + ox * fw + dx) * c;
                        for ci in 0..c {
                            odata[obase + ci] = gdata[gbase + ci] * inv_area;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
