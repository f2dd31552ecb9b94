//! The noise-prediction U-Net and its three mask-conditioning wirings.
//!
//! * [`Variant::Concat`]: the one-hot mask is stacked onto the noisy image as
//!   extra input channels.
//! * [`Variant::MaskGuided`]: the noisy image enters alone; a separate encoder
//!   with the same resolution ladder encodes the mask, and its feature map at
//!   every resolution (taken before that level downsamples) is concatenated onto
//!   the main encoder output at that level and again onto the decoder input at
//!   the same level.
//! * [`Variant::EdgeGuided`]: mask channels are stacked onto the input as in
//!   `Concat`, and the binary edge map goes through the auxiliary encoder.
//!
//! The output head has two channels: predicted noise and a variance logit.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{mask_to_edges, mask_to_onehot};
use crate::error::{Error, Result};
use crate::nn::{
    AttentionBlock, Conv2d, Element, Gradients, Graph, GroupNorm, Linear, ParamBuilder, ParamStore,
    ResBlock, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Concat,
    MaskGuided,
    EdgeGuided,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Concat, Variant::MaskGuided, Variant::EdgeGuided];

    /// Whether mask channels are concatenated onto the noisy input.
    pub fn concatenates_mask(self) -> bool {
        matches!(self, Variant::Concat | Variant::EdgeGuided)
    }

    pub fn has_aux_encoder(self) -> bool {
        matches!(self, Variant::MaskGuided | Variant::EdgeGuided)
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Concat => "Conditional DDPM",
            Variant::MaskGuided => "Mask-guided DDPM",
            Variant::EdgeGuided => "Edge-guided DDPM",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Concat => "CONCAT",
            Variant::MaskGuided => "MASK_GUIDED",
            Variant::EdgeGuided => "EDGE_GUIDED",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "concat" | "conditional" => Ok(Variant::Concat),
            "mask-guided" | "mask" => Ok(Variant::MaskGuided),
            "edge-guided" | "edge" => Ok(Variant::EdgeGuided),
            other => Err(Error::Config(format!("unknown conditioning variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks_per_level: usize,
    pub attention_resolutions: Vec<usize>,
    pub num_mask_classes: usize,
    pub variant: Variant,
}

impl DenoiserConfig {
    /// Full-size network for 256×256 slices.
    pub fn paper(variant: Variant) -> Self {
        Self {
            image_size: 256,
            base_width: 128,
            channel_multipliers: vec![1, 1, 2, 2, 4, 4],
            num_res_blocks_per_level: 2,
            attention_resolutions: vec![16],
            num_mask_classes: crate::data::NUM_CLASSES,
            variant,
        }
    }

    /// CPU-sized network for 32×32 toy phantoms.
    pub fn toy(variant: Variant) -> Self {
        Self {
            image_size: 32,
            base_width: 32,
            channel_multipliers: vec![1, 2, 2],
            num_res_blocks_per_level: 1,
            attention_resolutions: vec![8],
            num_mask_classes: crate::data::NUM_CLASSES,
            variant,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Channels consumed by the first convolution of the main branch.
    pub fn main_in_channels(&self) -> usize {
        1 + if self.variant.concatenates_mask() {
            self.num_mask_classes
        } else {
            0
        }
    }

    /// Channels consumed by the auxiliary encoder, if there is one.
    pub fn aux_in_channels(&self) -> Option<usize> {
        match self.variant {
            Variant::Concat => None,
            Variant::MaskGuided => Some(self.num_mask_classes),
            Variant::EdgeGuided => Some(1),
        }
    }

    pub fn time_embedding_dim(&self) -> usize {
        self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be non-empty and positive".into());
        }
        if self.base_width == 0 || self.base_width % 2 != 0 {
            return bad(format!("base_width {} must be positive and even", self.base_width));
        }
        if self.num_res_blocks_per_level == 0 {
            return bad("num_res_blocks_per_level must be at least 1".into());
        }
        if self.num_mask_classes == 0 {
            return bad("num_mask_classes must be at least 1".into());
        }
        let factor = 1usize << (self.levels() - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return bad(format!(
                "image_size {} is not divisible by 2^(levels-1) = {factor}",
                self.image_size
            ));
        }
        Ok(())
    }
}

/// Mask (and optional edge-map) channels that steer one batch of synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle<T> {
    /// `[N, C, H, W]`, exactly one-hot along `C`.
    pub mask_onehot: Tensor<T>,
    /// `[N, 1, H, W]`, present iff `variant` is edge-guided.
    pub edge_map: Option<Tensor<T>>,
    pub variant: Variant,
}

impl<T: Element> ConditioningBundle<T> {
    pub fn from_masks(masks: &[Array2<u8>], num_classes: usize, variant: Variant) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Shape("conditioning needs at least one mask".into()));
        }
        let onehots = masks
            .iter()
            .map(|m| mask_to_onehot::<T>(m, num_classes))
            .collect::<Result<Vec<_>>>()?;
        let mask_onehot = Tensor::stack(&onehots)?;
        let edge_map = if variant == Variant::EdgeGuided {
            let (h, w) = masks[0].dim();
            let edges = masks
                .iter()
                .map(|m| {
                    let e = mask_to_edges(m);
                    let data = e.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
                    Tensor::from_vec(&[1, h, w], data)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(Tensor::stack(&edges)?)
        } else {
            None
        };
        let bundle = Self {
            mask_onehot,
            edge_map,
            variant,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn batch_size(&self) -> usize {
        self.mask_onehot.shape()[0]
    }

    /// Repeats every item `n` times along the batch axis (item-major).
    pub fn repeat(&self, n: usize) -> Self {
        let rep = |t: &Tensor<T>| {
            let mut shape = t.shape().to_vec();
            let items = shape[0];
            shape[0] *= n;
            let mut data = Vec::with_capacity(t.len() * n);
            for i in 0..items {
                for _ in 0..n {
                    data.extend_from_slice(t.item(i));
                }
            }
            Tensor::from_vec(&shape, data).expect("repeat shape")
        };
        Self {
            mask_onehot: rep(&self.mask_onehot),
            edge_map: self.edge_map.as_ref().map(rep),
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, c, h, w) = self.mask_onehot.dims4();
        for (i, pixel_sum) in (0..n * h * w)
            .map(|p| {
                let (s, off) = (p / (h * w), p % (h * w));
                let item = self.mask_onehot.item(s);
                (p, (0..c).map(|ch| item[ch * h * w + off]).sum::<T>())
            })
            .map(|(p, sum)| (p, sum.as_f64()))
        {
            if pixel_sum != 1.0 {
                return Err(Error::Data(format!(
                    "mask channels at flat pixel {i} sum to {pixel_sum}, expected 1"
                )));
            }
        }
        if self.mask_onehot.data().iter().any(|v| *v != T::zero() && *v != T::one()) {
            return Err(Error::Data("mask channels must be 0 or 1".into()));
        }
        match (&self.edge_map, self.variant) {
            (Some(e), Variant::EdgeGuided) => {
                if e.shape() != [n, 1, h, w] {
                    return Err(Error::Shape(format!(
                        "edge map {:?} does not match mask {:?}",
                        e.shape(),
                        self.mask_onehot.shape()
                    )));
                }
            }
            (None, Variant::EdgeGuided) => {
                return Err(Error::Data("edge-guided conditioning requires an edge map".into()))
            }
            (Some(_), _) => {
                return Err(Error::Data(format!(
                    "edge map supplied for {} conditioning",
                    self.variant
                )))
            }
            (None, _) => {}
        }
        Ok(())
    }
}

/// Predicted noise and variance logits for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput<T> {
    pub eps_hat: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Element> DenoiserOutput<T> {
    /// Splits a `[N, 2, H, W]` head output into its two channels.
    pub fn from_head(head: &Tensor<T>) -> Self {
        let (n, c, h, w) = head.dims4();
        assert_eq!(c, 2, "denoiser head must have two channels");
        let plane = h * w;
        let mut eps = Vec::with_capacity(n * plane);
        let mut v = Vec::with_capacity(n * plane);
        for s in 0..n {
            let item = head.item(s);
            eps.extend_from_slice(&item[..plane]);
            v.extend_from_slice(&item[plane..]);
        }
        Self {
            eps_hat: Tensor::from_vec(&[n, 1, h, w], eps).unwrap(),
            v: Tensor::from_vec(&[n, 1, h, w], v).unwrap(),
        }
    }

    /// Inverse of [`from_head`](Self::from_head); used to seed back-propagation.
    pub fn to_head(&self) -> Tensor<T> {
        let (n, _, h, w) = self.eps_hat.dims4();
        let mut data = Vec::with_capacity(2 * n * h * w);
        for s in 0..n {
            data.extend_from_slice(self.eps_hat.item(s));
            data.extend_from_slice(self.v.item(s));
        }
        Tensor::from_vec(&[n, 2, h, w], data).unwrap()
    }
}

/// Anything that predicts noise for the sampler; implemented by [`Denoiser`]
/// and by test oracles.
pub trait Denoise<T: Element> {
    fn variant(&self) -> Variant;

    fn predict(
        &self,
        x_t: &Tensor<T>,
        t: &[usize],
        cond: &ConditioningBundle<T>,
    ) -> Result<DenoiserOutput<T>>;
}

/// Sinusoidal embedding: `[sin(t·f_0) .. sin(t·f_{d/2-1}), cos(t·f_0) .. cos(t·f_{d/2-1})]`
/// with `f_i = 10000^(−i/(d/2))`.
pub fn time_embedding<T: Element>(t: &[usize], dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let step = step as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((step * f).sin(), (step * f).cos())).unzip();
        data.extend(sin.into_iter().chain(cos).map(T::from_f64_lossy));
    }
    Tensor::from_vec(&[t.len(), dim], data)
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    blocks: Vec<ResBlock>,
    attn: Vec<Option<AttentionBlock>>,
    down: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    blocks: Vec<ResBlock>,
    attn: Vec<Option<AttentionBlock>>,
    upsample: bool,
}

#[derive(Clone, Debug)]
struct AuxEncoder {
    conv_in: Conv2d,
    levels: Vec<EncoderLevel>,
}

impl AuxEncoder {
    fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut h = self.conv_in.forward(g, x);
        let mut feats = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            for block in &level.blocks {
                h = block.forward(g, h, None);
            }
            feats.push(h);
            if let Some(down) = &level.down {
                h = down.forward(g, h);
            }
        }
        feats
    }
}

/// The trainable noise predictor.
#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    time_mlp: (Linear, Linear),
    conv_in: Conv2d,
    encoder: Vec<EncoderLevel>,
    aux: Option<AuxEncoder>,
    mid: (ResBlock, AttentionBlock, ResBlock),
    decoder: Vec<DecoderLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl<T: Element> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::<T>::new(seed);
        let base = config.base_width;
        let emb_dim = 4 * base;
        let levels = config.levels();
        let widths: Vec<usize> = config.channel_multipliers.iter().map(|m| m * base).collect();
        let resolution = |l: usize| config.image_size >> l;
        let wants_attn = |l: usize| config.attention_resolutions.contains(&resolution(l));

        let time_mlp = (
            Linear::new(&mut pb, "time_mlp.0", config.time_embedding_dim(), emb_dim),
            Linear::new(&mut pb, "time_mlp.2", emb_dim, emb_dim),
        );
        let conv_in = Conv2d::new(&mut pb, "conv_in", config.main_in_channels(), base, 3, 1);

        // auxiliary widths mirror the main ladder
        let aux_widths: Vec<usize> = if config.variant.has_aux_encoder() {
            widths.clone()
        } else {
            vec![0; levels]
        };

        let mut encoder = Vec::with_capacity(levels);
        let mut ch = base;
        for l in 0..levels {
            pb.push_scope(format!("encoder.{l}"));
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for b in 0..config.num_res_blocks_per_level {
                blocks.push(ResBlock::new(&mut pb, &format!("res.{b}"), ch, widths[l], Some(emb_dim)));
                ch = widths[l];
                attn.push(wants_attn(l).then(|| AttentionBlock::new(&mut pb, &format!("attn.{b}"), ch)));
            }
            let down = (l + 1 < levels)
                .then(|| Conv2d::new(&mut pb, "down", ch + aux_widths[l], ch, 3, 2));
            pb.pop_scope();
            encoder.push(EncoderLevel { blocks, attn, down });
        }

        let aux = config.aux_in_channels().map(|aux_in| {
            pb.push_scope("aux");
            let conv_in = Conv2d::new(&mut pb, "conv_in", aux_in, base, 3, 1);
            let mut levels_aux = Vec::with_capacity(levels);
            let mut ch = base;
            for l in 0..levels {
                pb.push_scope(format!("encoder.{l}"));
                let mut blocks = Vec::new();
                for b in 0..config.num_res_blocks_per_level {
                    blocks.push(ResBlock::new(&mut pb, &format!("res.{b}"), ch, widths[l], None));
                    ch = widths[l];
                }
                let down = (l + 1 < levels).then(|| Conv2d::new(&mut pb, "down", ch, ch, 3, 2));
                pb.pop_scope();
                levels_aux.push(EncoderLevel {
                    blocks,
                    attn: Vec::new(),
                    down,
                });
            }
            pb.pop_scope();
            AuxEncoder {
                conv_in,
                levels: levels_aux,
            }
        });

        let top = widths[levels - 1];
        pb.push_scope("mid");
        let mid = (
            ResBlock::new(&mut pb, "res.0", top + aux_widths[levels - 1], top, Some(emb_dim)),
            AttentionBlock::new(&mut pb, "attn", top),
            ResBlock::new(&mut pb, "res.1", top, top, Some(emb_dim)),
        );
        pb.pop_scope();

        let mut decoder = Vec::with_capacity(levels);
        let mut ch = top;
        for l in (0..levels).rev() {
            pb.push_scope(format!("decoder.{l}"));
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for b in 0..config.num_res_blocks_per_level {
                let in_ch = if b == 0 { ch + widths[l] + aux_widths[l] } else { widths[l] };
                blocks.push(ResBlock::new(&mut pb, &format!("res.{b}"), in_ch, widths[l], Some(emb_dim)));
                attn.push(wants_attn(l).then(|| AttentionBlock::new(&mut pb, &format!("attn.{b}"), widths[l])));
            }
            ch = widths[l];
            pb.pop_scope();
            decoder.push(DecoderLevel {
                blocks,
                attn,
                upsample: l > 0,
            });
        }

        let out_norm = GroupNorm::new(&mut pb, "out_norm", base);
        let out_conv = Conv2d::new(&mut pb, "out_conv", base, 2, 3, 1);

        Ok(Self {
            config,
            params: pb.finish(),
            time_mlp,
            conv_in,
            encoder,
            aux,
            mid,
            decoder,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Names of parameters that belong to the auxiliary (mask or edge) encoder.
    pub fn aux_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("aux."))
            .map(|(n, _)| n.to_string())
            .collect()
    }

    fn check_inputs(&self, x_t: &Tensor<T>, t: &[usize], cond: &ConditioningBundle<T>) -> Result<()> {
        if cond.variant != self.config.variant {
            return Err(Error::VariantMismatch {
                expected: self.config.variant.to_string(),
                found: cond.variant.to_string(),
            });
        }
        let s = self.config.image_size;
        let n = t.len();
        if x_t.shape() != [n, 1, s, s] {
            return Err(Error::Shape(format!(
                "noisy input {:?} does not match [{n}, 1, {s}, {s}]",
                x_t.shape()
            )));
        }
        let expected = [n, self.config.num_mask_classes, s, s];
        if cond.mask_onehot.shape() != expected {
            return Err(Error::Shape(format!(
                "mask channels {:?} do not match {expected:?}",
                cond.mask_onehot.shape()
            )));
        }
        if let Some(e) = &cond.edge_map {
            if e.shape() != [n, 1, s, s] {
                return Err(Error::Shape(format!("edge map {:?} does not match input", e.shape())));
            }
        }
        Ok(())
    }

    /// Records the forward pass in `g` and returns the `[N, 2, H, W]` head output.
    ///
    /// With `zero_aux` the auxiliary encoder features are replaced by zeros,
    /// which probes how much the output depends on that path.
    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x_t: &Tensor<T>,
        t: &[usize],
        cond: &ConditioningBundle<T>,
        zero_aux: bool,
    ) -> Result<Var> {
        self.check_inputs(x_t, t, cond)?;
        let emb = g.input(time_embedding(t, self.config.time_embedding_dim())?);
        let emb = self.time_mlp.0.forward(g, emb);
        let emb = g.silu(emb);
        let emb = self.time_mlp.1.forward(g, emb);

        let x = g.input(x_t.clone());
        let mask = g.input(cond.mask_onehot.clone());
        let main_in = if self.config.variant.concatenates_mask() {
            g.concat_channels(&[x, mask])
        } else {
            x
        };

        let aux_feats: Vec<Option<Var>> = match &self.aux {
            Some(aux) => {
                let aux_in = match self.config.variant {
                    Variant::EdgeGuided => g.input(cond.edge_map.clone().expect("validated edge map")),
                    _ => mask,
                };
                let feats = aux.forward(g, aux_in);
                if zero_aux {
                    feats
                        .into_iter()
                        .map(|f| {
                            let shape = g.value(f).shape().to_vec();
                            Some(g.input(Tensor::zeros(&shape)))
                        })
                        .collect()
                } else {
                    feats.into_iter().map(Some).collect()
                }
            }
            None => vec![None; self.encoder.len()],
        };

        let mut h = self.conv_in.forward(g, main_in);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (level, feat) in self.encoder.iter().zip(&aux_feats) {
            for (block, attn) in level.blocks.iter().zip(&level.attn) {
                h = block.forward(g, h, Some(emb));
                if let Some(attn) = attn {
                    h = attn.forward(g, h);
                }
            }
            skips.push(h);
            if let Some(f) = feat {
                h = g.concat_channels(&[h, *f]);
            }
            if let Some(down) = &level.down {
                h = down.forward(g, h);
            }
        }

        h = self.mid.0.forward(g, h, Some(emb));
        h = self.mid.1.forward(g, h);
        h = self.mid.2.forward(g, h, Some(emb));

        let levels = self.encoder.len();
        for (i, level) in self.decoder.iter().enumerate() {
            let l = levels - 1 - i;
            let mut parts = vec![h, skips[l]];
            parts.extend(aux_feats[l]);
            h = g.concat_channels(&parts);
            for (block, attn) in level.blocks.iter().zip(&level.attn) {
                h = block.forward(g, h, Some(emb));
                if let Some(attn) = attn {
                    h = attn.forward(g, h);
                }
            }
            if level.upsample {
                h = g.upsample2x(h);
            }
        }

        let h = self.out_norm.forward(g, h);
        let h = g.silu(h);
        Ok(self.out_conv.forward(g, h))
    }

    /// Forward pass without gradient tracking.
    pub fn denoise(
        &self,
        x_t: &Tensor<T>,
        t: &[usize],
        cond: &ConditioningBundle<T>,
    ) -> Result<DenoiserOutput<T>> {
        let mut g = Graph::inference(&self.params);
        let out = self.forward_graph(&mut g, x_t, t, cond, false)?;
        Ok(DenoiserOutput::from_head(g.value(out)))
    }

    /// Forward pass with the auxiliary encoder features replaced by zeros.
    pub fn denoise_without_aux(
        &self,
        x_t: &Tensor<T>,
        t: &[usize],
        cond: &ConditioningBundle<T>,
    ) -> Result<DenoiserOutput<T>> {
        let mut g = Graph::inference(&self.params);
        let out = self.forward_graph(&mut g, x_t, t, cond, true)?;
        Ok(DenoiserOutput::from_head(g.value(out)))
    }

    /// Runs a tracked forward pass, lets `loss` turn the output into a value
    /// plus output gradients, and back-propagates those into parameter gradients.
    pub fn forward_backward<L>(
        &self,
        x_t: &Tensor<T>,
        t: &[usize],
        cond: &ConditioningBundle<T>,
        loss: impl FnOnce(&DenoiserOutput<T>) -> Result<(L, DenoiserOutput<T>)>,
    ) -> Result<(L, Gradients<T>)> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_graph(&mut g, x_t, t, cond, false)?;
        let prediction = DenoiserOutput::from_head(g.value(out));
        let (value, grad) = loss(&prediction)?;
        let grads = g.backward(out, grad.to_head());
        Ok((value, grads))
    }
}

impl<T: Element> Denoise<T> for Denoiser<T> {
    fn variant(&self) -> Variant {
        self.config.variant
    }

    fn predict(
        &self,
        x_t: &Tensor<T>,
        t: &[usize],
        cond: &ConditioningBundle<T>,
    ) -> Result<DenoiserOutput<T>> {
        self.denoise(x_t, t, cond)
    }
}
