use super::graph::{Graph, Var};
use super::params::{ParamBuilder, ParamId};
use super::tensor::Element;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        pb.push_scope(name);
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight = pb.uniform("weight", &[out_channels, in_channels, kernel, kernel], bound);
        let bias = pb.uniform("bias", &[out_channels], bound);
        pb.pop_scope();
        Self {
            in_channels,
            out_channels,
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, name: &str, input: usize, output: usize) -> Self {
        pb.push_scope(name);
        let bound = 1.0 / (input as f64).sqrt();
        let weight = pb.uniform("weight", &[output, input], bound);
        let bias = pb.uniform("bias", &[output], bound);
        pb.pop_scope();
        Self { weight, bias }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

/// Largest divisor of `channels` that is at most 32 and leaves at least
/// four channels per group. Single-channel groups would strip every
/// channel's spatial mean, which the noise prediction needs.
pub fn norm_groups(channels: usize) -> usize {
    (1..=32.min(channels / 4))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, name: &str, channels: usize) -> Self {
        pb.push_scope(name);
        let gamma = pb.constant("gamma", &[channels], 1.0);
        let beta = pb.constant("beta", &[channels], 0.0);
        pb.pop_scope();
        Self {
            gamma,
            beta,
            groups: norm_groups(channels),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Pre-activation residual block; optionally modulated by a time embedding.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        emb_dim: Option<usize>,
    ) -> Self {
        pb.push_scope(name);
        let block = Self {
            norm1: GroupNorm::new(pb, "norm1", in_channels),
            conv1: Conv2d::new(pb, "conv1", in_channels, out_channels, 3, 1),
            emb_proj: emb_dim.map(|d| Linear::new(pb, "emb_proj", d, out_channels)),
            norm2: GroupNorm::new(pb, "norm2", out_channels),
            conv2: Conv2d::new(pb, "conv2", out_channels, out_channels, 3, 1),
            skip: (in_channels != out_channels)
                .then(|| Conv2d::new(pb, "skip", in_channels, out_channels, 1, 1)),
        };
        pb.pop_scope();
        block
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var, emb: Option<Var>) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, h);
        if let (Some(proj), Some(emb)) = (&self.emb_proj, emb) {
            let e = proj.forward(g, emb);
            h = g.add_channel(h, e);
        }
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let shortcut = match &self.skip {
            Some(conv) => conv.forward(g, x),
            None => x,
        };
        g.add(shortcut, h)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    norm: GroupNorm,
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    proj: Conv2d,
}

impl AttentionBlock {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, name: &str, channels: usize) -> Self {
        pb.push_scope(name);
        let block = Self {
            norm: GroupNorm::new(pb, "norm", channels),
            query: Conv2d::new(pb, "query", channels, channels, 1, 1),
            key: Conv2d::new(pb, "key", channels, channels, 1, 1),
            value: Conv2d::new(pb, "value", channels, channels, 1, 1),
            proj: Conv2d::new(pb, "proj", channels, channels, 1, 1),
        };
        pb.pop_scope();
        block
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.norm.forward(g, x);
        let q = self.query.forward(g, h);
        let k = self.key.forward(g, h);
        let v = self.value.forward(g, h);
        let a = g.attention(q, k, v);
        let out = self.proj.forward(g, a);
        g.add(x, out)
    }
}
