//! Conditional encoder–decoder denoiser `g(x_t, x_lr, t) → x̂_hr`.
//!
//! Layout for `depth = D` and base width `C`:
//!
//! ```text
//! [x_t ‖ x_lr] → stem 3×3 → (ResBlock, pool, 3×3)×D → ResBlock
//!             → [window-attention block] → (upsample, 3×3, +skip, ResBlock)×D
//!             → SiLU → 3×3 → + x_lr
//! ```
//!
//! Level `i` has `C·2^i` channels. Every ResBlock receives the timestep through
//! a per-level projection of the shared sinusoidal embedding, added as a
//! channel bias. The attention block (pre-norm window attention followed by a
//! pre-norm 1×1 MLP, both residual) only runs when
//! `use_window_attention` is set; its parameters are ignored otherwise.

use rand::Rng;
use rand_distr::Uniform;

use crate::error::{Error, Result};
use crate::nn::array::Array;
use crate::nn::graph::{check_windows, Graph, NodeId, WindowLayout};
use crate::nn::params::ParamSet;
use crate::rng::stream_rng;
use crate::sampler::Denoiser;
use crate::scalar::Scalar;
use crate::tensor::TensorImage;

const NORM_EPS: f64 = 1e-5;

/// The two ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Plain convolutional encoder–decoder.
    Conv,
    /// Encoder–decoder with the bottleneck window-attention block.
    Swin,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Conv => "conv",
            Variant::Swin => "swin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv" => Some(Variant::Conv),
            "swin" => Some(Variant::Swin),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub base_channels: usize,
    /// Number of 2× down/up-sampling levels.
    pub depth: usize,
    pub use_window_attention: bool,
    pub window_size: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 32,
            depth: 2,
            use_window_attention: true,
            window_size: 8,
            heads: 4,
            time_embed_dim: 64,
        }
    }
}

impl NetConfig {
    pub fn variant(&self) -> Variant {
        if self.use_window_attention {
            Variant::Swin
        } else {
            Variant::Conv
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.use_window_attention = variant == Variant::Swin;
        self
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.depth)
    }

    /// Smallest accepted input side.
    pub fn min_side(&self) -> usize {
        4 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.window_size == 0 || self.heads == 0 {
            return Err(Error::config(
                "channel, window and head counts must be positive",
            ));
        }
        if self.depth > 6 {
            return Err(Error::config(format!(
                "depth {} is unreasonably large",
                self.depth
            )));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("time_embed_dim must be even and positive"));
        }
        if !self.bottleneck_channels().is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads ({}) must divide the attention channel count ({})",
                self.heads,
                self.bottleneck_channels()
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding: `[sin(t/10000^(2i/dim))…, cos(t/10000^(2i/dim))…]`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::arg(format!(
            "embedding dimension must be even, got {dim}"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (t as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64))
        .collect();
    Ok(freqs
        .iter()
        .map(|a| a.sin())
        .chain(freqs.iter().map(|a| a.cos()))
        .collect())
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

enum Init {
    /// Uniform(−a, a) with `a = √(1/fan_in)`.
    FanIn(usize),
    Zero,
    One,
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, cout: usize, cin: usize, k: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![cout, cin, k, k],
        init: Init::FanIn(cin * k * k),
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![cout],
        init: Init::Zero,
    });
}

fn linear_specs(out: &mut Vec<ParamSpec>, name: &str, n_out: usize, n_in: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![n_out, n_in],
        init: Init::FanIn(n_in),
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![n_out],
        init: Init::Zero,
    });
}

fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(ParamSpec {
        name: format!("{name}.g"),
        shape: vec![c],
        init: Init::One,
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![c],
        init: Init::Zero,
    });
}

fn res_specs(out: &mut Vec<ParamSpec>, name: &str, c: usize, embed: usize) {
    conv_specs(out, &format!("{name}.conv1"), c, c, 3);
    conv_specs(out, &format!("{name}.conv2"), c, c, 3);
    linear_specs(out, &format!("{name}.temb"), c, embed);
}

/// Prefix of the window-attention parameters.
pub const ATTENTION_PREFIX: &str = "attn";

fn attention_specs(out: &mut Vec<ParamSpec>, c: usize) {
    let p = ATTENTION_PREFIX;
    norm_specs(out, &format!("{p}.norm1"), c);
    for proj in ["q", "k", "v", "proj"] {
        conv_specs(out, &format!("{p}.{proj}"), c, c, 1);
    }
    norm_specs(out, &format!("{p}.norm2"), c);
    conv_specs(out, &format!("{p}.mlp1"), 2 * c, c, 1);
    conv_specs(out, &format!("{p}.mlp2"), c, 2 * c, 1);
}

fn param_specs(config: &NetConfig) -> Vec<ParamSpec> {
    let e = config.time_embed_dim;
    let mut specs = Vec::new();
    linear_specs(&mut specs, "temb.fc1", e, e);
    linear_specs(&mut specs, "temb.fc2", e, e);
    conv_specs(&mut specs, "stem", config.channels(0), 2, 3);
    for i in 0..config.depth {
        res_specs(&mut specs, &format!("enc{i}"), config.channels(i), e);
        conv_specs(
            &mut specs,
            &format!("down{i}"),
            config.channels(i + 1),
            config.channels(i),
            3,
        );
    }
    res_specs(&mut specs, "mid", config.bottleneck_channels(), e);
    if config.use_window_attention {
        attention_specs(&mut specs, config.bottleneck_channels());
    }
    for i in (0..config.depth).rev() {
        conv_specs(
            &mut specs,
            &format!("up{i}"),
            config.channels(i),
            config.channels(i + 1),
            3,
        );
        res_specs(&mut specs, &format!("dec{i}"), config.channels(i), e);
    }
    conv_specs(&mut specs, "out", 1, config.channels(0), 3);
    specs
}

/// Fan-in scaled uniform weights, zero biases, unit norm gains.
/// Deterministic in `seed`; tensors are drawn in declaration order.
pub fn init_params<S: Scalar>(config: &NetConfig, seed: u64) -> Result<ParamSet<S>> {
    config.validate()?;
    let mut rng = stream_rng(seed, 0x1417);
    let mut params = ParamSet::new();
    for spec in param_specs(config) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<S> = match spec.init {
            Init::FanIn(fan_in) => {
                let a = (1.0 / fan_in as f64).sqrt();
                let dist = Uniform::new(-a, a);
                (0..n).map(|_| S::lit(rng.sample(dist))).collect()
            }
            Init::Zero => vec![S::zero(); n],
            Init::One => vec![S::one(); n],
        };
        params.insert(&spec.name, Array::from_parts(spec.shape, data));
    }
    Ok(params)
}

/// Checks that `params` holds every tensor `config` needs with the right shape.
pub fn check_params<S: Scalar>(params: &ParamSet<S>, config: &NetConfig) -> Result<()> {
    for spec in param_specs(config) {
        match params.get(&spec.name) {
            None => {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{}` missing for the {} variant",
                    spec.name,
                    config.variant()
                )))
            }
            Some(a) if a.shape() != spec.shape.as_slice() => {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    a.shape(),
                    spec.shape
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

struct Builder<'a, S: Scalar> {
    g: &'a mut Graph<S>,
    params: &'a ParamSet<S>,
}

impl<S: Scalar> Builder<'_, S> {
    fn p(&mut self, name: &str) -> Result<NodeId> {
        self.g.param_from(self.params, name)
    }

    fn conv(&mut self, name: &str, x: NodeId, pad: usize) -> Result<NodeId> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.g.conv2d(x, w, Some(b), pad)
    }

    fn linear(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.g.linear(x, w, Some(b))
    }

    fn norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let n = self.g.layer_norm(x, S::lit(NORM_EPS));
        let gain = self.p(&format!("{name}.g"))?;
        let bias = self.p(&format!("{name}.b"))?;
        self.g.channel_affine(n, gain, bias)
    }

    fn res_block(&mut self, name: &str, x: NodeId, emb: NodeId) -> Result<NodeId> {
        let a = self.g.silu(x);
        let h = self.conv(&format!("{name}.conv1"), a, 1)?;
        let shift = self.linear(&format!("{name}.temb"), emb)?;
        let h = self.g.add_channel(h, shift)?;
        let a = self.g.silu(h);
        let h = self.conv(&format!("{name}.conv2"), a, 1)?;
        self.g.add(x, h)
    }

    /// Pre-norm window attention with output projection and residual.
    fn attention(&mut self, x: NodeId, window: usize, heads: usize) -> Result<NodeId> {
        let p = ATTENTION_PREFIX;
        let n = self.norm(&format!("{p}.norm1"), x)?;
        let q = self.conv(&format!("{p}.q"), n, 0)?;
        let k = self.conv(&format!("{p}.k"), n, 0)?;
        let v = self.conv(&format!("{p}.v"), n, 0)?;
        let a = self.g.window_attention(q, k, v, heads, window)?;
        let o = self.conv(&format!("{p}.proj"), a, 0)?;
        self.g.add(x, o)
    }

    fn mlp(&mut self, x: NodeId) -> Result<NodeId> {
        let p = ATTENTION_PREFIX;
        let n = self.norm(&format!("{p}.norm2"), x)?;
        let h = self.conv(&format!("{p}.mlp1"), n, 0)?;
        let h = self.g.silu(h);
        let h = self.conv(&format!("{p}.mlp2"), h, 0)?;
        self.g.add(x, h)
    }

    /// Attention + MLP on a map zero-padded to a multiple of the window.
    fn window_block(&mut self, x: NodeId, window: usize, heads: usize) -> Result<NodeId> {
        let (_, h, w) = self.g.value(x).chw();
        let (ph, pw) = (h.div_ceil(window) * window, w.div_ceil(window) * window);
        let padded = if (ph, pw) != (h, w) {
            self.g.pad_zero(x, ph, pw)?
        } else {
            x
        };
        let y = self.attention(padded, window, heads)?;
        let y = self.mlp(y)?;
        if (ph, pw) != (h, w) {
            self.g.crop(y, h, w)
        } else {
            Ok(y)
        }
    }
}

/// Reflect-pads a single plane on the bottom/right to `(ph, pw)`.
fn reflect_pad<S: Scalar>(plane: &[S], h: usize, w: usize, ph: usize, pw: usize) -> Vec<S> {
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
    let mut out = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let sy = reflect(y, h);
        for x in 0..pw {
            out.push(plane[sy * w + reflect(x, w)]);
        }
    }
    out
}

/// Records the forward pass on `g` and returns the `[1, H, W]` output node.
pub fn build_forward<S: Scalar>(
    g: &mut Graph<S>,
    params: &ParamSet<S>,
    config: &NetConfig,
    x_t: &TensorImage<S>,
    x_lr: &TensorImage<S>,
    t: usize,
) -> Result<NodeId> {
    config.validate()?;
    x_t.check_same_shape(x_lr, "denoiser inputs")?;
    if x_t.channels() != 1 {
        return Err(Error::shape(format!(
            "denoiser expects single-channel images, got {}",
            x_t.channels()
        )));
    }
    let (h, w) = (x_t.height(), x_t.width());
    if h < config.min_side() || w < config.min_side() {
        return Err(Error::shape(format!(
            "input {h}x{w} smaller than the minimum side {} for depth {}",
            config.min_side(),
            config.depth
        )));
    }
    let unit = 1usize << config.depth;
    let (ph, pw) = (h.div_ceil(unit) * unit, w.div_ceil(unit) * unit);
    let (xt_data, lr_data) = if (ph, pw) != (h, w) {
        (
            reflect_pad(x_t.data(), h, w, ph, pw),
            reflect_pad(x_lr.data(), h, w, ph, pw),
        )
    } else {
        (x_t.data().to_vec(), x_lr.data().to_vec())
    };

    let mut b = Builder { g, params };
    let xt = b.g.input(Array::from_parts(vec![1, ph, pw], xt_data));
    let lr = b.g.input(Array::from_parts(vec![1, ph, pw], lr_data));

    let sin = time_embedding(t, config.time_embed_dim)?;
    let sin = b.g.input(Array::from_parts(
        vec![config.time_embed_dim],
        sin.into_iter().map(S::lit).collect(),
    ));
    let e = b.linear("temb.fc1", sin)?;
    let e = b.g.silu(e);
    let e = b.linear("temb.fc2", e)?;
    let emb = b.g.silu(e);

    let input = b.g.concat(xt, lr)?;
    let mut h_node = b.conv("stem", input, 1)?;
    let mut skips = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        h_node = b.res_block(&format!("enc{i}"), h_node, emb)?;
        skips.push(h_node);
        let pooled = b.g.avg_pool2(h_node)?;
        h_node = b.conv(&format!("down{i}"), pooled, 1)?;
    }
    h_node = b.res_block("mid", h_node, emb)?;
    if config.use_window_attention {
        h_node = b.window_block(h_node, config.window_size, config.heads)?;
    }
    for i in (0..config.depth).rev() {
        let up = b.g.upsample2(h_node);
        let up = b.conv(&format!("up{i}"), up, 1)?;
        let merged = b.g.add(up, skips[i])?;
        h_node = b.res_block(&format!("dec{i}"), merged, emb)?;
    }
    let a = b.g.silu(h_node);
    let head = b.conv("out", a, 1)?;
    let out = b.g.add(head, lr)?;
    if (ph, pw) != (h, w) {
        b.g.crop(out, h, w)
    } else {
        Ok(out)
    }
}

/// Inference forward pass: `x̂_hr = g(x_t, x_lr, t)`.
pub fn denoiser_forward<S: Scalar>(
    params: &ParamSet<S>,
    config: &NetConfig,
    x_t: &TensorImage<S>,
    x_lr: &TensorImage<S>,
    t: usize,
) -> Result<TensorImage<S>> {
    let mut g = Graph::new(false);
    let out = build_forward(&mut g, params, config, x_t, x_lr, t)?;
    let value = g.value(out);
    if !value.all_finite() {
        return Err(Error::NonFinite(format!("denoiser output at t={t}")));
    }
    value.to_image()
}

/// The attention sub-block on its own: pre-norm, Q/K/V projections, windowed
/// multi-head attention, output projection, residual. `x` is `[C, H, W]`;
/// its sides are zero-padded to multiples of `window` internally.
pub fn window_attention<S: Scalar>(
    x: &Array<S>,
    params: &ParamSet<S>,
    window: usize,
    heads: usize,
) -> Result<Array<S>> {
    let (c, h, w) = x.chw();
    let (ph, pw) = (h.div_ceil(window) * window, w.div_ceil(window) * window);
    check_windows(c, ph, pw, heads, window)?;
    let mut g = Graph::new(false);
    let mut b = Builder { g: &mut g, params };
    let mut node = b.g.input(x.clone());
    if (ph, pw) != (h, w) {
        node = b.g.pad_zero(node, ph, pw)?;
    }
    let mut y = b.attention(node, window, heads)?;
    if (ph, pw) != (h, w) {
        y = b.g.crop(y, h, w)?;
    }
    let out = g.value(y).clone();
    if !out.all_finite() {
        return Err(Error::NonFinite("window attention output".into()));
    }
    Ok(out)
}

/// Softmax attention weights for `q`, `k` (`[C, H, W]`): one row-stochastic
/// `window²×window²` matrix per `(window, head)`, concatenated.
pub fn window_attention_weights<S: Scalar>(
    q: &Array<S>,
    k: &Array<S>,
    heads: usize,
    window: usize,
) -> Result<Vec<S>> {
    let (c, h, w) = q.chw();
    if k.shape() != q.shape() {
        return Err(Error::shape("q and k must share a shape"));
    }
    check_windows(c, h, w, heads, window)?;
    let layout = WindowLayout::new(c, h, w, heads, window);
    Ok(crate::nn::graph::attention_probs(
        &layout,
        q.data(),
        k.data(),
    ))
}

/// Trained network behind the sampler's denoiser interface.
#[derive(Debug, Clone)]
pub struct NetDenoiser<S> {
    pub params: ParamSet<S>,
    pub config: NetConfig,
}

impl<S: Scalar> NetDenoiser<S> {
    pub fn new(params: ParamSet<S>, config: NetConfig) -> Result<Self> {
        check_params(&params, &config)?;
        Ok(NetDenoiser { params, config })
    }
}

impl<S: Scalar> Denoiser<S> for NetDenoiser<S> {
    fn denoise(
        &self,
        x_t: &TensorImage<S>,
        x_lr: &TensorImage<S>,
        t: usize,
    ) -> Result<TensorImage<S>> {
        denoiser_forward(&self.params, &self.config, x_t, x_lr, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_image, stream_rng};

    fn small(attn: bool) -> NetConfig {
        NetConfig {
            base_channels: 4,
            depth: 2,
            use_window_attention: attn,
            window_size: 4,
            heads: 2,
            time_embed_dim: 8,
        }
    }

    fn img(h: usize, w: usize, seed: u64) -> TensorImage<f64> {
        gaussian_image(h, w, 1, &mut stream_rng(seed, 0))
    }

    #[test]
    fn time_embedding_examples() {
        let e = time_embedding(0, 8).unwrap();
        assert!(e[..4].iter().all(|&v| v == 0.0));
        assert!(e[4..].iter().all(|&v| v == 1.0));
        let e = time_embedding(1, 4).unwrap();
        assert!((e[0] - 0.841_470_984_807_896_5).abs() < 1e-15);
        for t in 0..50 {
            assert!(time_embedding(t, 16)
                .unwrap()
                .iter()
                .all(|v| v.abs() <= 1.0));
        }
        assert!(time_embedding(1, 5).is_err());
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let cfg = NetConfig {
            base_channels: 16,
            ..small(true)
        };
        let a = init_params::<f64>(&cfg, 4).unwrap();
        assert_eq!(
            a.iter().count(),
            init_params::<f64>(&cfg, 4).unwrap().iter().count()
        );
        for ((_, x), (_, y)) in a.iter().zip(init_params::<f64>(&cfg, 4).unwrap().iter()) {
            assert_eq!(x.data(), y.data());
        }
        for (name, v) in a.iter() {
            if name.ends_with(".b") {
                assert!(v.data().iter().all(|&b| b == 0.0), "{name}");
            }
        }
        let w = a.get("dec0.conv1.w").unwrap();
        let fan_in = 16.0 * 9.0;
        let n = w.len() as f64;
        let std = (w.data().iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        let want = (1.0f64 / fan_in).sqrt() / 3f64.sqrt();
        assert!((std / want - 1.0).abs() < 0.2, "{std} vs {want}");
    }

    #[test]
    fn output_shape_across_resolutions() {
        for attn in [false, true] {
            let cfg = small(attn);
            let p = init_params::<f64>(&cfg, 1).unwrap();
            for (h, w) in [(32, 32), (48, 48), (17, 23)] {
                let out = denoiser_forward(&p, &cfg, &img(h, w, 1), &img(h, w, 2), 3).unwrap();
                assert_eq!(out.dims(), (1, h, w));
                assert!(out.all_finite());
            }
            assert!(denoiser_forward(&p, &cfg, &img(8, 32, 1), &img(8, 32, 2), 3).is_err());
            assert!(denoiser_forward(&p, &cfg, &img(16, 16, 1), &img(16, 17, 2), 3).is_err());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small(true);
        let p = init_params::<f32>(&cfg, 2).unwrap();
        let (x, l) = (img(16, 16, 1).cast(), img(16, 16, 2).cast());
        let a = denoiser_forward(&p, &cfg, &x, &l, 5).unwrap();
        let b = denoiser_forward(&p, &cfg, &x, &l, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conv_variant_ignores_attention_parameters() {
        let conv = small(false);
        let mut p = init_params::<f64>(&small(true), 3).unwrap();
        let (x, l) = (img(16, 16, 1), img(16, 16, 2));
        let before = denoiser_forward(&p, &conv, &x, &l, 4).unwrap();
        let names: Vec<String> = p
            .names()
            .filter(|n| n.starts_with(ATTENTION_PREFIX))
            .map(String::from)
            .collect();
        assert!(!names.is_empty());
        for n in &names {
            p.get_mut(n)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 7.0);
        }
        assert_eq!(denoiser_forward(&p, &conv, &x, &l, 4).unwrap(), before);
    }

    #[test]
    fn padded_region_does_not_leak_into_valid_output() {
        // Reflection padding is a function of the valid pixels, so the output
        // must match a forward pass on the explicitly reflect-padded input.
        let cfg = small(false);
        let p = init_params::<f64>(&cfg, 5).unwrap();
        let (x, l) = (img(18, 18, 1), img(18, 18, 2));
        let out = denoiser_forward(&p, &cfg, &x, &l, 2).unwrap();
        let pad = |t: &TensorImage<f64>| {
            TensorImage::new(20, 20, 1, reflect_pad(t.data(), 18, 18, 20, 20)).unwrap()
        };
        let full = denoiser_forward(&p, &cfg, &pad(&x), &pad(&l), 2).unwrap();
        for y in 0..18 {
            for xx in 0..18 {
                assert_eq!(out.get(0, y, xx), full.get(0, y, xx));
            }
        }
    }

    #[test]
    fn attention_examples() {
        let (c, h, w) = (4, 8, 8);
        let mut rng = stream_rng(1, 1);
        let v = gaussian_image::<f64>(h, w, c, &mut rng);
        let v = Array::from_parts(vec![c, h, w], v.into_data());
        let q = Array::<f64>::filled(&[c, h, w], 0.3);
        let probs = window_attention_weights(&q, &q, 2, 4).unwrap();
        assert!(probs.iter().all(|&p| (p - 1.0 / 16.0).abs() < 1e-15));

        let mut g = Graph::new(false);
        let (qi, vi) = (g.input(q.clone()), g.input(v.clone()));
        let out = g.window_attention(qi, qi, vi, 2, 4).unwrap();
        let out = g.value(out);
        for ch in 0..c {
            let plane = &v.data()[ch * h * w..(ch + 1) * h * w];
            let mean: f64 = (0..4)
                .flat_map(|y| (0..4).map(move |x| (y, x)))
                .map(|(y, x)| plane[y * w + x])
                .sum::<f64>()
                / 16.0;
            assert!((out.data()[ch * h * w] - mean).abs() < 1e-12);
        }

        let cfg = small(true);
        let mut p = init_params::<f64>(&cfg, 6).unwrap();
        for (name, a) in p.iter_mut() {
            if name.starts_with(ATTENTION_PREFIX) && name.ends_with(".b") {
                assert!(a.data().iter().all(|&b| b == 0.0));
            }
        }
        let zero = Array::zeros(&[cfg.bottleneck_channels(), 8, 8]);
        let y = window_attention(&zero, &p, 4, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        p.get_mut("attn.q.w").unwrap().data_mut()[0] = f64::NAN;
        let x = Array::filled(&[cfg.bottleneck_channels(), 8, 8], 1.0);
        assert!(window_attention(&x, &p, 4, 2).is_err());
    }

    #[test]
    fn params_are_checked_against_the_config() {
        let p = init_params::<f64>(&small(false), 1).unwrap();
        let err = check_params(&p, &small(true)).unwrap_err().to_string();
        assert!(err.contains("attn") && err.contains("swin"), "{err}");
        assert!(NetDenoiser::new(p, small(true)).is_err());
        assert_eq!(Variant::parse("conv"), Some(Variant::Conv));
        assert_eq!(Variant::Swin.to_string(), "swin");
        assert!(NetConfig {
            heads: 3,
            ..small(true)
        }
        .validate()
        .is_err());
        assert!(NetConfig {
            time_embed_dim: 7,
            ..small(true)
        }
        .validate()
        .is_err());
    }
}
