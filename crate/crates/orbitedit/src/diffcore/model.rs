//! Conditioned noise predictor over a whole orbit of views.
//!
//! The network sees every view of the orbit at once: a small conv encoder per
//! view, then transformer-style blocks whose attention spans all tokens of all
//! views, then a conv decoder with skip connections. Timestep and per-view
//! azimuth enter as learned channel biases after the stem. Parameters live in
//! one flat `Vec<f64>` described by a named layout, which keeps the optimizer
//! and finite-difference checks trivial.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::nn;
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Image channels (1 or 3).
    pub channels: usize,
    /// Stem feature width.
    pub features: usize,
    /// Token width at the attention resolution.
    pub d_model: usize,
    /// Number of attention + conv blocks.
    pub blocks: usize,
    /// Sinusoidal timestep embedding width (even).
    pub time_embed_dim: usize,
    /// Sinusoidal azimuth embedding width (even).
    pub azimuth_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            features: 16,
            d_model: 32,
            blocks: 2,
            time_embed_dim: 16,
            azimuth_embed_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.features < 2 || self.d_model < 2 {
            return Err(Error::Config("features and d_model must be at least 2".into()));
        }
        if self.blocks == 0 {
            return Err(Error::Config("need at least one attention block".into()));
        }
        for (name, v) in [
            ("time_embed_dim", self.time_embed_dim),
            ("azimuth_embed_dim", self.azimuth_embed_dim),
        ] {
            if v < 2 || v % 2 != 0 {
                return Err(Error::Config(format!("{name} must be even and at least 2, got {v}")));
            }
        }
        Ok(())
    }
}

/// One named span of the flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

/// Ordered map from parameter names to offsets and shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamLayout {
    fn build(entries: Vec<(String, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let mut out = Vec::with_capacity(entries.len());
        let mut index = BTreeMap::new();
        for (name, shape) in entries {
            let len: usize = shape.iter().product();
            index.insert(name.clone(), out.len());
            out.push(ParamEntry { name, offset, shape });
            offset += len;
        }
        Self { entries: out, total: offset, index }
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    pub fn entry(&self, name: &str) -> &ParamEntry {
        let idx = self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[*idx]
    }

    fn span(&self, name: &str) -> (usize, usize) {
        let e = self.entry(name);
        (e.offset, e.shape.iter().product())
    }

    /// Matrix view collapsing all but the last dimension into rows.
    pub fn view2<'a>(&self, theta: &'a [f64], name: &str) -> ArrayView2<'a, f64> {
        let e = self.entry(name);
        let cols = *e.shape.last().expect("non-scalar parameter");
        let rows: usize = e.shape.iter().product::<usize>() / cols;
        let (off, len) = self.span(name);
        ArrayView2::from_shape((rows, cols), &theta[off..off + len]).expect("layout view")
    }

    pub fn view1<'a>(&self, theta: &'a [f64], name: &str) -> ArrayView1<'a, f64> {
        let (off, len) = self.span(name);
        ArrayView1::from_shape(len, &theta[off..off + len]).expect("layout view")
    }

    fn add2(&self, grad: &mut [f64], name: &str, delta: &Array2<f64>) {
        let (off, len) = self.span(name);
        for (g, d) in grad[off..off + len].iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    fn add1(&self, grad: &mut [f64], name: &str, delta: &Array1<f64>) {
        let (off, len) = self.span(name);
        for (g, d) in grad[off..off + len].iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }
}

/// Flat trainable state of a [`Denoiser`].
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub theta: Vec<f64>,
}

/// Per-orbit conditioning: the clean edited anchor frame every view gets to
/// see, already in [0, 1].
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub frame: Array3<f64>,
}

impl Conditioning {
    pub fn new(frame: Array3<f64>) -> Result<Self> {
        let (h, w, _) = frame.dim();
        if h != w {
            return Err(Error::Config(format!("conditioning frame must be square, got {h}x{w}")));
        }
        Ok(Self { frame })
    }
}

/// Keys and values captured from the attention layers of one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTap {
    pub entries: Vec<TapEntry>,
    pub n_views: usize,
    pub tokens_per_view: usize,
}

#[derive(Debug, Clone)]
pub struct TapEntry {
    pub layer: String,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

impl AttentionTap {
    pub fn entry(&self, layer: &str) -> Option<&TapEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    /// Keeps only the named layers; an empty filter keeps everything.
    pub fn retain_layers(&mut self, layers: &[String]) {
        if layers.is_empty() {
            return;
        }
        self.entries.retain(|e| layers.iter().any(|l| l == &e.layer));
    }
}

/// What the attention layers should do besides attending.
pub enum TapMode<'a> {
    Plain,
    Capture,
    Inject(&'a AttentionTap),
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub eps: Array4<f64>,
    pub tap: Option<AttentionTap>,
}

struct BlockCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    a: Array2<f64>,
    h_mid: Array4<f64>,
    cols_conv: Array2<f64>,
}

/// Activations retained for the backward pass of one training forward.
pub struct Cache {
    x_in_dim: (usize, usize, usize, usize),
    e_t: Array1<f64>,
    e_az: Array2<f64>,
    cols_stem: Array2<f64>,
    z0: Array4<f64>,
    cols_d1: Array2<f64>,
    z1: Array4<f64>,
    cols_d2: Array2<f64>,
    z2: Array4<f64>,
    blocks: Vec<BlockCache>,
    cols_u1: Array2<f64>,
    zu1: Array4<f64>,
    cols_u0: Array2<f64>,
    zu0: Array4<f64>,
    cols_head: Array2<f64>,
}

impl Cache {
    /// Attention probability matrix of each block, one row per query token;
    /// every row is a probability distribution over the key tokens.
    pub fn attention_probs(&self) -> Vec<&Array2<f64>> {
        self.blocks.iter().map(|b| &b.p).collect()
    }
}

/// The noise-prediction network. Holds architecture and layout, no weights.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: ModelConfig,
    layout: ParamLayout,
}

impl Denoiser {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let f = cfg.features;
        let d = cfg.d_model;
        let mut entries: Vec<(String, Vec<usize>)> = vec![
            ("stem.w".into(), vec![3, 3, 2 * c, f]),
            ("stem.b".into(), vec![f]),
            ("temb.w".into(), vec![cfg.time_embed_dim, f]),
            ("aemb.w".into(), vec![cfg.azimuth_embed_dim, f]),
            ("down1.w".into(), vec![3, 3, f, 2 * f]),
            ("down1.b".into(), vec![2 * f]),
            ("down2.w".into(), vec![3, 3, 2 * f, d]),
            ("down2.b".into(), vec![d]),
        ];
        for i in 0..cfg.blocks {
            entries.push((format!("block{i}.attn.ln.gamma"), vec![d]));
            entries.push((format!("block{i}.attn.ln.beta"), vec![d]));
            entries.push((format!("block{i}.attn.qkv.w"), vec![d, 3 * d]));
            entries.push((format!("block{i}.attn.qkv.b"), vec![3 * d]));
            entries.push((format!("block{i}.attn.out.w"), vec![d, d]));
            entries.push((format!("block{i}.attn.out.b"), vec![d]));
            entries.push((format!("block{i}.conv.w"), vec![3, 3, d, d]));
            entries.push((format!("block{i}.conv.b"), vec![d]));
        }
        entries.extend([
            ("up1.w".into(), vec![3, 3, d + 2 * f, 2 * f]),
            ("up1.b".into(), vec![2 * f]),
            ("up0.w".into(), vec![3, 3, 2 * f + f, f]),
            ("up0.b".into(), vec![f]),
            ("head.w".into(), vec![3, 3, f, c]),
            ("head.b".into(), vec![c]),
        ]);
        let layout = ParamLayout::build(entries);
        Ok(Self { cfg, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Names of the attention layers, in network order.
    pub fn attention_layers(&self) -> Vec<String> {
        (0..self.cfg.blocks).map(|i| format!("block{i}.attn")).collect()
    }

    /// Random init: He for convs, Xavier-ish for attention projections, the
    /// output head all zeros so an untrained model predicts zero noise.
    pub fn init_params(&self, seed: u64) -> DenoiserParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.layout.total];
        for entry in &self.layout.entries {
            let len: usize = entry.shape.iter().product();
            let slot = &mut theta[entry.offset..entry.offset + len];
            let name = entry.name.as_str();
            if name == "head.w" || name == "head.b" || name.ends_with(".b") || name.ends_with(".beta") {
                continue;
            }
            if name.ends_with(".gamma") {
                slot.fill(1.0);
                continue;
            }
            let fan_in: usize = entry.shape[..entry.shape.len() - 1].iter().product();
            let std = if entry.shape.len() == 4 {
                (2.0 / fan_in as f64).sqrt()
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            for w in slot.iter_mut() {
                *w = normal.sample(&mut rng);
            }
        }
        DenoiserParams { theta }
    }

    fn check_theta(&self, params: &DenoiserParams) -> Result<()> {
        if params.theta.len() != self.layout.total {
            return Err(Error::Shape {
                expected: format!("{} parameters", self.layout.total),
                got: format!("{}", params.theta.len()),
            });
        }
        Ok(())
    }

    fn check_input(&self, x_t: &Array4<f64>, cond: &Conditioning) -> Result<()> {
        let (n, h, w, c) = x_t.dim();
        if h != w || h % 4 != 0 || h < 4 {
            return Err(Error::Shape {
                expected: "square views with side divisible by 4".into(),
                got: format!("{h}x{w}"),
            });
        }
        if c != self.cfg.channels {
            return Err(Error::Shape {
                expected: format!("{} channels", self.cfg.channels),
                got: format!("{c}"),
            });
        }
        if n < 1 {
            return Err(Error::Shape { expected: "at least one view".into(), got: "0".into() });
        }
        let (ch, cw, cc) = cond.frame.dim();
        if (ch, cw, cc) != (h, w, c) {
            return Err(Error::Shape {
                expected: format!("conditioning frame {h}x{w}x{c}"),
                got: format!("{ch}x{cw}x{cc}"),
            });
        }
        Ok(())
    }

    /// Inference forward. Captures or consumes attention taps per `mode`.
    pub fn forward(
        &self,
        params: &DenoiserParams,
        x_t: &Array4<f64>,
        model_t: usize,
        cond: &Conditioning,
        embed_offset: usize,
        mode: TapMode,
    ) -> Result<ForwardOutput> {
        let (eps, _, tap) = self.run(params, x_t, model_t, cond, embed_offset, mode, false)?;
        Ok(ForwardOutput { eps, tap })
    }

    /// Training forward: plain attention, keeps every activation needed by
    /// [`Denoiser::backward`].
    pub fn forward_train(
        &self,
        params: &DenoiserParams,
        x_t: &Array4<f64>,
        model_t: usize,
        cond: &Conditioning,
        embed_offset: usize,
    ) -> Result<(Array4<f64>, Cache)> {
        let (eps, cache, _) = self.run(params, x_t, model_t, cond, embed_offset, TapMode::Plain, true)?;
        Ok((eps, cache.expect("cache requested")))
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        params: &DenoiserParams,
        x_t: &Array4<f64>,
        model_t: usize,
        cond: &Conditioning,
        embed_offset: usize,
        mode: TapMode,
        want_cache: bool,
    ) -> Result<(Array4<f64>, Option<Cache>, Option<AttentionTap>)> {
        self.check_theta(params)?;
        self.check_input(x_t, cond)?;
        if want_cache && matches!(mode, TapMode::Inject(_)) {
            return Err(Error::Injection("cannot train through injected attention".into()));
        }
        if let TapMode::Inject(tap) = &mode {
            self.check_tap(tap, x_t.dim().0, x_t.dim().1)?;
        }
        let th = params.theta.as_slice();
        let lay = &self.layout;
        let cfg = &self.cfg;
        let (n, r, _, c) = x_t.dim();

        // Stack the noisy views with the broadcast conditioning frame.
        let mut x_in = Array4::zeros((n, r, r, 2 * c));
        for vi in 0..n {
            for y in 0..r {
                for x in 0..r {
                    for ch in 0..c {
                        x_in[[vi, y, x, ch]] = x_t[[vi, y, x, ch]];
                        x_in[[vi, y, x, c + ch]] = cond.frame[[y, x, ch]] * 2.0 - 1.0;
                    }
                }
            }
        }

        let e_t = time_embedding(model_t, cfg.time_embed_dim);
        let mut e_az = Array2::zeros((n, cfg.azimuth_embed_dim));
        for vi in 0..n {
            let row = azimuth_embedding(vi, embed_offset, n, cfg.azimuth_embed_dim);
            e_az.row_mut(vi).assign(&row);
        }

        let (mut z0, cols_stem) =
            nn::conv_forward(&x_in, &lay.view2(th, "stem.w"), &lay.view1(th, "stem.b"), 1);
        let t_bias = e_t.dot(&lay.view2(th, "temb.w"));
        let az_bias = e_az.dot(&lay.view2(th, "aemb.w"));
        for vi in 0..n {
            let bias = &t_bias + &az_bias.row(vi);
            let mut view = z0.index_axis_mut(Axis(0), vi);
            view += &bias.view().insert_axis(Axis(0)).insert_axis(Axis(0));
        }
        let h0 = nn::silu(&z0);

        let (z1, cols_d1) =
            nn::conv_forward(&h0, &lay.view2(th, "down1.w"), &lay.view1(th, "down1.b"), 2);
        let h1 = nn::silu(&z1);
        let (z2, cols_d2) =
            nn::conv_forward(&h1, &lay.view2(th, "down2.w"), &lay.view1(th, "down2.b"), 2);
        let mut h2 = nn::silu(&z2);

        let r4 = r / 4;
        let tokens_per_view = r4 * r4;
        let m = n * tokens_per_view;
        let d = cfg.d_model;

        let mut block_caches = Vec::new();
        let mut tap_out: Option<AttentionTap> = if matches!(mode, TapMode::Capture) {
            Some(AttentionTap { entries: Vec::new(), n_views: n, tokens_per_view })
        } else {
            None
        };

        for bi in 0..cfg.blocks {
            let pfx = format!("block{bi}");
            let x_tokens = h2
                .view()
                .into_shape_with_order((m, d))
                .expect("token layout")
                .to_owned();
            let (xn, xhat, inv_std) = nn::layernorm_forward(
                &x_tokens,
                &lay.view1(th, &format!("{pfx}.attn.ln.gamma")),
                &lay.view1(th, &format!("{pfx}.attn.ln.beta")),
            );
            let mut qkv = xn.dot(&lay.view2(th, &format!("{pfx}.attn.qkv.w")));
            qkv += &lay.view1(th, &format!("{pfx}.attn.qkv.b")).insert_axis(Axis(0));
            let q = qkv.slice(ndarray::s![.., 0..d]).to_owned();
            let k = qkv.slice(ndarray::s![.., d..2 * d]).to_owned();
            let v = qkv.slice(ndarray::s![.., 2 * d..3 * d]).to_owned();

            if let Some(tap) = tap_out.as_mut() {
                tap.entries.push(TapEntry {
                    layer: format!("{pfx}.attn"),
                    k: k.clone(),
                    v: v.clone(),
                });
            }

            let injected = if let TapMode::Inject(tap) = &mode {
                tap.entry(&format!("{pfx}.attn"))
            } else {
                None
            };
            let (a, p) = match injected {
                Some(entry) => {
                    let k_full = ndarray::concatenate(Axis(0), &[entry.k.view(), k.view()])
                        .expect("key concat");
                    let v_full = ndarray::concatenate(Axis(0), &[entry.v.view(), v.view()])
                        .expect("value concat");
                    nn::attention_core(&q, &k_full, &v_full)
                }
                None => nn::attention_core(&q, &k, &v),
            };
            let mut y = a.dot(&lay.view2(th, &format!("{pfx}.attn.out.w")));
            y += &lay.view1(th, &format!("{pfx}.attn.out.b")).insert_axis(Axis(0));

            let y4 = y.into_shape_with_order((n, r4, r4, d)).expect("token layout");
            let h_mid = &h2 + &y4;

            let act = nn::silu(&h_mid);
            let (conv_out, cols_conv) = nn::conv_forward(
                &act,
                &lay.view2(th, &format!("{pfx}.conv.w")),
                &lay.view1(th, &format!("{pfx}.conv.b")),
                1,
            );
            let h_next = &h_mid + &conv_out;

            if want_cache {
                block_caches.push(BlockCache {
                    xhat,
                    inv_std,
                    q,
                    k,
                    v,
                    p,
                    a,
                    h_mid,
                    cols_conv,
                });
            }
            h2 = h_next;
        }

        let up1_in = nn::concat_channels(&nn::upsample2(&h2), &h1);
        let (zu1, cols_u1) =
            nn::conv_forward(&up1_in, &lay.view2(th, "up1.w"), &lay.view1(th, "up1.b"), 1);
        let u1 = nn::silu(&zu1);

        let up0_in = nn::concat_channels(&nn::upsample2(&u1), &h0);
        let (zu0, cols_u0) =
            nn::conv_forward(&up0_in, &lay.view2(th, "up0.w"), &lay.view1(th, "up0.b"), 1);
        let u0 = nn::silu(&zu0);

        let (eps, cols_head) =
            nn::conv_forward(&u0, &lay.view2(th, "head.w"), &lay.view1(th, "head.b"), 1);

        let cache = want_cache.then(|| Cache {
            x_in_dim: x_in.dim(),
            e_t,
            e_az,
            cols_stem,
            z0,
            cols_d1,
            z1,
            cols_d2,
            z2,
            blocks: block_caches,
            cols_u1,
            zu1,
            cols_u0,
            zu0,
            cols_head,
        });
        Ok((eps, cache, tap_out))
    }

    fn check_tap(&self, tap: &AttentionTap, n: usize, r: usize) -> Result<()> {
        let known = self.attention_layers();
        if tap.entries.is_empty() {
            return Err(Error::Injection("tap carries no layers".into()));
        }
        let tokens = (r / 4) * (r / 4);
        if tap.tokens_per_view != tokens || tap.n_views != n {
            return Err(Error::Injection(format!(
                "tap geometry {}x{} does not match orbit {}x{}",
                tap.n_views, tap.tokens_per_view, n, tokens
            )));
        }
        for entry in &tap.entries {
            if !known.iter().any(|l| l == &entry.layer) {
                return Err(Error::Injection(format!("unknown attention layer {}", entry.layer)));
            }
            let rows = tap.n_views * tap.tokens_per_view;
            if entry.k.dim() != (rows, self.cfg.d_model) || entry.v.dim() != (rows, self.cfg.d_model) {
                return Err(Error::Injection(format!(
                    "layer {} tap has shape {:?}/{:?}, expected ({rows}, {})",
                    entry.layer,
                    entry.k.dim(),
                    entry.v.dim(),
                    self.cfg.d_model
                )));
            }
        }
        Ok(())
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient at the network output.
    pub fn backward(&self, params: &DenoiserParams, cache: &Cache, d_eps: &Array4<f64>) -> Vec<f64> {
        let th = params.theta.as_slice();
        let lay = &self.layout;
        let cfg = &self.cfg;
        let mut grad = vec![0.0; lay.total];

        let (n, r, _, _) = cache.x_in_dim;
        let f = cfg.features;
        let d = cfg.d_model;
        let r2 = r / 2;
        let r4 = r / 4;
        let m = n * r4 * r4;

        // Head.
        let (d_u0, d_w, d_b) = nn::conv_backward(
            &cache.cols_head,
            &lay.view2(th, "head.w"),
            d_eps,
            cache.zu0.dim(),
            1,
        );
        lay.add2(&mut grad, "head.w", &d_w);
        lay.add1(&mut grad, "head.b", &d_b);

        // Decoder level 0.
        let d_zu0 = nn::silu_backward(&cache.zu0, &d_u0);
        let up0_in_dim = (n, r, r, 2 * f + f);
        let (d_up0_in, d_w, d_b) =
            nn::conv_backward(&cache.cols_u0, &lay.view2(th, "up0.w"), &d_zu0, up0_in_dim, 1);
        lay.add2(&mut grad, "up0.w", &d_w);
        lay.add1(&mut grad, "up0.b", &d_b);
        let (d_ups0, d_h0_skip) = nn::split_channels(&d_up0_in, 2 * f);
        let d_u1 = nn::upsample2_backward(&d_ups0);

        // Decoder level 1.
        let d_zu1 = nn::silu_backward(&cache.zu1, &d_u1);
        let up1_in_dim = (n, r2, r2, d + 2 * f);
        let (d_up1_in, d_w, d_b) =
            nn::conv_backward(&cache.cols_u1, &lay.view2(th, "up1.w"), &d_zu1, up1_in_dim, 1);
        lay.add2(&mut grad, "up1.w", &d_w);
        lay.add1(&mut grad, "up1.b", &d_b);
        let (d_ups1, d_h1_skip) = nn::split_channels(&d_up1_in, d);
        let mut d_h2 = nn::upsample2_backward(&d_ups1);

        // Blocks, reversed.
        for bi in (0..cfg.blocks).rev() {
            let pfx = format!("block{bi}");
            let bc = &cache.blocks[bi];

            // h_next = h_mid + conv(silu(h_mid))
            let act = nn::silu(&bc.h_mid);
            let (d_act, d_w, d_b) = nn::conv_backward(
                &bc.cols_conv,
                &lay.view2(th, &format!("{pfx}.conv.w")),
                &d_h2,
                act.dim(),
                1,
            );
            lay.add2(&mut grad, &format!("{pfx}.conv.w"), &d_w);
            lay.add1(&mut grad, &format!("{pfx}.conv.b"), &d_b);
            let d_h_mid = &d_h2 + &nn::silu_backward(&bc.h_mid, &d_act);

            // h_mid = h_in + reshape(y), y = a . Wout + bout
            let d_y = d_h_mid
                .view()
                .into_shape_with_order((m, d))
                .expect("token layout")
                .to_owned();
            let w_out = lay.view2(th, &format!("{pfx}.attn.out.w"));
            let d_a = d_y.dot(&w_out.t());
            lay.add2(&mut grad, &format!("{pfx}.attn.out.w"), &bc.a.t().dot(&d_y));
            lay.add1(&mut grad, &format!("{pfx}.attn.out.b"), &d_y.sum_axis(Axis(0)));

            // a = p . v, logits = q . k^T / sqrt(d)
            let d_p = d_a.dot(&bc.v.t());
            let d_v = bc.p.t().dot(&d_a);
            let d_logits = nn::softmax_backward(&bc.p, &d_p);
            let scale = 1.0 / (d as f64).sqrt();
            let d_q = d_logits.dot(&bc.k) * scale;
            let d_k = d_logits.t().dot(&bc.q) * scale;

            let mut d_qkv = Array2::zeros((m, 3 * d));
            d_qkv.slice_mut(ndarray::s![.., 0..d]).assign(&d_q);
            d_qkv.slice_mut(ndarray::s![.., d..2 * d]).assign(&d_k);
            d_qkv.slice_mut(ndarray::s![.., 2 * d..3 * d]).assign(&d_v);

            let gamma = lay.view1(th, &format!("{pfx}.attn.ln.gamma"));
            let beta = lay.view1(th, &format!("{pfx}.attn.ln.beta"));
            let mut xn = bc.xhat.clone();
            xn *= &gamma.insert_axis(Axis(0));
            xn += &beta.insert_axis(Axis(0));

            let w_qkv = lay.view2(th, &format!("{pfx}.attn.qkv.w"));
            let d_xn = d_qkv.dot(&w_qkv.t());
            lay.add2(&mut grad, &format!("{pfx}.attn.qkv.w"), &xn.t().dot(&d_qkv));
            lay.add1(&mut grad, &format!("{pfx}.attn.qkv.b"), &d_qkv.sum_axis(Axis(0)));

            let (d_x_ln, d_gamma, d_beta) =
                nn::layernorm_backward(&bc.xhat, &bc.inv_std, &gamma, &d_xn);
            lay.add1(&mut grad, &format!("{pfx}.attn.ln.gamma"), &d_gamma);
            lay.add1(&mut grad, &format!("{pfx}.attn.ln.beta"), &d_beta);

            let d_x_tokens = &d_x_ln
                + &d_h_mid
                    .view()
                    .into_shape_with_order((m, d))
                    .expect("token layout");
            d_h2 = d_x_tokens
                .into_shape_with_order((n, r4, r4, d))
                .expect("token layout");
        }

        // Encoder, reversed.
        let d_z2 = nn::silu_backward(&cache.z2, &d_h2);
        let h1_dim = (n, r2, r2, 2 * f);
        let (d_h1_main, d_w, d_b) =
            nn::conv_backward(&cache.cols_d2, &lay.view2(th, "down2.w"), &d_z2, h1_dim, 2);
        lay.add2(&mut grad, "down2.w", &d_w);
        lay.add1(&mut grad, "down2.b", &d_b);
        let d_h1 = &d_h1_main + &d_h1_skip;

        let d_z1 = nn::silu_backward(&cache.z1, &d_h1);
        let h0_dim = (n, r, r, f);
        let (d_h0_main, d_w, d_b) =
            nn::conv_backward(&cache.cols_d1, &lay.view2(th, "down1.w"), &d_z1, h0_dim, 2);
        lay.add2(&mut grad, "down1.w", &d_w);
        lay.add1(&mut grad, "down1.b", &d_b);
        let d_h0 = &d_h0_main + &d_h0_skip;

        let d_z0 = nn::silu_backward(&cache.z0, &d_h0);

        // Embedding projections: the bias is shared over all pixels of a view
        // (azimuth) or all pixels of all views (time).
        let per_view: Vec<Array1<f64>> = (0..n)
            .map(|vi| {
                d_z0.index_axis(Axis(0), vi)
                    .to_owned()
                    .into_shape_with_order((r * r, f))
                    .expect("bias reduce")
                    .sum_axis(Axis(0))
            })
            .collect();
        let mut total = Array1::<f64>::zeros(f);
        for pv in &per_view {
            total += pv;
        }
        let d_temb = outer(&cache.e_t, &total);
        lay.add2(&mut grad, "temb.w", &d_temb);
        let mut d_aemb = Array2::zeros((cfg.azimuth_embed_dim, f));
        for (vi, pv) in per_view.iter().enumerate() {
            d_aemb += &outer(&cache.e_az.row(vi).to_owned(), pv);
        }
        lay.add2(&mut grad, "aemb.w", &d_aemb);

        let (_, d_w, d_b) = nn::conv_backward(
            &cache.cols_stem,
            &lay.view2(th, "stem.w"),
            &d_z0,
            cache.x_in_dim,
            1,
        );
        lay.add2(&mut grad, "stem.w", &d_w);
        lay.add1(&mut grad, "stem.b", &d_b);

        grad
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &av) in a.iter().enumerate() {
        for (j, &bv) in b.iter().enumerate() {
            out[[i, j]] = av * bv;
        }
    }
    out
}

/// Sinusoids over the integer timestep at geometrically spaced frequencies.
pub fn time_embedding(model_t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let t = model_t as f64;
    let mut e = Array1::zeros(dim);
    for k in 0..half {
        let omega = (10000f64).powf(-(k as f64) / half as f64);
        e[2 * k] = (t * omega).sin();
        e[2 * k + 1] = (t * omega).cos();
    }
    e
}

/// Sinusoids of the view azimuth at integer frequencies, so the embedding is
/// exactly periodic in the orbit. `offset` rotates which slot counts as the
/// identity view, which lets one network serve relabeled orbits.
pub fn azimuth_embedding(view: usize, offset: usize, n_views: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let theta = 2.0 * PI * (((view + offset) % n_views) as f64) / n_views as f64;
    let mut e = Array1::zeros(dim);
    for k in 0..half {
        let freq = (k + 1) as f64;
        e[2 * k] = (freq * theta).sin();
        e[2 * k + 1] = (freq * theta).cos();
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 1,
            features: 4,
            d_model: 6,
            blocks: 2,
            time_embed_dim: 4,
            azimuth_embed_dim: 4,
        }
    }

    fn rand_input(rng: &mut ChaCha8Rng, n: usize, r: usize, c: usize) -> (Array4<f64>, Conditioning) {
        let x = Array4::from_shape_fn((n, r, r, c), |_| rng.random_range(-1.0..1.0));
        let cond =
            Conditioning::new(Array3::from_shape_fn((r, r, c), |_| rng.random_range(0.0..1.0)))
                .unwrap();
        (x, cond)
    }

    #[test]
    fn layout_spans_are_contiguous_and_named() {
        let net = Denoiser::new(tiny_config()).unwrap();
        let lay = net.layout();
        let mut expected_offset = 0;
        for entry in &lay.entries {
            assert_eq!(entry.offset, expected_offset, "{}", entry.name);
            expected_offset += entry.shape.iter().product::<usize>();
        }
        assert_eq!(expected_offset, lay.total);
        assert_eq!(net.param_count(), lay.total);
        assert!(lay.entry("block1.attn.qkv.w").shape == vec![6, 18]);
    }

    #[test]
    fn zero_head_init_predicts_zero_noise() {
        let net = Denoiser::new(tiny_config()).unwrap();
        let params = net.init_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, cond) = rand_input(&mut rng, 4, 8, 1);
        let out = net.forward(&params, &x, 3, &cond, 0, TapMode::Plain).unwrap();
        assert!(out.eps.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Denoiser::new(tiny_config()).unwrap();
        let mut params = net.init_params(7);
        // Perturb the head so the output is nonzero.
        let off = net.layout().entry("head.w").offset;
        params.theta[off] = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, cond) = rand_input(&mut rng, 4, 8, 1);
        let a = net.forward(&params, &x, 5, &cond, 0, TapMode::Plain).unwrap();
        let b = net.forward(&params, &x, 5, &cond, 0, TapMode::Plain).unwrap();
        assert_eq!(a.eps, b.eps);
    }

    #[test]
    fn capture_returns_all_attention_layers() {
        let net = Denoiser::new(tiny_config()).unwrap();
        let params = net.init_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, cond) = rand_input(&mut rng, 4, 8, 1);
        let out = net.forward(&params, &x, 3, &cond, 0, TapMode::Capture).unwrap();
        let tap = out.tap.unwrap();
        assert_eq!(tap.n_views, 4);
        assert_eq!(tap.tokens_per_view, 4);
        let layers: Vec<_> = tap.entries.iter().map(|e| e.layer.clone()).collect();
        assert_eq!(layers, vec!["block0.attn".to_string(), "block1.attn".to_string()]);
        for entry in &tap.entries {
            assert_eq!(entry.k.dim(), (16, 6));
            assert_eq!(entry.v.dim(), (16, 6));
        }
    }

    #[test]
    fn injecting_a_self_capture_duplicates_keys_and_preserves_output() {
        // Injecting the pass's own keys and values doubles every key/value
        // pair, which leaves softmax attention unchanged. The whole network
        // output must therefore match the plain forward.
        let net = Denoiser::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = net.init_params(7);
        for w in params.theta.iter_mut() {
            if *w == 0.0 {
                *w = rng.random_range(-0.05..0.05);
            }
        }
        let (x, cond) = rand_input(&mut rng, 4, 8, 1);
        let plain = net.forward(&params, &x, 9, &cond, 0, TapMode::Plain).unwrap();
        let cap = net.forward(&params, &x, 9, &cond, 0, TapMode::Capture).unwrap();
        let tap = cap.tap.unwrap();
        assert_eq!(plain.eps, cap.eps);
        let inj = net.forward(&params, &x, 9, &cond, 0, TapMode::Inject(&tap)).unwrap();
        let max_dev = (&plain.eps - &inj.eps)
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-10, "max deviation {max_dev}");
    }

    #[test]
    fn injection_rejects_unknown_layer_and_bad_shape() {
        let net = Denoiser::new(tiny_config()).unwrap();
        let params = net.init_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, cond) = rand_input(&mut rng, 4, 8, 1);
        let tap = AttentionTap {
            entries: vec![TapEntry {
                layer: "block9.attn".into(),
                k: Array2::zeros((16, 6)),
                v: Array2::zeros((16, 6)),
            }],
            n_views: 4,
            tokens_per_view: 4,
        };
        let err = net.forward(&params, &x, 3, &cond, 0, TapMode::Inject(&tap)).unwrap_err();
        assert!(matches!(err, Error::Injection(_)));

        let tap = AttentionTap {
            entries: vec![TapEntry {
                layer: "block0.attn".into(),
                k: Array2::zeros((3, 6)),
                v: Array2::zeros((3, 6)),
            }],
            n_views: 4,
            tokens_per_view: 4,
        };
        let err = net.forward(&params, &x, 3, &cond, 0, TapMode::Inject(&tap)).unwrap_err();
        assert!(matches!(err, Error::Injection(_)));
    }

    #[test]
    fn relabeling_views_with_matching_offset_permutes_the_output() {
        // Rolling the input views by s while advancing the embedding offset
        // by s presents the network with an identical problem up to row
        // order, so the outputs must be the same rolled rows.
        let net = Denoiser::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = net.init_params(11);
        for w in params.theta.iter_mut() {
            if *w == 0.0 {
                *w = rng.random_range(-0.05..0.05);
            }
        }
        let n = 4;
        let (x, cond) = rand_input(&mut rng, n, 8, 1);
        let base = net.forward(&params, &x, 6, &cond, 0, TapMode::Plain).unwrap();
        let s = 3;
        let mut rolled = x.clone();
        for vi in 0..n {
            rolled
                .index_axis_mut(Axis(0), vi)
                .assign(&x.index_axis(Axis(0), (vi + s) % n));
        }
        let out = net.forward(&params, &rolled, 6, &cond, s, TapMode::Plain).unwrap();
        for vi in 0..n {
            let a = base.eps.index_axis(Axis(0), (vi + s) % n);
            let b = out.eps.index_axis(Axis(0), vi);
            let max_dev = (&a.to_owned() - &b)
                .mapv(f64::abs)
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            assert!(max_dev < 1e-10, "view {vi}: {max_dev}");
        }
    }

    #[test]
    fn azimuth_embedding_is_periodic_and_offset_consistent() {
        let e1 = azimuth_embedding(2, 3, 8, 8);
        let e2 = azimuth_embedding(5, 0, 8, 8);
        assert!(e1.iter().zip(e2.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let e3 = azimuth_embedding(2 + 8, 3, 8, 8);
        assert!(e1.iter().zip(e3.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn finite_difference_gradient_check() {
        // Central differences on a sample of parameters against the analytic
        // backward pass, through the full network and the mean-squared loss.
        let net = Denoiser::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = net.init_params(13);
        for w in params.theta.iter_mut() {
            if *w == 0.0 {
                *w = rng.random_range(-0.1..0.1);
            }
        }
        let (x, cond) = rand_input(&mut rng, 4, 8, 1);
        let target = Array4::from_shape_fn(x.dim(), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &DenoiserParams| -> f64 {
            let out = net.forward(p, &x, 4, &cond, 1, TapMode::Plain).unwrap();
            (&out.eps - &target).mapv(|v| v * v).mean().unwrap()
        };
        let (eps_hat, cache) = net.forward_train(&params, &x, 4, &cond, 1).unwrap();
        let numel = eps_hat.len() as f64;
        let d_eps = (&eps_hat - &target).mapv(|v| 2.0 * v / numel);
        let grad = net.backward(&params, &cache, &d_eps);

        // A deterministic spread of parameter indices, plus a few from every
        // named tensor so no layer goes unchecked.
        let mut picks: Vec<usize> = Vec::new();
        for entry in &net.layout().entries {
            let len: usize = entry.shape.iter().product();
            picks.push(entry.offset);
            picks.push(entry.offset + len / 2);
            picks.push(entry.offset + len - 1);
        }
        let total = net.param_count();
        for i in 0..40 {
            picks.push((i * 997) % total);
        }
        picks.sort_unstable();
        picks.dedup();

        let h = 1e-5;
        let mut worst = 0.0f64;
        for &idx in &picks {
            let saved = params.theta[idx];
            params.theta[idx] = saved + h;
            let up = loss(&params);
            params.theta[idx] = saved - h;
            let down = loss(&params);
            params.theta[idx] = saved;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            let rel = (numeric - analytic).abs() / denom;
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "param {idx}: numeric {numeric:.3e} analytic {analytic:.3e} rel {rel:.3e}"
            );
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let net = Denoiser::new(tiny_config()).unwrap();
        let params = net.init_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, cond) = rand_input(&mut rng, 4, 8, 1);
        // Wrong channel count.
        let bad = Array4::zeros((4, 8, 8, 3));
        assert!(net.forward(&params, &bad, 3, &cond, 0, TapMode::Plain).is_err());
        // Resolution not divisible by 4.
        let bad = Array4::zeros((4, 6, 6, 1));
        assert!(net.forward(&params, &bad, 3, &cond, 0, TapMode::Plain).is_err());
        // Conditioning mismatch.
        let bad_cond = Conditioning::new(Array3::zeros((4, 4, 1))).unwrap();
        assert!(net.forward(&params, &x, 3, &bad_cond, 0, TapMode::Plain).is_err());
        // Wrong parameter count.
        let bad_params = DenoiserParams { theta: vec![0.0; 3] };
        assert!(net.forward(&bad_params, &x, 3, &cond, 0, TapMode::Plain).is_err());
    }
}
