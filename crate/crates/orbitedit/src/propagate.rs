//! Propagating an anchored edit around the orbit with two coupled sampling
//! streams.
//!
//! The front stream generates the orbit in its natural labeling, conditioned
//! on the edited identity view. The anchor stream generates the same orbit
//! relabeled so the best-visibility view sits at slot zero, conditioned on
//! the edited frame of that view. After every reverse step the two states are
//! aligned and blended with per-view weights that favor each stream on its
//! own side of the orbit, optionally sharpened from the dominant stream late
//! in the schedule, and the streams are resynchronized to the blend.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AttentionTap, Conditioning, Denoiser, DenoiserParams, Schedule};
use crate::error::{Error, Result};
use crate::sampler::{
    init_state, new_tap_slot, sample_orbit, state_to_sequence, step_with_eps, ModelPredictor,
    NoiseMode, NoisePredictor, SamplerHook, SamplerState, TapSlot,
};
use crate::sequence::ViewSequence;
use crate::util::derive_seed;

pub use crate::sequence::{visibility_table, VISIBILITY_THRESHOLD};

/// Cyclic distance between view indices on an orbit of `n` views.
pub fn cyclic_distance(i: usize, p: usize, n: usize) -> usize {
    let a = (i + n - p) % n;
    let b = (p + n - i) % n;
    a.min(b)
}

/// Rotates the view axis: `out[i] = in[(i + n - p) % n]`, so the frame that
/// was at slot `p` arrives at slot zero.
pub fn circular_shift(frames: &Array4<f64>, p: usize) -> Result<Array4<f64>> {
    let n = frames.dim().0;
    if p >= n {
        return Err(Error::ShiftRange { p, n });
    }
    let mut out = frames.clone();
    for i in 0..n {
        out.index_axis_mut(Axis(0), i)
            .assign(&frames.index_axis(Axis(0), (i + n - p) % n));
    }
    Ok(out)
}

/// Same rotation applied to a token matrix whose rows are grouped into
/// `n_views` equal blocks.
pub fn circular_shift_blocks(mat: &Array2<f64>, n_views: usize, p: usize) -> Result<Array2<f64>> {
    if p >= n_views {
        return Err(Error::ShiftRange { p, n: n_views });
    }
    let rows = mat.nrows();
    if n_views == 0 || rows % n_views != 0 {
        return Err(Error::Shape {
            expected: format!("row count divisible by {n_views}"),
            got: format!("{rows}"),
        });
    }
    let block = rows / n_views;
    let mut out = mat.clone();
    for i in 0..n_views {
        let src = (i + n_views - p) % n_views;
        out.slice_mut(ndarray::s![i * block..(i + 1) * block, ..])
            .assign(&mat.slice(ndarray::s![src * block..(src + 1) * block, ..]));
    }
    Ok(out)
}

/// Shape of the per-view blend weight as a function of cyclic distance from
/// the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Falloff {
    Linear,
    Cosine,
}

/// Per-view anchor weights: 1 at the anchor view, 0 at the identity view,
/// decaying with cyclic distance from the anchor. `p = 0` would make both
/// endpoints the same view and is rejected.
pub fn make_alpha(n_views: usize, p: usize, falloff: Falloff) -> Result<Array1<f64>> {
    if p >= n_views {
        return Err(Error::ViewIndex { index: p, n_views });
    }
    if p == 0 {
        return Err(Error::DegenerateAnchor);
    }
    let d0 = cyclic_distance(0, p, n_views) as f64;
    let mut alpha = Array1::zeros(n_views);
    for i in 0..n_views {
        let d = cyclic_distance(i, p, n_views) as f64;
        alpha[i] = match falloff {
            Falloff::Linear => (1.0 - d / d0).max(0.0),
            Falloff::Cosine => {
                let u = (d / d0).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * u).cos())
            }
        };
    }
    Ok(alpha)
}

/// Blends the front state with the aligned anchor state per view:
/// `fused_i = (1 - a_i) front_i + a_i anchor_i`. Both products are formed
/// explicitly so weights of exactly 0 or 1 reproduce the input bitwise.
pub fn spf_fuse(
    front: &Array4<f64>,
    anchor_aligned: &Array4<f64>,
    alpha: &Array1<f64>,
) -> Result<Array4<f64>> {
    if front.dim() != anchor_aligned.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", front.dim()),
            got: format!("{:?}", anchor_aligned.dim()),
        });
    }
    let n = front.dim().0;
    if alpha.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} weights"),
            got: format!("{}", alpha.len()),
        });
    }
    let mut fused = front.clone();
    for i in 0..n {
        let a = alpha[i];
        let w = 1.0 - a;
        let mut dst = fused.index_axis_mut(Axis(0), i);
        let src = anchor_aligned.index_axis(Axis(0), i);
        dst.zip_mut_with(&src, |f, &an| {
            *f = w * *f + a * an;
        });
    }
    Ok(fused)
}

/// Separable Gaussian blur per view and channel, replicating edge pixels.
pub fn gaussian_blur(x: &Array4<f64>, sigma: f64) -> Array4<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut weights = Vec::with_capacity((2 * radius + 1) as usize);
    for k in -radius..=radius {
        weights.push((-((k * k) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= norm;
    }

    let (n, h, wdt, c) = x.dim();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;

    let mut rows = Array4::zeros(x.dim());
    for vi in 0..n {
        for y in 0..h {
            for xx in 0..wdt {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (wi, k) in (-radius..=radius).enumerate() {
                        acc += weights[wi] * x[[vi, y, clamp(xx as isize + k, wdt), ch]];
                    }
                    rows[[vi, y, xx, ch]] = acc;
                }
            }
        }
    }
    let mut out = Array4::zeros(x.dim());
    for vi in 0..n {
        for y in 0..h {
            for xx in 0..wdt {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (wi, k) in (-radius..=radius).enumerate() {
                        acc += weights[wi] * rows[[vi, clamp(y as isize + k, h), xx, ch]];
                    }
                    out[[vi, y, xx, ch]] = acc;
                }
            }
        }
    }
    out
}

/// Late-stage sharpening: keep the blend's low frequencies but take the high
/// frequencies from whichever stream dominates each view, boosted by
/// `lambda`. With `lambda = 0` and a blend identical to the dominant stream
/// this returns the dominant stream bitwise.
pub fn refine_detail(
    fused: &Array4<f64>,
    front: &Array4<f64>,
    anchor_aligned: &Array4<f64>,
    alpha: &Array1<f64>,
    lambda: f64,
) -> Result<Array4<f64>> {
    if fused.dim() != front.dim() || fused.dim() != anchor_aligned.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", fused.dim()),
            got: "mismatched stream shapes".into(),
        });
    }
    let n = fused.dim().0;
    let mut dominant = front.clone();
    for i in 0..n {
        if alpha[i] > 0.5 {
            dominant
                .index_axis_mut(Axis(0), i)
                .assign(&anchor_aligned.index_axis(Axis(0), i));
        }
    }
    let blur_fused = gaussian_blur(fused, 1.0);
    let blur_dom = gaussian_blur(&dominant, 1.0);
    let mut out = dominant.clone();
    ndarray::Zip::from(&mut out)
        .and(&blur_fused)
        .and(&blur_dom)
        .and(&dominant)
        .for_each(|o, &bf, &bd, &d| {
            *o = d + (bf - bd) + lambda * (d - bd);
        });
    Ok(out)
}

/// Picks the view where the edit is most visible (earliest index on ties).
/// Returns the index and the per-view visibility counts.
pub fn select_anchor(original: &ViewSequence, edited: &ViewSequence) -> Result<(usize, Vec<usize>)> {
    let counts = visibility_table(original, edited)?;
    let best = counts
        .iter()
        .enumerate()
        .max_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if counts[best] == 0 {
        return Err(Error::NoVisibleChange { per_view: counts });
    }
    Ok((best, counts))
}

/// Relabels a captured tap from front labeling into anchor labeling by
/// rotating its per-view row blocks.
pub fn cva_align(tap: &AttentionTap, shift: usize) -> Result<AttentionTap> {
    let mut entries = Vec::with_capacity(tap.entries.len());
    for entry in &tap.entries {
        entries.push(crate::diffcore::TapEntry {
            layer: entry.layer.clone(),
            k: circular_shift_blocks(&entry.k, tap.n_views, shift)?,
            v: circular_shift_blocks(&entry.v, tap.n_views, shift)?,
        });
    }
    Ok(AttentionTap { entries, n_views: tap.n_views, tokens_per_view: tap.tokens_per_view })
}

/// When the streams fold their per-step blend back into themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResyncMode {
    /// Both streams restart every step from the blended state.
    Always,
    /// Streams evolve independently; only the terminal states are blended.
    Never,
}

impl std::str::FromStr for ResyncMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<ResyncMode> {
        match s {
            "always" => Ok(ResyncMode::Always),
            "never" => Ok(ResyncMode::Never),
            other => Err(Error::Config(format!("unknown resync mode {other:?}"))),
        }
    }
}

impl std::str::FromStr for Falloff {
    type Err = Error;

    fn from_str(s: &str) -> Result<Falloff> {
        match s {
            "linear" => Ok(Falloff::Linear),
            "cosine" => Ok(Falloff::Cosine),
            other => Err(Error::Config(format!("unknown falloff {other:?}"))),
        }
    }
}

/// Blend shaping shared by the fusion and refinement stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionSchedule {
    pub falloff: Falloff,
    /// Refinement applies below this fraction of the schedule; 0 disables.
    pub refine_from: f64,
    pub refine_lambda: f64,
}

impl Default for FusionSchedule {
    fn default() -> Self {
        Self { falloff: Falloff::Linear, refine_from: 0.2, refine_lambda: 0.5 }
    }
}

impl FusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.refine_from) {
            return Err(Error::Config(format!("refine_from must be in [0, 1], got {}", self.refine_from)));
        }
        if !(self.refine_lambda.is_finite() && self.refine_lambda >= 0.0) {
            return Err(Error::Config(format!("bad refine_lambda {}", self.refine_lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualStreamConfig {
    /// Anchor view index in front labeling; must be nonzero.
    pub anchor: usize,
    /// Reverse-diffusion steps after respacing.
    pub steps: usize,
    pub seed: u64,
    pub noise: NoiseMode,
    pub fusion: FusionSchedule,
    /// Distance-shaped blend weights; false blends both streams equally.
    pub progressive_weights: bool,
    /// Feed the front stream's attention keys and values to the anchor.
    pub inject_attention: bool,
    /// Restrict injection to these layers; empty means all.
    pub cva_layers: Vec<String>,
    pub resync: ResyncMode,
}

impl DualStreamConfig {
    pub fn new(anchor: usize, seed: u64) -> Self {
        Self {
            anchor,
            steps: 50,
            seed,
            noise: NoiseMode::Ancestral,
            fusion: FusionSchedule::default(),
            progressive_weights: true,
            inject_attention: true,
            cva_layers: Vec::new(),
            resync: ResyncMode::Always,
        }
    }
}

#[derive(Debug)]
pub struct DualStreamOutcome {
    pub sequence: ViewSequence,
    pub state: Array4<f64>,
    pub alpha: Array1<f64>,
    pub anchor: usize,
}

struct DualStreamHook<'a> {
    schedule: &'a Schedule,
    anchor_state: SamplerState,
    anchor_pred: ModelPredictor<'a>,
    noise: NoiseMode,
    p: usize,
    shift_in: usize,
    alpha: Array1<f64>,
    refine_from: f64,
    refine_lambda: f64,
    resync: ResyncMode,
    capture_slot: Option<TapSlot>,
    inject_slot: Option<TapSlot>,
    cva_layers: Vec<String>,
    t_max: usize,
    fused: Option<Array4<f64>>,
    front_rng_before: Option<ChaCha8Rng>,
}

impl SamplerHook for DualStreamHook<'_> {
    fn before_step(&mut self, front: &mut SamplerState, t: usize) -> Result<()> {
        // Remember the front's noise source so the anchor can reuse the very
        // draw the front is about to take.
        self.front_rng_before = if self.noise == NoiseMode::Ancestral && t > 1 {
            Some(front.rng.clone())
        } else {
            None
        };
        Ok(())
    }

    fn after_step(&mut self, front: &mut SamplerState, _t: usize) -> Result<()> {
        // Hand the front's freshly captured keys and values to the anchor,
        // relabeled into anchor slot order.
        if let (Some(cap), Some(inj)) = (&self.capture_slot, &self.inject_slot) {
            if let Some(tap) = cap.borrow_mut().take() {
                let mut aligned = cva_align(&tap, self.shift_in)?;
                aligned.retain_layers(&self.cva_layers);
                *inj.borrow_mut() = Some(aligned);
            }
        }

        // The anchor stream is the same latent process under a relabeling, so
        // it takes no draws of its own: its posterior noise is the front's
        // draw, relabeled. Without this, averaging the two streams would
        // quietly lower the sampling temperature.
        let t_anchor = self.anchor_state.t;
        let eps = self
            .anchor_pred
            .predict(&self.anchor_state.x, self.schedule.model_t(t_anchor))?;
        step_with_eps(&mut self.anchor_state, self.schedule, &eps, NoiseMode::MeanOnly)?;
        if let Some(mut rng) = self.front_rng_before.take() {
            let dim = self.anchor_state.x.dim();
            let count = self.anchor_state.x.len();
            let draws: Vec<f64> = (0..count).map(|_| rng.sample(StandardNormal)).collect();
            let xi_front = Array4::from_shape_vec(dim, draws)
                .expect("draw count matches the state shape");
            let xi_anchor = circular_shift(&xi_front, self.shift_in)?;
            let sigma = self.schedule.posterior_sigma(t_anchor);
            self.anchor_state.x.zip_mut_with(&xi_anchor, |x, &n| *x += sigma * n);
        }

        let anchor_aligned = circular_shift(&self.anchor_state.x, self.p)?;
        let mut fused = spf_fuse(&front.x, &anchor_aligned, &self.alpha)?;

        // In the late window the fused high band is routed from the per-view
        // dominant stream instead of averaged, which keeps texture from
        // washing out. The detail gain applies once, on the terminal state;
        // amplifying inside the loop would compound through the resync.
        let t_after = front.t;
        if self.refine_from > 0.0 && (t_after as f64) < self.refine_from * self.t_max as f64 {
            fused = refine_detail(&fused, &front.x, &anchor_aligned, &self.alpha, self.refine_lambda)?;
        }

        if self.resync == ResyncMode::Always {
            front.x = fused.clone();
            self.anchor_state.x = circular_shift(&fused, self.shift_in)?;
        }
        self.fused = Some(fused);
        Ok(())
    }
}

/// Runs one stream without any coupling: plain conditioned sampling of the
/// whole orbit. Uses the same initial noise a dual-stream run with this seed
/// gives its front stream.
pub fn run_single_stream(
    net: &Denoiser,
    params: &DenoiserParams,
    native: &Schedule,
    cond: Array3<f64>,
    n_views: usize,
    steps: usize,
    seed: u64,
    noise: NoiseMode,
) -> Result<(ViewSequence, Array4<f64>)> {
    let schedule = native.respaced(steps)?;
    let (r, _, c) = cond.dim();
    let state = init_state((n_views, r, r, c), &schedule, derive_seed(seed, "front"));
    let mut pred = ModelPredictor::new(net, params, Conditioning::new(cond)?, 0);
    let x = sample_orbit(state, &schedule, &mut pred, noise, &mut [])?;
    Ok((state_to_sequence(&x)?, x))
}

/// The full coupled run. `front_cond` is the edited identity view,
/// `anchor_cond` the edited anchor view.
pub fn run_dual_stream(
    net: &Denoiser,
    params: &DenoiserParams,
    native: &Schedule,
    front_cond: Array3<f64>,
    anchor_cond: Array3<f64>,
    n_views: usize,
    cfg: &DualStreamConfig,
) -> Result<DualStreamOutcome> {
    if cfg.anchor >= n_views {
        return Err(Error::ViewIndex { index: cfg.anchor, n_views });
    }
    if cfg.anchor == 0 {
        return Err(Error::DegenerateAnchor);
    }
    cfg.fusion.validate()?;
    if front_cond.dim() != anchor_cond.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", front_cond.dim()),
            got: format!("{:?}", anchor_cond.dim()),
        });
    }
    let known = net.attention_layers();
    for layer in &cfg.cva_layers {
        if !known.iter().any(|l| l == layer) {
            return Err(Error::Config(format!("unknown attention layer {layer}")));
        }
    }

    let p = cfg.anchor;
    let shift_in = (n_views - p) % n_views;
    let schedule = native.respaced(cfg.steps)?;
    let (r, _, c) = front_cond.dim();

    let alpha_full = make_alpha(n_views, p, cfg.fusion.falloff)?;
    let alpha = if cfg.progressive_weights {
        alpha_full
    } else {
        Array1::from_elem(n_views, 0.5)
    };

    let front_state = init_state((n_views, r, r, c), &schedule, derive_seed(cfg.seed, "front"));
    let anchor_state = SamplerState {
        x: circular_shift(&front_state.x, shift_in)?,
        t: schedule.t_max(),
        rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "anchor")),
    };

    let (capture_slot, inject_slot) = if cfg.inject_attention {
        (Some(new_tap_slot()), Some(new_tap_slot()))
    } else {
        (None, None)
    };

    let mut front_pred = ModelPredictor::new(net, params, Conditioning::new(front_cond)?, 0);
    if let Some(slot) = &capture_slot {
        front_pred = front_pred.capture_to(slot.clone());
    }
    let mut anchor_pred = ModelPredictor::new(net, params, Conditioning::new(anchor_cond)?, p);
    if let Some(slot) = &inject_slot {
        anchor_pred = anchor_pred.inject_from(slot.clone());
    }

    let mut hook = DualStreamHook {
        schedule: &schedule,
        anchor_state,
        anchor_pred,
        noise: cfg.noise,
        p,
        shift_in,
        alpha: alpha.clone(),
        refine_from: cfg.fusion.refine_from,
        refine_lambda: cfg.fusion.refine_lambda,
        resync: cfg.resync,
        capture_slot,
        inject_slot,
        cva_layers: cfg.cva_layers.clone(),
        t_max: schedule.t_max(),
        fused: None,
        front_rng_before: None,
    };

    let front_final = sample_orbit(front_state, &schedule, &mut front_pred, cfg.noise, &mut [&mut hook])?;
    let state = hook.fused.take().unwrap_or(front_final);
    Ok(DualStreamOutcome {
        sequence: state_to_sequence(&state)?,
        alpha,
        anchor: p,
        state,
    })
}
