//! Image metrics and the evaluation harness that scores edit propagation
//! against rendered ground truth.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Denoiser, DenoiserParams, Schedule};
use crate::error::{Error, Result};
use crate::propagate::{
    cyclic_distance, run_dual_stream, run_single_stream, select_anchor, DualStreamConfig,
    FusionSchedule, ResyncMode,
};
use crate::sampler::NoiseMode;
use crate::scenegen::{
    apply_edit, render_orbit, sample_random_scene, sample_visible_back_insert_edit, Difficulty,
    EditSpec, OrbitParams, SceneSpec,
};
use crate::sequence::ViewSequence;
use crate::util::derive_seed_index;

/// Serializes decibel values so lossless matches keep a readable marker
/// instead of collapsing to null.
pub mod db_serde {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    struct DbVisitor;

    impl Visitor<'_> for DbVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number or \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("bad decibel value {other:?}"))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(DbVisitor)
    }
}

fn check_same_shape(a: &ViewSequence, b: &ViewSequence) -> Result<()> {
    if a.frames().dim() != b.frames().dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", a.frames().dim()),
            got: format!("{:?}", b.frames().dim()),
        });
    }
    Ok(())
}

fn mse_slice(a: &ViewSequence, b: &ViewSequence, view: Option<usize>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (n, h, w, c) = a.frames().dim();
    let views: Vec<usize> = match view {
        Some(v) => {
            if v >= n {
                return Err(Error::ViewIndex { index: v, n_views: n });
            }
            vec![v]
        }
        None => (0..n).collect(),
    };
    let mut acc = 0.0;
    for &vi in &views {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let d = a.frames()[[vi, y, x, ch]] - b.frames()[[vi, y, x, ch]];
                    acc += d * d;
                }
            }
        }
    }
    Ok(acc / (views.len() * h * w * c) as f64)
}

/// Peak signal-to-noise ratio in decibels over the whole orbit, for values
/// in the unit range. Identical inputs give positive infinity.
pub fn psnr(a: &ViewSequence, b: &ViewSequence) -> Result<f64> {
    Ok(mse_to_db(mse_slice(a, b, None)?))
}

/// Same ratio restricted to a single view.
pub fn psnr_view(a: &ViewSequence, b: &ViewSequence, view: usize) -> Result<f64> {
    Ok(mse_to_db(mse_slice(a, b, Some(view))?))
}

fn mse_to_db(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean structural similarity over all fully contained 7x7 windows of every
/// view, computed on the channel mean of each frame with population moments
/// per window.
pub fn ssim(a: &ViewSequence, b: &ViewSequence) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.n_views();
    let mut acc = 0.0;
    for vi in 0..n {
        acc += ssim_view(a, b, vi)?;
    }
    Ok(acc / n as f64)
}

/// Structural similarity for one view.
pub fn ssim_view(a: &ViewSequence, b: &ViewSequence, view: usize) -> Result<f64> {
    check_same_shape(a, b)?;
    let (n, h, w, _) = a.frames().dim();
    if view >= n {
        return Err(Error::ViewIndex { index: view, n_views: n });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "frames of {h}x{w} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let ga = gray_view(a, view);
    let gb = gray_view(b, view);

    // Summed-area tables, one row and column of zero padding in front.
    let table = |f: &dyn Fn(usize, usize) -> f64| -> Array2<f64> {
        let mut t = Array2::zeros((h + 1, w + 1));
        for y in 0..h {
            for x in 0..w {
                t[[y + 1, x + 1]] = f(y, x) + t[[y, x + 1]] + t[[y + 1, x]] - t[[y, x]];
            }
        }
        t
    };
    let sa = table(&|y, x| ga[[y, x]]);
    let sb = table(&|y, x| gb[[y, x]]);
    let saa = table(&|y, x| ga[[y, x]] * ga[[y, x]]);
    let sbb = table(&|y, x| gb[[y, x]] * gb[[y, x]]);
    let sab = table(&|y, x| ga[[y, x]] * gb[[y, x]]);
    let window_sum = |t: &Array2<f64>, y: usize, x: usize| {
        t[[y + SSIM_WINDOW, x + SSIM_WINDOW]] + t[[y, x]]
            - t[[y, x + SSIM_WINDOW]]
            - t[[y + SSIM_WINDOW, x]]
    };

    let count = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut acc = 0.0;
    let mut windows = 0usize;
    for y in 0..=(h - SSIM_WINDOW) {
        for x in 0..=(w - SSIM_WINDOW) {
            let mu_a = window_sum(&sa, y, x) / count;
            let mu_b = window_sum(&sb, y, x) / count;
            let var_a = window_sum(&saa, y, x) / count - mu_a * mu_a;
            let var_b = window_sum(&sbb, y, x) / count - mu_b * mu_b;
            let cov = window_sum(&sab, y, x) / count - mu_a * mu_b;
            let lum = (2.0 * mu_a * mu_b + SSIM_C1) / (mu_a * mu_a + mu_b * mu_b + SSIM_C1);
            let str_ = (2.0 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2);
            acc += lum * str_;
            windows += 1;
        }
    }
    Ok(acc / windows as f64)
}

fn gray_view(seq: &ViewSequence, view: usize) -> Array2<f64> {
    let (_, h, w, c) = seq.frames().dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).map(|ch| seq.frames()[[view, y, x, ch]]).sum::<f64>() / c as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    #[serde(with = "db_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitReport {
    pub per_view: Vec<ViewMetrics>,
    #[serde(with = "db_serde")]
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

/// Scores a predicted orbit against its reference, view by view. Means are
/// arithmetic over views.
pub fn orbit_report(pred: &ViewSequence, truth: &ViewSequence) -> Result<OrbitReport> {
    let n = pred.n_views();
    let mut per_view = Vec::with_capacity(n);
    for vi in 0..n {
        per_view.push(ViewMetrics {
            view: vi,
            psnr_db: psnr_view(pred, truth, vi)?,
            ssim: ssim_view(pred, truth, vi)?,
        });
    }
    let mean_psnr_db = per_view.iter().map(|m| m.psnr_db).sum::<f64>() / n as f64;
    let mean_ssim = per_view.iter().map(|m| m.ssim).sum::<f64>() / n as f64;
    Ok(OrbitReport { per_view, mean_psnr_db, mean_ssim })
}

impl OrbitReport {
    /// Mean decibels over a chosen subset of views.
    pub fn mean_db_over<F: Fn(usize) -> bool>(&self, keep: F) -> f64 {
        let picked: Vec<f64> =
            self.per_view.iter().filter(|m| keep(m.view)).map(|m| m.psnr_db).collect();
        picked.iter().sum::<f64>() / picked.len().max(1) as f64
    }
}

/// One evaluation scene: the base scene plus a verified back insert whose
/// ground truth can be rendered at will.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub scene_seed: u64,
    pub scene: SceneSpec,
    pub edit: EditSpec,
    pub visibility: Vec<usize>,
}

impl EvalCase {
    pub fn generate(
        scene_seed: u64,
        edit_seed: u64,
        difficulty: Difficulty,
        probe: &OrbitParams,
    ) -> Result<EvalCase> {
        let scene = sample_random_scene(scene_seed, difficulty);
        let (edit, visibility) = sample_visible_back_insert_edit(&scene, edit_seed, probe)?;
        Ok(EvalCase { scene_seed, scene, edit, visibility })
    }
}

/// Settings shared by every run the harness makes. The comparison runs close
/// the late sharpening gate themselves so rows differ only in blending
/// weights and attention sharing; `fusion` still supplies the falloff shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub orbit: OrbitParams,
    pub steps: usize,
    pub seed: u64,
    pub noise: NoiseMode,
    pub fusion: FusionSchedule,
    pub resync: ResyncMode,
}

impl HarnessConfig {
    pub fn new(orbit: OrbitParams, steps: usize, seed: u64) -> Self {
        Self {
            orbit,
            steps,
            seed,
            noise: NoiseMode::MeanOnly,
            fusion: FusionSchedule::default(),
            resync: ResyncMode::Always,
        }
    }

    fn comparison_fusion(&self) -> FusionSchedule {
        FusionSchedule { refine_from: 0.0, ..self.fusion }
    }
}

/// Scores for one scene. The first three reports measure the unedited orbit
/// against the clean ground truth under growing conditioning: the identity
/// view alone, plus the model's own rendering of a second view, plus the true
/// second view. The last two measure edit propagation against the edited
/// ground truth: identity-only sampling, then dual-stream with the edited
/// anchor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene_seed: u64,
    /// Second conditioning view for the unedited settings, drawn uniformly
    /// from the non-identity views.
    pub extra_view: usize,
    /// Anchor view of the edited settings, where the edit is most visible.
    pub edit_anchor: usize,
    pub single: OrbitReport,
    pub self_anchor: OrbitReport,
    pub two_view: OrbitReport,
    pub edit_single: OrbitReport,
    pub edit_dual: OrbitReport,
}

fn eval_one_case(
    net: &Denoiser,
    params: &DenoiserParams,
    native: &Schedule,
    case: &EvalCase,
    cfg: &HarnessConfig,
    run_seed: u64,
    extra_view: usize,
) -> Result<SceneEval> {
    let truth_base = render_orbit(&case.scene, &cfg.orbit)?.quantized();
    let edited_scene = apply_edit(&case.scene, &case.edit)?;
    let truth_edited = render_orbit(&edited_scene, &cfg.orbit)?.quantized();
    let (edit_anchor, _) = select_anchor(&truth_base, &truth_edited)?;

    let front_cond = truth_base.frame_owned(0)?;
    let n = cfg.orbit.n_views;
    let (single_seq, _) = run_single_stream(
        net,
        params,
        native,
        front_cond.clone(),
        n,
        cfg.steps,
        run_seed,
        cfg.noise,
    )?;
    let single = orbit_report(&single_seq, &truth_base)?;
    let edit_single = orbit_report(&single_seq, &truth_edited)?;

    let dual_cfg = |anchor: usize| DualStreamConfig {
        steps: cfg.steps,
        noise: cfg.noise,
        fusion: cfg.comparison_fusion(),
        resync: cfg.resync,
        ..DualStreamConfig::new(anchor, run_seed)
    };

    let self_run = run_dual_stream(
        net,
        params,
        native,
        front_cond.clone(),
        single_seq.quantized().frame_owned(extra_view)?,
        n,
        &dual_cfg(extra_view),
    )?;
    let self_anchor = orbit_report(&self_run.sequence, &truth_base)?;

    let two_run = run_dual_stream(
        net,
        params,
        native,
        front_cond.clone(),
        truth_base.frame_owned(extra_view)?,
        n,
        &dual_cfg(extra_view),
    )?;
    let two_view = orbit_report(&two_run.sequence, &truth_base)?;

    let edit_run = run_dual_stream(
        net,
        params,
        native,
        front_cond,
        truth_edited.frame_owned(edit_anchor)?,
        n,
        &dual_cfg(edit_anchor),
    )?;
    let edit_dual = orbit_report(&edit_run.sequence, &truth_edited)?;

    Ok(SceneEval {
        scene_seed: case.scene_seed,
        extra_view,
        edit_anchor,
        single,
        self_anchor,
        two_view,
        edit_single,
        edit_dual,
    })
}

/// Runs every case under all five settings. Case order is preserved in the
/// output.
pub fn evaluate_cases(
    net: &Denoiser,
    params: &DenoiserParams,
    native: &Schedule,
    cases: &[EvalCase],
    cfg: &HarnessConfig,
) -> Result<Vec<SceneEval>> {
    let n = cfg.orbit.n_views;
    cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let mut pick =
                ChaCha8Rng::seed_from_u64(derive_seed_index(cfg.seed, "extra_view", i as u64));
            let extra_view = pick.random_range(1..n);
            let run_seed = derive_seed_index(cfg.seed, "case", i as u64);
            eval_one_case(net, params, native, case, cfg, run_seed, extra_view)
        })
        .collect()
}

/// Aggregates scene scores into the comparisons the trends are read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_scenes: usize,
    pub n_views: usize,
    /// Unedited orbit vs clean truth, identity conditioning only.
    #[serde(with = "db_serde")]
    pub single_db: f64,
    /// Same, with the model's own second view fed back as the anchor.
    #[serde(with = "db_serde")]
    pub self_anchor_db: f64,
    /// Same, with the true second view as the anchor.
    #[serde(with = "db_serde")]
    pub two_view_db: f64,
    /// Identity-only sampling vs the edited truth.
    #[serde(with = "db_serde")]
    pub edit_single_db: f64,
    /// Dual-stream propagation vs the edited truth.
    #[serde(with = "db_serde")]
    pub edit_dual_db: f64,
    /// Dual-stream quality at the identity view alone, edited truth.
    #[serde(with = "db_serde")]
    pub identity_view_db: f64,
    /// Dual-stream quality averaged over every other view, edited truth.
    #[serde(with = "db_serde")]
    pub other_views_db: f64,
    /// Identity-only quality on views within a quarter turn of the anchor.
    #[serde(with = "db_serde")]
    pub single_back_db: f64,
    /// Dual-stream quality on the same back views.
    #[serde(with = "db_serde")]
    pub dual_back_db: f64,
    pub single_ssim: f64,
    pub self_anchor_ssim: f64,
    pub two_view_ssim: f64,
    pub edit_single_ssim: f64,
    pub edit_dual_ssim: f64,
}

pub fn summarize(rows: &[SceneEval], n_views: usize) -> Result<EvalSummary> {
    if rows.is_empty() {
        return Err(Error::Metric("no scenes to summarize".into()));
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&SceneEval) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(EvalSummary {
        n_scenes: rows.len(),
        n_views,
        single_db: mean(&|r| r.single.mean_psnr_db),
        self_anchor_db: mean(&|r| r.self_anchor.mean_psnr_db),
        two_view_db: mean(&|r| r.two_view.mean_psnr_db),
        edit_single_db: mean(&|r| r.edit_single.mean_psnr_db),
        edit_dual_db: mean(&|r| r.edit_dual.mean_psnr_db),
        identity_view_db: mean(&|r| r.edit_dual.mean_db_over(|v| v == 0)),
        other_views_db: mean(&|r| r.edit_dual.mean_db_over(|v| v != 0)),
        single_back_db: mean(&|r| {
            r.edit_single.mean_db_over(|v| cyclic_distance(v, r.edit_anchor, n_views) <= n_views / 4)
        }),
        dual_back_db: mean(&|r| {
            r.edit_dual.mean_db_over(|v| cyclic_distance(v, r.edit_anchor, n_views) <= n_views / 4)
        }),
        single_ssim: mean(&|r| r.single.mean_ssim),
        self_anchor_ssim: mean(&|r| r.self_anchor.mean_ssim),
        two_view_ssim: mean(&|r| r.two_view.mean_ssim),
        edit_single_ssim: mean(&|r| r.edit_single.mean_ssim),
        edit_dual_ssim: mean(&|r| r.edit_dual.mean_ssim),
    })
}

/// Feeding the model's own second view back as an anchor may cost at most
/// this much mean quality next to identity-only sampling.
pub const NO_DEGRADATION_TOLERANCE_DB: f64 = 0.1;
/// A true second conditioning view must raise mean quality by at least this
/// much over identity-only sampling.
pub const SECOND_VIEW_MARGIN_DB: f64 = 0.3;
/// The full fusion ladder must beat flat blending by at least this much.
pub const ABLATION_MARGIN_DB: f64 = 0.3;

impl EvalSummary {
    /// Returns one line per comparison that came out the wrong way round.
    pub fn trend_failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.self_anchor_db < self.single_db - NO_DEGRADATION_TOLERANCE_DB {
            out.push(format!(
                "self-anchored run fell more than {NO_DEGRADATION_TOLERANCE_DB} dB below \
                 identity-only sampling: {:.4} vs {:.4}",
                self.self_anchor_db, self.single_db
            ));
        }
        if self.two_view_db < self.single_db + SECOND_VIEW_MARGIN_DB {
            out.push(format!(
                "a true second view gained less than {SECOND_VIEW_MARGIN_DB} dB over \
                 identity-only sampling: {:.4} vs {:.4}",
                self.two_view_db, self.single_db
            ));
        }
        if self.dual_back_db <= self.single_back_db {
            out.push(format!(
                "dual-stream propagation did not beat identity-only sampling near the \
                 anchor: {:.4} vs {:.4}",
                self.dual_back_db, self.single_back_db
            ));
        }
        out
    }
}

/// One fusion-feature setting of the ablation ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    #[serde(with = "db_serde")]
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

/// Scores the dual-stream pipeline with features switched on cumulatively:
/// flat blending only, then distance-shaped blending, then attention sharing
/// on top. All runs use the true edited anchor view and keep the late
/// sharpening gate closed so the rows isolate those two features.
pub fn run_ablation(
    net: &Denoiser,
    params: &DenoiserParams,
    native: &Schedule,
    cases: &[EvalCase],
    cfg: &HarnessConfig,
) -> Result<Vec<AblationRow>> {
    let arms: [(&str, bool, bool); 3] =
        [("baseline", false, false), ("+spf", true, false), ("+spf+cva", true, true)];
    let mut out = Vec::with_capacity(arms.len());
    for (name, progressive, inject) in arms {
        let scored: Result<Vec<(f64, f64)>> = cases
            .par_iter()
            .enumerate()
            .map(|(i, case)| {
                let run_seed = derive_seed_index(cfg.seed, "case", i as u64);
                let truth_base = render_orbit(&case.scene, &cfg.orbit)?.quantized();
                let edited_scene = apply_edit(&case.scene, &case.edit)?;
                let truth = render_orbit(&edited_scene, &cfg.orbit)?.quantized();
                let (anchor, _) = select_anchor(&truth_base, &truth)?;
                let dual_cfg = DualStreamConfig {
                    steps: cfg.steps,
                    noise: cfg.noise,
                    fusion: cfg.comparison_fusion(),
                    resync: cfg.resync,
                    progressive_weights: progressive,
                    inject_attention: inject,
                    ..DualStreamConfig::new(anchor, run_seed)
                };
                let run = run_dual_stream(
                    net,
                    params,
                    native,
                    truth.frame_owned(0)?,
                    truth.frame_owned(anchor)?,
                    cfg.orbit.n_views,
                    &dual_cfg,
                )?;
                let report = orbit_report(&run.sequence, &truth)?;
                Ok((report.mean_psnr_db, report.mean_ssim))
            })
            .collect();
        let scored = scored?;
        let n = scored.len() as f64;
        out.push(AblationRow {
            setting: name.to_string(),
            mean_psnr_db: scored.iter().map(|(p, _)| p).sum::<f64>() / n,
            mean_ssim: scored.iter().map(|(_, s)| s).sum::<f64>() / n,
        });
    }
    Ok(out)
}

/// Returns one line per ladder comparison that came out the wrong way round.
pub fn ablation_trend_failures(rows: &[AblationRow]) -> Vec<String> {
    let mut out = Vec::new();
    for pair in rows.windows(2) {
        if pair[1].mean_psnr_db < pair[0].mean_psnr_db {
            out.push(format!(
                "{} scored below {}: {:.4} vs {:.4}",
                pair[1].setting, pair[0].setting, pair[1].mean_psnr_db, pair[0].mean_psnr_db
            ));
        }
    }
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        if last.mean_psnr_db - first.mean_psnr_db < ABLATION_MARGIN_DB {
            out.push(format!(
                "{} gained less than {ABLATION_MARGIN_DB} dB over {}: {:.4} vs {:.4}",
                last.setting, first.setting, last.mean_psnr_db, first.mean_psnr_db
            ));
        }
    }
    out
}

/// Renders rows of the ablation ladder as an aligned text table.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<12} {:>10} {:>8}\n", "setting", "psnr_db", "ssim"));
    for row in rows {
        out.push_str(&format!(
            "{:<12} {:>10.2} {:>8.4}\n",
            row.setting, row.mean_psnr_db, row.mean_ssim
        ));
    }
    out
}

/// Renders the five-setting comparison as an aligned text table.
pub fn format_summary_table(s: &EvalSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "scenes {}  views {}\nunedited orbit vs clean truth\n{:<18} {:>10} {:>8}\n",
        s.n_scenes, s.n_views, "setting", "psnr_db", "ssim"
    ));
    for (name, db, ssim) in [
        ("single", s.single_db, s.single_ssim),
        ("self_anchor", s.self_anchor_db, s.self_anchor_ssim),
        ("two_view", s.two_view_db, s.two_view_ssim),
    ] {
        out.push_str(&format!("{name:<18} {db:>10.2} {ssim:>8.4}\n"));
    }
    out.push_str(&format!(
        "edited orbit vs edited truth\n{:<18} {:>10} {:>8}\n",
        "setting", "psnr_db", "ssim"
    ));
    for (name, db, ssim) in [
        ("single", s.edit_single_db, s.edit_single_ssim),
        ("dual", s.edit_dual_db, s.edit_dual_ssim),
    ] {
        out.push_str(&format!("{name:<18} {db:>10.2} {ssim:>8.4}\n"));
    }
    out.push_str(&format!(
        "identity view {:.2} dB, other views {:.2} dB\n",
        s.identity_view_db, s.other_views_db
    ));
    out.push_str(&format!(
        "back views: single {:.2} dB, dual {:.2} dB\n",
        s.single_back_db, s.dual_back_db
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{make_schedule, DiffusionConfig, ModelConfig};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq_of(value: f64, n: usize, r: usize, c: usize) -> ViewSequence {
        ViewSequence::new(Array4::from_elem((n, r, r, c), value)).unwrap()
    }

    #[test]
    fn known_mean_square_error_gives_twenty_db() {
        // A uniform difference of 0.1 has mean square error 0.01.
        let a = seq_of(0.4, 2, 8, 3);
        let b = seq_of(0.5, 2, 8, 3);
        let got = psnr(&a, &b).unwrap();
        assert!((got - 20.0).abs() < 1e-12, "{got}");
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn doubling_the_error_costs_six_db() {
        let a = seq_of(0.3, 1, 8, 1);
        let b = seq_of(0.35, 1, 8, 1);
        let c = seq_of(0.4, 1, 8, 1);
        let drop = psnr(&a, &b).unwrap() - psnr(&a, &c).unwrap();
        assert!((drop - 10.0 * 4.0f64.log10()).abs() < 1e-9, "{drop}");
    }

    #[test]
    fn identical_sequences_have_infinite_ratio() {
        let a = seq_of(0.7, 2, 8, 1);
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }

    #[test]
    fn infinite_ratios_serialize_as_a_marker() {
        let m = ViewMetrics { view: 0, psnr_db: f64::INFINITY, ssim: 1.0 };
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"inf\""), "{json}");
        let back: ViewMetrics = serde_json::from_str(&json).unwrap();
        assert!(back.psnr_db.is_infinite());
        let finite = ViewMetrics { view: 1, psnr_db: 21.5, ssim: 0.9 };
        let round: ViewMetrics =
            serde_json::from_str(&serde_json::to_string(&finite).unwrap()).unwrap();
        assert_eq!(round, finite);
    }

    #[test]
    fn constant_pair_similarity_matches_the_closed_form() {
        // Zero-variance windows: only the luminance term is active.
        let a = seq_of(0.2, 1, 10, 3);
        let b = seq_of(0.8, 1, 10, 3);
        let lum = (2.0 * 0.2 * 0.8 + SSIM_C1) / (0.2 * 0.2 + 0.8 * 0.8 + SSIM_C1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - lum).abs() < 1e-12, "got {got}, want {lum}");
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ViewSequence::new(Array4::from_shape_fn((2, 9, 9, 3), |_| {
            rng.random_range(0.0..1.0)
        }))
        .unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_matches_a_direct_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng| {
            ViewSequence::new(Array4::from_shape_fn((1, 10, 10, 3), |_| {
                rng.random_range(0.0..1.0)
            }))
            .unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);

        // Direct route: loop over windows and recompile the moments without
        // summed-area tables.
        let ga = gray_view(&a, 0);
        let gb = gray_view(&b, 0);
        let mut acc = 0.0;
        let mut windows = 0;
        for y0 in 0..=3usize {
            for x0 in 0..=3usize {
                let mut va = Vec::new();
                let mut vb = Vec::new();
                for y in y0..y0 + 7 {
                    for x in x0..x0 + 7 {
                        va.push(ga[[y, x]]);
                        vb.push(gb[[y, x]]);
                    }
                }
                let m = va.len() as f64;
                let mu_a: f64 = va.iter().sum::<f64>() / m;
                let mu_b: f64 = vb.iter().sum::<f64>() / m;
                let var_a: f64 = va.iter().map(|v| (v - mu_a) * (v - mu_a)).sum::<f64>() / m;
                let var_b: f64 = vb.iter().map(|v| (v - mu_b) * (v - mu_b)).sum::<f64>() / m;
                let cov: f64 =
                    va.iter().zip(&vb).map(|(x, y)| (x - mu_a) * (y - mu_b)).sum::<f64>() / m;
                acc += (2.0 * mu_a * mu_b + SSIM_C1) / (mu_a * mu_a + mu_b * mu_b + SSIM_C1)
                    * ((2.0 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2));
                windows += 1;
            }
        }
        let want = acc / windows as f64;
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn tiny_frames_are_rejected() {
        let a = seq_of(0.5, 1, 6, 1);
        assert!(matches!(ssim(&a, &a), Err(Error::Metric(_))));
    }

    #[test]
    fn orbit_report_averages_per_view_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng| {
            ViewSequence::new(Array4::from_shape_fn((3, 8, 8, 1), |_| {
                rng.random_range(0.0..1.0)
            }))
            .unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let report = orbit_report(&a, &b).unwrap();
        assert_eq!(report.per_view.len(), 3);
        for (vi, m) in report.per_view.iter().enumerate() {
            assert_eq!(m.view, vi);
            assert_eq!(m.psnr_db, psnr_view(&a, &b, vi).unwrap());
            assert_eq!(m.ssim, ssim_view(&a, &b, vi).unwrap());
        }
        let mean = report.per_view.iter().map(|m| m.psnr_db).sum::<f64>() / 3.0;
        assert!((report.mean_psnr_db - mean).abs() < 1e-12);
        let back = report.mean_db_over(|v| v >= 1);
        let manual =
            (report.per_view[1].psnr_db + report.per_view[2].psnr_db) / 2.0;
        assert!((back - manual).abs() < 1e-12);
    }

    fn tiny_fixture() -> (Denoiser, DenoiserParams, Schedule, Vec<EvalCase>, HarnessConfig) {
        let cfg = ModelConfig {
            channels: 3,
            features: 4,
            d_model: 6,
            blocks: 1,
            time_embed_dim: 4,
            azimuth_embed_dim: 4,
        };
        let net = Denoiser::new(cfg).unwrap();
        let mut params = net.init_params(40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for w in params.theta.iter_mut() {
            if *w == 0.0 {
                *w = rng.random_range(-0.05..0.05);
            }
        }
        let native =
            make_schedule(&DiffusionConfig { timesteps: 30, beta_min: 1e-4, beta_max: 0.05 })
                .unwrap();
        let orbit = OrbitParams { n_views: 8, resolution: 16, channels: 3, supersample: 2 };
        let cases: Vec<EvalCase> = (0..2)
            .map(|i| EvalCase::generate(i, 1000 + i, Difficulty::Easy, &orbit).unwrap())
            .collect();
        let harness = HarnessConfig::new(orbit, 4, 99);
        (net, params, native, cases, harness)
    }

    #[test]
    fn harness_is_deterministic_and_order_preserving() {
        let (net, params, native, cases, harness) = tiny_fixture();
        let a = evaluate_cases(&net, &params, &native, &cases, &harness).unwrap();
        let b = evaluate_cases(&net, &params, &native, &cases, &harness).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        for (row, case) in a.iter().zip(&cases) {
            assert_eq!(row.scene_seed, case.scene_seed);
            assert!(row.edit_anchor > 0);
            assert!(row.extra_view > 0 && row.extra_view < harness.orbit.n_views);
        }
        let summary = summarize(&a, harness.orbit.n_views).unwrap();
        assert_eq!(summary.n_scenes, 2);
        assert!(summary.single_db.is_finite());
        let text = format_summary_table(&summary);
        assert!(text.contains("two_view"));
        assert!(text.contains("self_anchor"));
    }

    fn flat_summary(db: f64) -> EvalSummary {
        EvalSummary {
            n_scenes: 20,
            n_views: 8,
            single_db: db,
            self_anchor_db: db,
            two_view_db: db + SECOND_VIEW_MARGIN_DB,
            edit_single_db: db,
            edit_dual_db: db,
            identity_view_db: db,
            other_views_db: db,
            single_back_db: db,
            dual_back_db: db + 0.5,
            single_ssim: 0.8,
            self_anchor_ssim: 0.8,
            two_view_ssim: 0.8,
            edit_single_ssim: 0.8,
            edit_dual_ssim: 0.8,
        }
    }

    #[test]
    fn trend_checks_flag_each_inverted_comparison() {
        assert!(flat_summary(20.0).trend_failures().is_empty());

        let mut degraded = flat_summary(20.0);
        degraded.self_anchor_db = 19.8;
        let fails = degraded.trend_failures();
        assert_eq!(fails.len(), 1);
        assert!(fails[0].contains("self-anchored"), "{fails:?}");

        let mut weak_second = flat_summary(20.0);
        weak_second.two_view_db = 20.1;
        assert!(weak_second.trend_failures()[0].contains("second view"));

        let mut no_propagation = flat_summary(20.0);
        no_propagation.dual_back_db = no_propagation.single_back_db;
        assert!(no_propagation.trend_failures()[0].contains("near the"));
    }

    #[test]
    fn ladder_checks_require_order_and_margin() {
        let row = |setting: &str, db: f64| AblationRow {
            setting: setting.into(),
            mean_psnr_db: db,
            mean_ssim: 0.8,
        };
        let good = vec![row("baseline", 20.0), row("+spf", 20.2), row("+spf+cva", 20.4)];
        assert!(ablation_trend_failures(&good).is_empty());

        let inverted = vec![row("baseline", 20.0), row("+spf", 19.9), row("+spf+cva", 20.4)];
        let fails = ablation_trend_failures(&inverted);
        assert_eq!(fails.len(), 1);
        assert!(fails[0].contains("+spf scored below baseline"), "{fails:?}");

        let thin = vec![row("baseline", 20.0), row("+spf", 20.1), row("+spf+cva", 20.2)];
        let fails = ablation_trend_failures(&thin);
        assert_eq!(fails.len(), 1);
        assert!(fails[0].contains("gained less"), "{fails:?}");
    }

    #[test]
    fn ablation_produces_three_distinct_settings() {
        let (net, params, native, cases, harness) = tiny_fixture();
        let rows = run_ablation(&net, &params, &native, &cases[..1], &harness).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].setting, "baseline");
        assert_eq!(rows[2].setting, "+spf+cva");
        assert!(rows.iter().all(|r| r.mean_psnr_db.is_finite()));
        // An untrained net carries no trend, but the settings must at least
        // change the result.
        assert_ne!(rows[0].mean_psnr_db, rows[1].mean_psnr_db);
        assert_ne!(rows[1].mean_psnr_db, rows[2].mean_psnr_db);
        let table = format_ablation_table(&rows);
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    fn eval_cases_round_trip_through_json() {
        let probe = OrbitParams { n_views: 8, resolution: 24, channels: 3, supersample: 2 };
        let case = EvalCase::generate(7, 1007, Difficulty::Medium, &probe).unwrap();
        let json = serde_json::to_string(&case).unwrap();
        let back: EvalCase = serde_json::from_str(&json).unwrap();
        assert_eq!(back, case);
    }
}
