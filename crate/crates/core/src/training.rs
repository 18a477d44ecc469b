//! Optimization and the training loop.
//!
//! An experiment is one [`ExperimentConfig`]: dataset parameters, network
//! widths, loss weights, optimizer schedule, and run controls.  The loop
//! alternates a generator step (supervised segmentation on source scenes,
//! cross-modal mimicry on both domains, and an adversarial alignment term)
//! with a discriminator step that re-scores the freshly updated generator's
//! predictions.  Both optimizers are Adam under a polynomial learning-rate
//! decay that reaches exactly zero at `max_iters`.
//!
//! Conventions worth knowing before reading further:
//!
//! * Segmentation and mimicry batch losses average per-scene values, so
//!   scenes with more visible points do not dominate a batch.  Adversarial
//!   losses instead average over every scored row in the batch, because the
//!   discriminator sees rows, not scenes.
//! * All randomness flows through named streams derived from the run's
//!   master seed (`shuffle/source`, `shuffle/target`, ...), so runs are
//!   reproducible bit-for-bit, and a checkpoint can capture stream positions
//!   and resume mid-run without replaying history.
//! * The metrics sink receives one JSON object per line with every float
//!   rendered at full precision; two runs of the same config must produce
//!   byte-identical streams.
//! * The self-training round (variants with pseudo-labels) restarts from the
//!   same initialization with fresh optimizer state and round-suffixed
//!   shuffle streams: the extra round retrains on the enlarged supervision
//!   rather than continuing the finished schedule.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{DataConfig, Dataset, ValidPoints};
use crate::geometry::{sample_at_points, SceneSample};
use crate::losses::{self, Modality, MiouReport, PooledTriple, PredictionMap, Sidedness};
use crate::networks::{normalize_points, Bound, Model, ModelConfig};
use crate::pooling::pool_features;
use crate::rng::{stream, stream_at};
use crate::tensor::{load_checkpoint, save_checkpoint, Tape, Tensor};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration

/// Network widths.  Classes come from the data section; the offset head and
/// discriminator set are derived from the variant and alignment option.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub conv_width: usize,
    pub mlp_width: usize,
    pub disc_width: usize,
    pub patch_k: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { feature_dim: 16, conv_width: 16, mlp_width: 32, disc_width: 64, patch_k: 5 }
    }
}

/// Loss weights and forms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_seg: f64,
    pub lambda_std_src: f64,
    pub lambda_std_trg: f64,
    pub lambda_adv: f64,
    /// "maxmin" trains both patch extremes; "avg" is the weaker
    /// single-statistic form kept for comparison runs.
    pub std_form: String,
    /// Which branch the mimicry gradient reaches: "mutual", "into-2d"
    /// (the points branch is detached) or "into-3d" (the image branch is).
    pub sidedness: String,
    /// Use the zero-sum generator objective instead of the default
    /// non-saturating one.
    pub saturating_adv: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_seg: 1.0,
            lambda_std_src: 1.0,
            lambda_std_trg: 0.1,
            lambda_adv: 0.001,
            std_form: "maxmin".to_string(),
            sidedness: "mutual".to_string(),
            saturating_adv: false,
        }
    }
}

/// Adam hyperparameters and the polynomial decay schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub poly_power: f64,
    pub max_iters: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, poly_power: 0.9, max_iters: 3000 }
    }
}

/// Run controls: what to train and how to sample it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// One of "baseline", "cml", "scml", "dscml", "dscml+cmal",
    /// "dscml+cmal+pl".
    pub variant: String,
    /// Discriminator pairing option: "a" pairs within a modality,
    /// "b" (default) across modalities, "c" uses all four pairings.
    /// Only meaningful for adversarial variants.
    pub alignment: String,
    pub batch_size: usize,
    pub eval_every: usize,
    pub master_seed: u64,
    /// Save a training-state checkpoint every this many iterations
    /// (0 = never; the driver decides where final state goes).
    pub checkpoint_every: usize,
    /// Upper bound on valid points used per scene per training step
    /// (0 = all).  Points are re-drawn every step from the shuffle stream;
    /// evaluation always uses every valid point.
    pub points_per_scene: usize,
    /// Scenes per domain in the fixed probe that tracks discriminator
    /// scores alongside each evaluation.
    pub probe_scenes: usize,
    /// Clamp patch offsets to zero so the deformable variant reproduces the
    /// fixed-grid one; a debugging identity, not a training mode.
    pub freeze_offsets_at_zero: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: "dscml".to_string(),
            alignment: "b".to_string(),
            batch_size: 8,
            eval_every: 250,
            master_seed: 1,
            checkpoint_every: 0,
            points_per_scene: 0,
            probe_scenes: 8,
            freeze_offsets_at_zero: false,
        }
    }
}

/// Pseudo-label controls for the self-training round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlConfig {
    /// Keep a point when the ensembled max class probability reaches this
    /// value.  0 keeps everything; anything above 1 keeps nothing.
    pub threshold: f64,
    /// Extra supervised rounds after the first (the usual setting is 1).
    pub rounds: usize,
}

impl Default for PlConfig {
    fn default() -> Self {
        PlConfig { threshold: 0.9, rounds: 1 }
    }
}

/// Everything a run needs.  Unknown keys anywhere are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub run: RunConfig,
    pub pl: PlConfig,
}

/// Training variants, ordered roughly by how much machinery they enable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Supervised segmentation only; target scenes contribute nothing.
    Baseline,
    /// Point-wise mimicry: the 2D branch is sampled at each point's pixel.
    Cml,
    /// Patch mimicry on a fixed square grid.
    Scml,
    /// Patch mimicry with learned per-sample offsets.
    Dscml,
    /// Dscml plus adversarial output alignment.
    DscmlCmal,
    /// DscmlCmal plus a pseudo-labeled self-training round.
    DscmlCmalPl,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Variant> {
        Ok(match name {
            "baseline" => Variant::Baseline,
            "cml" => Variant::Cml,
            "scml" => Variant::Scml,
            "dscml" => Variant::Dscml,
            "dscml+cmal" => Variant::DscmlCmal,
            "dscml+cmal+pl" => Variant::DscmlCmalPl,
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant '{name}' (expected baseline, cml, scml, dscml, \
                     dscml+cmal or dscml+cmal+pl)"
                )))
            }
        })
    }

    /// Learned patch offsets are in play.
    pub fn deformable(self) -> bool {
        matches!(self, Variant::Dscml | Variant::DscmlCmal | Variant::DscmlCmalPl)
    }

    /// Adversarial alignment (and hence discriminators) are in play.
    pub fn adversarial(self) -> bool {
        matches!(self, Variant::DscmlCmal | Variant::DscmlCmalPl)
    }

    /// A pseudo-labeled round follows the main one.
    pub fn self_training(self) -> bool {
        self == Variant::DscmlCmalPl
    }

    /// Any cross-modal mimicry term at all.
    pub fn mimicry(self) -> bool {
        self != Variant::Baseline
    }
}

fn parse_sidedness(name: &str) -> Result<Sidedness> {
    Ok(match name {
        "mutual" => Sidedness::Mutual,
        "into-2d" => Sidedness::ImageOnly,
        "into-3d" => Sidedness::PointsOnly,
        _ => {
            return Err(Error::Config(format!(
                "unknown sidedness '{name}' (expected mutual, into-2d or into-3d)"
            )))
        }
    })
}

/// Discriminator pairings for an alignment option.  "a" compares like with
/// like across domains, "b" crosses modalities, "c" runs all four.
pub fn alignment_pairings(alignment: &str) -> Result<Vec<String>> {
    let names: &[&str] = match alignment {
        "a" => &["s2d_t2d", "s3d_t3d"],
        "b" => &["s2d_t3d", "s3d_t2d"],
        "c" => &["s2d_t3d", "s3d_t2d", "s2d_t2d", "s3d_t3d"],
        _ => {
            return Err(Error::Config(format!(
                "unknown alignment option '{alignment}' (expected a, b or c)"
            )))
        }
    };
    Ok(names.iter().map(|s| s.to_string()).collect())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.run.variant)
    }

    /// The derived network configuration: classes from the data section, the
    /// offset head for deformable variants, discriminators per the alignment
    /// option for adversarial ones.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let v = self.variant()?;
        Ok(ModelConfig {
            classes: self.data.classes,
            feature_dim: self.model.feature_dim,
            conv_width: self.model.conv_width,
            mlp_width: self.model.mlp_width,
            disc_width: self.model.disc_width,
            patch_k: self.model.patch_k,
            offset_head: v.deformable(),
            pairings: if v.adversarial() {
                alignment_pairings(&self.run.alignment)?
            } else {
                Vec::new()
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config()?.validate()?;
        let v = self.variant()?;
        parse_sidedness(&self.loss.sidedness)?;
        for (what, w) in [
            ("lambda_seg", self.loss.lambda_seg),
            ("lambda_std_src", self.loss.lambda_std_src),
            ("lambda_std_trg", self.loss.lambda_std_trg),
            ("lambda_adv", self.loss.lambda_adv),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{what} must be a finite weight >= 0, got {w}")));
            }
        }
        if !matches!(self.loss.std_form.as_str(), "maxmin" | "avg") {
            return Err(Error::Config(format!(
                "unknown std_form '{}' (expected maxmin or avg)",
                self.loss.std_form
            )));
        }
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", o.lr)));
        }
        for (what, b) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{what} must lie in [0, 1), got {b}")));
            }
        }
        if !(o.eps.is_finite() && o.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", o.eps)));
        }
        if !(o.poly_power.is_finite() && o.poly_power >= 0.0) {
            return Err(Error::Config(format!("poly_power must be >= 0, got {}", o.poly_power)));
        }
        if o.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".to_string()));
        }
        if self.run.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        if self.run.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".to_string()));
        }
        if self.run.probe_scenes == 0 {
            return Err(Error::Config("probe_scenes must be at least 1".to_string()));
        }
        if !v.adversarial() && self.run.alignment != RunConfig::default().alignment {
            return Err(Error::Config(format!(
                "alignment '{}' has no effect for variant '{}'; only adversarial variants \
                 pair discriminators",
                self.run.alignment, self.run.variant
            )));
        }
        if !(self.pl.threshold.is_finite() && self.pl.threshold >= 0.0) {
            return Err(Error::Config(format!(
                "pseudo-label threshold must be finite and >= 0, got {}",
                self.pl.threshold
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON rendering; identifies a configuration
    /// in checkpoints and manifests.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// Learning rate for the 0-based iteration index: `lr * (1 - i/max)^power`.
/// Exactly zero at `i = max_iters`.
pub fn poly_lr(o: &OptimConfig, iter: usize) -> f64 {
    let frac = (iter as f64 / o.max_iters as f64).min(1.0);
    o.lr * (1.0 - frac).powf(o.poly_power)
}

/// Adam with bias correction.  Moments are kept per parameter name, created
/// lazily, so a parameter that never receives a gradient is never touched.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps; drives bias correction.
    pub t: u64,
    pub(crate) m: HashMap<String, Vec<f64>>,
    pub(crate) v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(o: &OptimConfig) -> Adam {
        Adam { beta1: o.beta1, beta2: o.beta2, eps: o.eps, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    /// Applies one update at step size `lr_t` to every named gradient.
    /// A non-finite gradient aborts with the parameter's name before any
    /// state is touched.
    pub fn step(
        &mut self,
        store: &mut crate::networks::ParamStore,
        grads: &[(String, Vec<f64>)],
        lr_t: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient ({bad}) for parameter '{name}' at optimizer step {}",
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let p = store.data_mut(name);
            assert_eq!(p.len(), g.len(), "gradient length mismatch for '{name}'");
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr_t * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Pulls gradients for the parameters `filter` admits, in registration
/// order (which keeps optimizer arithmetic deterministic).
fn collect_grads(
    store: &crate::networks::ParamStore,
    bound: &Bound,
    grads: &crate::tensor::Gradients,
    filter: impl Fn(&str) -> bool,
) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for name in store.names() {
        if !filter(name) {
            continue;
        }
        if let Some(g) = grads.wrt(bound.get(name)) {
            out.push((name.to_string(), g.to_vec()));
        }
    }
    out
}

fn is_disc(name: &str) -> bool {
    name.starts_with("d/")
}

// ---------------------------------------------------------------------------
// Per-scene forward pass

/// What a forward pass must produce for one scene.
struct Plan {
    /// Pooled max/min/avg predictions (classifier on patch statistics).
    need_triple: bool,
    /// Point-wise predictions sampled at each point's nearest pixel.
    need_sampled: bool,
    /// Predict patch offsets instead of using the fixed grid.
    deformable: bool,
}

/// One scene's predictions, each aligned to the same valid-point indices.
struct SceneForward {
    triple: Option<PooledTriple>,
    sampled: Option<PredictionMap>,
    p3d: PredictionMap,
}

fn forward_scene(model: &Model, p: &Bound, sample: &SceneSample, vp: &ValidPoints, plan: &Plan) -> SceneForward {
    let (h, w) = (sample.height, sample.width);
    let image = Tensor::constant(&[h, w, 3], sample.image.clone());
    let feat = model.forward_2d(p, &image);
    let align: Rc<[u32]> = Rc::clone(&vp.indices);
    let domain = sample.domain;

    let triple = if plan.need_triple {
        let offsets =
            if plan.deformable { Some(model.predict_offsets(p, &feat, &vp.pixels)) } else { None };
        let pooled = pool_features(&feat, &vp.proj, offsets.as_ref(), model.cfg.patch_k);
        let as_map = |scores: &Tensor| {
            PredictionMap::new(model.classify_2d(p, scores), Rc::clone(&align), domain, Modality::Image)
        };
        Some(PooledTriple::new(as_map(&pooled.max), as_map(&pooled.min), as_map(&pooled.avg)))
    } else {
        None
    };

    let sampled = if plan.need_sampled {
        // The subsampled projection list keeps only chosen points, so the
        // gather sees every entry as valid.
        let mut proj = Vec::with_capacity(vp.len() * 2);
        for &(u, v) in &vp.proj {
            proj.push(u);
            proj.push(v);
        }
        let (rows, _kept) = sample_at_points(&feat, &proj, &vec![true; vp.len()]);
        Some(PredictionMap::new(
            model.classify_2d(p, &rows),
            Rc::clone(&align),
            domain,
            Modality::Image,
        ))
    } else {
        None
    };

    let mut pts = Vec::with_capacity(vp.len() * 3);
    for &i in vp.indices.iter() {
        let i = i as usize;
        pts.extend_from_slice(&sample.points[i * 3..i * 3 + 3]);
    }
    let pts = Tensor::constant(&[vp.len(), 3], normalize_points(&pts));
    let p3d = PredictionMap::new(
        model.classify_3d(p, &model.forward_3d(p, &pts)),
        align,
        domain,
        Modality::Points,
    );

    SceneForward { triple, sampled, p3d }
}

/// Keeps at most `cap` valid points, drawn without replacement in original
/// order.  `cap == 0` keeps everything.
fn subsample_points(vp: ValidPoints, cap: usize, rng: &mut ChaCha8Rng) -> ValidPoints {
    let n = vp.len();
    if cap == 0 || cap >= n {
        return vp;
    }
    let mut pos: Vec<usize> = (0..n).collect();
    for i in 0..cap {
        let j = rng.random_range(i..n);
        pos.swap(i, j);
    }
    let mut sel = pos[..cap].to_vec();
    sel.sort_unstable();
    let mut indices = Vec::with_capacity(cap);
    let mut proj = Vec::with_capacity(cap);
    let mut pixels = Vec::with_capacity(cap);
    for &s in &sel {
        indices.push(vp.indices[s]);
        proj.push(vp.proj[s]);
        pixels.push(vp.pixels[s]);
    }
    ValidPoints { indices: indices.into(), proj, pixels }
}

// ---------------------------------------------------------------------------
// Metrics formatting

/// Full-precision decimal rendering used in every numeric output file.
pub(crate) fn num(v: f64) -> String {
    assert!(v.is_finite(), "refusing to serialize a non-finite value");
    format!("{v:.16e}")
}

/// What the generator step observed (values of each total component).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenReport {
    pub total: f64,
    pub seg: f64,
    pub std_src: f64,
    pub std_trg: f64,
    pub g_adv: f64,
    pub pseudo: f64,
}

/// What the discriminator step observed: its total loss and the mean score
/// per pairing on source-side and target-side rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DReport {
    pub loss_d: f64,
    pub rho: Vec<(String, f64, f64)>,
}

/// Per-head mIoU of one evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub miou_2d: f64,
    pub miou_3d: f64,
    pub miou_avg: f64,
}

/// Evaluation metrics plus the per-head confusion reports behind them.
pub struct EvalReport {
    pub metrics: EvalMetrics,
    pub report_2d: MiouReport,
    pub report_3d: MiouReport,
    pub report_avg: MiouReport,
}

/// Pseudo-labels for every target-train scene, plus selection counts.
pub struct PseudoLabels {
    /// Per scene: (original point index, label) for each confident point.
    pub per_scene: Vec<Vec<(u32, u16)>>,
    pub selected: usize,
    pub candidates: usize,
}

fn rho_json(rho: &[(String, f64, f64)]) -> String {
    let mut s = String::from("{");
    for (i, (pairing, src, trg)) in rho.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("\"{pairing}\":{{\"source\":{},\"target\":{}}}", num(*src), num(*trg)));
    }
    s.push('}');
    s
}

fn iter_record(round: usize, iteration: usize, lr: f64, g: &GenReport, d: Option<&DReport>, pl: bool) -> String {
    let mut s = format!(
        "{{\"round\":{round},\"iteration\":{iteration},\"lr\":{},\"loss_total\":{},\
         \"loss_seg\":{},\"loss_std_src\":{},\"loss_std_trg\":{}",
        num(lr),
        num(g.total),
        num(g.seg),
        num(g.std_src),
        num(g.std_trg)
    );
    if pl {
        s.push_str(&format!(",\"loss_pseudo\":{}", num(g.pseudo)));
    }
    if let Some(d) = d {
        s.push_str(&format!(
            ",\"loss_g_adv\":{},\"loss_d\":{},\"rho\":{}",
            num(g.g_adv),
            num(d.loss_d),
            rho_json(&d.rho)
        ));
    }
    s.push('}');
    s
}

fn eval_record(
    round: usize,
    iteration: usize,
    split: &str,
    m: &EvalMetrics,
    probe: Option<&[(String, f64, f64)]>,
) -> String {
    let mut s = format!(
        "{{\"round\":{round},\"iteration\":{iteration},\"eval\":{{\"split\":\"{split}\",\
         \"miou_2d\":{},\"miou_3d\":{},\"miou_avg\":{}",
        num(m.miou_2d),
        num(m.miou_3d),
        num(m.miou_avg)
    );
    if let Some(rho) = probe {
        let gap = rho.iter().map(|(_, s, t)| (s - t).abs()).sum::<f64>() / rho.len().max(1) as f64;
        s.push_str(&format!(",\"probe_gap\":{},\"probe\":{}", num(gap), rho_json(rho)));
    }
    s.push_str("}}");
    s
}

// ---------------------------------------------------------------------------
// Trainer

const STATE_FORMAT: &str = "train-state-v1";

/// Owns the model and optimizer state for one run and drives the loop.
pub struct Trainer<'a> {
    pub cfg: ExperimentConfig,
    ds: &'a Dataset,
    variant: Variant,
    side: Sidedness,
    pub model: Model,
    opt_g: Adam,
    opt_d: Adam,
    /// Completed iterations in the current round.
    pub iteration: usize,
    /// 0 = main round; 1+ = pseudo-labeled self-training rounds.
    pub round: usize,
    src_rng: ChaCha8Rng,
    trg_rng: ChaCha8Rng,
    /// Pseudo-labels for target-train scenes (self-training rounds only).
    pseudo: Option<Vec<Vec<(u32, u16)>>>,
}

fn shuffle_stream(domain: &str, round: usize) -> String {
    if round == 0 {
        format!("shuffle/{domain}")
    } else {
        format!("shuffle/{domain}/round{round}")
    }
}

struct GenParts {
    total: Tensor,
    report: GenReport,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &ExperimentConfig, ds: &'a Dataset) -> Result<Trainer<'a>> {
        cfg.validate()?;
        if ds.config != cfg.data {
            return Err(Error::Config(
                "dataset was generated from a different data configuration; regenerate it or \
                 adjust the [data] section"
                    .to_string(),
            ));
        }
        let variant = cfg.variant()?;
        let side = parse_sidedness(&cfg.loss.sidedness)?;
        let model = Model::new(cfg.model_config()?, cfg.run.master_seed)?;
        let master = cfg.run.master_seed;
        Ok(Trainer {
            cfg: cfg.clone(),
            ds,
            variant,
            side,
            model,
            opt_g: Adam::new(&cfg.optim),
            opt_d: Adam::new(&cfg.optim),
            iteration: 0,
            round: 0,
            src_rng: stream(master, &shuffle_stream("source", 0)),
            trg_rng: stream(master, &shuffle_stream("target", 0)),
            pseudo: None,
        })
    }

    fn deformable(&self) -> bool {
        self.variant.deformable() && !self.cfg.run.freeze_offsets_at_zero
    }

    /// Runs every remaining iteration (and the self-training round when the
    /// variant asks for one), sending one JSON line per event to `sink`, and
    /// finishes with a target-test evaluation.
    pub fn run(&mut self, sink: &mut dyn FnMut(&str), ckpt_dir: Option<&Path>) -> Result<EvalReport> {
        loop {
            while self.iteration < self.cfg.optim.max_iters {
                self.step(sink, ckpt_dir)?;
            }
            if !(self.variant.self_training() && self.round < self.cfg.pl.rounds) {
                break;
            }
            let pl = self.pseudo_labels()?;
            sink(&format!(
                "{{\"round\":{},\"iteration\":{},\"pseudo_labels\":{{\"threshold\":{},\
                 \"selected\":{},\"candidates\":{}}}}}",
                self.round,
                self.iteration,
                num(self.cfg.pl.threshold),
                pl.selected,
                pl.candidates
            ));
            if pl.selected == 0 {
                eprintln!(
                    "warning: no pseudo-label reached threshold {}; skipping the self-training round",
                    self.cfg.pl.threshold
                );
                break;
            }
            self.begin_round(self.round + 1, pl.per_scene);
        }
        let test = self.evaluate("target-test")?;
        sink(&eval_record(self.round, self.iteration, "target-test", &test.metrics, None));
        Ok(test)
    }

    /// Resets for a self-training round: same initialization, fresh
    /// optimizers, round-suffixed shuffle streams, pseudo-labels attached.
    fn begin_round(&mut self, round: usize, pseudo: Vec<Vec<(u32, u16)>>) {
        let master = self.cfg.run.master_seed;
        self.model = Model::new(self.model.cfg.clone(), master).expect("model config already validated");
        self.opt_g = Adam::new(&self.cfg.optim);
        self.opt_d = Adam::new(&self.cfg.optim);
        self.iteration = 0;
        self.round = round;
        self.src_rng = stream(master, &shuffle_stream("source", round));
        self.trg_rng = stream(master, &shuffle_stream("target", round));
        self.pseudo = Some(pseudo);
    }

    /// One iteration: generator step, discriminator step (adversarial
    /// variants), metrics, scheduled evaluation and checkpointing.
    pub fn step(&mut self, sink: &mut dyn FnMut(&str), ckpt_dir: Option<&Path>) -> Result<()> {
        let i = self.iteration;
        let lr = poly_lr(&self.cfg.optim, i);
        let cap = self.cfg.run.points_per_scene;
        let batch = self.cfg.run.batch_size;
        // Both batches are always drawn, whether or not the variant consumes
        // them, so stream positions advance uniformly across variants.
        let src_b = draw_batch(&mut self.src_rng, self.ds.split("source-train"), batch, cap);
        let trg_b = draw_batch(&mut self.trg_rng, self.ds.split("target-train"), batch, cap);

        let g = self.generator_step(&src_b, &trg_b, lr)?;
        let d = if self.variant.adversarial() && self.cfg.loss.lambda_adv > 0.0 {
            Some(self.discriminator_step(&src_b, &trg_b, lr)?)
        } else {
            None
        };
        self.iteration = i + 1;
        sink(&iter_record(self.round, self.iteration, lr, &g, d.as_ref(), self.pseudo.is_some()));

        if self.iteration % self.cfg.run.eval_every == 0 {
            let ev = self.evaluate("target-val")?;
            let probe = if self.variant.adversarial() { Some(self.probe()) } else { None };
            sink(&eval_record(self.round, self.iteration, "target-val", &ev.metrics, probe.as_deref()));
        }
        let every = self.cfg.run.checkpoint_every;
        if every > 0 && self.iteration % every == 0 {
            if let Some(dir) = ckpt_dir {
                let name = format!("checkpoint-r{}-{:06}", self.round, self.iteration);
                self.save_state(&dir.join(name))?;
            }
        }
        Ok(())
    }

    /// Assembles the generator objective for one batch.  Pure in the bound
    /// parameters: re-running it on the same bindings reproduces the same
    /// values, which is how the update is audited.
    fn generator_losses(
        &self,
        bound: &Bound,
        src: &[(usize, ValidPoints)],
        trg: &[(usize, ValidPoints)],
    ) -> Result<GenParts> {
        let v = self.variant;
        let lc = &self.cfg.loss;
        let side = self.side;
        let classes = self.cfg.data.classes;
        let plan_src =
            Plan { need_triple: true, need_sampled: v == Variant::Cml, deformable: self.deformable() };
        // Target scenes matter when a mimicry term reaches them, when the
        // adversarial term needs their predictions, or when a self-training
        // round supervises them with pseudo-labels.
        let adversarial = v.adversarial() && lc.lambda_adv > 0.0;
        let need_target = (v.mimicry() && lc.lambda_std_trg > 0.0) || adversarial || self.pseudo.is_some();
        let plan_trg = Plan {
            need_triple: v != Variant::Cml || adversarial,
            need_sampled: v == Variant::Cml,
            deformable: self.deformable(),
        };

        let src_split = self.ds.split("source-train");
        let trg_split = self.ds.split("target-train");

        let mut seg_terms = Vec::new();
        let mut std_src_terms = Vec::new();
        let mut src_fwd = Vec::new();
        for (si, vp) in src {
            if vp.is_empty() {
                eprintln!("warning: source-train[{si}] has no valid points; scene skipped");
                continue;
            }
            let sample = &src_split[*si];
            let f = forward_scene(&self.model, bound, sample, vp, &plan_src);
            let triple = f.triple.as_ref().expect("source plan pools");
            let labels: Vec<u16> =
                vp.indices.iter().map(|&i| sample.point_labels[i as usize]).collect();
            seg_terms.push(losses::loss_seg(triple, &f.p3d, &labels));
            if v.mimicry() && lc.lambda_std_src > 0.0 {
                std_src_terms.push(self.mimicry_term(&f, side));
            }
            src_fwd.push(f);
        }
        if seg_terms.is_empty() {
            return Err(Error::Train(
                "every source scene in the batch was empty; nothing to train on".to_string(),
            ));
        }

        let mut std_trg_terms = Vec::new();
        let mut pseudo_terms = Vec::new();
        let mut trg_fwd = Vec::new();
        if need_target {
            for (ti, vp) in trg {
                if vp.is_empty() {
                    eprintln!("warning: target-train[{ti}] has no valid points; scene skipped");
                    continue;
                }
                let sample = &trg_split[*ti];
                let f = forward_scene(&self.model, bound, sample, vp, &plan_trg);
                if v.mimicry() && lc.lambda_std_trg > 0.0 {
                    std_trg_terms.push(self.mimicry_term(&f, side));
                }
                if let Some(pseudo) = &self.pseudo {
                    let triple = f.triple.as_ref().expect("target plan pools");
                    if let Some(t) =
                        pseudo_seg(&triple.avg_scores, &f.p3d, &pseudo[*ti], classes)
                    {
                        pseudo_terms.push(t);
                    }
                }
                trg_fwd.push(f);
            }
            if trg_fwd.is_empty() && adversarial {
                return Err(Error::Train(
                    "every target scene in the batch was empty; nothing to align".to_string(),
                ));
            }
        }

        let mut g_adv_terms = Vec::new();
        if adversarial && !trg_fwd.is_empty() {
            for pairing in &self.model.cfg.pairings.clone() {
                let (s_cat, t_cat) = self.pair_scores(bound, pairing, &src_fwd, &trg_fwd);
                let (_d, g) = losses::loss_adv(&s_cat, &t_cat, lc.saturating_adv);
                g_adv_terms.push(g);
            }
        }

        let seg = mean_terms(seg_terms).expect("non-empty");
        let mut total = seg.scale(lc.lambda_seg);
        let mut report = GenReport {
            total: 0.0,
            seg: seg.data()[0],
            std_src: 0.0,
            std_trg: 0.0,
            g_adv: 0.0,
            pseudo: 0.0,
        };
        if let Some(t) = mean_terms(std_src_terms) {
            report.std_src = t.data()[0];
            total = total.add(&t.scale(lc.lambda_std_src));
        }
        if let Some(t) = mean_terms(std_trg_terms) {
            report.std_trg = t.data()[0];
            total = total.add(&t.scale(lc.lambda_std_trg));
        }
        if !g_adv_terms.is_empty() {
            let mut sum = g_adv_terms[0].clone();
            for t in &g_adv_terms[1..] {
                sum = sum.add(t);
            }
            report.g_adv = sum.data()[0];
            total = total.add(&sum.scale(lc.lambda_adv));
        }
        if let Some(t) = mean_terms(pseudo_terms) {
            report.pseudo = t.data()[0];
            total = total.add(&t.scale(lc.lambda_seg));
        }
        report.total = total.data()[0];
        Ok(GenParts { total, report })
    }

    /// The variant's mimicry loss for one scene.
    fn mimicry_term(&self, f: &SceneForward, side: Sidedness) -> Tensor {
        match self.variant {
            Variant::Cml => {
                losses::loss_cml(f.sampled.as_ref().expect("cml plan samples"), &f.p3d, side)
            }
            _ => {
                let triple = f.triple.as_ref().expect("patch plan pools");
                if self.cfg.loss.std_form == "avg" {
                    losses::loss_std_avg(triple, &f.p3d, side)
                } else {
                    losses::loss_dscml(triple, &f.p3d, side)
                }
            }
        }
    }

    /// Concatenated discriminator scores for one pairing over the kept
    /// scenes of each side.
    fn pair_scores(
        &self,
        bound: &Bound,
        pairing: &str,
        src_fwd: &[SceneForward],
        trg_fwd: &[SceneForward],
    ) -> (Tensor, Tensor) {
        let (s_half, t_half) = pairing.split_once('_').expect("pairing is 'sXd_tYd'");
        let cat = |fwds: &[SceneForward], half: &str| {
            let scores: Vec<Tensor> = fwds
                .iter()
                .map(|f| {
                    let rows = match half {
                        "s2d" | "t2d" => {
                            &f.triple.as_ref().expect("2d pairing needs pooled scores").avg_scores
                        }
                        "s3d" | "t3d" => &f.p3d,
                        _ => unreachable!("pairing halves are checked at registration"),
                    };
                    self.model.discriminate(bound, pairing, &rows.probs).0
                })
                .collect();
            let refs: Vec<&Tensor> = scores.iter().collect();
            Tensor::concat_rows(&refs)
        };
        (cat(src_fwd, s_half), cat(trg_fwd, t_half))
    }

    /// Generator step: forward both batches, assemble the weighted total,
    /// backpropagate and update generator parameters only.
    fn generator_step(
        &mut self,
        src: &[(usize, ValidPoints)],
        trg: &[(usize, ValidPoints)],
        lr: f64,
    ) -> Result<GenReport> {
        let tape = Tape::new();
        let bound = self.model.store.bind_with(&tape, |n| !is_disc(n));
        let parts = self.generator_losses(&bound, src, trg)?;
        let grads = tape
            .backward(&parts.total)
            .map_err(|e| Error::Train(format!("generator backward: {e}")))?;
        let gl = collect_grads(&self.model.store, &bound, &grads, |n| !is_disc(n));
        self.opt_g.step(&mut self.model.store, &gl, lr)?;
        Ok(parts.report)
    }

    /// Discriminator step: re-forward the same batches with the freshly
    /// updated generator frozen (its parameters bind as constants, so its
    /// predictions are detached by construction), score each pairing, and
    /// update discriminator parameters only.
    fn discriminator_step(
        &mut self,
        src: &[(usize, ValidPoints)],
        trg: &[(usize, ValidPoints)],
        lr: f64,
    ) -> Result<DReport> {
        let tape = Tape::new();
        let bound = self.model.store.bind_with(&tape, is_disc);
        let plan = Plan { need_triple: true, need_sampled: false, deformable: self.deformable() };
        let fwd = |list: &[(usize, ValidPoints)], split: &str| -> Vec<SceneForward> {
            list.iter()
                .filter(|(_, vp)| !vp.is_empty())
                .map(|(i, vp)| forward_scene(&self.model, &bound, &self.ds.split(split)[*i], vp, &plan))
                .collect()
        };
        let src_fwd = fwd(src, "source-train");
        let trg_fwd = fwd(trg, "target-train");
        if src_fwd.is_empty() || trg_fwd.is_empty() {
            return Err(Error::Train(
                "a discriminator step needs at least one non-empty scene per domain".to_string(),
            ));
        }

        let mut d_total: Option<Tensor> = None;
        let mut rho = Vec::new();
        for pairing in &self.model.cfg.pairings.clone() {
            let (s_cat, t_cat) = self.pair_scores(&bound, pairing, &src_fwd, &trg_fwd);
            let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
            rho.push((pairing.clone(), mean(&s_cat), mean(&t_cat)));
            let (d, _g) = losses::loss_adv(&s_cat, &t_cat, self.cfg.loss.saturating_adv);
            d_total = Some(match d_total {
                Some(acc) => acc.add(&d),
                None => d,
            });
        }
        let d_total = d_total.expect("adversarial variants register pairings");
        let grads = tape
            .backward(&d_total)
            .map_err(|e| Error::Train(format!("discriminator backward: {e}")))?;
        let dl = collect_grads(&self.model.store, &bound, &grads, is_disc);
        self.opt_d.step(&mut self.model.store, &dl, lr)?;
        Ok(DReport { loss_d: d_total.data()[0], rho })
    }

    /// Scores a labeled split with all three heads: pooled-average 2D,
    /// point 3D, and their probability mean.  Uses every valid point.
    pub fn evaluate(&self, split: &str) -> Result<EvalReport> {
        let samples = self.ds.split(split);
        let classes = self.cfg.data.classes;
        let tape = Tape::new();
        let bound = self.model.store.bind_with(&tape, |_| false);
        let plan = Plan { need_triple: true, need_sampled: false, deformable: self.deformable() };
        let mut truth = Vec::new();
        let mut pred_2d = Vec::new();
        let mut pred_3d = Vec::new();
        let mut pred_avg = Vec::new();
        for sample in samples {
            if sample.point_labels.is_empty() {
                return Err(Error::Dataset(format!(
                    "split '{split}' carries no point labels; evaluation needs a labeled split"
                )));
            }
            let vp = ValidPoints::of(sample);
            if vp.is_empty() {
                continue;
            }
            let f = forward_scene(&self.model, &bound, sample, &vp, &plan);
            let avg2d = f.triple.as_ref().expect("evaluation pools").avg_scores.probs.clone();
            let (a, b) = (avg2d.data(), f.p3d.probs.data());
            for (r, &pi) in vp.indices.iter().enumerate() {
                truth.push(sample.point_labels[pi as usize]);
                let row_a = &a[r * classes..(r + 1) * classes];
                let row_b = &b[r * classes..(r + 1) * classes];
                pred_2d.push(argmax(row_a));
                pred_3d.push(argmax(row_b));
                let blend: Vec<f64> =
                    row_a.iter().zip(row_b).map(|(x, y)| 0.5 * (x + y)).collect();
                pred_avg.push(argmax(&blend));
            }
        }
        if truth.is_empty() {
            return Err(Error::Dataset(format!("split '{split}' has no valid points to score")));
        }
        let report_2d = losses::miou(&pred_2d, &truth, classes);
        let report_3d = losses::miou(&pred_3d, &truth, classes);
        let report_avg = losses::miou(&pred_avg, &truth, classes);
        Ok(EvalReport {
            metrics: EvalMetrics {
                miou_2d: report_2d.miou,
                miou_3d: report_3d.miou,
                miou_avg: report_avg.miou,
            },
            report_2d,
            report_3d,
            report_avg,
        })
    }

    /// Mean discriminator score per pairing over a fixed probe prefix of
    /// each training split; tracks how separable the domains remain.
    pub fn probe(&self) -> Vec<(String, f64, f64)> {
        let tape = Tape::new();
        let bound = self.model.store.bind_with(&tape, |_| false);
        let plan = Plan { need_triple: true, need_sampled: false, deformable: self.deformable() };
        let take = |split: &str| -> Vec<SceneForward> {
            let samples = self.ds.split(split);
            let n = self.cfg.run.probe_scenes.min(samples.len());
            samples[..n]
                .iter()
                .filter_map(|s| {
                    let vp = ValidPoints::of(s);
                    (!vp.is_empty()).then(|| forward_scene(&self.model, &bound, s, &vp, &plan))
                })
                .collect()
        };
        let src_fwd = take("source-train");
        let trg_fwd = take("target-train");
        let mut out = Vec::new();
        for pairing in &self.model.cfg.pairings.clone() {
            let (s_cat, t_cat) = self.pair_scores(&bound, pairing, &src_fwd, &trg_fwd);
            let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
            out.push((pairing.clone(), mean(&s_cat), mean(&t_cat)));
        }
        out
    }

    /// Ensembles both heads on every target-train point and keeps the
    /// confident ones.  Reads no sealed labels: the selection is the model's
    /// own prediction.
    pub fn pseudo_labels(&self) -> Result<PseudoLabels> {
        let samples = self.ds.split("target-train");
        let classes = self.cfg.data.classes;
        let tape = Tape::new();
        let bound = self.model.store.bind_with(&tape, |_| false);
        let plan = Plan { need_triple: true, need_sampled: false, deformable: self.deformable() };
        let mut per_scene = Vec::with_capacity(samples.len());
        let mut selected = 0usize;
        let mut candidates = 0usize;
        for sample in samples {
            let vp = ValidPoints::of(sample);
            if vp.is_empty() {
                per_scene.push(Vec::new());
                continue;
            }
            let f = forward_scene(&self.model, &bound, sample, &vp, &plan);
            let avg2d = f.triple.as_ref().expect("pseudo-labeling pools").avg_scores.probs.clone();
            let (a, b) = (avg2d.data(), f.p3d.probs.data());
            let mut picks = Vec::new();
            for (r, &pi) in vp.indices.iter().enumerate() {
                candidates += 1;
                let row_a = &a[r * classes..(r + 1) * classes];
                let row_b = &b[r * classes..(r + 1) * classes];
                let blend: Vec<f64> =
                    row_a.iter().zip(row_b).map(|(x, y)| 0.5 * (x + y)).collect();
                let y = argmax(&blend);
                if blend[y as usize] >= self.cfg.pl.threshold {
                    picks.push((pi, y));
                    selected += 1;
                }
            }
            per_scene.push(picks);
        }
        Ok(PseudoLabels { per_scene, selected, candidates })
    }

    /// Serializes parameters, optimizer moments, stream positions and round
    /// bookkeeping; [`Trainer::resume`] restores all of it bit-for-bit.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let names: Vec<String> = self.model.store.names().map(|s| s.to_string()).collect();
        for name in &names {
            entries.push((
                name.clone(),
                self.model.store.shape(name).to_vec(),
                self.model.store.data(name).to_vec(),
            ));
        }
        for (prefix, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            for name in &names {
                if let Some(m) = opt.m.get(name) {
                    entries.push((format!("{prefix}/m/{name}"), vec![m.len()], m.clone()));
                }
                if let Some(v) = opt.v.get(name) {
                    entries.push((format!("{prefix}/v/{name}"), vec![v.len()], v.clone()));
                }
            }
        }
        let meta = json!({
            "format": STATE_FORMAT,
            "iteration": self.iteration,
            "round": self.round,
            "opt_g_t": self.opt_g.t,
            "opt_d_t": self.opt_d.t,
            "src_word_pos": self.src_rng.get_word_pos().to_string(),
            "trg_word_pos": self.trg_rng.get_word_pos().to_string(),
            "config_fingerprint": self.cfg.fingerprint(),
            "config": serde_json::to_value(&self.cfg).expect("config serializes"),
            "pseudo": self.pseudo,
        });
        save_checkpoint(dir, &entries, meta)
    }

    /// Restores a trainer from [`Trainer::save_state`] output.  The config
    /// must match the checkpoint's fingerprint exactly.
    pub fn resume(cfg: &ExperimentConfig, ds: &'a Dataset, dir: &Path) -> Result<Trainer<'a>> {
        let mut t = Trainer::new(cfg, ds)?;
        let (entries, meta) = load_checkpoint(dir)?;
        if meta["format"].as_str() != Some(STATE_FORMAT) {
            return Err(Error::Checkpoint(format!(
                "not a training-state checkpoint (format tag {})",
                meta["format"]
            )));
        }
        let fp = meta["config_fingerprint"].as_str().unwrap_or_default();
        if fp != cfg.fingerprint() {
            return Err(Error::Checkpoint(
                "checkpoint was produced by a different configuration".to_string(),
            ));
        }
        let mut params_seen = 0usize;
        for (name, shape, data) in entries {
            if let Some(rest) = name.strip_prefix("adam_g/m/") {
                t.opt_g.m.insert(rest.to_string(), data);
            } else if let Some(rest) = name.strip_prefix("adam_g/v/") {
                t.opt_g.v.insert(rest.to_string(), data);
            } else if let Some(rest) = name.strip_prefix("adam_d/m/") {
                t.opt_d.m.insert(rest.to_string(), data);
            } else if let Some(rest) = name.strip_prefix("adam_d/v/") {
                t.opt_d.v.insert(rest.to_string(), data);
            } else {
                if t.model.store.shape(&name) != shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{name}' has shape {shape:?} in the checkpoint but \
                         {:?} in the model",
                        t.model.store.shape(&name)
                    )));
                }
                t.model.store.set_data(&name, data);
                params_seen += 1;
            }
        }
        if params_seen != t.model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {params_seen} parameters but the model has {}",
                t.model.store.len()
            )));
        }
        let get_u64 = |key: &str| -> Result<u64> {
            meta[key]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("missing or invalid '{key}' in state meta")))
        };
        t.iteration = get_u64("iteration")? as usize;
        t.round = get_u64("round")? as usize;
        t.opt_g.t = get_u64("opt_g_t")?;
        t.opt_d.t = get_u64("opt_d_t")?;
        let get_pos = |key: &str| -> Result<u128> {
            meta[key]
                .as_str()
                .and_then(|s| s.parse::<u128>().ok())
                .ok_or_else(|| Error::Checkpoint(format!("missing or invalid '{key}' in state meta")))
        };
        let master = cfg.run.master_seed;
        t.src_rng = stream_at(master, &shuffle_stream("source", t.round), get_pos("src_word_pos")?);
        t.trg_rng = stream_at(master, &shuffle_stream("target", t.round), get_pos("trg_word_pos")?);
        t.pseudo = serde_json::from_value(meta["pseudo"].clone())
            .map_err(|e| Error::Checkpoint(format!("invalid pseudo-label table: {e}")))?;
        Ok(t)
    }
}

fn draw_batch(
    rng: &mut ChaCha8Rng,
    split: &[SceneSample],
    batch: usize,
    cap: usize,
) -> Vec<(usize, ValidPoints)> {
    (0..batch)
        .map(|_| {
            let i = rng.random_range(0..split.len());
            let vp = subsample_points(ValidPoints::of(&split[i]), cap, rng);
            (i, vp)
        })
        .collect()
}

fn mean_terms(terms: Vec<Tensor>) -> Option<Tensor> {
    let k = terms.len();
    let mut it = terms.into_iter();
    let first = it.next()?;
    let sum = it.fold(first, |acc, t| acc.add(&t));
    Some(sum.scale(1.0 / k as f64))
}

/// First-maximum argmax, matching the tie rule used everywhere else.
fn argmax(row: &[f64]) -> u16 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u16
}

/// Negative mean log-likelihood of pseudo-labels under both branches; the
/// self-training round's supervision on confident target points.  Points
/// dropped by subsampling are simply absent from this step's term.
fn pseudo_seg(
    avg: &PredictionMap,
    p3d: &PredictionMap,
    picks: &[(u32, u16)],
    classes: usize,
) -> Option<Tensor> {
    if picks.is_empty() {
        return None;
    }
    let pos: HashMap<u32, usize> =
        avg.alignment.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let mut rows = Vec::new();
    let mut mask = Vec::new();
    for &(idx, y) in picks {
        if let Some(&r) = pos.get(&idx) {
            rows.push(r);
            let mut one_hot = vec![0.0; classes];
            one_hot[y as usize] = 1.0;
            mask.extend_from_slice(&one_hot);
        }
    }
    if rows.is_empty() {
        return None;
    }
    let m = rows.len();
    let mask = Tensor::constant(&[m, classes], mask);
    let lp = avg
        .probs
        .gather_rows(&rows)
        .log_clamped()
        .add(&p3d.probs.gather_rows(&rows).log_clamped());
    Some(mask.mul(&lp).sum().scale(-1.0 / m as f64))
}

// ---------------------------------------------------------------------------
// Driver conveniences

/// Everything a finished run leaves behind (besides the trainer itself).
pub struct TrainOutcome {
    /// The metrics stream, one JSON object per line.
    pub lines: Vec<String>,
    /// Final target-test evaluation.
    pub test: EvalReport,
}

/// Trains one configuration to completion.
pub fn train<'a>(cfg: &ExperimentConfig, ds: &'a Dataset) -> Result<(Trainer<'a>, TrainOutcome)> {
    let mut t = Trainer::new(cfg, ds)?;
    let mut lines = Vec::new();
    let test = t.run(&mut |s: &str| lines.push(s.to_string()), None)?;
    Ok((t, TrainOutcome { lines, test }))
}

// ---------------------------------------------------------------------------
// Ablation matrix

/// One row of an ablation matrix: a variant plus optional loss overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    pub variant: String,
    #[serde(default)]
    pub alignment: Option<String>,
    #[serde(default)]
    pub std_form: Option<String>,
    #[serde(default)]
    pub lambda_std_src: Option<f64>,
    #[serde(default)]
    pub lambda_std_trg: Option<f64>,
    #[serde(default)]
    pub lambda_adv: Option<f64>,
}

impl AblationRow {
    /// A plain row with no overrides.
    pub fn plain(name: &str, variant: &str) -> AblationRow {
        AblationRow {
            name: name.to_string(),
            variant: variant.to_string(),
            alignment: None,
            std_form: None,
            lambda_std_src: None,
            lambda_std_trg: None,
            lambda_adv: None,
        }
    }
}

/// The full config for one matrix cell: the base with the row's variant and
/// overrides and the cell's seed.  Alignment resets to the default unless
/// the row names one, so non-adversarial rows validate cleanly.
pub fn cell_config(base: &ExperimentConfig, row: &AblationRow, seed: u64) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    c.run.variant = row.variant.clone();
    c.run.alignment =
        row.alignment.clone().unwrap_or_else(|| RunConfig::default().alignment);
    c.run.master_seed = seed;
    if let Some(s) = &row.std_form {
        c.loss.std_form = s.clone();
    }
    if let Some(w) = row.lambda_std_src {
        c.loss.lambda_std_src = w;
    }
    if let Some(w) = row.lambda_std_trg {
        c.loss.lambda_std_trg = w;
    }
    if let Some(w) = row.lambda_adv {
        c.loss.lambda_adv = w;
    }
    c.validate()?;
    Ok(c)
}

/// One finished (or failed) matrix cell.
pub struct CellOutcome {
    pub row: String,
    pub seed: u64,
    /// Target-test metrics, or the error message that stopped the cell.
    pub result: std::result::Result<EvalMetrics, String>,
    /// Wall-clock seconds spent in the cell (each cell runs on one thread).
    pub seconds: f64,
}

/// A finished matrix: rows x seeds in row-major order.
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellOutcome>,
}

impl AblationReport {
    /// Mean target-test metrics over a row's successful cells.
    pub fn row_mean(&self, row: usize) -> Option<EvalMetrics> {
        let cells = &self.cells[row * self.seeds.len()..(row + 1) * self.seeds.len()];
        let ok: Vec<&EvalMetrics> = cells.iter().filter_map(|c| c.result.as_ref().ok()).collect();
        if ok.is_empty() {
            return None;
        }
        let k = ok.len() as f64;
        Some(EvalMetrics {
            miou_2d: ok.iter().map(|m| m.miou_2d).sum::<f64>() / k,
            miou_3d: ok.iter().map(|m| m.miou_3d).sum::<f64>() / k,
            miou_avg: ok.iter().map(|m| m.miou_avg).sum::<f64>() / k,
        })
    }
}

/// Runs every `rows x seeds` cell, spreading cells over `threads` worker
/// threads.  Cells are independent, so the thread count never changes any
/// result.  One failing cell records its error and the rest proceed.
pub fn run_ablation(
    base: &ExperimentConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    ds: &Dataset,
    threads: usize,
) -> Result<AblationReport> {
    if rows.is_empty() || seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one row and one seed".to_string()));
    }
    let jobs: Vec<(usize, usize)> =
        (0..rows.len()).flat_map(|r| (0..seeds.len()).map(move |s| (r, s))).collect();
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let outcomes: Vec<Mutex<Option<CellOutcome>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(jobs.len()) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() {
                    break;
                }
                let (r, s) = jobs[j];
                let (row, seed) = (&rows[r], seeds[s]);
                let started = Instant::now();
                let result = cell_config(base, row, seed)
                    .and_then(|c| train(&c, ds))
                    .map(|(_, out)| out.test.metrics)
                    .map_err(|e| e.to_string());
                let seconds = started.elapsed().as_secs_f64();
                let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
                match &result {
                    Ok(m) => eprintln!(
                        "[{finished}/{}] {} seed {seed}: avg mIoU {:.4} ({seconds:.1}s)",
                        jobs.len(),
                        row.name,
                        m.miou_avg
                    ),
                    Err(e) => eprintln!(
                        "[{finished}/{}] {} seed {seed}: FAILED: {e} ({seconds:.1}s)",
                        jobs.len(),
                        row.name
                    ),
                }
                *outcomes[j].lock().expect("no poisoned cells") =
                    Some(CellOutcome { row: row.name.clone(), seed, result, seconds });
            });
        }
    });
    let cells = outcomes
        .into_iter()
        .map(|m| m.into_inner().expect("no poisoned cells").expect("every job ran"))
        .collect();
    Ok(AblationReport { rows: rows.to_vec(), seeds: seeds.to_vec(), cells })
}

/// Renders the matrix as CSV: per-row mean mIoU (percent) for each head with
/// a delta annotation against the first row, then per-seed values.
pub fn ablation_csv(r: &AblationReport) -> String {
    let mut s = String::from("variant,miou_2d,miou_3d,miou_avg");
    for seed in &r.seeds {
        s.push_str(&format!(",seed{seed}_2d,seed{seed}_3d,seed{seed}_avg"));
    }
    s.push('\n');
    let reference = r.row_mean(0);
    let heads =
        |m: &EvalMetrics| [m.miou_2d * 100.0, m.miou_3d * 100.0, m.miou_avg * 100.0];
    for (ri, row) in r.rows.iter().enumerate() {
        s.push_str(&row.name);
        match r.row_mean(ri) {
            Some(mean) => {
                for (h, v) in heads(&mean).into_iter().enumerate() {
                    s.push(',');
                    s.push_str(&num(v));
                    if ri > 0 {
                        if let Some(base) = &reference {
                            let dv = v - heads(base)[h];
                            let arrow = if dv >= 0.0 { '\u{2191}' } else { '\u{2193}' };
                            s.push_str(&format!(" ({arrow}{:.1})", dv.abs()));
                        }
                    }
                }
            }
            None => s.push_str(",error,error,error"),
        }
        for si in 0..r.seeds.len() {
            let cell = &r.cells[ri * r.seeds.len() + si];
            match &cell.result {
                Ok(m) => {
                    for v in heads(m) {
                        s.push(',');
                        s.push_str(&num(v));
                    }
                }
                Err(_) => s.push_str(",error,error,error"),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.height = 12;
        cfg.data.width = 16;
        cfg.data.n_points = 48;
        cfg.data.classes = 4;
        cfg.data.source_train = 6;
        cfg.data.target_train = 6;
        cfg.data.target_val = 3;
        cfg.data.target_test = 3;
        cfg.model.feature_dim = 4;
        cfg.model.conv_width = 4;
        cfg.model.mlp_width = 8;
        cfg.model.disc_width = 8;
        cfg.model.patch_k = 3;
        cfg.optim.max_iters = 4;
        cfg.run.batch_size = 2;
        cfg.run.eval_every = 2;
        cfg.run.probe_scenes = 2;
        cfg
    }

    fn tiny_dataset(cfg: &ExperimentConfig) -> Dataset {
        Dataset::generate(&cfg.data).expect("tiny dataset generates")
    }

    fn expect_err<T>(r: crate::Result<T>) -> crate::Error {
        match r {
            Err(e) => e,
            Ok(_) => panic!("expected an error"),
        }
    }

    #[test]
    fn poly_schedule_hits_both_endpoints() {
        let o = OptimConfig::default();
        assert_eq!(poly_lr(&o, 0), o.lr);
        assert_eq!(poly_lr(&o, o.max_iters), 0.0);
        let mut prev = f64::INFINITY;
        for i in 0..=o.max_iters {
            let lr = poly_lr(&o, i);
            assert!(lr <= prev, "schedule must not increase");
            prev = lr;
        }
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let o = OptimConfig::default();
        let mut store = crate::networks::ParamStore::new();
        store.register(0, "w", &[2], crate::networks::Init::Zero);
        let mut opt = Adam::new(&o);
        let g = vec![0.25, -3.0];
        opt.step(&mut store, &[("w".to_string(), g.clone())], o.lr).unwrap();
        // With zero moments, bias correction cancels the decay exactly:
        // the step is -lr * g / (|g| + eps).
        for (p, gi) in store.data("w").iter().zip(&g) {
            let want = -o.lr * gi / (gi.abs() + o.eps);
            assert!((p - want).abs() < 1e-15, "got {p}, want {want}");
        }
    }

    #[test]
    fn adam_skips_parameters_without_gradients() {
        let o = OptimConfig::default();
        let mut store = crate::networks::ParamStore::new();
        store.register(3, "w", &[4], crate::networks::Init::FanIn(4));
        let before = store.data("w").to_vec();
        let mut opt = Adam::new(&o);
        opt.step(&mut store, &[], o.lr).unwrap();
        assert_eq!(store.data("w"), &before[..]);
        assert!(opt.m.is_empty());
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let o = OptimConfig::default();
        let mut store = crate::networks::ParamStore::new();
        store.register(0, "w", &[1], crate::networks::Init::Zero);
        let mut opt = Adam::new(&o);
        let err = opt.step(&mut store, &[("w".to_string(), vec![f64::NAN])], o.lr).unwrap_err();
        assert!(err.to_string().contains("'w'"), "error names the parameter: {err}");
        assert_eq!(store.data("w"), &[0.0], "no partial update");
    }

    #[test]
    fn config_defaults_roundtrip_and_reject_unknown_keys() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.fingerprint(), back.fingerprint());
        let err = ExperimentConfig::from_toml_str("[optim]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn config_validation_catches_contradictions() {
        let mut cfg = ExperimentConfig::default();
        cfg.loss.lambda_adv = -0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.run.variant = "dscml".to_string();
        cfg.run.alignment = "c".to_string();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("alignment"), "{err}");
        cfg.run.variant = "dscml+cmal".to_string();
        cfg.validate().unwrap();

        let mut cfg = ExperimentConfig::default();
        cfg.run.variant = "dsml".to_string();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.loss.std_form = "median".to_string();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_config_follows_variant_and_alignment() {
        let mut cfg = tiny_config();
        cfg.run.variant = "scml".to_string();
        let mc = cfg.model_config().unwrap();
        assert!(!mc.offset_head);
        assert!(mc.pairings.is_empty());

        cfg.run.variant = "dscml+cmal".to_string();
        cfg.run.alignment = "a".to_string();
        let mc = cfg.model_config().unwrap();
        assert!(mc.offset_head);
        assert_eq!(mc.pairings, vec!["s2d_t2d".to_string(), "s3d_t3d".to_string()]);
        cfg.run.alignment = "c".to_string();
        assert_eq!(cfg.model_config().unwrap().pairings.len(), 4);
    }

    /// The update is audited by replaying the loss assembly on the pre-step
    /// parameters: same bindings, same batch, bit-identical total.
    #[test]
    fn generator_step_matches_independent_recomputation() {
        let cfg = tiny_config();
        let ds = tiny_dataset(&cfg);
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        let snapshot: Vec<(String, Vec<f64>)> = t
            .model
            .store
            .names()
            .map(|n| (n.to_string(), t.model.store.data(n).to_vec()))
            .collect();
        let src = draw_batch(&mut t.src_rng.clone(), ds.split("source-train"), 2, 0);
        let trg = draw_batch(&mut t.trg_rng.clone(), ds.split("target-train"), 2, 0);
        let report = t.generator_step(&src, &trg, 1e-3).unwrap();

        // Rebuild the pre-step model and re-evaluate the same batch.
        let mut fresh = Trainer::new(&cfg, &ds).unwrap();
        for (name, data) in snapshot {
            fresh.model.store.set_data(&name, data);
        }
        let tape = Tape::new();
        let bound = fresh.model.store.bind_with(&tape, |n| !is_disc(n));
        let parts = fresh.generator_losses(&bound, &src, &trg).unwrap();
        assert_eq!(parts.report.total, report.total, "recomputed total must match bit-for-bit");
        assert_eq!(parts.report.seg, report.seg);
        assert_eq!(parts.report.std_src, report.std_src);
    }

    fn param_checksum(store: &crate::networks::ParamStore, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h = Sha256::new();
        for name in store.names() {
            if filter(name) {
                for v in store.data(name) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest is long enough"))
    }

    #[test]
    fn steps_touch_only_their_own_parameters() {
        let mut cfg = tiny_config();
        cfg.run.variant = "dscml+cmal".to_string();
        let ds = tiny_dataset(&cfg);
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        let src = draw_batch(&mut t.src_rng.clone(), ds.split("source-train"), 2, 0);
        let trg = draw_batch(&mut t.trg_rng.clone(), ds.split("target-train"), 2, 0);

        let d_before = param_checksum(&t.model.store, is_disc);
        let g_before = param_checksum(&t.model.store, |n| !is_disc(n));
        t.generator_step(&src, &trg, 1e-3).unwrap();
        assert_eq!(param_checksum(&t.model.store, is_disc), d_before, "generator step left D alone");
        assert_ne!(param_checksum(&t.model.store, |n| !is_disc(n)), g_before, "G moved");

        let g_mid = param_checksum(&t.model.store, |n| !is_disc(n));
        t.discriminator_step(&src, &trg, 1e-3).unwrap();
        assert_eq!(param_checksum(&t.model.store, |n| !is_disc(n)), g_mid, "discriminator step left G alone");
        assert_ne!(param_checksum(&t.model.store, is_disc), d_before, "D moved");
    }

    /// A fresh discriminator scores everything 0.5, so each pairing's loss
    /// starts at exactly 2 ln 2.
    #[test]
    fn fresh_discriminator_loss_is_two_ln_two_per_pairing() {
        let mut cfg = tiny_config();
        cfg.run.variant = "dscml+cmal".to_string();
        let ds = tiny_dataset(&cfg);
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        let src = draw_batch(&mut t.src_rng.clone(), ds.split("source-train"), 2, 0);
        let trg = draw_batch(&mut t.trg_rng.clone(), ds.split("target-train"), 2, 0);
        let d = t.discriminator_step(&src, &trg, 0.0).unwrap();
        let want = 2.0 * (2.0f64).ln() * 2.0; // two pairings under option "b"
        assert!((d.loss_d - want).abs() < 1e-9, "got {}, want {want}", d.loss_d);
        for (pairing, rs, rt) in &d.rho {
            assert_eq!((*rs, *rt), (0.5, 0.5), "fresh scores are exactly 0.5 for {pairing}");
        }
    }

    /// On fixed, well-separated inputs the discriminator learns: after 200
    /// Adam steps its loss drops well below the fresh-start value.
    #[test]
    fn discriminator_separates_fixed_predictions() {
        let mc = ModelConfig {
            classes: 4,
            feature_dim: 4,
            conv_width: 4,
            mlp_width: 8,
            disc_width: 8,
            patch_k: 3,
            offset_head: false,
            pairings: vec!["s2d_t3d".to_string()],
        };
        let mut model = Model::new(mc, 11).unwrap();
        // Source rows peak on class 0, target rows on class 3.
        let mut src = Vec::new();
        let mut trg = Vec::new();
        for i in 0..24 {
            let bump = 0.01 * (i % 5) as f64;
            src.extend_from_slice(&[0.85 - bump, 0.05, 0.05, 0.05 + bump]);
            trg.extend_from_slice(&[0.05 + bump, 0.05, 0.05, 0.85 - bump]);
        }
        let o = OptimConfig { lr: 3e-3, ..OptimConfig::default() };
        let mut opt = Adam::new(&o);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let tape = Tape::new();
            let bound = model.store.bind_with(&tape, is_disc);
            let s = model.discriminate(&bound, "s2d_t3d", &Tensor::constant(&[24, 4], src.clone())).0;
            let t = model.discriminate(&bound, "s2d_t3d", &Tensor::constant(&[24, 4], trg.clone())).0;
            let (d, _g) = losses::loss_adv(&s, &t, false);
            last = d.data()[0];
            first.get_or_insert(last);
            let grads = tape.backward(&d).unwrap();
            let dl = collect_grads(&model.store, &bound, &grads, is_disc);
            opt.step(&mut model.store, &dl, o.lr).unwrap();
        }
        let first = first.unwrap();
        assert!((first - 2.0 * (2.0f64).ln()).abs() < 1e-9, "starts at 2 ln 2, got {first}");
        assert!(last < 0.5 * first, "after 200 steps ({last}) well below the start ({first})");
    }

    #[test]
    fn metrics_stream_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_config();
        let ds = tiny_dataset(&cfg);
        let (_, a) = train(&cfg, &ds).unwrap();
        let (_, b) = train(&cfg, &ds).unwrap();
        assert_eq!(a.lines, b.lines, "same config, same bytes");

        let mut cfg2 = cfg.clone();
        cfg2.run.master_seed = 2;
        let (_, c) = train(&cfg2, &ds).unwrap();
        assert_ne!(a.lines, c.lines, "a different seed must change the stream");
        assert!(a.lines.iter().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    }

    /// With offsets frozen at zero, the deformable variant walks exactly the
    /// fixed-grid path: every metrics byte matches the scml run.
    #[test]
    fn frozen_offsets_reproduce_scml() {
        let mut scml = tiny_config();
        scml.run.variant = "scml".to_string();
        let ds = tiny_dataset(&scml);
        let (_, a) = train(&scml, &ds).unwrap();

        let mut frozen = tiny_config();
        frozen.run.variant = "dscml".to_string();
        frozen.run.freeze_offsets_at_zero = true;
        let (_, b) = train(&frozen, &ds).unwrap();
        assert_eq!(a.lines, b.lines);
    }

    #[test]
    fn baseline_ignores_target_scenes() {
        let mut cfg = tiny_config();
        cfg.run.variant = "baseline".to_string();
        let ds = tiny_dataset(&cfg);
        let (t, out) = train(&cfg, &ds).unwrap();
        assert_eq!(t.iteration, cfg.optim.max_iters);
        // No mimicry, no adversary: those fields stay identically zero.
        for line in &out.lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            if v.get("loss_total").is_some() {
                assert_eq!(v["loss_std_src"].as_f64(), Some(0.0));
                assert_eq!(v["loss_std_trg"].as_f64(), Some(0.0));
                assert!(v.get("loss_d").is_none());
            }
        }
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_stream() {
        let mut cfg = tiny_config();
        cfg.optim.max_iters = 6;
        cfg.run.checkpoint_every = 3;
        let ds = tiny_dataset(&cfg);

        let mut full_lines = Vec::new();
        let mut full = Trainer::new(&cfg, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        full.run(&mut |s: &str| full_lines.push(s.to_string()), Some(dir.path())).unwrap();

        let mut resumed = Trainer::resume(&cfg, &ds, &dir.path().join("checkpoint-r0-000003")).unwrap();
        assert_eq!(resumed.iteration, 3);
        let mut tail = Vec::new();
        resumed.run(&mut |s: &str| tail.push(s.to_string()), None).unwrap();

        let full_tail: Vec<&String> = full_lines
            .iter()
            .filter(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["iteration"].as_u64().unwrap() > 3 || v.get("eval").map_or(false, |e| e["split"] == "target-test")
            })
            .collect();
        assert_eq!(tail.len(), full_tail.len());
        for (a, b) in tail.iter().zip(full_tail) {
            assert_eq!(a, b, "resumed stream must match the uninterrupted one");
        }
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let mut cfg = tiny_config();
        cfg.run.checkpoint_every = 2;
        cfg.optim.max_iters = 2;
        let ds = tiny_dataset(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        t.run(&mut |_s: &str| {}, Some(dir.path())).unwrap();
        let mut other = cfg.clone();
        other.optim.lr = 5e-4;
        let err = expect_err(Trainer::resume(&other, &ds, &dir.path().join("checkpoint-r0-000002")));
        assert!(err.to_string().contains("different configuration"), "{err}");
    }

    #[test]
    fn points_cap_subsamples_without_replacement() {
        let cfg = tiny_config();
        let ds = tiny_dataset(&cfg);
        let sample = &ds.split("source-train")[0];
        let vp = ValidPoints::of(sample);
        let mut rng = stream(9, "test/subsample");
        let sub = subsample_points(ValidPoints::of(sample), 5, &mut rng);
        assert_eq!(sub.len(), 5);
        let mut seen = std::collections::HashSet::new();
        for &i in sub.indices.iter() {
            assert!(seen.insert(i), "indices must be distinct");
            assert!(vp.indices.contains(&i));
        }
        let mut sorted = sub.indices.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, sub.indices.to_vec(), "original order preserved");
        // A cap at or above the population is the identity.
        let full = subsample_points(ValidPoints::of(sample), vp.len(), &mut rng);
        assert_eq!(full.indices, vp.indices);
    }

    #[test]
    fn training_rejects_an_all_empty_batch() {
        let cfg = tiny_config();
        let ds = tiny_dataset(&cfg);
        let t = Trainer::new(&cfg, &ds).unwrap();
        let sample = &ds.split("source-train")[0];
        let empty = ValidPoints { indices: Vec::new().into(), proj: Vec::new(), pixels: Vec::new() };
        let tape = Tape::new();
        let bound = t.model.store.bind_with(&tape, |n| !is_disc(n));
        let err = expect_err(t.generator_losses(&bound, &[(0, empty)], &[(0, ValidPoints::of(sample))]));
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn evaluation_needs_a_labeled_split() {
        let cfg = tiny_config();
        let ds = tiny_dataset(&cfg);
        let t = Trainer::new(&cfg, &ds).unwrap();
        let err = expect_err(t.evaluate("target-train"));
        assert!(err.to_string().contains("labels"), "{err}");
        assert_eq!(ds.sealed.reads(), 0, "failed evaluation must not unseal anything");
        t.evaluate("target-val").unwrap();
    }

    #[test]
    fn pseudo_label_threshold_controls_selection() {
        let mut cfg = tiny_config();
        cfg.run.variant = "dscml+cmal+pl".to_string();
        let ds = tiny_dataset(&cfg);
        let t = Trainer::new(&cfg, &ds).unwrap();

        let mut all = t;
        all.cfg.pl.threshold = 0.0;
        let pl = all.pseudo_labels().unwrap();
        assert_eq!(pl.selected, pl.candidates, "threshold 0 keeps every valid point");
        assert!(pl.candidates > 0);

        all.cfg.pl.threshold = 1.0 + 1e-9;
        let none = all.pseudo_labels().unwrap();
        assert_eq!(none.selected, 0, "no probability can exceed 1");
    }

    #[test]
    fn impossible_threshold_skips_the_self_training_round() {
        let mut cfg = tiny_config();
        cfg.run.variant = "dscml+cmal+pl".to_string();
        cfg.pl.threshold = 1.5;
        let ds = tiny_dataset(&cfg);
        let (t, out) = train(&cfg, &ds).unwrap();
        assert_eq!(t.round, 0, "round was skipped");
        let pl_line = out
            .lines
            .iter()
            .find(|l| l.contains("pseudo_labels"))
            .expect("the skipped round is still reported");
        let v: serde_json::Value = serde_json::from_str(pl_line).unwrap();
        assert_eq!(v["pseudo_labels"]["selected"].as_u64(), Some(0));
    }

    #[test]
    fn permissive_threshold_runs_the_self_training_round() {
        let mut cfg = tiny_config();
        cfg.run.variant = "dscml+cmal+pl".to_string();
        cfg.pl.threshold = 0.0;
        cfg.optim.max_iters = 2;
        cfg.run.eval_every = 2;
        let ds = tiny_dataset(&cfg);
        let (t, out) = train(&cfg, &ds).unwrap();
        assert_eq!(t.round, 1);
        assert_eq!(t.iteration, 2, "the extra round ran its own schedule");
        let rounds: Vec<u64> = out
            .lines
            .iter()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["round"].as_u64().unwrap())
            .collect();
        assert!(rounds.contains(&0) && rounds.contains(&1));
        let pseudo_present = out.lines.iter().any(|l| l.contains("\"loss_pseudo\""));
        assert!(pseudo_present, "round 1 iterations carry the pseudo-label term");
        assert_eq!(ds.sealed.reads(), 0, "self-training never unseals true labels");
    }

    #[test]
    fn single_cell_matrix_equals_direct_training() {
        let cfg = tiny_config();
        let ds = tiny_dataset(&cfg);
        let rows = vec![AblationRow::plain("dscml", "dscml")];
        let report = run_ablation(&cfg, &rows, &[cfg.run.master_seed], &ds, 1).unwrap();
        let direct = train(&cfg, &ds).unwrap().1.test.metrics;
        assert_eq!(report.cells.len(), 1);
        assert_eq!(*report.cells[0].result.as_ref().unwrap(), direct);
    }

    #[test]
    fn ablation_isolates_failures_and_reports_them() {
        let cfg = tiny_config();
        let ds = tiny_dataset(&cfg);
        let rows = vec![
            AblationRow::plain("baseline", "baseline"),
            AblationRow::plain("broken", "no-such-variant"),
        ];
        let report = run_ablation(&cfg, &rows, &[1], &ds, 2).unwrap();
        assert!(report.cells[0].result.is_ok(), "the healthy row still ran");
        assert!(report.cells[1].result.is_err());
        let csv = ablation_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3, "header plus one line per row");
        assert!(lines[1].starts_with("baseline,"));
        assert!(lines[2].starts_with("broken,error"));
    }

    #[test]
    fn ablation_results_do_not_depend_on_thread_count() {
        let cfg = tiny_config();
        let ds = tiny_dataset(&cfg);
        let rows = vec![
            AblationRow::plain("baseline", "baseline"),
            AblationRow::plain("scml", "scml"),
        ];
        let seq = run_ablation(&cfg, &rows, &[1, 2], &ds, 1).unwrap();
        let par = run_ablation(&cfg, &rows, &[1, 2], &ds, 4).unwrap();
        for (a, b) in seq.cells.iter().zip(&par.cells) {
            assert_eq!(a.result.as_ref().unwrap(), b.result.as_ref().unwrap());
        }
        let csv = ablation_csv(&seq);
        assert_eq!(csv, ablation_csv(&par));
        let second_row = csv.lines().nth(2).expect("two data rows");
        assert!(
            second_row.contains('\u{2191}') || second_row.contains('\u{2193}'),
            "non-reference rows carry a delta annotation: {second_row}"
        );
    }

    #[test]
    fn full_precision_rendering_is_pinned() {
        assert_eq!(num(0.5), "5.0000000000000000e-1");
        assert_eq!(num(2.0f64.ln()), "6.9314718055994529e-1");
    }
}
