//! Alternating adversarial training.
//!
//! Every step runs three stages in order: both discriminators for `n_critic`
//! updates, then the coarse generator, then the fine generator. While one
//! side is optimized the other runs with detached parameters and batch
//! statistics that are not written back, so its state is bit-for-bit
//! unchanged by the stage.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_network_checked, restore_store, save_network, NetworkKind};
use crate::data::{images_to_tensor, masks_to_tensor, Patch};
use crate::discriminators::{build_discriminator, Discriminator, DiscriminatorSpec};
use crate::error::{Error, Result};
use crate::generators::{validate_pair, GeneratorPair, GeneratorSpec};
use crate::losses::{
    composite, generator_objective, hinge_d, hinge_g, reconstruction, scalar, weighted_feature_matching,
    LossBreakdown, LossWeights, ScaleLosses,
};
use crate::nn::{area_downsample, ParamStore, Pass};

pub const STATE_FILE: &str = "state.json";
pub const STATE_VERSION: u32 = 1;
pub const LOSS_LOG: &str = "losses.csv";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_FILE: &str = "latest";
pub const DIAGNOSTIC_DIR: &str = "diagnostic";
pub const DESK_BASE_CHANNELS: usize = 16;
pub const DESK_EPOCHS: u64 = 1;

/// Architecture of all four networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpecs {
    pub g_coarse: GeneratorSpec,
    pub g_fine: GeneratorSpec,
    pub d_coarse: DiscriminatorSpec,
    pub d_fine: DiscriminatorSpec,
}

impl Default for NetworkSpecs {
    fn default() -> Self {
        Self {
            g_coarse: GeneratorSpec::coarse(),
            g_fine: GeneratorSpec::fine(),
            d_coarse: DiscriminatorSpec::coarse(),
            d_fine: DiscriminatorSpec::fine(),
        }
    }
}

impl NetworkSpecs {
    /// Same topology with 16 base channels everywhere.
    pub fn desk(self) -> Self {
        Self {
            g_coarse: self.g_coarse.desk(),
            g_fine: self.g_fine.desk(),
            d_coarse: self.d_coarse.desk(),
            d_fine: self.d_fine.desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_pair(&self.g_coarse, &self.g_fine)?;
        self.d_coarse.validate()?;
        self.d_fine.validate()?;
        for (g, d, scale) in [(&self.g_coarse, &self.d_coarse, "coarse"), (&self.g_fine, &self.d_fine, "fine")] {
            if g.input_size != d.input_size {
                return Err(Error::Config(format!(
                    "{scale} discriminator input size {} differs from its generator's {}",
                    d.input_size, g.input_size
                )));
            }
            if g.in_channels + g.out_channels != d.in_channels {
                return Err(Error::Config(format!(
                    "{scale} discriminator expects {} channels, generator pair gives {}",
                    d.in_channels,
                    g.in_channels + g.out_channels
                )));
            }
        }
        if self.g_coarse.in_channels != self.g_fine.in_channels {
            return Err(Error::Config("generators must share input channels".into()));
        }
        Ok(())
    }
}

/// The four networks.
#[derive(Debug)]
pub struct Gan {
    pub generators: GeneratorPair,
    pub d_coarse: Discriminator,
    pub d_fine: Discriminator,
}

impl Gan {
    /// Build all networks from one seeded stream, in the order G_c, G_f,
    /// D_c, D_f.
    pub fn new(specs: &NetworkSpecs, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        specs.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generators = GeneratorPair::new(specs.g_coarse, specs.g_fine, dtype, device, &mut rng)?;
        let d_coarse = build_discriminator(specs.d_coarse, dtype, device, &mut rng)?;
        let d_fine = build_discriminator(specs.d_fine, dtype, device, &mut rng)?;
        Ok(Self {
            generators,
            d_coarse,
            d_fine,
        })
    }

    pub fn specs(&self) -> NetworkSpecs {
        NetworkSpecs {
            g_coarse: *self.generators.coarse.spec(),
            g_fine: *self.generators.fine.spec(),
            d_coarse: *self.d_coarse.spec(),
            d_fine: *self.d_fine.spec(),
        }
    }

    pub fn store(&self, kind: NetworkKind) -> &ParamStore {
        match kind {
            NetworkKind::CoarseGenerator => self.generators.coarse.params(),
            NetworkKind::FineGenerator => self.generators.fine.params(),
            NetworkKind::CoarseDiscriminator => self.d_coarse.params(),
            NetworkKind::FineDiscriminator => self.d_fine.params(),
        }
    }

    fn spec_json(&self, kind: NetworkKind) -> Result<serde_json::Value> {
        let s = self.specs();
        Ok(match kind {
            NetworkKind::CoarseGenerator => serde_json::to_value(s.g_coarse)?,
            NetworkKind::FineGenerator => serde_json::to_value(s.g_fine)?,
            NetworkKind::CoarseDiscriminator => serde_json::to_value(s.d_coarse)?,
            NetworkKind::FineDiscriminator => serde_json::to_value(s.d_fine)?,
        })
    }

    /// Deep copy of every parameter and buffer, keyed by network then name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for kind in NetworkKind::ALL {
            for (name, t) in self.store(kind).named_tensors() {
                let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                out.insert(format!("{}/{name}", kind.name()), v);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adaptive moment estimation with bias correction, one instance per
/// network. Parameters absent from a gradient store are treated as having a
/// zero gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, var) in store.params() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.zeros_like()?.detach(),
            };
            let m = match self.m.get(name) {
                Some(m) => (m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?,
                None => g.affine(1.0 - beta1, 0.0)?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => (v.affine(beta2, 0.0)? + g2.affine(1.0 - beta2, 0.0)?)?,
                None => g2.affine(1.0 - beta2, 0.0)?,
            };
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, eps)?;
            let update = (m.affine(lr / bc1, 0.0)? / denom)?;
            var.set(&(var.as_detached_tensor() - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moments keyed `m.<param>` / `v.<param>`.
    pub fn named_moments(&self) -> Vec<(String, Tensor)> {
        self.m
            .iter()
            .map(|(k, t)| (format!("m.{k}"), t.clone()))
            .chain(self.v.iter().map(|(k, t)| (format!("v.{k}"), t.clone())))
            .collect()
    }

    pub fn restore(&mut self, t: u64, moments: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (k, v) in moments {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), v.clone());
            } else {
                return Err(Error::Data(format!("unknown optimizer entry `{k}`")));
            }
        }
        if self.m.len() != self.v.len() {
            return Err(Error::Data("optimizer first/second moments disagree".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub n_critic: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Shrink every network to 16 base channels and train one epoch.
    pub desk_scale: bool,
    /// Stop after this many steps regardless of `epochs`.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-7,
            batch_size: 24,
            epochs: 100,
            n_critic: 2,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1000,
            desk_scale: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr) || !positive(self.adam_eps) {
            return Err(Error::Config("lr and adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.n_critic == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size, epochs, n_critic and checkpoint_every must be >= 1".into(),
            ));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be >= 1 when set".into()));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Apply the desk-scale reductions when the flag is set.
    pub fn resolve(&self, specs: &NetworkSpecs) -> (TrainConfig, NetworkSpecs) {
        if !self.desk_scale {
            return (*self, *specs);
        }
        let mut cfg = *self;
        cfg.epochs = cfg.epochs.min(DESK_EPOCHS);
        let mut s = *specs;
        s.g_coarse.base_channels = DESK_BASE_CHANNELS;
        s.g_fine.base_channels = DESK_BASE_CHANNELS;
        s.d_coarse.base_channels = DESK_BASE_CHANNELS;
        s.d_fine.base_channels = DESK_BASE_CHANNELS;
        (cfg, s)
    }
}

#[derive(Clone, Debug)]
pub struct Optimizers {
    pub g_coarse: Adam,
    pub g_fine: Adam,
    pub d_coarse: Adam,
    pub d_fine: Adam,
}

impl Optimizers {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            g_coarse: Adam::new(cfg),
            g_fine: Adam::new(cfg),
            d_coarse: Adam::new(cfg),
            d_fine: Adam::new(cfg),
        }
    }

    pub fn get(&self, kind: NetworkKind) -> &Adam {
        match kind {
            NetworkKind::CoarseGenerator => &self.g_coarse,
            NetworkKind::FineGenerator => &self.g_fine,
            NetworkKind::CoarseDiscriminator => &self.d_coarse,
            NetworkKind::FineDiscriminator => &self.d_fine,
        }
    }

    fn get_mut(&mut self, kind: NetworkKind) -> &mut Adam {
        match kind {
            NetworkKind::CoarseGenerator => &mut self.g_coarse,
            NetworkKind::FineGenerator => &mut self.g_fine,
            NetworkKind::CoarseDiscriminator => &mut self.d_coarse,
            NetworkKind::FineDiscriminator => &mut self.d_fine,
        }
    }
}

/// Everything needed to continue training exactly where it stopped. The
/// batch order is a pure function of `(config.seed, epoch)`, so the step
/// counter is the whole random state.
#[derive(Debug)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub config: TrainConfig,
    pub gan: Gan,
    pub optimizers: Optimizers,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    version: u32,
    step: u64,
    epoch: u64,
    config: TrainConfig,
    specs: NetworkSpecs,
}

impl TrainState {
    pub fn new(config: TrainConfig, specs: &NetworkSpecs, device: &Device) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            step: 0,
            epoch: 0,
            config,
            gan: Gan::new(specs, DType::F32, device, config.seed)?,
            optimizers: Optimizers::new(config.adam()),
        })
    }

    /// Write all four networks, their optimizer moments and `state.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for kind in NetworkKind::ALL {
            let opt = self.optimizers.get(kind);
            let extra = BTreeMap::from([("adam_steps".to_string(), opt.steps().to_string())]);
            save_network(
                &dir.join(kind.file_name()),
                kind,
                &self.gan.spec_json(kind)?,
                self.gan.store(kind),
                &opt.named_moments(),
                &extra,
            )?;
        }
        let state = StateFile {
            version: STATE_VERSION,
            step: self.step,
            epoch: self.epoch,
            config: self.config,
            specs: self.gan.specs(),
        };
        let path = dir.join(STATE_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&state)?).map_err(|e| Error::io(&path, e))
    }

    /// Load a checkpoint directory, refusing one whose specs differ from
    /// `specs`. The stored training config is kept, so a resumed run
    /// continues the original schedule.
    pub fn load(dir: &Path, specs: &NetworkSpecs, device: &Device) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let state: StateFile =
            serde_json::from_slice(&raw).map_err(|e| Error::checkpoint(&path, format!("corrupt state: {e}")))?;
        if state.version != STATE_VERSION {
            return Err(Error::checkpoint(
                &path,
                format!("state version {} is not supported (expected {STATE_VERSION})", state.version),
            ));
        }
        if &state.specs != specs {
            return Err(Error::checkpoint(
                &path,
                "incompatible spec: checkpoint was written for a different architecture",
            ));
        }
        let mut out = TrainState::new(state.config, specs, device)?;
        out.step = state.step;
        out.epoch = state.epoch;
        for kind in NetworkKind::ALL {
            let file_path = dir.join(kind.file_name());
            let file = read_network_checked(&file_path, kind, &out.gan.spec_json(kind)?, device)?;
            restore_store(&file_path, out.gan.store(kind), &file)?;
            let t: u64 = file
                .header
                .extra
                .get("adam_steps")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::checkpoint(&file_path, "missing optimizer step count"))?;
            let opt = out.optimizers.get_mut(kind);
            opt.restore(t, &file.optimizer)?;
        }
        Ok(out)
    }
}

/// A fine-scale training batch: images in [-1, 1], vessel maps in {-1, 1}.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
}

impl Batch {
    pub fn from_patches(patches: &[&Patch], device: &Device) -> Result<Self> {
        let imgs: Vec<_> = patches.iter().map(|p| &p.fundus).collect();
        let masks: Vec<_> = patches.iter().map(|p| &p.vessel_gt).collect();
        Ok(Self {
            x: images_to_tensor(&imgs, device)?,
            y: masks_to_tensor(&masks, device)?,
        })
    }

    /// Coarse pair: 2x area-downsampled image, and the downsampled vessel map
    /// re-thresholded at 0 back to {-1, 1}.
    pub fn coarse(&self) -> Result<(Tensor, Tensor)> {
        let xc = area_downsample(&self.x)?;
        let yc = area_downsample(&self.y)?
            .gt(0.0)?
            .to_dtype(self.y.dtype())?
            .affine(2.0, -1.0)?;
        Ok((xc, yc))
    }

    pub fn len(&self) -> usize {
        self.x.dims().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn finite(step: u64, what: &str, t: &Tensor) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("{what} = {v}"),
        });
    }
    Ok(v)
}

/// Stage 1: `n_critic` Adam updates of both discriminators on the hinge loss.
/// Generators run frozen and their outputs are computed once. Returns the
/// summed hinge loss of the last update (measured before it was applied).
pub fn discriminator_stage(state: &mut TrainState, batch: &Batch, xc: &Tensor, yc: &Tensor) -> Result<f64> {
    let gan = &state.gan;
    let cascade = gan.generators.forward_cascade(&batch.x, Pass::FROZEN)?;
    let fake_c = cascade.coarse.seg_map.detach();
    let fake_f = cascade.fine.seg_map.detach();
    let mut last = 0.0;
    for _ in 0..state.config.n_critic {
        let lf = hinge_d(
            &gan.d_fine.forward(&batch.x, &batch.y, Pass::TRAIN)?,
            &gan.d_fine.forward(&batch.x, &fake_f, Pass::TRAIN)?,
        )?;
        let lc = hinge_d(
            &gan.d_coarse.forward(xc, yc, Pass::TRAIN)?,
            &gan.d_coarse.forward(xc, &fake_c, Pass::TRAIN)?,
        )?;
        let loss = (lf + lc)?;
        last = finite(state.step, "discriminator hinge loss", &loss)?;
        let grads = loss.backward()?;
        state.optimizers.d_fine.step(gan.d_fine.params(), &grads)?;
        state.optimizers.d_coarse.step(gan.d_coarse.params(), &grads)?;
    }
    Ok(last)
}

/// Generator-side losses of one scale. `adv_d` is the discriminator hinge
/// loss on the same real/fake pair, recorded for the log only.
struct ScaleTerms {
    objective: Tensor,
    parts: ScaleLosses,
}

fn scale_terms(
    d: &Discriminator,
    x: &Tensor,
    y: &Tensor,
    fake: &Tensor,
    w: &LossWeights,
    pass: Pass,
) -> Result<ScaleTerms> {
    let (real_logits, real_taps) = d.forward_with_taps(x, y, pass)?;
    let (fake_logits, fake_taps) = d.forward_with_taps(x, fake, pass)?;
    let adv_d = hinge_d(&real_logits, &fake_logits)?;
    let adv_g = hinge_g(&fake_logits)?;
    let rec = reconstruction(fake, y)?;
    let wfm = weighted_feature_matching(&real_taps, &fake_taps, w)?;
    let objective = generator_objective(&adv_g, Some(&rec), &wfm, w)?;
    Ok(ScaleTerms {
        objective,
        parts: ScaleLosses::new(scalar(&adv_d)?, scalar(&adv_g)?, scalar(&rec)?, scalar(&wfm)?),
    })
}

/// Stage 2: one Adam update of G_c against the frozen D_c.
pub fn coarse_generator_stage(state: &mut TrainState, xc: &Tensor, yc: &Tensor) -> Result<ScaleLosses> {
    let gan = &state.gan;
    let w = state.config.weights;
    let out = gan.generators.coarse.forward(xc, Pass::TRAIN)?;
    let terms = scale_terms(&gan.d_coarse, xc, yc, &out.seg_map, &w, Pass::FROZEN)?;
    finite(state.step, "coarse generator objective", &terms.objective)?;
    let grads = terms.objective.backward()?;
    state.optimizers.g_coarse.step(gan.generators.coarse.params(), &grads)?;
    Ok(terms.parts)
}

/// Stage 3: one Adam update of G_f against the frozen D_f. G_c runs frozen,
/// so its hand-off carries no gradient.
pub fn fine_generator_stage(state: &mut TrainState, batch: &Batch, xc: &Tensor) -> Result<ScaleLosses> {
    let gan = &state.gan;
    let w = state.config.weights;
    let handoff = gan.generators.coarse.forward(xc, Pass::FROZEN)?.handoff.detach();
    let out = gan.generators.fine.forward(&batch.x, Some(&handoff), Pass::TRAIN)?;
    let terms = scale_terms(&gan.d_fine, &batch.x, &batch.y, &out.seg_map, &w, Pass::FROZEN)?;
    finite(state.step, "fine generator objective", &terms.objective)?;
    let grads = terms.objective.backward()?;
    state.optimizers.g_fine.step(gan.generators.fine.params(), &grads)?;
    Ok(terms.parts)
}

/// One D -> G_c -> G_f cycle. The reported generator terms are measured
/// against the already-updated discriminators; `adv_d` is the hinge loss of
/// the updated discriminators on the pre-update generator outputs.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossBreakdown> {
    let (xc, yc) = batch.coarse()?;
    discriminator_stage(state, batch, &xc, &yc)?;
    let coarse = coarse_generator_stage(state, &xc, &yc)?;
    let fine = fine_generator_stage(state, batch, &xc)?;
    let out = composite(&[coarse, fine], &state.config.weights)?;
    if !out.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            detail: format!("{out:?}"),
        });
    }
    Ok(out)
}

/// The full objective for both scales as one differentiable scalar, with
/// every network tracked: discriminator hinge terms plus the weighted
/// generator terms. Used to check that gradients reach every parameter.
pub fn composite_objective(gan: &Gan, batch: &Batch, w: &LossWeights, pass: Pass) -> Result<Tensor> {
    let (xc, yc) = batch.coarse()?;
    let cascade = gan.generators.forward_cascade(&batch.x, pass)?;
    let mut total: Option<Tensor> = None;
    for (d, x, y, fake) in [
        (&gan.d_coarse, &xc, &yc, &cascade.coarse.seg_map),
        (&gan.d_fine, &batch.x, &batch.y, &cascade.fine.seg_map),
    ] {
        let (real_logits, real_taps) = d.forward_with_taps(x, y, pass)?;
        let (fake_logits, fake_taps) = d.forward_with_taps(x, fake, pass)?;
        let adv_d = hinge_d(&real_logits, &fake_logits)?;
        let g = generator_objective(
            &hinge_g(&fake_logits)?,
            Some(&reconstruction(fake, y)?),
            &weighted_feature_matching(&real_taps, &fake_taps, w)?,
            w,
        )?;
        let scale = (adv_d + g)?;
        total = Some(match total {
            Some(t) => (t + scale)?,
            None => scale,
        });
    }
    Ok(total.expect("two scales"))
}

/// Patch order of one epoch: a permutation drawn from `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

pub fn steps_per_epoch(n_patches: usize, batch_size: usize) -> u64 {
    n_patches.div_ceil(batch_size) as u64
}

/// Artifacts of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub losses: Vec<LossBreakdown>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Serialize)]
struct EpochSummary {
    epoch: u64,
    steps: u64,
    mean: LossBreakdown,
}

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step-{step:08}"))
}

/// Directory named by `checkpoints/latest`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let pointer = out_dir.join(CHECKPOINT_DIR).join(LATEST_FILE);
    if !pointer.exists() {
        return Ok(None);
    }
    let name = fs::read_to_string(&pointer).map_err(|e| Error::io(&pointer, e))?;
    Ok(Some(out_dir.join(CHECKPOINT_DIR).join(name.trim())))
}

fn write_checkpoint(state: &TrainState, out_dir: &Path) -> Result<PathBuf> {
    let dir = checkpoint_dir(out_dir, state.step);
    state.save(&dir)?;
    let pointer = out_dir.join(CHECKPOINT_DIR).join(LATEST_FILE);
    let name = dir.file_name().expect("named dir").to_string_lossy().into_owned();
    fs::write(&pointer, name).map_err(|e| Error::io(&pointer, e))?;
    Ok(dir)
}

/// Keep log rows up to and including `step`, so a resumed run appends
/// without duplicates.
fn truncate_loss_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let keep = match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
            Some(s) => s <= step,
            None => true,
        };
        if keep {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train on `patches`, writing `losses.csv` (one row per step, 1-based),
/// `epochs.jsonl` and checkpoints under `out_dir`. Passing `resume`
/// continues from that state. A non-finite loss stores the pre-step state
/// under `diagnostic/` and returns [`Error::NonFinite`].
pub fn train(
    state: TrainState,
    patches: &[&Patch],
    out_dir: &Path,
    device: &Device,
) -> Result<TrainOutcome> {
    let mut state = state;
    let cfg = state.config;
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::Data("no training patches".into()));
    }
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out_dir, e))?;
    let spe = steps_per_epoch(patches.len(), cfg.batch_size);
    let mut total = cfg.epochs * spe;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }

    let log_path = out_dir.join(LOSS_LOG);
    truncate_loss_log(&log_path, state.step)?;
    let fresh = !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh {
        writeln!(log, "{}", LossBreakdown::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
    }
    let epoch_path = out_dir.join(EPOCH_LOG);
    let mut epoch_log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&epoch_path)
        .map_err(|e| Error::io(&epoch_path, e))?;

    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    let mut epoch_acc: Vec<LossBreakdown> = Vec::new();
    let mut order = epoch_order(patches.len(), cfg.seed, state.step / spe);
    while state.step < total {
        let epoch = state.step / spe;
        let within = (state.step % spe) as usize;
        if within == 0 {
            order = epoch_order(patches.len(), cfg.seed, epoch);
        }
        let lo = within * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(patches.len());
        let picked: Vec<&Patch> = order[lo..hi].iter().map(|&i| patches[i]).collect();
        let batch = Batch::from_patches(&picked, device)?;
        let loss = match train_step(&mut state, &batch) {
            Ok(l) => l,
            Err(e @ Error::NonFinite { .. }) => {
                let dir = out_dir.join(DIAGNOSTIC_DIR);
                state.save(&dir)?;
                let note = dir.join("error.txt");
                fs::write(&note, e.to_string()).map_err(|io| Error::io(&note, io))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        state.step += 1;
        state.epoch = state.step / spe;
        writeln!(log, "{}", loss.csv_row(state.step)).map_err(|e| Error::io(&log_path, e))?;
        losses.push(loss);
        epoch_acc.push(loss);
        if state.step % spe == 0 || state.step == total {
            let n = epoch_acc.len() as f64;
            let mean = epoch_acc.iter().fold(LossBreakdown::default(), |a, b| LossBreakdown {
                adv_d: a.adv_d + b.adv_d / n,
                adv_g: a.adv_g + b.adv_g / n,
                rec: a.rec + b.rec / n,
                wfm: a.wfm + b.wfm / n,
                total_g: a.total_g + b.total_g / n,
                total_d: a.total_d + b.total_d / n,
            });
            let summary = EpochSummary {
                epoch,
                steps: epoch_acc.len() as u64,
                mean,
            };
            writeln!(epoch_log, "{}", serde_json::to_string(&summary)?).map_err(|e| Error::io(&epoch_path, e))?;
            epoch_acc.clear();
        }
        if state.step % cfg.checkpoint_every == 0 || state.step == total {
            checkpoints.push(write_checkpoint(&state, out_dir)?);
        }
    }
    Ok(TrainOutcome {
        state,
        losses,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2), (2e-4, 0.5, 0.999));
        assert_eq!((c.batch_size, c.epochs, c.n_critic), (24, 100, 2));
        c.validate().unwrap();
        assert!(TrainConfig { n_critic: 0, ..c }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..c }.validate().is_err());
    }

    #[test]
    fn desk_resolution() {
        let cfg = TrainConfig { desk_scale: true, ..TrainConfig::default() };
        let (c, s) = cfg.resolve(&NetworkSpecs::default());
        assert_eq!(c.epochs, DESK_EPOCHS);
        assert_eq!(s.g_fine.base_channels, 16);
        assert_eq!(s.d_coarse.base_channels, 16);
        s.validate().unwrap();
    }

    #[test]
    fn spec_cross_checks() {
        let mut s = NetworkSpecs::default();
        s.d_fine.input_size = 64;
        assert!(s.validate().is_err());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 0));
        assert_ne!(a, epoch_order(50, 3, 1));
        assert_eq!(steps_per_epoch(50, 24), 3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        use crate::nn::Init;
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Init::new(&mut store, &mut rng).constant("w", &[2], 1.0).unwrap();
        let loss = (w.as_tensor() * Tensor::new(&[3.0f64, -0.5], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.999, eps: 1e-12 });
        adam.step(&store, &grads).unwrap();
        // Bias-corrected first step is lr * sign(g).
        let v: Vec<f64> = w.as_tensor().to_vec1().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-9 && (v[1] - 1.1).abs() < 1e-9);
        assert_eq!(adam.steps(), 1);
    }
}
