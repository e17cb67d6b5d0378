//! Joint optimization of the tri-plane, its autoencoder, the distribution
//! model and the masks.
//!
//! Training runs in two phases. The warm-up phase fits the grid and the model
//! on exact attribute values. The main phase adds uniform quantization noise,
//! hard masks with straight-through gradients, and samples contexts from the
//! autoencoder's reconstruction of the grid.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod estimate;
pub mod gradcheck;
pub mod loss;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchor::{coefficients_per_anchor, scene_bounds, AnchorCloud, AttributeGroup};
use crate::autoencoder::PlaneAutoencoder;
use crate::codec::{compress_with, CompressedScene, EncoderInput};
use crate::error::{Error, Result};
use crate::masking::MaskParams;
use crate::model::DistributionModel;
use crate::quant::QuantConfig;
use crate::triplane::{ContractParams, TriPlaneGrid};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{LrSchedule, TrainConfig};
pub use estimate::{estimate_bits, global_gaussian_bits};
pub use gradcheck::{grad_check, sample_coords, GradCheckReport};
pub use loss::{loss_and_grad, total_loss, Frame, Gradients, LossParts, LossWeights, MaskMode, ParamGroup, Params, StepOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Main,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        }
    }
}

/// Head weights start this much smaller than the fan-in default, so the
/// untrained model predicts close to the per-coefficient prior.
const PRIOR_HEAD_SCALE: f64 = 0.1;

/// Per-coefficient mean and standard deviation over the cloud, the latter
/// floored at the quantization step.
fn coefficient_moments(cloud: &AnchorCloud<f64>, quant: &QuantConfig) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = (cloud.len() as f64, cloud.k);
    let mut mean = Vec::new();
    let mut sigma = Vec::new();
    for g in AttributeGroup::ALL {
        let (d, v) = (g.dim(k), cloud.group(g));
        for j in 0..d {
            let m = v.iter().skip(j).step_by(d).sum::<f64>() / n;
            let var = v.iter().skip(j).step_by(d).map(|x| (x - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            sigma.push(var.sqrt().max(quant.step(g)));
        }
    }
    (mean, sigma)
}

/// Parameters, optimizer moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: Params,
    pub contract: ContractParams<f64>,
    /// Steps completed.
    pub step: u64,
    /// Resolved divisor of the entropy term.
    pub entropy_scale: f64,
    /// One optimizer per [`ParamGroup`], in [`ParamGroup::ALL`] order.
    pub optimizers: [Adam; 5],
}

impl TrainState {
    /// Fresh parameters for `cloud`.
    pub fn new(cloud: &AnchorCloud<f64>, config: &TrainConfig) -> Result<Self> {
        cloud.validate()?;
        config.validate()?;
        let (n, k) = (cloud.len(), cloud.k);
        let (r, c, seed) = (config.resolution, config.channels, config.seed);
        let mut masks = MaskParams::new(n, k);
        masks.threshold = config.mask_threshold;
        let mut model = DistributionModel::new(config.neighbors, c, config.hidden, k, seed.wrapping_add(2))?;
        let (mean, sigma) = coefficient_moments(cloud, &config.quant);
        model.set_prior(&mean, &sigma, PRIOR_HEAD_SCALE)?;
        let params = Params {
            grid: TriPlaneGrid::random(r, c, seed)?,
            autoencoder: PlaneAutoencoder::new(r, c, seed.wrapping_add(1))?,
            model,
            masks,
        };
        let optimizers = ParamGroup::ALL.map(|g| Adam::new(params.group(g).len()));
        Ok(Self {
            config: config.clone(),
            contract: scene_bounds(&cloud.positions).into(),
            entropy_scale: config.entropy_scale.unwrap_or((n * (3 + coefficients_per_anchor(k))) as f64),
            params,
            step: 0,
            optimizers,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.step > 0
    }

    pub fn phase(&self, step: u64) -> Phase {
        if step < self.config.warmup_steps() {
            Phase::Warmup
        } else {
            Phase::Main
        }
    }

    pub fn weights(&self) -> LossWeights {
        let c = &self.config;
        LossWeights {
            lambda_entropy: c.lambda_entropy,
            entropy_scale: self.entropy_scale,
            lambda_mask: c.lambda_mask,
            lambda_wavelet: c.lambda_wavelet,
            lambda_tri: c.lambda_tri,
            fidelity: c.fidelity_weights,
            quant: c.quant.as_stored(),
        }
    }

    /// Hard anchor and offset-slot masks.
    pub fn hard_masks(&self) -> (Vec<bool>, Vec<bool>) {
        self.params.masks.hard()
    }

    /// Shape checks against a cloud.
    pub fn check_cloud(&self, cloud: &AnchorCloud<f64>) -> Result<()> {
        let m = &self.params.masks;
        if m.anchor_logits.len() != cloud.len() || m.offset_logits.len() != cloud.len() * cloud.k {
            return Err(Error::validation(format!(
                "state was trained on {} anchors, cloud has {}",
                m.anchor_logits.len(),
                cloud.len()
            )));
        }
        if self.params.model.offsets != cloud.k {
            return Err(Error::validation(format!(
                "state was trained with k={}, cloud has k={}",
                self.params.model.offsets, cloud.k
            )));
        }
        Ok(())
    }
}

/// Encode `cloud` with a trained state.
pub fn compress_scene(cloud: &AnchorCloud<f64>, state: &TrainState) -> Result<CompressedScene> {
    if !state.is_trained() {
        return Err(Error::validation("the training state has not been trained"));
    }
    state.check_cloud(cloud)?;
    let (am, om) = state.hard_masks();
    let p = &state.params;
    compress_with(
        cloud,
        &EncoderInput {
            grid: &p.grid,
            autoencoder: &p.autoencoder,
            model: &p.model,
            quant: state.config.quant,
            contract: state.contract,
            masks: Some((&am, &om)),
        },
    )
}

/// Outcome of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Index of the step just taken.
    pub step: u64,
    pub phase: Phase,
    pub loss: f64,
    pub parts: LossParts,
}

/// Drives [`TrainState`] over one cloud.
pub struct Trainer<'a> {
    cloud: &'a AnchorCloud<f64>,
    state: TrainState,
    frame: Frame,
}

impl<'a> Trainer<'a> {
    pub fn new(cloud: &'a AnchorCloud<f64>, config: &TrainConfig) -> Result<Self> {
        Self::resume(cloud, TrainState::new(cloud, config)?)
    }

    /// Continue from an existing state.
    pub fn resume(cloud: &'a AnchorCloud<f64>, state: TrainState) -> Result<Self> {
        cloud.validate()?;
        state.config.validate()?;
        state.check_cloud(cloud)?;
        let frame = Frame::new(&cloud.positions, &state.contract, state.config.resolution, state.config.neighbors);
        Ok(Self { cloud, state, frame })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    /// Loss of the current parameters under the options of the next step.
    pub fn current_loss(&self) -> Result<LossParts> {
        let draw = self.draw(self.state.step);
        let (parts, _) = loss_and_grad(&self.state.params, &self.state.weights(), self.cloud, &self.frame, &draw.options(self), false)?;
        Ok(parts)
    }

    fn draw(&self, step: u64) -> StepDraw {
        let cfg = &self.state.config;
        let n = self.cloud.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step.wrapping_add(1));
        let batch = (cfg.batch_size > 0 && cfg.batch_size < n).then(|| {
            let mut b = sample(&mut rng, n, cfg.batch_size).into_vec();
            b.sort_unstable();
            b
        });
        let phase = self.state.phase(step);
        let noise = (phase == Phase::Main).then(|| {
            let len = n * coefficients_per_anchor(self.cloud.k);
            (0..len).map(|_| rng.random::<f64>() - 0.5).collect()
        });
        StepDraw { phase, batch, noise }
    }

    /// One optimization step. On error the state is left as it was.
    pub fn step(&mut self) -> Result<StepReport> {
        let s = self.state.step;
        let draw = self.draw(s);
        let weights = self.state.weights();
        let (parts, grads) = loss_and_grad(&self.state.params, &weights, self.cloud, &self.frame, &draw.options(self), true)?;
        let loss = total_loss(&parts, &weights, s)?;
        let grads = grads.expect("gradients were requested");
        for g in ParamGroup::ALL {
            if let Some(i) = grads.group(g).iter().position(|v| !v.is_finite()) {
                return Err(Error::Training {
                    component: g.name().into(),
                    step: s,
                    message: format!("non-finite gradient at coordinate {i}"),
                });
            }
        }
        let cfg = &self.state.config;
        let total = cfg.steps;
        let trained: &[ParamGroup] = match draw.phase {
            Phase::Warmup => &[ParamGroup::Grid, ParamGroup::Model],
            Phase::Main if !cfg.masking => &ParamGroup::ALL[..3],
            Phase::Main => &ParamGroup::ALL,
        };
        for &g in trained {
            let lr = match g {
                ParamGroup::Grid => cfg.lr_grid,
                ParamGroup::Autoencoder => cfg.lr_autoencoder,
                ParamGroup::Model => cfg.lr_model,
                ParamGroup::AnchorMask | ParamGroup::OffsetMask => cfg.lr_mask,
            }
            .at(s, total);
            let slot = ParamGroup::ALL.iter().position(|&h| h == g).expect("listed group");
            self.state.optimizers[slot].step(self.state.params.group_mut(g), grads.group(g), lr)?;
        }
        self.state.step += 1;
        Ok(StepReport { step: s, phase: draw.phase, loss, parts })
    }
}

struct StepDraw {
    phase: Phase,
    batch: Option<Vec<usize>>,
    noise: Option<Vec<f64>>,
}

impl StepDraw {
    fn options(&self, t: &Trainer) -> StepOptions<'_> {
        let main = self.phase == Phase::Main;
        StepOptions {
            noise: self.noise.as_deref(),
            use_autoencoder: main,
            masks: if main && t.state.config.masking { MaskMode::Hard } else { MaskMode::Off },
            batch: self.batch.as_deref(),
            reproducible: t.state.config.reproducible,
        }
    }
}

/// Train for `config.steps` steps.
pub fn fit(cloud: &AnchorCloud<f64>, config: &TrainConfig) -> Result<TrainState> {
    fit_with(cloud, config, |_| {})
}

/// [`fit`] with a callback after every step.
pub fn fit_with(cloud: &AnchorCloud<f64>, config: &TrainConfig, mut on_step: impl FnMut(&StepReport)) -> Result<TrainState> {
    let mut t = Trainer::new(cloud, config)?;
    for _ in 0..config.steps {
        let r = t.step()?;
        on_step(&r);
    }
    Ok(t.into_state())
}
