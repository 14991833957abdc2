//! Single-concept training and base pretraining.

use std::collections::BTreeMap;

use mbtensor::{rng::normal, Adam, AdamConfig, Binder, Float, Graph, ParamSet, RngStream, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concept::acn::acn_var;
use crate::concept::qformer::{QFormer, QFormerConfig};
use crate::concept::{ConceptModule, ModuleMeta};
use crate::denoiser::lora::LoraParams;
use crate::denoiser::schedule::mix;
use crate::denoiser::{Denoiser, NoiseSchedule, PlainRouter};
use crate::encoders::dataset::{sample_captioned, SyntheticConcept};
use crate::encoders::vocab::{fill_template, tokenize, Vocabulary, TEMPLATES};
use crate::encoders::{ImageEncoder, LatentCodec};
use crate::{Error, Result};

pub const DEFAULT_STEPS: usize = 900;
pub const DEFAULT_LR: f64 = 8e-5;
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_PLACEHOLDER: &str = "S*";
pub const TEMPLATE_SET: &str = "imagenet-8";
/// Noise draws averaged by [`reconstruction_eval`].
pub const EVAL_DRAWS: usize = 32;
const EVAL_SEED: u64 = 0x4556_414c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub rank: usize,
    pub seed: u64,
    pub template_set: String,
    pub placeholder: String,
    pub qformer: QFormerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            lr: DEFAULT_LR,
            lambda: DEFAULT_LAMBDA,
            rank: crate::denoiser::DEFAULT_RANK,
            seed: 0,
            template_set: TEMPLATE_SET.into(),
            placeholder: DEFAULT_PLACEHOLDER.into(),
            qformer: QFormerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "need λ ≥ 0 and lr > 0, got λ={} lr={}",
                self.lambda, self.lr
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.template_set != TEMPLATE_SET {
            return Err(Error::Config(format!("unknown template set {:?}", self.template_set)));
        }
        Ok(())
    }
}

/// Per-step loss components, as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub t: usize,
    pub image: usize,
    pub template: usize,
    pub recon: f64,
    pub reg: f64,
    pub total: f64,
    pub v_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub concept_id: String,
    pub config: Option<TrainConfig>,
    pub steps: Vec<StepLog>,
    /// Mean total loss over the first and last tenth of the run.
    pub early_loss: f64,
    pub late_loss: f64,
}

/// Graph values of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub reg: Var,
    pub v: Var,
    pub v_hat: Var,
}

/// Inputs of one concept-learning loss evaluation.
pub struct LossInputs<'a> {
    pub xi: &'a Tensor<f32>,
    pub z_t: &'a Tensor<f32>,
    pub eps: &'a Tensor<f32>,
    pub t: usize,
    pub prompt: &'a [String],
    pub placeholder: &'a str,
    pub class_noun: &'a str,
    pub lambda: f64,
}

/// Trainable state of one concept: query encoder and LoRA factors in one
/// parameter set.
#[derive(Clone, Debug)]
pub struct ConceptState<T: Float = f32> {
    pub params: ParamSet<T>,
    pub qformer: QFormer,
    pub lora: LoraParams,
}

impl ConceptState<f32> {
    pub fn init(base_dims: &[(usize, usize)], cfg: &QFormerConfig, rank: usize, stream: &RngStream) -> Result<Self> {
        let mut params = ParamSet::new();
        let qformer = QFormer::init(cfg.clone(), &mut params, stream)?;
        let mut rng = stream.split("lora").rng();
        let lora = LoraParams::init(&mut params, base_dims, rank, &mut rng)?;
        params.set_trainable(true);
        Ok(Self { params, qformer, lora })
    }
}

impl<T: Float> ConceptState<T> {
    pub fn cast<U: Float>(&self) -> ConceptState<U> {
        ConceptState {
            params: self.params.cast(),
            qformer: self.qformer.clone(),
            lora: self.lora.clone(),
        }
    }

    /// Current factor tensors, `[k.a, k.b, v.a, v.b]` per layer.
    pub fn lora_factors(&self) -> Vec<Option<[Tensor<f32>; 4]>> {
        self.lora
            .layers
            .iter()
            .map(|ids| Some(ids.map(|id| self.params.get(id).cast::<f32>())))
            .collect()
    }
}

fn check_template(template: &str) -> Result<()> {
    if !template.contains("{}") {
        return Err(Error::Config(format!("template {template:?} has no slot for the placeholder")));
    }
    Ok(())
}

/// Prompt words of `template` with `"{placeholder} {class_noun}"` filled in.
pub fn template_prompt(template: &str, placeholder: &str, class_noun: &str) -> Result<Vec<String>> {
    check_template(template)?;
    Ok(tokenize(&fill_template(template, placeholder, class_noun)))
}

/// `recon = mean((ε̂ − ε)²)`, `reg = λ‖v‖²`, `total = recon + reg`.
pub fn loss_from_prediction<T: Float>(g: &mut Graph<T>, eps_hat: Var, eps: Var, v: Var, lambda: f64) -> Result<(Var, Var, Var)> {
    let diff = g.sub(eps_hat, eps)?;
    let recon = g.mean_squares(diff);
    let sq = g.sum_squares(v);
    let reg = g.scale(sq, T::of(lambda));
    let total = g.add(recon, reg)?;
    Ok((total, recon, reg))
}

/// Records the full concept-learning loss: query encoder → `v`, norm
/// adaptation → `v̂`, prompt with `v̂` bound, LoRA-adapted noise prediction.
pub fn concept_loss<T: Float>(
    g: &mut Graph<T>,
    base: &Denoiser<T>,
    base_bd: &mut Binder<'_, T>,
    vocab: &Vocabulary,
    state: &ConceptState<T>,
    bd: &mut Binder<'_, T>,
    inp: &LossInputs<'_>,
) -> Result<LossVars> {
    if !inp.prompt.iter().any(|w| w == inp.placeholder) {
        return Err(Error::Config(format!(
            "prompt does not contain the placeholder {:?}",
            inp.placeholder
        )));
    }
    let class_norm = vocab.norm(inp.class_noun)?;
    let text = vocab.encode_text_var(g, &[inp.class_noun.to_string()], &BTreeMap::new())?;
    let xi = g.constant(inp.xi.cast());
    let v = state.qformer.extract_embedding(g, bd, xi, text)?;
    let v_hat = acn_var(g, v, class_norm)?;
    let bindings = BTreeMap::from([(inp.placeholder.to_string(), v_hat)]);
    let ctx = vocab.encode_text_var(g, inp.prompt, &bindings)?;
    let lora = state.lora.bind(g, bd);
    let router = PlainRouter {
        context: ctx,
        lora: Some(&lora),
    };
    let z = g.constant(inp.z_t.cast());
    let eps_hat = base.forward(g, base_bd, z, inp.t, &router)?;
    let eps = g.constant(inp.eps.cast());
    let (total, recon, reg) = loss_from_prediction(g, eps_hat, eps, v, inp.lambda)?;
    Ok(LossVars {
        total,
        recon,
        reg,
        v,
        v_hat,
    })
}

/// Draws of one step: image index, template index, timestep and noise.
pub struct StepDraw {
    pub image: usize,
    pub template: usize,
    pub t: usize,
    pub eps: Tensor<f32>,
}

pub fn draw_step(rng: &mut impl Rng, images: usize, schedule: &NoiseSchedule, latent_shape: &[usize]) -> StepDraw {
    let image = rng.random_range(0..images);
    let template = rng.random_range(0..TEMPLATES.len());
    let t = rng.random_range(0..schedule.len());
    let eps = normal(rng, latent_shape.to_vec(), 1.0);
    StepDraw { image, template, t, eps }
}

/// Frozen context shared by every training step.
pub struct Frozen<'a> {
    pub base: &'a Denoiser<f32>,
    pub vocab: &'a Vocabulary,
    pub encoder: &'a ImageEncoder,
    pub codec: &'a LatentCodec,
    pub schedule: &'a NoiseSchedule,
}

/// Runs one optimization step and returns its loss components. Fails if
/// any frozen parameter would receive a gradient.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    fz: &Frozen<'_>,
    state: &mut ConceptState<f32>,
    adam: &mut Adam,
    xis: &[Tensor<f32>],
    latents: &[Tensor<f32>],
    class_noun: &str,
    placeholder: &str,
    lambda: f64,
    draw: &StepDraw,
) -> Result<StepLog> {
    let prompt = template_prompt(TEMPLATES[draw.template], placeholder, class_noun)?;
    let z_t = fz.schedule.add_noise(&latents[draw.image], &draw.eps, draw.t)?;
    let mut g = Graph::<f32>::new();
    let mut base_bd = Binder::new(fz.base.params());
    let (grads, log) = {
        let mut bd = Binder::new(&state.params);
        let inp = LossInputs {
            xi: &xis[draw.image],
            z_t: &z_t,
            eps: &draw.eps,
            t: draw.t,
            prompt: &prompt,
            placeholder,
            class_noun,
            lambda,
        };
        let lv = concept_loss(&mut g, fz.base, &mut base_bd, fz.vocab, state, &mut bd, &inp)?;
        let item = |v: Var| g.value(v).data()[0] as f64;
        let log = StepLog {
            step: 0,
            t: draw.t,
            image: draw.image,
            template: draw.template,
            recon: item(lv.recon),
            reg: item(lv.reg),
            total: item(lv.total),
            v_norm: g.value(lv.v).l2_norm() as f64,
        };
        let gr = g.backward(lv.total)?;
        if let Some(i) = base_bd.collect(&gr).iter().position(Option::is_some) {
            return Err(Error::validation(
                "frozen base receives no gradient",
                fz.base
                    .params()
                    .ids()
                    .nth(i)
                    .map(|id| fz.base.params().name(id).to_string())
                    .unwrap_or_default(),
            ));
        }
        (bd.collect(&gr), log)
    };
    state.params.accumulate(&grads)?;
    adam.step(&mut state.params);
    Ok(log)
}

/// Visual features and latents of every training image.
pub fn prepare_concept(
    concept: &SyntheticConcept,
    encoder: &ImageEncoder,
    codec: &LatentCodec,
) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let xis = concept
        .images
        .iter()
        .map(|i| encoder.encode_image(i).map(|e| e.patches))
        .collect::<Result<Vec<_>>>()?;
    let lats = concept.images.iter().map(|i| codec.encode(i)).collect::<Result<Vec<_>>>()?;
    Ok((xis, lats))
}

/// Mean of `v` over the concept's images under the current encoder state.
pub fn mean_embedding(state: &ConceptState<f32>, vocab: &Vocabulary, xis: &[Tensor<f32>], class_noun: &str) -> Result<Tensor<f32>> {
    let d = vocab.dim();
    let mut acc = vec![0f64; d];
    for xi in xis {
        let mut g = Graph::<f32>::new();
        let mut bd = Binder::new(&state.params);
        let text = vocab.encode_text_var(&mut g, &[class_noun.to_string()], &BTreeMap::new())?;
        let x = g.constant(xi.clone());
        let v = state.qformer.extract_embedding(&mut g, &mut bd, x, text)?;
        for (a, &b) in acc.iter_mut().zip(g.value(v).data()) {
            *a += b as f64;
        }
    }
    let n = xis.len() as f64;
    Ok(Tensor::new([d], acc.into_iter().map(|a| (a / n) as f32).collect())?)
}

fn window_mean(steps: &[StepLog], early: bool) -> f64 {
    let w = (steps.len() / 10).max(1);
    let s = if early { &steps[..w] } else { &steps[steps.len() - w..] };
    s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64
}

/// Trains one concept module against the frozen base.
pub fn train_concept(
    concept: &SyntheticConcept,
    cfg: &TrainConfig,
    fz: &Frozen<'_>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(ConceptModule, TrainLog)> {
    cfg.validate()?;
    if concept.images.is_empty() || concept.images.len() > crate::encoders::dataset::MAX_IMAGES {
        return Err(Error::Dataset(format!("concept has {} images", concept.images.len())));
    }
    fz.vocab.embedding(&concept.class_noun)?;
    let stream = RngStream::new(cfg.seed).split("train-concept").split(&concept.concept_id);
    let mut state = ConceptState::init(&fz.base.config().cross_dims(), &cfg.qformer, cfg.rank, &stream)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let (xis, lats) = prepare_concept(concept, fz.encoder, fz.codec)?;
    let mut rng = stream.split("steps").rng();
    let mut log = TrainLog {
        concept_id: concept.concept_id.clone(),
        config: Some(cfg.clone()),
        ..Default::default()
    };
    for step in 0..cfg.steps {
        let draw = draw_step(&mut rng, xis.len(), fz.schedule, lats[0].shape());
        let mut l = training_step(
            fz,
            &mut state,
            &mut adam,
            &xis,
            &lats,
            &concept.class_noun,
            &cfg.placeholder,
            cfg.lambda,
            &draw,
        )?;
        l.step = step;
        if !l.total.is_finite() {
            return Err(Error::Diverged { step, loss: l.total });
        }
        on_step(&l);
        log.steps.push(l);
    }
    log.early_loss = window_mean(&log.steps, true);
    log.late_loss = window_mean(&log.steps, false);
    let raw = mean_embedding(&state, fz.vocab, &xis, &concept.class_noun)?;
    let meta = ModuleMeta {
        concept_id: concept.concept_id.clone(),
        seed: cfg.seed,
        steps: cfg.steps,
        lambda: cfg.lambda,
        lr: cfg.lr,
        rank: cfg.rank,
        format_version: crate::concept::module::FORMAT_VERSION,
    };
    let module = ConceptModule::build(&cfg.placeholder, &concept.class_noun, raw, state.lora_factors(), fz.vocab, meta)?;
    Ok((module, log))
}

/// Conditioning of a reconstruction evaluation.
pub enum EvalPrompt<'a> {
    /// Templates filled with the module's placeholder, module LoRA active.
    Module(&'a ConceptModule),
    /// A fixed vocabulary-only prompt with no LoRA.
    Plain(&'a str),
}

/// Mean noise-prediction error over [`EVAL_DRAWS`] fixed `(image, template,
/// t, ε)` draws of `concept`.
pub fn reconstruction_eval(prompt: EvalPrompt<'_>, concept: &SyntheticConcept, fz: &Frozen<'_>) -> Result<f64> {
    let mut rng = RngStream::new(EVAL_SEED).split("reconstruction").rng();
    let lats = concept.images.iter().map(|i| fz.codec.encode(i)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for _ in 0..EVAL_DRAWS {
        let d = draw_step(&mut rng, lats.len(), fz.schedule, lats[0].shape());
        let z_t = fz.schedule.add_noise(&lats[d.image], &d.eps, d.t)?;
        let eps_hat = match &prompt {
            EvalPrompt::Module(m) => {
                let words = template_prompt(TEMPLATES[d.template], &m.placeholder, &m.class_noun)?;
                let b = BTreeMap::from([(m.placeholder.clone(), m.embedding_final.clone())]);
                let ctx = fz.vocab.encode_text(&words, &b)?;
                fz.base.predict(&z_t, d.t, &ctx.tokens, Some(&m.lora))?
            }
            EvalPrompt::Plain(p) => {
                let ctx = fz.vocab.encode_prompt(p, &BTreeMap::new())?;
                fz.base.predict(&z_t, d.t, &ctx.tokens, None)?
            }
        };
        let diff = mix(&eps_hat, &d.eps, 1.0, -1.0)?;
        total += diff.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / diff.numel() as f64;
    }
    Ok(total / EVAL_DRAWS as f64)
}

/// An untrained module: initial encoder embedding and zero `B` factors.
pub fn untrained_module(concept: &SyntheticConcept, cfg: &TrainConfig, fz: &Frozen<'_>) -> Result<ConceptModule> {
    let stream = RngStream::new(cfg.seed).split("untrained").split(&concept.concept_id);
    let state = ConceptState::init(&fz.base.config().cross_dims(), &cfg.qformer, cfg.rank, &stream)?;
    let (xis, _) = prepare_concept(concept, fz.encoder, fz.codec)?;
    let raw = mean_embedding(&state, fz.vocab, &xis, &concept.class_noun)?;
    let meta = ModuleMeta {
        concept_id: concept.concept_id.clone(),
        seed: cfg.seed,
        steps: 0,
        lambda: cfg.lambda,
        lr: cfg.lr,
        rank: cfg.rank,
        format_version: crate::concept::module::FORMAT_VERSION,
    };
    ConceptModule::build(&cfg.placeholder, &concept.class_noun, raw, state.lora_factors(), fz.vocab, meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub null_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 8,
            lr: 1e-3,
            warmup: 200,
            null_prob: 0.1,
            seed: 0,
        }
    }
}

/// Learning rate after linear warmup and cosine decay to a tenth.
fn pretrain_lr(cfg: &PretrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let p = (step - cfg.warmup) as f64 / (cfg.steps - cfg.warmup).max(1) as f64;
    cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Trains a base denoiser on captioned renderings of random attributes,
/// dropping the caption with probability `null_prob`.
pub fn pretrain_base(
    net: &mut Denoiser<f32>,
    cfg: &PretrainConfig,
    vocab: &Vocabulary,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    mut on_step: impl FnMut(usize, f64),
) -> Result<()> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::Config("pretraining needs steps ≥ 1 and batch ≥ 1".into()));
    }
    net.params_mut().set_trainable(true);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = RngStream::new(cfg.seed).split("pretrain").rng();
    let shape = [net.config().latent_channels, net.config().latent_size, net.config().latent_size];
    for step in 0..cfg.steps {
        adam.set_lr(pretrain_lr(cfg, step));
        let mut mean = 0.0;
        for _ in 0..cfg.batch {
            let sample = sample_captioned(&mut rng);
            let caption = if rng.random_bool(cfg.null_prob) {
                String::new()
            } else {
                sample.caption
            };
            let ctx = vocab.encode_prompt(&caption, &BTreeMap::new())?;
            let z0 = codec.encode(&sample.image)?;
            let t = rng.random_range(0..schedule.len());
            let eps: Tensor<f32> = normal(&mut rng, shape, 1.0);
            let z_t = schedule.add_noise(&z0, &eps, t)?;
            let grads = {
                let mut g = Graph::<f32>::new();
                let mut bd = Binder::new(net.params());
                let z = g.constant(z_t);
                let c = g.constant(ctx.tokens);
                let router = PlainRouter { context: c, lora: None };
                let out = net.forward(&mut g, &mut bd, z, t, &router)?;
                let e = g.constant(eps);
                let diff = g.sub(out, e)?;
                let l = g.mean_squares(diff);
                let l = g.scale(l, 1.0 / cfg.batch as f32);
                mean += g.value(l).data()[0] as f64;
                let gr = g.backward(l)?;
                bd.collect(&gr)
            };
            net.params_mut().accumulate(&grads)?;
        }
        if !mean.is_finite() {
            return Err(Error::Diverged { step, loss: mean });
        }
        adam.step(net.params_mut());
        on_step(step, mean);
    }
    net.params_mut().set_trainable(false);
    Ok(())
}
