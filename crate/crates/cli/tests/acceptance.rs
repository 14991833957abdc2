//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mbtensor::gradcheck::{central_difference, relative_error};
use mbtensor::rng::normal;
use mbtensor::{optimizer_steps, Binder, Graph, ParamSet, RngStream, Tensor};
use multibooth::assets::{base_denoiser, BASE_CHECKPOINT, BASE_SHA256};
use multibooth::concept::{ConceptModule, QFormerConfig};
use multibooth::container::sha256_hex;
use multibooth::denoiser::lora::bind_constant;
use multibooth::denoiser::{CrossAttnRouter, Denoiser, DenoiserConfig, LoraParams, NoiseSchedule, PlainRouter, DEFAULT_RANK};
use multibooth::encoders::*;
use multibooth::eval::{bench, evaluate, reference_features, Pipeline};
use multibooth::rcm::*;
use multibooth::sampler::SampleConfig;
use multibooth::trainer::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Ctx {
    base: Denoiser,
    vocab: Vocabulary,
    encoder: ImageEncoder,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    data: Vec<SyntheticConcept>,
    base_hash: String,
    /// concept_00 and concept_02 at the default λ, placeholders S* and V*.
    pair: [Arc<ConceptModule>; 2],
    /// concept_00 trained with λ = 0, same seed.
    no_reg: Arc<ConceptModule>,
    train_time: Duration,
}

impl Ctx {
    fn frozen(&self) -> Frozen<'_> {
        Frozen {
            base: &self.base,
            vocab: &self.vocab,
            encoder: &self.encoder,
            codec: &self.codec,
            schedule: &self.schedule,
        }
    }

    fn pipe(&self) -> Pipeline<'_> {
        Pipeline {
            net: &self.base,
            vocab: &self.vocab,
            codec: &self.codec,
            schedule: &self.schedule,
        }
    }

    fn dims(&self) -> Vec<(usize, usize)> {
        self.base.config().cross_dims()
    }
}

fn setup() -> Ctx {
    let base = base_denoiser().expect("embedded base");
    let base_hash = base.weights_sha256();
    let vocab = Vocabulary::standard();
    let data = generate_dataset(7, 12, 5).expect("dataset");
    let mut ctx = Ctx {
        base,
        vocab,
        encoder: ImageEncoder::standard(),
        codec: LatentCodec::new(),
        schedule: NoiseSchedule::standard(),
        data,
        base_hash,
        pair: [Arc::new(placeholder_module()), Arc::new(placeholder_module())],
        no_reg: Arc::new(placeholder_module()),
        train_time: Duration::ZERO,
    };
    let start = Instant::now();
    let train = |i: usize, ph: &str, lambda: f64| {
        let cfg = TrainConfig {
            placeholder: ph.into(),
            lambda,
            ..Default::default()
        };
        Arc::new(train_concept(&ctx.data[i], &cfg, &ctx.frozen(), |_| {}).expect("training").0)
    };
    let pair = [train(0, "S*", DEFAULT_LAMBDA), train(2, "V*", DEFAULT_LAMBDA)];
    let no_reg = train(0, "S*", 0.0);
    ctx.pair = pair;
    ctx.no_reg = no_reg;
    ctx.train_time = start.elapsed();
    ctx
}

fn placeholder_module() -> ConceptModule {
    let v = Vocabulary::standard();
    let dims = DenoiserConfig::default().cross_dims();
    (*multibooth::eval::synthetic_modules(&v, &dims, 1, 1, 0).unwrap()[0]).clone()
}

fn region(m: &Arc<ConceptModule>, b: [f64; 4], weight: f64) -> RegionSpec {
    RegionSpec {
        module: m.clone(),
        bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
        prompt: tokenize(&format!("a photo of a {} {}", m.placeholder, m.class_noun)),
        weight,
    }
}

fn within(budget: Duration, took: Duration) -> Result<(), String> {
    if took > budget {
        return Err(format!("took {:.1}s, budget {:.0}s", took.as_secs_f64(), budget.as_secs_f64()));
    }
    Ok(())
}

fn c1_acn(ctx: &Ctx) -> Outcome {
    let mut worst = 0.0f64;
    for m in ctx.pair.iter().chain([&ctx.no_reg]) {
        let (_, fin, target) = m.norm_report(&ctx.vocab).map_err(|e| e.to_string())?;
        worst = worst.max((fin - target).abs());
        ensure!((fin - target).abs() <= 1e-6, "{}: |v̂| {fin} vs {target}", m.meta.concept_id);
        ensure!(
            (0.30..=0.40).contains(&fin),
            "{}: |v̂| {fin} outside [0.30, 0.40]",
            m.meta.concept_id
        );
    }
    Ok(format!("3 modules, max |‖v̂‖ − ‖c‖| = {worst:.1e}"))
}

fn c2_regularizer(ctx: &Ctx) -> Outcome {
    let (with, without) = (ctx.pair[0].raw_norm(), ctx.no_reg.raw_norm());
    ensure!(with < without, "‖v‖ with λ=0.01 is {with:.4}, without {without:.4}");
    within(Duration::from_secs(600), ctx.train_time)?;
    Ok(format!(
        "‖v‖ {with:.4} (λ=0.01) < {without:.4} (λ=0); 3 training runs in {:.0}s",
        ctx.train_time.as_secs_f64()
    ))
}

fn c3_zero_init(ctx: &Ctx) -> Outcome {
    let cfg = ctx.base.config().clone();
    let mut rng = RngStream::new(3).rng();
    for trial in 0..8 {
        let mut ps = ParamSet::<f32>::new();
        let lp = LoraParams::init(&mut ps, &ctx.dims(), DEFAULT_RANK, &mut rng).unwrap();
        let layers: Vec<[Tensor<f32>; 4]> = lp.layers.iter().map(|ids| ids.map(|id| ps.get(id).clone())).collect();
        let z: Tensor<f32> = normal(&mut rng, [cfg.latent_channels, cfg.latent_size, cfg.latent_size], 1.0);
        let ctx_t: Tensor<f32> = normal(&mut rng, [MAX_PROMPT_LEN, cfg.text_dim], 0.3);
        let t = trial * 124 + 7;
        let a = ctx.base.predict(&z, t, &ctx_t, None).map_err(|e| e.to_string())?;
        let b = ctx.base.predict(&z, t, &ctx_t, Some(&layers)).map_err(|e| e.to_string())?;
        ensure!(a.data() == b.data(), "trial {trial}: zero-init LoRA changed the output");
    }
    ensure!(ctx.base.weights_sha256() == ctx.base_hash, "base weights changed during training");
    ensure!(sha256_hex(BASE_CHECKPOINT) == BASE_SHA256, "embedded checkpoint hash changed");
    Ok("8 random inputs bit-identical; base checksum unchanged after 3 training runs".into())
}

fn c4_gradients(ctx: &Ctx) -> Outcome {
    let d = 8;
    let vocab = Vocabulary::generate_with_dim(3, d);
    let base = Denoiser::init(DenoiserConfig::miniature(d), 5).unwrap().cast::<f64>();
    let mut state = ConceptState::init(&base.config().cross_dims(), &QFormerConfig::miniature(d), 2, &RngStream::new(6))
        .unwrap()
        .cast::<f64>();
    let mut rng = RngStream::new(7).rng();
    for ids in state.lora.layers.clone() {
        for id in [ids[1], ids[3]] {
            let shape = state.params.get(id).shape().to_vec();
            let mut t: Tensor<f64> = normal(&mut rng, shape, 0.3);
            t.set_requires_grad(true);
            *state.params.get_mut(id) = t;
        }
    }
    let xi = ctx.encoder.encode_image(&ctx.data[0].images[0]).unwrap().patches;
    let s = base.config().latent_size;
    let z_t: Tensor<f32> = normal(&mut rng, [4, s, s], 1.0);
    let eps: Tensor<f32> = normal(&mut rng, [4, s, s], 1.0);
    let prompt = template_prompt(TEMPLATES[0], "S*", "dog").unwrap();
    let inp = LossInputs {
        xi: &xi,
        z_t: &z_t,
        eps: &eps,
        t: 321,
        prompt: &prompt,
        placeholder: "S*",
        class_noun: "dog",
        lambda: 0.01,
    };
    let loss = |st: &ConceptState<f64>, grad: bool| {
        let mut g = Graph::new();
        let mut bb = Binder::new(base.params());
        let mut bd = Binder::new(&st.params);
        let lv = concept_loss(&mut g, &base, &mut bb, &vocab, st, &mut bd, &inp).unwrap();
        let val = g.value(lv.total).data()[0];
        if !grad {
            return (val, Vec::new());
        }
        let gr = g.backward(lv.total).unwrap();
        (val, bd.collect(&gr))
    };
    let (_, grads) = loss(&state, true);
    let mut worst = 0.0f64;
    let mut scalars = 0;
    for id in state.params.ids() {
        let analytic = grads[id.index()]
            .clone()
            .ok_or_else(|| format!("no gradient for {}", state.params.name(id)))?;
        let x0 = state.params.get(id).data().to_vec();
        scalars += x0.len();
        let numeric = central_difference(
            |x| {
                let mut st = state.clone();
                st.params.get_mut(id).data_mut().copy_from_slice(x);
                loss(&st, false).0
            },
            &x0,
            1e-5,
        );
        let err = relative_error(&analytic, &numeric);
        worst = worst.max(err);
        ensure!(err < 1e-6, "{}: relative error {err:.2e}", state.params.name(id));
    }
    Ok(format!(
        "{} tensors, {scalars} scalars, max relative error {worst:.1e}",
        state.params.len()
    ))
}

enum Route<'a> {
    Regional(&'a PreparedLayout),
    Plain(&'a Tensor<f32>, Option<&'a [[Tensor<f32>; 4]]>),
}

fn route(net: &Denoiser, layer: usize, x: &Tensor<f32>, r: Route<'_>) -> Tensor<f32> {
    let mut g = Graph::<f32>::new();
    let mut bd = Binder::new(net.params());
    let xv = g.constant(x.clone());
    let w = net.cross_weights(&mut g, &mut bd, layer);
    let site = net.cross_site(layer);
    let out = match r {
        Route::Regional(p) => {
            let router = p.bind(&mut g);
            router.route(&mut g, site, w, xv).unwrap()
        }
        Route::Plain(c, lora) => {
            let c = g.constant(c.clone());
            let bound = lora.map(|l| bind_constant(&mut g, l));
            PlainRouter {
                context: c,
                lora: bound.as_deref(),
            }
            .route(&mut g, site, w, xv)
            .unwrap()
        }
    };
    g.value(out).clone()
}

fn layer_input(net: &Denoiser, layer: usize, seed: u64) -> Tensor<f32> {
    let site = net.cross_site(layer);
    normal(
        &mut RngStream::new(seed).split_index("x", layer as u64).rng(),
        [site.height * site.width, net.config().channels],
        1.0,
    )
}

fn rows(t: &Tensor<f32>, cells: &[usize]) -> Vec<f32> {
    let d = t.shape()[1];
    cells.iter().flat_map(|&c| t.data()[c * d..(c + 1) * d].to_vec()).collect()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn prepare(ctx: &Ctx, base: &str, regions: Vec<RegionSpec>, overlap: OverlapMode) -> PreparedLayout {
    PreparedLayout::new(
        &Layout {
            base_prompt: tokenize(base),
            regions,
        },
        &ctx.vocab,
        &ctx.dims(),
        overlap,
    )
    .unwrap()
}

fn cells_of(b: [f64; 4], h: usize, w: usize) -> Vec<usize> {
    BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap().to_cells(h, w).cells(w)
}

fn c5_degenerate(ctx: &Ctx) -> Outcome {
    let m = &ctx.pair[0];
    let p = prepare(ctx, "", vec![region(m, [0.0, 0.0, 1.0, 1.0], 1.0)], OverlapMode::WeightedMean);
    let words = tokenize(&format!("a photo of a {} {}", m.placeholder, m.class_noun));
    let c = ctx
        .vocab
        .encode_text(&words, &BTreeMap::from([(m.placeholder.clone(), m.embedding_final.clone())]))
        .unwrap();
    let mut worst = 0.0f32;
    let mut res = std::collections::BTreeSet::new();
    let layers = ctx.base.config().num_cross_layers();
    for layer in 0..layers {
        let site = ctx.base.cross_site(layer);
        res.insert(format!("{}×{}", site.height, site.width));
        let x = layer_input(&ctx.base, layer, 5);
        let a = route(&ctx.base, layer, &x, Route::Regional(&p));
        let b = route(&ctx.base, layer, &x, Route::Plain(&c.tokens, Some(&m.lora)));
        let d = max_diff(a.data(), b.data());
        worst = worst.max(d);
        ensure!(d <= 1e-6, "layer {layer}: max difference {d:e}");
    }
    let z = multibooth::sampler::initial_latent(5, &ctx.pipe().latent_shape());
    let (a, _) = compose_and_denoise(&ctx.base, &z, 500, &p).map_err(|e| e.to_string())?;
    let b = ctx.base.predict(&z, 500, &c.tokens, Some(&m.lora)).map_err(|e| e.to_string())?;
    let d = max_diff(a.data(), b.data());
    ensure!(d <= 1e-6, "full network: max difference {d:e}");
    Ok(format!(
        "{layers} layers at {}, max difference {:.1e}",
        res.into_iter().collect::<Vec<_>>().join(", "),
        worst.max(d)
    ))
}

fn c6_compositionality(ctx: &Ctx) -> Outcome {
    let [a, b] = &ctx.pair;
    let boxes = [[0.0, 0.0, 0.5, 0.5], [0.5, 0.5, 1.0, 1.0]];
    let both = prepare(
        ctx,
        "a photo",
        vec![region(a, boxes[0], 1.0), region(b, boxes[1], 1.0)],
        OverlapMode::WeightedMean,
    );
    let singles = [
        prepare(ctx, "a photo", vec![region(a, boxes[0], 1.0)], OverlapMode::WeightedMean),
        prepare(ctx, "a photo", vec![region(b, boxes[1], 1.0)], OverlapMode::WeightedMean),
    ];
    let base_ctx = ctx.vocab.encode_prompt("a photo", &BTreeMap::new()).unwrap();
    let mut worst = 0.0f32;
    for layer in 0..ctx.base.config().num_cross_layers() {
        let site = ctx.base.cross_site(layer);
        let (h, w) = (site.height, site.width);
        let x = layer_input(&ctx.base, layer, 6);
        let out = route(&ctx.base, layer, &x, Route::Regional(&both));
        let mut covered = vec![false; h * w];
        for i in 0..2 {
            let cells = cells_of(boxes[i], h, w);
            cells.iter().for_each(|&c| covered[c] = true);
            let single = route(&ctx.base, layer, &x, Route::Regional(&singles[i]));
            let d = max_diff(&rows(&out, &cells), &rows(&single, &cells));
            worst = worst.max(d);
            ensure!(d <= 1e-6, "layer {layer} region {i}: {d:e}");
        }
        let rest: Vec<usize> = (0..h * w).filter(|&c| !covered[c]).collect();
        let plain = route(&ctx.base, layer, &x, Route::Plain(&base_ctx.tokens, None));
        let d = max_diff(&rows(&out, &rest), &rows(&plain, &rest));
        worst = worst.max(d);
        ensure!(d <= 1e-6, "layer {layer} background: {d:e}");

        let (ba, bb) = ([0.0, 0.0, 0.75, 1.0], [0.25, 0.0, 1.0, 1.0]);
        let over = prepare(ctx, "", vec![region(a, ba, 1.0), region(b, bb, 0.0)], OverlapMode::WeightedMean);
        let only = prepare(ctx, "", vec![region(a, ba, 1.0)], OverlapMode::WeightedMean);
        let ca = cells_of(ba, h, w);
        let d = max_diff(
            &rows(&route(&ctx.base, layer, &x, Route::Regional(&over)), &ca),
            &rows(&route(&ctx.base, layer, &x, Route::Regional(&only)), &ca),
        );
        worst = worst.max(d);
        ensure!(d <= 1e-6, "layer {layer} w=(1,0): {d:e}");
    }
    let mut rng = RngStream::new(66).rng();
    let mut sum_err = 0.0f64;
    for _ in 0..200 {
        let s = [8, 4][rand::Rng::random_range(&mut rng, 0..2)];
        let n = rand::Rng::random_range(&mut rng, 2..=8);
        let mut boxes = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..n {
            let (x0, y0) = (
                rand::Rng::random_range(&mut rng, 0.0..0.8),
                rand::Rng::random_range(&mut rng, 0.0..0.8),
            );
            let (x1, y1) = (
                rand::Rng::random_range(&mut rng, x0 + 0.1..=1.0),
                rand::Rng::random_range(&mut rng, y0 + 0.1..=1.0),
            );
            boxes.push(BoundingBox::new(x0, y0, x1, y1).unwrap().to_cells(s, s));
            weights.push(rand::Rng::random_range(&mut rng, 0.01..4.0));
        }
        let blend = blend_weights(&boxes, &weights, s, s, OverlapMode::WeightedMean).map_err(|e| e.to_string())?;
        for cell in (0..s * s).filter(|c| !blend.uncovered.contains(c)) {
            let e = (blend.coef.iter().map(|c| c[cell]).sum::<f64>() - 1.0).abs();
            sum_err = sum_err.max(e);
            ensure!(e <= 1e-6, "weights sum off by {e:e}");
        }
    }
    Ok(format!(
        "max cell difference {worst:.1e}; 200 random overlaps sum to 1 within {sum_err:.1e}"
    ))
}

fn c7_plug_and_play(ctx: &Ctx) -> Outcome {
    let fz = ctx.frozen();
    let cfg = TrainConfig {
        steps: 60,
        ..Default::default()
    };
    let before = optimizer_steps();
    let pair = [&ctx.pair[0], &ctx.pair[1]];
    let listed = |order: [usize; 2]| {
        let boxes = [[0.0, 0.0, 0.5, 1.0], [0.5, 0.0, 1.0, 1.0]];
        prepare(
            ctx,
            "",
            order.iter().map(|&i| region(pair[i], boxes[i], 1.0)).collect(),
            OverlapMode::WeightedMean,
        )
    };
    let sc = SampleConfig {
        steps: 20,
        seed: 3,
        ..Default::default()
    };
    let g1 = ctx.pipe().generate(&listed([0, 1]), &sc).map_err(|e| e.to_string())?;
    let g2 = ctx.pipe().generate(&listed([1, 0]), &sc).map_err(|e| e.to_string())?;
    let composed_steps = optimizer_steps() - before;
    ensure!(composed_steps == 0, "{composed_steps} optimizer steps during composition");
    ensure!(g1.image == g2.image, "region listing order changed the image");

    let train = |i: usize| train_concept(&ctx.data[i], &cfg, &fz, |_| {}).unwrap().0.to_bytes();
    let (a1, b1) = (train(3), train(5));
    let (b2, a2) = (train(5), train(3));
    ensure!(a1 == a2 && b1 == b2, "module bytes depend on training order");

    let dir = tempfile::tempdir().unwrap();
    let mut sizes = Vec::new();
    for m in &ctx.pair {
        let p = dir.path().join(format!("{}.mbcm", m.meta.concept_id));
        m.save(&p).map_err(|e| e.to_string())?;
        let loaded = ConceptModule::load(&p, &ctx.vocab, Some(&ctx.dims())).map_err(|e| e.to_string())?;
        ensure!(
            loaded.to_bytes() == std::fs::read(&p).unwrap(),
            "{} not byte-stable",
            m.meta.concept_id
        );
        ensure!(loaded.to_bytes() == m.to_bytes(), "{} changed on reload", m.meta.concept_id);
        sizes.push(loaded.to_bytes().len());
    }
    Ok(format!(
        "0 optimizer steps while composing; modules identical across training orders; files byte-stable ({:?} bytes)",
        sizes
    ))
}

fn c8_scaling(ctx: &Ctx) -> Outcome {
    let modules: Vec<Arc<ConceptModule>> = {
        let extra = multibooth::eval::synthetic_modules(&ctx.vocab, &ctx.dims(), 4, DEFAULT_RANK, 8).unwrap();
        vec![ctx.pair[0].clone(), ctx.pair[1].clone(), extra[2].clone(), extra[3].clone()]
    };
    let report = bench(&ctx.pipe(), &modules, &[1, 2, 3, 4], 5, 0).map_err(|e| e.to_string())?;
    let flops: Vec<_> = (1..=4).map(|n| report.flops[&n.to_string()]).collect();
    ensure!(
        flops.iter().all(|f| f.self_attention == flops[0].self_attention),
        "self-attention FLOPs vary: {:?}",
        flops.iter().map(|f| f.self_attention).collect::<Vec<_>>()
    );
    let cells: Vec<usize> = report.timing.iter().map(|r| r.region_cells).collect();
    for i in 1..4 {
        ensure!(cells[i] > cells[i - 1], "region areas not increasing: {cells:?}");
        ensure!(
            flops[i].cross_attention > flops[i - 1].cross_attention,
            "cross-attention FLOPs not growing: {:?}",
            flops.iter().map(|f| f.cross_attention).collect::<Vec<_>>()
        );
    }
    let t: Vec<f64> = report.timing.iter().map(|r| r.seconds_per_forward).collect();
    let ratio = t[3] / t[1];
    ensure!(ratio < 2.0, "time(4)/time(2) = {ratio:.3}");
    Ok(format!(
        "self-attn {} FLOPs constant; cross-attn {:?} MFLOPs for areas {cells:?}; time(4)/time(2) = {ratio:.3}",
        flops[0].self_attention,
        flops.iter().map(|f| f.cross_attention / 1_000_000).collect::<Vec<_>>()
    ))
}

fn c9_fidelity(ctx: &Ctx) -> Outcome {
    let [a, b] = &ctx.pair;
    let refs: BTreeMap<String, Vec<Vec<f64>>> = [0, 2]
        .iter()
        .map(|&i| {
            (
                ctx.data[i].concept_id.clone(),
                reference_features(&ctx.encoder, &ctx.data[i].images).unwrap(),
            )
        })
        .collect();
    let full = [0.0, 0.0, 1.0, 1.0];
    let layouts = vec![
        (
            "single-a".to_string(),
            Layout {
                base_prompt: vec![],
                regions: vec![region(a, full, 1.0)],
            },
        ),
        (
            "single-b".to_string(),
            Layout {
                base_prompt: vec![],
                regions: vec![region(b, full, 1.0)],
            },
        ),
        (
            "pair".to_string(),
            Layout {
                base_prompt: vec![],
                regions: vec![region(a, [0.0, 0.0, 0.5, 1.0], 1.0), region(b, [0.5, 0.0, 1.0, 1.0], 1.0)],
            },
        ),
    ];
    let seeds: Vec<u64> = (0..16).collect();
    let report = evaluate(
        &ctx.pipe(),
        &ctx.encoder,
        &layouts,
        &refs,
        &seeds,
        &SampleConfig::default(),
        OverlapMode::WeightedMean,
    )
    .map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for (name, _) in &layouts {
        let m = report.mean_margin(Some(name)).ok_or_else(|| format!("{name}: no scores"))?;
        parts.push(format!("{name} {m:.3}"));
        ensure!(m >= 0.1, "{name}: mean margin {m:.3} < 0.1 ({})", parts.join(", "));
    }
    Ok(format!("16 seeds, mean own-minus-other margin: {}", parts.join(", ")))
}

fn c10_budget(ctx: &Ctx) -> Outcome {
    for m in &ctx.pair {
        let expected = EMBED_DIM + ctx.dims().iter().map(|&(d, k)| 2 * m.rank() * (d + k)).sum::<usize>();
        ensure!(
            m.num_params() == expected,
            "{}: {} parameters, expected {expected}",
            m.meta.concept_id,
            m.num_params()
        );
        let frac = m.to_bytes().len() as f64 / BASE_CHECKPOINT.len() as f64;
        ensure!(frac < 0.05, "module is {:.2}% of the base", 100.0 * frac);
    }
    let m = &ctx.pair[0];
    Ok(format!(
        "{} parameters; file {} bytes = {:.2}% of the {}-byte base",
        m.num_params(),
        m.to_bytes().len(),
        100.0 * m.to_bytes().len() as f64 / BASE_CHECKPOINT.len() as f64,
        BASE_CHECKPOINT.len()
    ))
}

fn c11_determinism(ctx: &Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    for m in &ctx.pair {
        m.save(&dir.path().join(format!("{}.mbcm", m.meta.concept_id)))
            .map_err(|e| e.to_string())?;
    }
    let layout = serde_json::json!({
        "version": 1,
        "base_prompt": "",
        "regions": [
            {"module": "concept_00.mbcm", "prompt": "a photo of a S* dog", "bbox": [0.0, 0.0, 0.5, 1.0]},
            {"module": "concept_02.mbcm", "prompt": "a photo of a V* cup", "bbox": [0.5, 0.0, 1.0, 1.0]}
        ]
    });
    let lp = dir.path().join("layout.json");
    std::fs::write(&lp, layout.to_string()).unwrap();
    let run = |seed: u64, name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_multibooth"))
            .args(["--seed", &seed.to_string(), "generate", "--layout"])
            .arg(&lp)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(o.status.success(), "generate failed: {}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(&out).map_err(|e| e.to_string())
    };
    let mut hashes = Vec::new();
    for seed in [0, 1] {
        let a = run(seed, &format!("a{seed}.png"))?;
        let b = run(seed, &format!("b{seed}.png"))?;
        ensure!(a == b, "seed {seed}: PNGs differ");
        hashes.push(sha256_hex(&a)[..12].to_string());
    }
    ensure!(hashes[0] != hashes[1], "different seeds gave the same image");
    Ok(format!("2 seeds × 2 runs byte-identical (sha256 {})", hashes.join(", ")))
}

fn main() {
    let start = Instant::now();
    let ctx = setup();
    println!(
        "setup: base {} loaded, 3 concept modules trained in {:.1}s",
        &BASE_SHA256[..12],
        ctx.train_time.as_secs_f64()
    );
    let criteria: [(&str, Duration, fn(&Ctx) -> Outcome); 11] = [
        ("ACN exactness", Duration::from_secs(1), c1_acn),
        ("regularizer direction", Duration::from_secs(600), c2_regularizer),
        ("LoRA zero-init identity and frozen base", Duration::from_secs(60), c3_zero_init),
        ("gradient correctness", Duration::from_secs(120), c4_gradients),
        ("RCM degenerate-partition oracle", Duration::from_secs(60), c5_degenerate),
        ("RCM compositionality", Duration::from_secs(120), c6_compositionality),
        ("plug-and-play contract", Duration::from_secs(60), c7_plug_and_play),
        ("scaling direction", Duration::from_secs(300), c8_scaling),
        ("end-to-end fidelity", Duration::from_secs(900), c9_fidelity),
        ("parameter budget", Duration::from_secs(1), c10_budget),
        ("determinism", Duration::from_secs(120), c11_determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&ctx))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let took = t0.elapsed();
        let outcome = outcome.and_then(|d| within(budget, took).map(|_| d));
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail} [{:.2}s]", i + 1, took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {why} [{:.2}s]", i + 1, took.as_secs_f64());
            }
        }
    }
    println!(
        "acceptance: {} of 11 criteria passed in {:.1}s",
        11 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
