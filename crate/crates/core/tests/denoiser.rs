use mbtensor::gradcheck::{central_difference, relative_error};
use mbtensor::rng::normal;
use mbtensor::{Binder, Graph, ParamSet, RngStream, Tensor};
use multibooth::assets::{base_denoiser, BASE_CHECKPOINT, BASE_SHA256};
use multibooth::container::sha256_hex;
use multibooth::denoiser::checkpoint::load_verified;
use multibooth::denoiser::lora::bind_constant;
use multibooth::denoiser::schedule::mix;
use multibooth::denoiser::*;
use multibooth::nn::{attention, attention_oracle};
use multibooth::Error;
use proptest::prelude::*;

fn f64s(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

/// Rank by Gaussian elimination with full pivoting.
fn numeric_rank(m: &[f64], rows: usize, cols: usize, tol: f64) -> usize {
    let mut a = m.to_vec();
    let mut rank = 0;
    let mut used_r = vec![false; rows];
    let mut used_c = vec![false; cols];
    loop {
        let mut best = (0.0, 0, 0);
        for r in (0..rows).filter(|&r| !used_r[r]) {
            for c in (0..cols).filter(|&c| !used_c[c]) {
                if a[r * cols + c].abs() > best.0 {
                    best = (a[r * cols + c].abs(), r, c);
                }
            }
        }
        if best.0 <= tol {
            return rank;
        }
        let (_, pr, pc) = best;
        used_r[pr] = true;
        used_c[pc] = true;
        rank += 1;
        for r in (0..rows).filter(|&r| !used_r[r]) {
            let f = a[r * cols + pc] / a[pr * cols + pc];
            for c in 0..cols {
                a[r * cols + c] -= f * a[pr * cols + c];
            }
        }
    }
}

#[test]
fn schedule_closed_forms() {
    let s = NoiseSchedule::standard();
    assert_eq!(s.len(), 1000);
    assert!((s.alpha(0) - (1.0f64 - 1e-4).sqrt()).abs() < 1e-15);
    assert!((s.alpha(0) - 0.99995).abs() < 1e-8);
    assert!(s.sigma(0) < 0.011);
    for t in 0..s.len() {
        assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
        if t > 0 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.sigma(t) > s.sigma(t - 1));
            assert!(s.beta(t) > s.beta(t - 1));
        }
    }
    // Direct product oracle at the last step.
    let mut acc = 1.0;
    for i in 0..1000 {
        acc *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
    }
    assert!((s.alpha_bar(999) - acc).abs() < 1e-15);
    assert!(NoiseSchedule::linear(1).is_err());
    assert!(NoiseSchedule::linear(2).is_ok());
    assert!(s.check_t(1000).is_err());
}

#[test]
fn add_noise_cases() {
    let s = NoiseSchedule::standard();
    let mut rng = RngStream::new(40).rng();
    let z: Tensor<f32> = normal(&mut rng, [4, 8, 8], 1.0);
    let e: Tensor<f32> = normal(&mut rng, [4, 8, 8], 1.0);
    assert_eq!(mix(&z, &e, 1.0, 0.0).unwrap(), z);
    let zero = Tensor::zeros([4, 8, 8]);
    let only = s.add_noise(&z, &zero, 300).unwrap();
    for (a, b) in only.data().iter().zip(z.data()) {
        assert_eq!(*a, (s.alpha(300) * *b as f64) as f32);
    }
    for t in [0, 17, 500, 999] {
        let zt = s.add_noise(&z, &e, t).unwrap();
        for ((a, x), y) in zt.data().iter().zip(z.data()).zip(e.data()) {
            let want = s.alpha_bar(t).sqrt() * *x as f64 + (1.0 - s.alpha_bar(t)).sqrt() * *y as f64;
            assert!((*a as f64 - want).abs() < 1e-6);
        }
    }
    assert!(s.add_noise(&z, &Tensor::zeros([4, 8]), 3).is_err());
    assert!(s.add_noise(&z, &e, 1000).is_err());
}

#[test]
fn lora_projection_cases() {
    let mut rng = RngStream::new(41).rng();
    let (n, d, k, r) = (5, 7, 6, 2);
    let x: Tensor<f64> = normal(&mut rng, [n, k], 1.0);
    let w: Tensor<f64> = normal(&mut rng, [d, k], 1.0);
    let a: Tensor<f64> = normal(&mut rng, [r, k], 1.0);
    let b: Tensor<f64> = normal(&mut rng, [d, r], 1.0);

    let mut g = Graph::new();
    let (xv, wv, av) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(a.clone()));
    let zb = g.constant(Tensor::zeros([d, r]));
    let plain = lora_project(&mut g, xv, wv, None).unwrap();
    let zero = lora_project(&mut g, xv, wv, Some(LoraVars { a: av, b: zb })).unwrap();
    assert_eq!(g.value(plain), g.value(zero));

    let w0 = g.constant(Tensor::zeros([d, k]));
    let bv = g.constant(b.clone());
    let h = lora_project(&mut g, xv, w0, Some(LoraVars { a: av, b: bv })).unwrap();
    // h[i][j] = Σ_s B[j][s] Σ_c A[s][c] x[i][c]
    let mut ba = vec![0.0; d * k];
    for j in 0..d {
        for c in 0..k {
            ba[j * k + c] = (0..r).map(|s| b.data()[j * r + s] * a.data()[s * k + c]).sum();
        }
    }
    for i in 0..n {
        for j in 0..d {
            let want: f64 = (0..k).map(|c| ba[j * k + c] * x.data()[i * k + c]).sum();
            assert!((g.value(h).data()[i * d + j] - want).abs() < 1e-12);
        }
    }
    assert!(numeric_rank(&ba, d, k, 1e-9) <= r);
    assert!(numeric_rank(w.data(), d, k, 1e-9) == d.min(k));

    let big = g.constant(normal(&mut rng, [7, k], 1.0));
    let bb = g.constant(normal(&mut rng, [d, 7], 1.0));
    assert!(lora_project(&mut g, xv, wv, Some(LoraVars { a: big, b: bb })).is_err());
    assert!(lora_project(&mut g, xv, wv, Some(LoraVars { a: av, b: av })).is_err());
}

#[test]
fn attention_trivial_cases() {
    let mut rng = RngStream::new(42).rng();
    let mut g = Graph::<f32>::new();
    let q = g.constant(normal(&mut rng, [4, 8], 1.0));
    let k = g.constant(normal(&mut rng, [2, 8], 1.0));
    let row: Tensor<f32> = normal(&mut rng, [1, 8], 1.0);
    let mut data = row.data().to_vec();
    data.extend_from_slice(row.data());
    let v = g.constant(Tensor::new([2, 8], data).unwrap());
    let o = attention(&mut g, q, k, v, 2).unwrap();
    assert_eq!(g.shape(o), &[4, 8]);
    for i in 0..4 {
        for c in 0..8 {
            assert!((g.value(o).data()[i * 8 + c] - row.data()[c]).abs() < 1e-6);
        }
    }
    let bad = g.constant(Tensor::zeros([3, 8]));
    assert!(attention(&mut g, q, k, bad, 2).is_err());
    assert!(attention(&mut g, q, k, v, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_matches_dense_oracle(seed in any::<u64>(), n in 1usize..=64, m in 1usize..=64, heads in 1usize..=4, hd in 1usize..=8) {
        let d = heads * hd;
        let mut rng = RngStream::new(seed).rng();
        let q: Tensor<f32> = normal(&mut rng, [n, d], 1.0);
        let k: Tensor<f32> = normal(&mut rng, [m, d], 1.0);
        let v: Tensor<f32> = normal(&mut rng, [m, d], 1.0);
        let want = attention_oracle(&f64s(&q), &f64s(&k), &f64s(&v), n, m, d, heads);
        let mut g = Graph::<f32>::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let o = attention(&mut g, qv, kv, vv, heads).unwrap();
        for (a, b) in g.value(o).data().iter().zip(&want) {
            prop_assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_init_lora_is_identity_on_base(seed in any::<u64>(), t in 0usize..1000) {
        let net = base();
        let cfg = net.config().clone();
        let mut rng = RngStream::new(seed).rng();
        let z: Tensor<f32> = normal(&mut rng, [cfg.latent_channels, cfg.latent_size, cfg.latent_size], 1.0);
        let ctx: Tensor<f32> = normal(&mut rng, [5, cfg.text_dim], 0.3);
        let mut ps = ParamSet::<f32>::new();
        let lp = LoraParams::init(&mut ps, &cfg.cross_dims(), DEFAULT_RANK, &mut rng).unwrap();
        let layers: Vec<[Tensor<f32>; 4]> = lp.layers.iter().map(|ids| ids.map(|id| ps.get(id).clone())).collect();
        let plain = net.predict(&z, t, &ctx, None).unwrap();
        let adapted = net.predict(&z, t, &ctx, Some(&layers)).unwrap();
        prop_assert_eq!(plain.data(), adapted.data());
    }
}

fn base() -> Denoiser {
    use std::sync::OnceLock;
    static NET: OnceLock<Denoiser> = OnceLock::new();
    NET.get_or_init(|| base_denoiser().unwrap()).clone()
}

#[test]
fn prediction_is_deterministic_and_checks_prompt_width() {
    let net = base();
    let mut rng = RngStream::new(43).rng();
    let z: Tensor<f32> = normal(&mut rng, [4, 8, 8], 1.0);
    let ctx: Tensor<f32> = normal(&mut rng, [3, 64], 0.3);
    let a = net.predict(&z, 250, &ctx, None).unwrap();
    let b = net.predict(&z, 250, &ctx, None).unwrap();
    assert_eq!(a, b);
    assert!(a.all_finite());
    assert!(net.predict(&z, 250, &Tensor::zeros([3, 32]), None).is_err());
    assert!(net.predict(&Tensor::zeros([4, 4, 4]), 250, &ctx, None).is_err());
    // Too few LoRA layers.
    let mut ps = ParamSet::<f32>::new();
    let lp = LoraParams::init(&mut ps, &net.config().cross_dims()[..1], 4, &mut rng).unwrap();
    let layers: Vec<[Tensor<f32>; 4]> = lp.layers.iter().map(|ids| ids.map(|id| ps.get(id).clone())).collect();
    assert!(net.predict(&z, 250, &ctx, Some(&layers)).is_err());
}

#[test]
fn lora_gradient_matches_finite_differences() {
    let text_dim = 6;
    let net = Denoiser::init(DenoiserConfig::miniature(text_dim), 11).unwrap().cast::<f64>();
    let cfg = net.config().clone();
    let mut rng = RngStream::new(44).rng();
    let z: Tensor<f64> = normal(&mut rng, [4, cfg.latent_size, cfg.latent_size], 1.0);
    let eps: Tensor<f64> = normal(&mut rng, [4, cfg.latent_size, cfg.latent_size], 1.0);
    let ctx: Tensor<f64> = normal(&mut rng, [3, text_dim], 0.5);
    let mut ps = ParamSet::<f64>::new();
    let lp = LoraParams::init(&mut ps, &cfg.cross_dims(), 2, &mut rng).unwrap();
    // Non-zero B so both factors carry gradient.
    for ids in &lp.layers {
        for &id in &[ids[1], ids[3]] {
            let shape = ps.get(id).shape().to_vec();
            *ps.get_mut(id) = normal(&mut rng, shape, 0.5);
        }
    }
    ps.set_trainable(true);

    let loss = |ps: &ParamSet<f64>, grad: bool| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut g = Graph::new();
        let mut nb = Binder::new(net.params());
        let mut lb = Binder::new(ps);
        let zt = g.constant(z.clone());
        let c = g.constant(ctx.clone());
        let lora = lp.bind(&mut g, &mut lb);
        let router = PlainRouter {
            context: c,
            lora: Some(&lora),
        };
        let e_hat = net.forward(&mut g, &mut nb, zt, 400, &router).unwrap();
        let e = g.constant(eps.clone());
        let diff = g.sub(e, e_hat).unwrap();
        let l = g.sum_squares(diff);
        let val = g.value(l).data()[0];
        if !grad {
            return (val, Vec::new());
        }
        let grads = g.backward(l).unwrap();
        assert!(nb.collect(&grads).iter().all(Option::is_none), "base received gradient");
        (val, lb.collect(&grads))
    };
    let (_, grads) = loss(&ps, true);
    for id in ps.ids() {
        let analytic = grads[id.index()].clone().expect("LoRA factor gradient");
        let x0 = ps.get(id).data().to_vec();
        let numeric = central_difference(
            |x| {
                let mut p = ps.clone();
                p.get_mut(id).data_mut().copy_from_slice(x);
                loss(&p, false).0
            },
            &x0,
            1e-5,
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "{}: relative error {err:e}", ps.name(id));
    }
}

#[test]
fn constant_lora_binding_matches_parameters() {
    let mut ps = ParamSet::<f32>::new();
    let mut rng = RngStream::new(45).rng();
    let lp = LoraParams::init(&mut ps, &[(8, 6), (8, 6)], 3, &mut rng).unwrap();
    assert_eq!(lp.num_scalars(), 2 * 2 * 3 * (8 + 6));
    assert_eq!(ps.num_scalars(), lp.num_scalars());
    let layers: Vec<[Tensor<f32>; 4]> = lp.layers.iter().map(|ids| ids.map(|id| ps.get(id).clone())).collect();
    let mut g = Graph::<f32>::new();
    let bound = bind_constant(&mut g, &layers);
    assert_eq!(g.value(bound[1].v.a), ps.get(lp.layers[1][2]));
    assert!(bound[1].k.b != bound[1].v.b);
    for ids in &lp.layers {
        assert!(ps.get(ids[1]).data().iter().all(|&x| x == 0.0));
    }
    assert!(LoraParams::init(&mut ps, &[(4, 6)], 5, &mut rng).is_err());
    assert!(LoraParams::init(&mut ps, &[(4, 6)], 0, &mut rng).is_err());
}

#[test]
fn shipped_base_matches_checksum_and_architecture() {
    assert_eq!(sha256_hex(BASE_CHECKPOINT), BASE_SHA256);
    let net = base();
    assert_eq!(net.config(), &DenoiserConfig::default());
    assert_eq!(net.num_params(), 364_964);
    assert!(net.params().iter().all(|(_, t)| t.all_finite()));
}

#[test]
fn checkpoint_roundtrip_and_verification() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.mbnt");
    let net = Denoiser::init(DenoiserConfig::miniature(8), 12).unwrap();
    net.save(&p, serde_json::json!({"steps": 3})).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let back = load_verified(&p, &sha256_hex(&bytes)).unwrap();
    assert_eq!(back.params(), net.params());
    assert_eq!(back.weights_sha256(), net.weights_sha256());
    assert!(matches!(load_verified(&p, BASE_SHA256), Err(Error::Checksum { .. })));
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Denoiser::load(&p), Err(Error::Parse(_))));
    assert!(Denoiser::load(&dir.path().join("missing.mbnt")).is_err());
    let other = Denoiser::init(DenoiserConfig::miniature(8), 13).unwrap();
    assert_ne!(other.weights_sha256(), net.weights_sha256());
}

#[test]
fn config_validation() {
    let mut c = DenoiserConfig::default();
    assert!(c.validate().is_ok());
    c.block_levels = vec![0, 2, 0];
    assert!(c.validate().is_err());
    c.block_levels = vec![1, 0];
    assert!(c.validate().is_err());
    let mut c = DenoiserConfig::default();
    c.heads = 3;
    assert!(c.validate().is_err());
    assert!(Denoiser::init(c, 0).is_err());
}
