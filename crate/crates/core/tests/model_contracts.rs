//! Shape contracts, worked examples and oracle comparisons for the model.

use gzf::model::{
    patchify, ClassifierParams, CrossAttentionParams, DsgeConfig, DsgeParams, EncoderLayer,
    Forward, FusionKind, FusionParams, GazeClassifier, GazeEncoderKind, Init, MlpGazeParams,
    ModelConfig, VitConfig, VitParams,
};
use gzf::nd::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

// A deliberately naive reimplementation over nested vectors, sharing no
// code with the crate beyond reading parameter values.
mod oracle {
    use super::Mat;

    pub fn mat(t: &gzf::nd::Tensor) -> Mat {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    /// `x · wᵀ`.
    pub fn xwt(x: &Mat, w: &Mat) -> Mat {
        x.iter()
            .map(|r| w.iter().map(|wr| r.iter().zip(wr).map(|(a, b)| a * b).sum()).collect())
            .collect()
    }

    pub fn mm(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .map(|r| {
                (0..b[0].len())
                    .map(|j| r.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    pub fn softmax(r: &[f64]) -> Vec<f64> {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let sd = (var + 1e-5).sqrt();
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mu) / sd * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
            .collect()
    }

    pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
        a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
    }

    pub fn attention(q: &Mat, k: &Mat, v: &Mat, scale: f64) -> Mat {
        let scores: Mat = q
            .iter()
            .map(|qr| k.iter().map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale).collect())
            .collect();
        let a: Mat = scores.iter().map(|r| softmax(r)).collect();
        mm(&a, v)
    }

    pub fn cols(x: &Mat, start: usize, len: usize) -> Mat {
        x.iter().map(|r| r[start..start + len].to_vec()).collect()
    }
}

fn store_mat(store: &ParamStore, name: &str) -> Mat {
    oracle::mat(store.by_name(name).unwrap_or_else(|| panic!("missing {name}")))
}

fn store_vec(store: &ParamStore, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap().data().to_vec()
}

/// Moves every parameter off its initialization so the comparison exercises
/// non-trivial values.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn oracle_encoder_layer(store: &ParamStore, p: &str, x: &Mat, heads: usize) -> Mat {
    let q = oracle::xwt(x, &store_mat(store, &format!("{p}.wq")));
    let k = oracle::xwt(x, &store_mat(store, &format!("{p}.wk")));
    let v = oracle::xwt(x, &store_mat(store, &format!("{p}.wv")));
    let d = x[0].len();
    let dh = d / heads;
    let mut cat: Mat = vec![Vec::new(); x.len()];
    for h in 0..heads {
        let o = oracle::attention(
            &oracle::cols(&q, h * dh, dh),
            &oracle::cols(&k, h * dh, dh),
            &oracle::cols(&v, h * dh, dh),
            1.0 / (dh as f64).sqrt(),
        );
        for (c, r) in cat.iter_mut().zip(o) {
            c.extend(r);
        }
    }
    let mha = oracle::xwt(&cat, &store_mat(store, &format!("{p}.wo")));
    let x1 = oracle::layer_norm(
        &oracle::add(x, &mha),
        &store_vec(store, &format!("{p}.ln1.gamma")),
        &store_vec(store, &format!("{p}.ln1.beta")),
    );
    let h = oracle::add_bias(
        &oracle::xwt(&x1, &store_mat(store, &format!("{p}.ff1.w"))),
        &store_vec(store, &format!("{p}.ff1.b")),
    );
    let h: Mat = h.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    let ff = oracle::add_bias(
        &oracle::xwt(&h, &store_mat(store, &format!("{p}.ff2.w"))),
        &store_vec(store, &format!("{p}.ff2.b")),
    );
    oracle::layer_norm(
        &oracle::add(&x1, &ff),
        &store_vec(store, &format!("{p}.ln2.gamma")),
        &store_vec(store, &format!("{p}.ln2.beta")),
    )
}

fn max_diff(a: &Tensor, b: &Mat) -> f64 {
    let flat: Vec<f64> = b.iter().flatten().copied().collect();
    assert_eq!(a.len(), flat.len());
    a.data().iter().zip(&flat).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn encoder_layer_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let layer = EncoderLayer::init(&mut store, "enc", 8, 2, 32, 0.0, Init::FanIn, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let x = random_tensor(&[4, 8], -1.0, 1.0, &mut rng);
    let mut f = Forward::eval(&store);
    let xv = f.input(x.clone());
    let y = layer.forward(&mut f, xv).unwrap();
    let expect = oracle_encoder_layer(&store, "enc", &oracle::mat(&x), 2);
    assert!(max_diff(f.graph.value(y), &expect) < 1e-10);
}

#[test]
fn cross_attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let ca = CrossAttentionParams::init(&mut store, "ca", 6, 0.0, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let g = random_tensor(&[6], -1.0, 1.0, &mut rng);
    let tokens = random_tensor(&[5, 6], -1.0, 1.0, &mut rng);
    let i_hat = random_tensor(&[6], -1.0, 1.0, &mut rng);

    let mut f = Forward::eval(&store);
    let (gv, tv, iv) = (f.input(g.clone()), f.input(tokens.clone()), f.input(i_hat.clone()));
    let out = ca.forward(&mut f, gv, tv, iv).unwrap();

    let q = oracle::xwt(&vec![g.data().to_vec()], &store_mat(&store, "ca.wq"));
    let k = oracle::xwt(&oracle::mat(&tokens), &store_mat(&store, "ca.wk"));
    let v = oracle::xwt(&oracle::mat(&tokens), &store_mat(&store, "ca.wv"));
    let ctx = oracle::attention(&q, &k, &v, 1.0 / 6f64.sqrt());
    let o = oracle::xwt(&ctx, &store_mat(&store, "ca.wo"));
    let expect = oracle::add(&o, &vec![i_hat.data().to_vec()]);
    assert!(max_diff(f.graph.value(out), &expect) < 1e-10);
}

#[test]
fn identical_rows_give_uniform_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let layer = EncoderLayer::init(&mut store, "enc", 8, 2, 16, 0.0, Init::FanIn, &mut rng).unwrap();
    let row: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_rows(&vec![row; 5]).unwrap();
    let mut f = Forward::eval(&store);
    f.record_attention();
    let xv = f.input(x);
    layer.forward(&mut f, xv).unwrap();
    let maps = f.attention_maps().to_vec();
    assert_eq!(maps.len(), 2);
    for a in maps {
        for v in f.graph.value(a).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }
}

#[test]
fn gaze_embedding_hand_example() {
    let cfg = DsgeConfig {
        seq_len: 1,
        hidden: 1,
        heads: 1,
        layers: 1,
        out_dim: 1,
        ..DsgeConfig::default()
    };
    let mut store = ParamStore::new();
    let dsge = DsgeParams::init(&cfg, &mut store, "dsge", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (w, b) = dsge.embed_ids();
    *store.get_mut(w) = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
    *store.get_mut(b) = Tensor::vector(vec![1.0]);
    let mut f = Forward::eval(&store);
    let g = f.input(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
    let e = dsge.embed(&mut f, g).unwrap();
    assert_eq!(f.graph.value(e).data(), &[7.0]);
}

fn desk_dsge(rng: &mut ChaCha8Rng) -> (DsgeParams, ParamStore) {
    let cfg = DsgeConfig {
        seq_len: 12,
        hidden: 16,
        heads: 2,
        layers: 2,
        out_dim: 8,
        dropout: 0.0,
        ..DsgeConfig::default()
    };
    let mut store = ParamStore::new();
    let d = DsgeParams::init(&cfg, &mut store, "dsge", rng).unwrap();
    (d, store)
}

fn dsge_out(d: &DsgeParams, store: &ParamStore, g: &Tensor) -> Tensor {
    let mut f = Forward::eval(store);
    let gv = f.input(g.clone());
    let y = d.forward(&mut f, gv).unwrap();
    f.graph.value(y).clone()
}

#[test]
fn gaze_encoder_is_order_sensitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, store) = desk_dsge(&mut rng);
    for _ in 0..5 {
        let g = random_tensor(&[12, 2], 0.0, 224.0, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..12).map(|i| g.row(i).to_vec()).collect();
        rows.swap(0, 1 + rng.random_range(0..11));
        let permuted = Tensor::from_rows(&rows).unwrap();
        assert!(dsge_out(&d, &store, &g).max_abs_diff(&dsge_out(&d, &store, &permuted)) > 1e-9);
    }
}

#[test]
fn constant_alignment_ignores_gaze() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d, mut store) = desk_dsge(&mut rng);
    let (w, b) = d.align_ids();
    *store.get_mut(w) = Tensor::zeros(&[8, 16]);
    let c = Tensor::vector((0..8).map(|i| i as f64 - 3.5).collect());
    *store.get_mut(b) = c.clone();
    for _ in 0..3 {
        let g = random_tensor(&[12, 2], 0.0, 224.0, &mut rng);
        assert_eq!(dsge_out(&d, &store, &g), c);
    }
}

#[test]
fn gaze_encoders_are_deterministic_in_eval_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (d, store) = desk_dsge(&mut rng);
    let g = random_tensor(&[12, 2], 0.0, 224.0, &mut rng);
    assert_eq!(dsge_out(&d, &store, &g), dsge_out(&d, &store, &g));
}

#[test]
fn mlp_gaze_encoder_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let mlp = MlpGazeParams::init(&mut store, "mlp", 176, 512, 768, 0.0, &mut rng).unwrap();
    let g = random_tensor(&[176, 2], 0.0, 224.0, &mut rng);
    let run = |store: &ParamStore, g: &Tensor| {
        let mut f = Forward::eval(store);
        let gv = f.input(g.clone());
        let y = mlp.forward(&mut f, gv).unwrap();
        f.graph.value(y).clone()
    };
    let y = run(&store, &g);
    assert_eq!(y.shape(), &[768]);

    let mut rows: Vec<Vec<f64>> = (0..176).map(|i| g.row(i).to_vec()).collect();
    rows.swap(3, 90);
    assert!(y.max_abs_diff(&run(&store, &Tensor::from_rows(&rows).unwrap())) > 1e-9);

    let mut zero = store.clone();
    for t in zero.tensors_mut() {
        *t = Tensor::zeros(t.shape());
    }
    assert!(run(&zero, &g).data().iter().all(|v| *v == 0.0));
}

#[test]
fn patch_counts() {
    let img = |s: usize| Tensor::zeros(&[3, s, s]);
    assert_eq!(patchify(&img(224), 16).unwrap().shape(), &[196, 768]);
    assert_eq!(patchify(&img(64), 8).unwrap().shape(), &[64, 192]);
    assert!(patchify(&img(64), 7).is_err());
}

#[test]
fn single_patch_is_the_flattened_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_tensor(&[3, 8, 8], -1.0, 1.0, &mut rng);
    let p = patchify(&img, 8).unwrap();
    assert_eq!(p.shape(), &[1, 192]);
    assert_eq!(p.data(), img.data());
}

#[test]
fn patchify_is_local() {
    // A bright square moved by one patch stride shows up in exactly the
    // neighbouring patch row and nowhere else.
    let put = |x0: usize| {
        let mut t = Tensor::zeros(&[3, 32, 32]);
        for c in 0..3 {
            for y in 2..6 {
                for x in x0 + 1..x0 + 5 {
                    t.data_mut()[c * 1024 + y * 32 + x] = 1.0;
                }
            }
        }
        patchify(&t, 8).unwrap()
    };
    let (a, b) = (put(0), put(8));
    let nonzero = |p: &Tensor| -> Vec<usize> {
        (0..p.rows()).filter(|&i| p.row(i).iter().any(|v| *v != 0.0)).collect()
    };
    assert_eq!(nonzero(&a), vec![0]);
    assert_eq!(nonzero(&b), vec![1]);
    assert_eq!(a.row(0), b.row(1));
}

#[test]
fn image_encoder_separates_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = VitConfig {
        image_size: 16,
        patch_size: 8,
        dim: 16,
        layers: 2,
        heads: 2,
        ffn_hidden: None,
        dropout: 0.0,
    };
    let mut store = ParamStore::new();
    let vit = VitParams::init(&cfg, &mut store, "vit", &mut rng).unwrap();
    let run = |img: &Tensor| {
        let mut f = Forward::eval(&store);
        let y = vit.forward(&mut f, img).unwrap();
        f.graph.value(y).clone()
    };
    for _ in 0..5 {
        let a = random_tensor(&[3, 16, 16], -1.0, 1.0, &mut rng);
        let b = random_tensor(&[3, 16, 16], -1.0, 1.0, &mut rng);
        assert_eq!(run(&a), run(&a));
        assert!(run(&a).max_abs_diff(&run(&b)) > 1e-9);
    }
}

#[test]
fn fusion_hand_example() {
    let mut store = ParamStore::new();
    let fusion = FusionParams::init(&mut store, "fusion", 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (w, b) = fusion.ids();
    *store.get_mut(w) = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
    *store.get_mut(b) = Tensor::vector(vec![0.0]);
    let mut f = Forward::eval(&store);
    let g = f.input(Tensor::vector(vec![2.0]));
    let i = f.input(Tensor::vector(vec![3.0]));
    let y = fusion.fuse(&mut f, g, i).unwrap();
    assert_eq!(f.graph.value(y).data(), &[8.0]);
}

#[test]
fn zero_fusion_weights_pass_the_image_feature_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let fusion = FusionParams::init(&mut store, "fusion", 16, &mut rng).unwrap();
    let (w, b) = fusion.ids();
    *store.get_mut(w) = Tensor::zeros(&[16, 32]);
    *store.get_mut(b) = Tensor::zeros(&[16]);
    let i_hat = random_tensor(&[16], -3.0, 3.0, &mut rng);
    let mut f = Forward::eval(&store);
    let g = f.input(random_tensor(&[16], -3.0, 3.0, &mut rng));
    let i = f.input(i_hat.clone());
    let y = fusion.fuse(&mut f, g, i).unwrap();
    assert_eq!(f.graph.value(y), &i_hat);
}

fn classify(store: &ParamStore, head: &ClassifierParams, x: Tensor) -> Vec<f64> {
    let mut f = Forward::eval(store);
    let xv = f.input(x);
    let y = head.classify(&mut f, xv).unwrap();
    f.graph.value(y).data().to_vec()
}

#[test]
fn classifier_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let head = ClassifierParams::init(&mut store, "head", 4, 10, &mut rng).unwrap();
    let (w, b) = head.ids();
    *store.get_mut(w) = Tensor::zeros(&[10, 4]);
    *store.get_mut(b) = Tensor::zeros(&[10]);
    for p in classify(&store, &head, random_tensor(&[4], -1.0, 1.0, &mut rng)) {
        assert!((p - 0.1).abs() < 1e-15);
    }

    let mut store = ParamStore::new();
    let head = ClassifierParams::init(&mut store, "head", 1, 2, &mut rng).unwrap();
    let (w, b) = head.ids();
    *store.get_mut(w) = Tensor::zeros(&[2, 1]);
    *store.get_mut(b) = Tensor::vector(vec![3f64.ln(), 0.0]);
    let p = classify(&store, &head, Tensor::vector(vec![0.5]));
    assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
}

#[test]
fn classifier_outputs_lie_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let head = ClassifierParams::init(&mut store, "head", 8, 5, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    for _ in 0..20 {
        let p = classify(&store, &head, random_tensor(&[8], -50.0, 50.0, &mut rng));
        assert!(p.iter().all(|v| *v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn argmax_ignores_a_common_logit_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        assert_eq!(gzf::model::argmax(&z), gzf::model::argmax(&shifted));
    }
    assert_eq!(gzf::model::argmax(&[1.0, 3.0, 3.0]), 1);
}

#[test]
fn degenerate_keys_return_the_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let ca = CrossAttentionParams::init(&mut store, "ca", 4, 0.0, &mut rng).unwrap();
    let tok: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tokens = Tensor::from_rows(&vec![tok.clone(); 6]).unwrap();
    let expect = {
        let v = oracle::xwt(&vec![tok], &store_mat(&store, "ca.wv"));
        oracle::xwt(&v, &store_mat(&store, "ca.wo"))
    };
    for _ in 0..3 {
        let mut f = Forward::eval(&store);
        let q = f.input(random_tensor(&[4], -5.0, 5.0, &mut rng));
        let t = f.input(tokens.clone());
        let i = f.input(Tensor::zeros(&[4]));
        let y = ca.forward(&mut f, q, t, i).unwrap();
        assert!(max_diff(f.graph.value(y), &expect) < 1e-12);
    }
}

#[test]
fn image_only_variant_has_no_gaze_parameters() {
    let cfg = ModelConfig {
        gaze: GazeEncoderKind::None,
        fusion: FusionKind::Layer,
        ..ModelConfig::desk()
    };
    let (_, store) = GazeClassifier::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(store.names().iter().all(|n| n.starts_with("vit.") || n.starts_with("head.")));
    let bad = ModelConfig {
        fusion: FusionKind::Ca,
        ..cfg
    };
    assert!(bad.validate().is_err());
}

#[test]
fn every_variant_wires_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let img = random_tensor(&[3, 64, 64], -1.0, 1.0, &mut rng);
    let gaze = random_tensor(&[176, 2], 0.0, 224.0, &mut rng);
    for gk in GazeEncoderKind::ALL {
        for fk in [FusionKind::Layer, FusionKind::Add, FusionKind::Ca, FusionKind::CaLayer] {
            let cfg = ModelConfig {
                gaze: gk,
                fusion: fk,
                ..ModelConfig::desk()
            };
            if cfg.validate().is_err() {
                assert_eq!(gk, GazeEncoderKind::None);
                continue;
            }
            let (m, store) = GazeClassifier::new(&cfg, &mut rng).unwrap();
            let p = m.predict(&store, &img, &gaze).unwrap();
            assert_eq!(p.len(), 4, "{}", cfg.variant());
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
