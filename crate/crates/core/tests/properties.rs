//! Randomized properties of the tensor engine and the data contracts.

use gzf::data::{
    decode_ppm, encode_ppm, fit_length, load_gaze_csv, normalize_gaze, split_dataset,
    write_gaze_csv, DatasetManifest, GazeTrajectory, ImageSample, SampleEntry,
};
use gzf::nd::{grad_check, Graph, Tensor, Var};
use gzf::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OPS: usize = 16;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Entries of magnitude in `[0.1, 1.5]`, keeping ReLU inputs off the kink.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contracts `out` against a fixed random tensor so every output coordinate
/// carries a distinct weight into the scalar loss.
fn project(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(rand_t(&shape, rng));
    let m = g.mul(out, r)?;
    g.sum(m)
}

/// Builds parameters and a loss closure for op `op` at random small sizes.
fn op_case(op: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..4);
    let k = rng.random_range(1..5);
    let n = rng.random_range(2..5);
    let mut params: Vec<Tensor> = match op {
        0 => vec![rand_t(&[m, k], &mut rng), rand_t(&[k, n], &mut rng)],
        1 => vec![rand_t(&[m, k], &mut rng), rand_t(&[n, k], &mut rng)],
        2 => vec![rand_t(&[k], &mut rng), rand_t(&[k, n], &mut rng)],
        3 | 5 => vec![rand_t(&[m, n], &mut rng), rand_t(&[m, n], &mut rng)],
        4 => vec![rand_t(&[m, n], &mut rng), rand_t(&[n], &mut rng)],
        6 => vec![rand_t(&[m, n], &mut rng)],
        7 => vec![off_zero(&[m, n], &mut rng)],
        8 => vec![rand_t(&[m, n], &mut rng)],
        9 => vec![
            rand_t(&[m, n], &mut rng),
            rand_t(&[n], &mut rng),
            rand_t(&[n], &mut rng),
        ],
        10 => vec![rand_t(&[m, k], &mut rng), rand_t(&[m, n], &mut rng)],
        11 => vec![rand_t(&[m, n + 2], &mut rng)],
        12 => vec![rand_t(&[n], &mut rng), rand_t(&[m, n], &mut rng)],
        13 => vec![rand_t(&[m + 1, n], &mut rng)],
        14 => vec![rand_t(&[m, n], &mut rng)],
        15 => vec![rand_t(&[m, n], &mut rng)],
        _ => unreachable!(),
    };
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let row = rng.random_range(0..=m);
    let start = rng.random_range(0..3);
    let proj_seed = rng.random::<u64>();
    let report = grad_check(&mut params, 1e-5, |g: &mut Graph<'_>, v: &[Var]| {
        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
        let out = match op {
            0 | 2 => g.matmul(v[0], v[1])?,
            1 => g.matmul_t(v[0], v[1])?,
            3 => g.add(v[0], v[1])?,
            4 => g.add_bias(v[0], v[1])?,
            5 => g.mul(v[0], v[1])?,
            6 => g.scale(v[0], -1.7)?,
            7 => g.relu(v[0])?,
            8 => g.softmax_rows(v[0])?,
            9 => g.layer_norm(v[0], v[1], v[2], 1e-5)?,
            10 => g.concat_last(&[v[0], v[1]])?,
            11 => g.slice_last(v[0], start, n)?,
            12 => g.concat_rows(&[v[0], v[1]])?,
            13 => g.select_row(v[0], row)?,
            14 => g.reshape(v[0], &[n, m])?,
            15 => return g.cross_entropy(v[0], &labels),
            _ => unreachable!(),
        };
        project(g, out, &mut prng)
    })
    .unwrap();
    report.max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn every_op_passes_gradient_check(op in 0..OPS, seed in any::<u64>()) {
        let err = op_case(op, seed);
        prop_assert!(err < 1e-4, "op {op} seed {seed}: {err:e}");
    }
}

proptest! {
    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&[m, k], &mut rng);
        let b = rand_t(&[k, n], &mut rng);
        let c = rand_t(&[n, p], &mut rng);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), m in 1usize..5, n in 1usize..8, spread in 0.0f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&[m, n], &mut rng).map(|v| v * spread);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let s = g.softmax_rows(xv).unwrap();
        let s = g.value(s);
        for i in 0..m {
            prop_assert!(s.row(i).iter().all(|v| *v >= 0.0));
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_is_idempotent(
        pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..50),
        w in 1.0f64..4000.0,
        h in 1.0f64..4000.0,
    ) {
        let points = pts.iter().map(|(x, y)| [x * w, y * h]).collect();
        let g = GazeTrajectory::new(points, [w, h]).unwrap();
        let once = normalize_gaze(&g, 224.0).unwrap();
        let twice = normalize_gaze(&once, 224.0).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.points().iter().flatten().all(|v| (0.0..=224.0).contains(v)));
    }

    #[test]
    fn fit_length_is_exact(n in 1usize..400, len in 1usize..400) {
        let pts: Vec<[f64; 2]> = (0..n).map(|i| [i as f64, 0.5 * i as f64]).collect();
        let g = GazeTrajectory::new(pts.clone(), [1000.0, 1000.0]).unwrap();
        let f = fit_length(&g, len).unwrap();
        prop_assert_eq!(f.len(), len);
        let keep = n.min(len);
        prop_assert_eq!(&f.points()[..keep], &pts[..keep]);
        prop_assert!(f.points()[keep..].iter().all(|p| *p == pts[n - 1]));
    }

    #[test]
    fn stratified_split_counts(counts in prop::collection::vec(1usize..200, 1..8), seed in any::<u64>()) {
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(SampleEntry {
                    image: format!("{c}-{i}.ppm"),
                    gaze: format!("{c}-{i}.csv"),
                    label: c,
                    split: None,
                });
            }
        }
        let m = DatasetManifest {
            version: 1,
            classes: (0..counts.len()).map(|c| c.to_string()).collect(),
            image_extent: [8, 8],
            gaze_extent: [8.0, 8.0],
            samples,
            root: Default::default(),
        };
        let (train, test) = split_dataset(&m, (5, 1), seed).unwrap();
        let (tr, te) = (train.class_counts(), test.class_counts());
        for (c, &n) in counts.iter().enumerate() {
            prop_assert_eq!(tr[c] + te[c], n);
            prop_assert!((te[c] as f64 - n as f64 / 6.0).abs() <= 1.0);
        }
    }

    #[test]
    fn ppm_round_trip_is_lossless_on_8_bit_values(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect();
        let img = ImageSample::new(w, h, px).unwrap();
        prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn ppm_quantization_error_is_half_a_level(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..=1.0)).collect();
        let img = ImageSample::new(4, 4, px).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gaze_csv_round_trip_is_lossless(pts in prop::collection::vec((0.0f64..1024.0, 0.0f64..1024.0), 1..60)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let points: Vec<[f64; 2]> = pts.iter().map(|(x, y)| [*x, *y]).collect();
        let g = GazeTrajectory::new(points, [1024.0, 1024.0]).unwrap();
        write_gaze_csv(&path, &g).unwrap();
        prop_assert_eq!(load_gaze_csv(&path, [1024.0, 1024.0]).unwrap(), g);
    }
}

#[test]
fn normalization_endpoints() {
    let g = GazeTrajectory::new(vec![[0.0, 0.0], [1024.0, 768.0], [512.0, 384.0]], [1024.0, 768.0]).unwrap();
    let n = normalize_gaze(&g, 224.0).unwrap();
    assert_eq!(n.points(), &[[0.0, 0.0], [224.0, 224.0], [112.0, 112.0]]);
}

#[test]
fn normalizing_before_or_inside_the_pipeline_agrees() {
    // Feeding an already-normalized trajectory through the pipeline's own
    // normalization leaves the encoder input unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = (0..40).map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)]).collect();
    let g = GazeTrajectory::new(pts, [64.0, 64.0]).unwrap();
    let inside = gzf::data::gaze_input(&g, 176).unwrap();
    let before = gzf::data::gaze_input(&normalize_gaze(&g, 224.0).unwrap(), 176).unwrap();
    assert!(inside.max_abs_diff(&before) <= 1e-12);
}
