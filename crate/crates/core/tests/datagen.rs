use kerhrm::datagen::*;
use kerhrm::Dataset;
use ndarray::Array2;

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn cls(rates: Vec<f64>, n: usize, scramble: Scramble) -> Vec<Dataset<f64>> {
    let cfg = SpuriousClsConfig {
        n_per_env: vec![n; rates.len()],
        bias_rates: rates,
        scramble,
        seed: 21,
        ..Default::default()
    };
    gen_spurious_classification(&cfg).unwrap()
}

#[test]
fn balanced_rate_has_no_spurious_correlation() {
    let n = 4000;
    let env = &cls(vec![0.5], n, Scramble::Identity)[0];
    let c = corr(env.spurious_attr.as_ref().unwrap(), env.y.as_slice().unwrap());
    assert!(c.abs() <= 3.0 / (n as f64).sqrt(), "corr {c}");
}

#[test]
fn invariant_block_means_follow_label() {
    let n = 4000;
    let cfg = SpuriousClsConfig::default();
    let env = &cls(vec![0.9], n, Scramble::Identity)[0];
    for class in [-1.0, 1.0] {
        let rows: Vec<usize> = (0..n).filter(|&i| env.y[i] == class).collect();
        let bound = 3.0 * cfg.sigma_s2.sqrt() / (rows.len() as f64).sqrt();
        for j in 0..cfg.d {
            let m = rows.iter().map(|&i| env.x[[i, j]]).sum::<f64>() / rows.len() as f64;
            assert!(
                (m - class).abs() <= bound,
                "class {class} coord {j}: mean {m}, bound {bound}"
            );
        }
    }
}

#[test]
fn generators_are_deterministic_with_exact_sizes() {
    let a = cls(vec![0.9, 0.8, 0.1], 300, Scramble::RandomOrthogonal);
    let b = cls(vec![0.9, 0.8, 0.1], 300, Scramble::RandomOrthogonal);
    assert_eq!(a, b);
    assert!(a.iter().all(|e| e.len() == 300));
    let cfg = SelBiasConfig {
        rates: vec![2.3, -1.5],
        n_per_env: vec![250, 400],
        seed: 4,
        ..Default::default()
    };
    let s1 = gen_selection_bias::<f64>(&cfg).unwrap();
    let s2 = gen_selection_bias::<f64>(&cfg).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(s1.iter().map(Dataset::len).collect::<Vec<_>>(), vec![250, 400]);
}

fn mean_gap(env: &Dataset<f64>) -> f64 {
    let vb = env.spurious_attr.as_ref().unwrap();
    (0..env.len()).map(|i| (env.y[i] - vb[i]).abs()).sum::<f64>() / env.len() as f64
}

#[test]
fn selection_pulls_target_toward_spurious_feature() {
    let base = SelBiasConfig {
        n_per_env: vec![3000],
        seed: 8,
        ..Default::default()
    };
    // a rate barely above one keeps nearly every draw
    let loose = gen_selection_bias::<f64>(&SelBiasConfig {
        rates: vec![1.0 + 1e-9],
        ..base.clone()
    })
    .unwrap();
    let tight = gen_selection_bias::<f64>(&SelBiasConfig {
        rates: vec![1.9],
        ..base
    })
    .unwrap();
    let (gl, gt) = (mean_gap(&loose[0]), mean_gap(&tight[0]));
    assert!(gt < gl, "selected gap {gt} vs unselected {gl}");
}

#[test]
fn opposite_betas_cancel_in_the_pool() {
    let ex = gen_example41::<f64>(3000, &[2.0, -2.0], 6, 0.5, 9).unwrap();
    let proj = |d: &Dataset<f64>| d.x.dot(&ex.psi_v).to_vec();
    let per_env: Vec<f64> = ex
        .envs
        .iter()
        .map(|e| corr(&proj(e), e.y.as_slice().unwrap()))
        .collect();
    assert!(per_env[0] > 0.8 && per_env[1] < -0.8, "{per_env:?}");
    let pool = Dataset::concat(&ex.envs).unwrap();
    let c = corr(&proj(&pool), pool.y.as_slice().unwrap());
    assert!(c.abs() < 3.0 / (pool.len() as f64).sqrt(), "pooled corr {c}");
    assert!(ex.psi_s.dot(&ex.psi_v).abs() <= 1e-12);
}

fn fake_raw(n: usize) -> MnistRaw {
    let (rows, cols) = (4, 4);
    let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (i * 37 % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    MnistRaw {
        images: Array2::from_shape_fn((n, rows * cols), |(i, j)| {
            f32::from(pixels[i * rows * cols + j]) / 255.0
        }),
        labels,
        rows,
        cols,
    }
}

#[test]
fn idx_files_round_trip_bit_exact() {
    let (n, rows, cols) = (7, 3, 5);
    let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (i * 91 % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i * 3 % 10) as u8).collect();
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    std::fs::write(&ip, encode_idx_images(rows, cols, &pixels)).unwrap();
    std::fs::write(&lp, encode_idx_labels(&labels)).unwrap();
    let raw = load_mnist_idx(&ip, &lp).unwrap();
    assert_eq!((raw.rows, raw.cols), (rows, cols));
    assert_eq!(raw.labels, labels);
    for (i, &p) in pixels.iter().enumerate() {
        assert_eq!(raw.images[[i / (rows * cols), i % (rows * cols)]], f32::from(p) / 255.0);
    }
}

#[test]
fn idx_count_mismatch_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, encode_idx_images(2, 2, &[0; 12])).unwrap();
    std::fs::write(&lp, encode_idx_labels(&[1, 2])).unwrap();
    assert!(matches!(load_mnist_idx(&ip, &lp), Err(kerhrm::Error::Format { .. })));
}

#[test]
fn color_agrees_with_label_without_flips() {
    let cfg = ColoredMnistConfig {
        flip_e: vec![0.0],
        label_noise: 0.0,
        n_per_env: vec![200],
        downsample: (2, 2),
        seed: 1,
    };
    let raw = fake_raw(200);
    let env = &make_colored_mnist::<f64>(&raw, &cfg).unwrap()[0];
    let c = env.spurious_attr.as_ref().unwrap();
    assert!((0..env.len()).all(|i| c[i] == env.y[i]));
    // the off-color channel is zero
    for i in 0..env.len() {
        let off = if c[i] > 0.0 { 4..8 } else { 0..4 };
        assert!(off.into_iter().all(|j| env.x[[i, j]] == 0.0));
    }
}

#[test]
fn heavy_color_flip_rate_is_binomial() {
    let cfg = ColoredMnistConfig {
        flip_e: vec![0.9],
        label_noise: 0.2,
        n_per_env: vec![2500],
        downsample: (2, 2),
        seed: 2,
    };
    let env = &make_colored_mnist::<f64>(&fake_raw(2500), &cfg).unwrap()[0];
    let c = env.spurious_attr.as_ref().unwrap();
    let agree = (0..env.len()).filter(|&i| c[i] == env.y[i]).count() as f64 / env.len() as f64;
    assert!((agree - 0.1).abs() <= 0.02, "agreement {agree}");
}

#[test]
fn too_few_images_is_size_error() {
    let cfg = ColoredMnistConfig {
        n_per_env: vec![30, 30],
        flip_e: vec![0.1, 0.9],
        downsample: (2, 2),
        ..Default::default()
    };
    assert!(matches!(
        make_colored_mnist::<f64>(&fake_raw(50), &cfg),
        Err(kerhrm::Error::Size(_))
    ));
}
