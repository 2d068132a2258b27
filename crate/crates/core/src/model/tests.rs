use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{gradcheck, GradcheckOptions};

fn image<T: Element>(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor<T> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = vec![b, cfg.in_channels, cfg.img_size, cfg.img_size];
    let n = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| r.random_range(0.0..1.0)).collect::<Vec<_>>()).unwrap()
}

/// Closed-form parameter count of one Swin block.
fn block(c: usize, heads: usize, m: usize) -> usize {
    // norm1, qkv, proj, norm2, fc1, fc2 with mlp ratio 4, plus the bias table
    2 * c
        + (3 * c * c + 3 * c)
        + (c * c + c)
        + 2 * c
        + (4 * c * c + 4 * c)
        + (4 * c * c + c)
        + (2 * m - 1).pow(2) * heads
}

#[test]
fn tiny_count_matches_hand_audit() {
    let m = Model::<f32>::build(&ModelConfig::tiny()).unwrap();
    let embed = 48 * 8 + 8 + 16;
    let stage0 = 2 * block(8, 2, 4);
    let stage1 = (4 * 8 * 2 + 32 * 16) + 2 * block(16, 2, 4);
    let sspp = 2 * block(16, 2, 2) + 2 * block(16, 2, 4);
    let fusion = (32 * 8 + 8) + (8 * 32 + 32) + (8 + 8) + (8 + 1) + (32 * 16 + 16);
    let decoder = 16 * 32 + (16 * 8 + 8) + 2 * block(8, 2, 4) + 8 * 32 + (2 * 2 + 2);
    assert_eq!(embed + stage0 + stage1, 408 + 1940 + 576 + 6756);
    assert_eq!(sspp + fusion + decoder, 13352 + 1105 + 2850);
    assert_eq!(m.count_params(), 26_987);
    let bd = m.breakdown();
    let names: Vec<&str> = bd.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["encoder", "sspp", "fusion", "decoder"]);
    assert_eq!(bd.iter().map(|(_, c)| c).sum::<usize>(), m.count_params());
    assert_eq!(bd[2].1, fusion);
}

#[test]
fn reference_count_is_near_published_size() {
    let cfg = ModelConfig::default();
    cfg.validate().unwrap();
    let m = Model::<f32>::build(&cfg).unwrap();
    let n = m.count_params();
    assert!((18_000_000..=24_300_000).contains(&n), "{n}");
    assert_eq!(n, 20_715_250, "{:?}", m.breakdown());
}

#[test]
fn tiny_forward_shape() {
    let cfg = ModelConfig::tiny();
    assert_eq!(cfg.effective_sspp_windows(), vec![2, 4]);
    let m = Model::<f32>::build(&cfg).unwrap();
    let y = m.predict(&image(2, &cfg, 1)).unwrap();
    assert_eq!(y.shape(), &[2, 2, 32, 32]);
    assert!(y.all_finite());
}

#[test]
fn same_seed_same_parameters() {
    let cfg = ModelConfig::tiny();
    let a = Model::<f32>::build(&cfg).unwrap();
    let b = Model::<f32>::build(&cfg).unwrap();
    assert!(a
        .params
        .iter()
        .zip(b.params.iter())
        .all(|(x, y)| x.name == y.name && x.tensor == y.tensor));
    let c = Model::<f32>::build(&ModelConfig { seed: 1, ..cfg }).unwrap();
    assert!(a.params.iter().zip(c.params.iter()).any(|(x, y)| x.tensor != y.tensor));
}

#[test]
fn zero_init_groups() {
    let m = Model::<f64>::build(&ModelConfig::tiny()).unwrap();
    for p in m.params.iter() {
        let d = p.tensor.data();
        if p.name.ends_with(".bias") || p.name.ends_with("relative_position_bias_table") {
            assert!(d.iter().all(|&v| v == 0.0), "{}", p.name);
        } else if p.name.contains("norm") && p.name.ends_with(".weight") {
            assert!(d.iter().all(|&v| v == 1.0), "{}", p.name);
        } else {
            let fan_in = p.tensor.shape()[0] as f64;
            assert!(d.iter().all(|&v| v.abs() <= 1.0 / fan_in.sqrt()), "{}", p.name);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let m = Model::<f32>::build(&cfg).unwrap();
    let x = image(1, &cfg, 2);
    assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
}

#[test]
fn batch_slices_agree_with_single_inputs() {
    let cfg = ModelConfig::tiny();
    let m = Model::<f32>::build(&cfg).unwrap();
    let x = image::<f32>(3, &cfg, 3);
    let y = m.predict(&x).unwrap();
    let per_in = x.len() / 3;
    let per_out = y.len() / 3;
    for i in 0..3 {
        let xi = Tensor::new(vec![1, 3, 32, 32], x.data()[i * per_in..(i + 1) * per_in].to_vec()).unwrap();
        let yi = m.predict(&xi).unwrap();
        let diff = yi
            .data()
            .iter()
            .zip(&y.data()[i * per_out..(i + 1) * per_out])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "sample {i}: {diff}");
    }
}

#[test]
fn rejects_wrong_input_extent() {
    let cfg = ModelConfig::tiny();
    let m = Model::<f32>::build(&cfg).unwrap();
    let bad = ModelConfig {
        img_size: 64,
        ..cfg.clone()
    };
    assert!(m.predict(&image(1, &bad, 0)).is_err());
    assert!(m.predict(&Tensor::zeros(vec![1, 1, 32, 32])).is_err());
}

#[test]
fn invalid_configs_name_the_constraint() {
    let t = ModelConfig::tiny;
    let cases: Vec<(ModelConfig, &str)> = vec![
        (
            ModelConfig {
                depths: vec![2, 3],
                ..t()
            },
            "depths[1]",
        ),
        (
            ModelConfig {
                num_heads: vec![2],
                ..t()
            },
            "num_heads",
        ),
        (
            ModelConfig {
                depths: vec![2],
                num_heads: vec![2],
                ..t()
            },
            "2 or 3 stages",
        ),
        (ModelConfig { img_size: 36, ..t() }, "img_size"),
        (
            ModelConfig {
                num_heads: vec![3, 2],
                ..t()
            },
            "num_heads[0]",
        ),
        (ModelConfig { sspp_level: 5, ..t() }, "sspp_level"),
        (
            ModelConfig {
                sspp_window_sizes: Some(vec![2]),
                ..t()
            },
            "sspp_window_sizes",
        ),
        (ModelConfig { num_classes: 1, ..t() }, "num_classes"),
        (
            ModelConfig {
                decoder_depth: 3,
                ..t()
            },
            "decoder_depth",
        ),
        (
            ModelConfig {
                fusion_reduction: 3,
                ..t()
            },
            "fusion_reduction",
        ),
        (
            ModelConfig {
                embed_dim: 6,
                num_heads: vec![2, 2],
                ..t()
            },
            "divisible",
        ),
    ];
    for (cfg, needle) in cases {
        let err = Model::<f32>::build(&cfg).unwrap_err().to_string();
        assert!(err.contains(needle), "{needle:?} not in {err:?}");
    }
}

#[test]
fn pyramid_level_touches_only_sspp_and_fusion() {
    let mut reference: Option<Vec<(String, usize)>> = None;
    for level in 1..=4 {
        for fusion in [FusionMode::CrossAttention, FusionMode::Basic] {
            let cfg = ModelConfig {
                sspp_level: level,
                fusion,
                ..ModelConfig::tiny()
            };
            let m = Model::<f32>::build(&cfg).unwrap();
            let y = m.predict(&image(1, &cfg, 4)).unwrap();
            assert_eq!(y.shape(), &[1, 2, 32, 32]);
            let bd = m.breakdown();
            assert_eq!(m.sspp.branches.len(), level);
            let keep: Vec<_> = bd
                .iter()
                .filter(|(n, _)| n == "encoder" || n == "decoder")
                .cloned()
                .collect();
            match &reference {
                None => reference = Some(keep),
                Some(r) => assert_eq!(r, &keep),
            }
        }
    }
}

#[test]
fn bilinear_decoder_runs() {
    let cfg = ModelConfig {
        upsample: UpsampleMode::Bilinear,
        ..ModelConfig::tiny()
    };
    let m = Model::<f32>::build(&cfg).unwrap();
    assert_eq!(m.predict(&image(1, &cfg, 5)).unwrap().shape(), &[1, 2, 32, 32]);
}

#[test]
fn three_stage_tiny_runs() {
    let cfg = ModelConfig {
        img_size: 64,
        depths: vec![2, 2, 2],
        num_heads: vec![2, 2, 4],
        ..ModelConfig::tiny()
    };
    let m = Model::<f32>::build(&cfg).unwrap();
    assert_eq!(m.predict(&image(1, &cfg, 6)).unwrap().shape(), &[1, 2, 64, 64]);
}

#[test]
fn end_to_end_gradcheck() {
    let cfg = ModelConfig::tiny();
    let mut m = Model::<f64>::build(&cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for p in m.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let mut inputs: Vec<_> = m.params.iter().map(|p| p.tensor.clone()).collect();
    inputs.push(image(1, &cfg, 7));
    let opts = GradcheckOptions {
        max_checks_per_input: Some(2),
        ..GradcheckOptions::with_tol(1e-4)
    };
    let rep = gradcheck(
        |g, v| {
            let (params, x) = v.split_at(v.len() - 1);
            let mut cx = Ctx::new(g, params);
            let y = m.forward(&mut cx, x[0])?;
            Ok(cx.g.mean_all(y))
        },
        &inputs,
        &opts,
    )
    .unwrap();
    assert!(rep.passed, "{rep}");
}
