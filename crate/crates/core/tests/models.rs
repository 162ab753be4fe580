use std::time::Instant;

use cyten_core::gradcheck::GradCheckConfig;
use cyten_core::io::Checkpoint;
use cyten_core::io::CheckpointMeta;
use cyten_core::models::*;
use cyten_core::nn::Module;
use cyten_core::ops::Mode;
use cyten_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn full_networks_pass_gradient_check_at_16() {
    let cfg = GradCheckConfig { seed: 1, eps: 1e-6, ..Default::default() };
    for net in [NetConfig::Dwinet(DwiNetConfig::default()), NetConfig::Adcnet(AdcNetConfig::default())] {
        let t = Instant::now();
        let r = check_network_gradients(&net, [16, 16, 16], 1, 4, &cfg).unwrap();
        eprintln!("{:?}: {:?} in {:?}", net.kind(), r, t.elapsed());
        assert!(r.checked >= 32, "{r:?}");
        assert!(r.max_rel_error < 1e-3, "{:?}: {r:?}", net.kind());
    }
}

#[test]
fn softmax_outputs_sum_to_one() {
    let cfg = DwiNetConfig { base_filters: 4, head_hidden: 16, ..Default::default() };
    let mut dwi = build_dwinet::<f64>(&cfg, [16, 16, 16], 3).unwrap();
    let acfg = AdcNetConfig { stem_filters: 4, widths: vec![4, 8, 8, 8], head_hidden: 16, ..Default::default() };
    let mut adc = build_adcnet::<f64>(&acfg, [16, 16, 16], 3).unwrap();
    for (net, c) in [(&mut dwi, 1), (&mut adc, 3)] {
        for mode in [Mode::Train, Mode::Eval] {
            let y = net.forward(&uniform(&[3, c, 16, 16, 16], 5), mode).unwrap();
            assert_eq!(y.shape(), &[3, 2]);
            for row in y.data().chunks(2) {
                assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}

#[test]
fn identity_shortcut_is_exact_when_residual_branch_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut block = BasicBlock::<f64>::new("b", 4, 4, 1, &mut rng);
    assert!(block.shortcut.is_none());
    for p in block.params_mut() {
        if p.name == "b.conv2.weight" {
            p.value.fill(0.0);
        }
    }
    // non-negative input so relu(x) == x
    let x = uniform(&[2, 4, 5, 5, 5], 6).map(f64::abs);
    for mode in [Mode::Train, Mode::Eval] {
        let y = block.forward(&x, mode).unwrap();
        assert_eq!(y, x);
    }
}

#[test]
fn projection_shortcut_matches_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let block = BasicBlock::<f64>::new("b", 4, 8, 2, &mut rng);
    assert!(block.shortcut.is_some());
    assert_eq!(block.output_shape(&[1, 4, 7, 7, 7]).unwrap(), vec![1, 8, 4, 4, 4]);
}

#[test]
fn dwinet_parameter_census() {
    let net = build_dwinet::<f32>(&DwiNetConfig::default(), [16, 16, 16], 0).unwrap();
    let census = net.census();
    let get = |n: &str| census.iter().find(|c| c.0 == n).map(|c| c.1.clone()).unwrap();
    assert_eq!(get("dwinet.block0.conv0.weight"), vec![64, 1, 3, 3, 3]);
    assert_eq!(get("dwinet.block1.conv1.weight"), vec![128, 128, 3, 3, 3]);
    assert_eq!(get("dwinet.block2.bn.running_var"), vec![256]);
    assert_eq!(get("dwinet.head.hidden.weight")[..], [256, 256][..]);
    assert_eq!(get("dwinet.head.out.bias"), vec![2]);
    let convs = census.iter().filter(|c| c.0.contains(".conv") && c.0.ends_with(".weight")).count();
    assert_eq!(convs, 6);
}

#[test]
fn head_only_reset_restores_body_exactly() {
    let cfg =
        NetConfig::Adcnet(AdcNetConfig { stem_filters: 4, widths: vec![4, 8], head_hidden: 8, ..Default::default() });
    let src = build_network::<f32>(&cfg, [16, 16, 16], 1).unwrap();
    let ckpt = Checkpoint::from_module(src.kind, &src, CheckpointMeta::new(1, 0, serde_json::json!({})));
    let fresh = build_network::<f32>(&cfg, [16, 16, 16], 2).unwrap();
    let mut dst = build_network::<f32>(&cfg, [16, 16, 16], 2).unwrap();
    warm_start(&mut dst, &ckpt, true).unwrap();
    for ((p, s), f) in dst.params().iter().zip(src.params()).zip(fresh.params()) {
        if p.name.starts_with("adcnet.head.out.") {
            assert_eq!(p.value, f.value, "{}", p.name);
        } else {
            assert_eq!(p.value, s.value, "{}", p.name);
        }
    }
    for (b, s) in dst.buffers().iter().zip(src.buffers()) {
        assert_eq!(b.value, s.value);
    }
    let mut all = build_network::<f32>(&cfg, [16, 16, 16], 2).unwrap();
    warm_start(&mut all, &ckpt, false).unwrap();
    for (p, s) in all.params().iter().zip(src.params()) {
        assert_eq!(p.value, s.value);
    }
}

#[test]
fn warm_start_rejects_other_network() {
    let d =
        build_network::<f32>(&NetConfig::Dwinet(DwiNetConfig { base_filters: 2, ..Default::default() }), [8, 8, 8], 0)
            .unwrap();
    let ckpt = Checkpoint::from_module(d.kind, &d, CheckpointMeta::new(0, 0, serde_json::json!({})));
    let mut a = build_network::<f32>(
        &NetConfig::Adcnet(AdcNetConfig { stem_filters: 2, widths: vec![2], ..Default::default() }),
        [16, 16, 16],
        0,
    )
    .unwrap();
    let err = warm_start(&mut a, &ckpt, true).unwrap_err();
    assert_eq!(err.code(), "network_kind_mismatch");
}

#[test]
fn ensemble_fit_matches_brute_force_pairwise_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.random_range(4..40);
        let val: Vec<(f64, f64, u8)> = (0..n)
            .map(|i| {
                let y = (i % 2) as u8;
                let d = (rng.random_range(0..10) as f64 + 3.0 * y as f64) / 13.0;
                let a = (rng.random_range(0..10) as f64 + 2.0 * y as f64) / 12.0;
                (d, a, y)
            })
            .collect();
        let cfg = EnsembleConfig::default();
        let w = fit_ensemble_weight(&val, &cfg).unwrap();
        let auc = |w: f64| {
            let s: Vec<f64> = val.iter().map(|v| w * v.0 + (1.0 - w) * v.1).collect();
            let mut c = 0.0;
            let mut m = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if val[i].2 == 1 && val[j].2 == 0 {
                        m += 1.0;
                        c += if s[i] > s[j] {
                            1.0
                        } else if s[i] == s[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            c / m
        };
        let best = cfg.grid.iter().map(|&g| auc(g)).fold(0.0, f64::max);
        assert!((auc(w) - best).abs() < 1e-12);
    }
}
