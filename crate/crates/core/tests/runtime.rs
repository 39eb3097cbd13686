mod common;

use bknet_core::arch;
use bknet_core::decompose::{decompose_network, DecomposePlan};
use bknet_core::graph::{forward, Conv, DecomposedConv, Linear};
use bknet_core::parallel;
use bknet_core::prune::{prune, PruneConfig};
use bknet_core::runtime::{
    benchmark, compile, compile_as, count_flops, stage1, stage2, CsrCoefficients, Variant,
};
use bknet_core::tensor::{conv2d, conv2d_direct};
use bknet_core::{Layer, Network, Tensor};
use common::{randn, rel, rng, sparse_decomposed};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn two_stage_equals_reconstructed_conv_on_50_layers() {
    let mut r = rng(1);
    for case in 0..50 {
        let k = [1, 3, 5][r.gen_range(0..3)];
        let (c_in, c_out) = (r.gen_range(1..8), r.gen_range(1..8));
        let d = r.gen_range(1..=k * k);
        let stride = r.gen_range(1..=2);
        let padding = r.gen_range(0..=k / 2);
        let size = r.gen_range(k.max(2)..10);
        let density = r.gen_range(0.1..1.0);
        let mut layer = sparse_decomposed(&mut r, c_out, c_in, k, d, density);
        layer.stride = stride;
        layer.padding = padding;
        let bias: Vec<f32> = (0..c_out).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x: Tensor = randn(&mut r, &[2, c_in, size, size]);
        let csr = CsrCoefficients::from_dense(&layer.coeffs).unwrap();
        let two = stage2(&stage1(&x, &layer.basis, stride, padding).unwrap(), &csr, Some(&bias)).unwrap();
        let dense = conv2d(&x, &layer.reconstruct(), Some(&bias), stride, padding).unwrap();
        let e = rel(&two, &dense);
        assert!(e <= 1e-5, "case {case}: {e}");
    }
}

#[test]
fn stage1_planes_match_single_channel_convolution() {
    let mut r = rng(2);
    let x: Tensor = randn(&mut r, &[2, 3, 7, 6]);
    let basis: Tensor = randn(&mut r, &[4, 9]);
    let mid = stage1(&x, &basis, 2, 1).unwrap();
    assert_eq!(mid.shape(), &[2, 12, 4, 3]);
    for j in 0..3 {
        let xj = Tensor::from_fn(&[2, 1, 7, 6], |i| {
            let (n, p) = (i / 42, i % 42);
            x.data()[(n * 3 + j) * 42 + p]
        });
        for m in 0..4 {
            let w = Tensor::new(&[1, 1, 3, 3], basis.data()[m * 9..(m + 1) * 9].to_vec()).unwrap();
            let plane = conv2d_direct(&xj, &w, None, 2, 1).unwrap();
            let got = Tensor::from_fn(&[2, 1, 4, 3], |i| {
                let (n, p) = (i / 12, i % 12);
                mid.data()[(n * 12 + j * 4 + m) * 12 + p]
            });
            assert!(rel(&got, &plane) <= 1e-6);
        }
    }
    // one input channel: d planes
    let one = stage1(&randn(&mut r, &[1, 1, 5, 5]), &basis, 1, 1).unwrap();
    assert_eq!(one.shape(), &[1, 4, 5, 5]);
}

#[test]
fn stage2_matches_dense_contraction() {
    let mut r = rng(3);
    let (c_out, c_in, d) = (5, 4, 3);
    let coeffs = sparse_decomposed(&mut r, c_out, c_in, 3, d, 0.4).coeffs;
    let mid: Tensor = randn(&mut r, &[2, c_in * d, 3, 4]);
    let out = stage2(&mid, &CsrCoefficients::from_dense(&coeffs).unwrap(), None).unwrap();
    let oracle = Tensor::from_fn(&[2, c_out, 3, 4], |idx| {
        let (n, i, p) = (idx / (c_out * 12), (idx / 12) % c_out, idx % 12);
        let mut acc = 0.0f64;
        for j in 0..c_in {
            for m in 0..d {
                acc += coeffs.at(&[i, j, m]) as f64
                    * mid.data()[(n * c_in * d + j * d + m) * 12 + p] as f64;
            }
        }
        acc as f32
    });
    assert!(rel(&out, &oracle) <= 1e-6);
}

fn compressed_toy(seed: u64, d: usize, s: f32) -> Network {
    let net = arch::toy_cnn(3, seed);
    let plan = DecomposePlan {
        default_d: d,
        ..Default::default()
    };
    let (mut dec, _) = decompose_network(&net, &plan).unwrap();
    if s > 0.0 {
        prune(
            &mut dec,
            &PruneConfig {
                sensitivity: s,
                ..Default::default()
            },
        )
        .unwrap();
    }
    dec
}

#[test]
fn compiled_inference_matches_graph_forward() {
    let mut r = rng(4);
    for (seed, d, s) in [(0, 5, 0.0), (1, 3, 0.5), (2, 9, 1.0), (3, 1, 2.0)] {
        let net = compressed_toy(seed, d, s);
        let x: Tensor = randn(&mut r, &[3, 3, 8, 8]);
        let want = forward(&net, &x).unwrap();
        for variant in [Variant::TwoStage, Variant::Dense] {
            let got = compile_as(&net, variant).unwrap().infer(&x).unwrap();
            assert!(rel(&got, &want) <= 1e-5, "{variant:?} d={d} s={s}");
        }
    }
}

#[test]
fn full_rank_decomposition_reproduces_dense_logits() {
    let mut r = rng(5);
    let dense = arch::toy_cnn(3, 9);
    let x: Tensor = randn(&mut r, &[4, 3, 8, 8]);
    let want = forward(&dense, &x).unwrap();
    let got = compile(&compressed_toy(9, 9, 0.0)).unwrap().infer(&x).unwrap();
    assert!(rel(&got, &want) <= 1e-4);
}

#[test]
fn residual_network_with_projections_compiles() {
    let mut r = rng(6);
    let mut net = arch::preset("resnet18-cifar", [3, 16, 16], 4, 0).unwrap();
    net = decompose_network(&net, &DecomposePlan::default()).unwrap().0;
    let x: Tensor = randn(&mut r, &[2, 3, 16, 16]);
    let want = forward(&net, &x).unwrap();
    let model = compile(&net).unwrap();
    assert_eq!(model.two_stage_layers().count(), 20);
    assert!(rel(&model.infer(&x).unwrap(), &want) <= 1e-5);
}

#[test]
fn fully_pruned_model_outputs_the_bias_path() {
    let mut net = compressed_toy(0, 5, 0.0);
    for l in &mut net.layers {
        match l {
            Layer::DecomposedConv(d) => {
                d.coeffs = Tensor::zeros(d.coeffs.shape());
                d.bias = Some(vec![0.0; d.out_channels()]);
            }
            Layer::Linear(lin) => lin.bias = Some(vec![0.5, -1.0, 2.0]),
            _ => {}
        }
    }
    let x: Tensor = randn(&mut rng(7), &[2, 3, 8, 8]);
    let out = compile(&net).unwrap().infer(&x).unwrap();
    assert_eq!(out.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn serial_inference_is_bit_identical_across_runs() {
    parallel::set_threads(0);
    let model = compile(&compressed_toy(11, 5, 1.0)).unwrap();
    let x: Tensor = randn(&mut rng(8), &[4, 3, 8, 8]);
    let a = model.infer(&x).unwrap();
    let b = compile(&compressed_toy(11, 5, 1.0)).unwrap().infer(&x).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn rejects_mismatched_batches() {
    let model = compile(&compressed_toy(0, 5, 0.0)).unwrap();
    assert!(model.infer(&Tensor::zeros(&[1, 3, 9, 8])).is_err());
    let csr = CsrCoefficients::from_dense(&Tensor::zeros(&[2, 2, 2])).unwrap();
    assert!(stage2(&Tensor::zeros(&[1, 3, 2, 2]), &csr, None).is_err());
}

#[test]
fn dense_conv_ledger_closed_form() {
    let mut net = Network::new([64, 32, 32], 64);
    net.push(Layer::Conv(Conv::new(Tensor::zeros(&[64, 64, 3, 3]), None, 1, 1)));
    net.push(Layer::GlobalAvgPool);
    assert_eq!(count_flops(&net).unwrap().dense_macs, 37_748_736);
}

#[test]
fn ledger_matches_closed_forms_on_random_layers() {
    let mut r = rng(9);
    for _ in 0..10 {
        let k = [1, 3, 5][r.gen_range(0..3)];
        let (c_in, c_out) = (r.gen_range(1..32), r.gen_range(2..32));
        let d = r.gen_range(1..=k * k);
        let stride = r.gen_range(1..=2);
        let size = r.gen_range(k.max(4)..20);
        let density = r.gen_range(0.0..1.0);
        let mut layer = sparse_decomposed(&mut r, c_out, c_in, k, d, density);
        layer.stride = stride;
        layer.bias = Some(vec![0.0; c_out]);
        let nnz = layer.coeffs.data().iter().filter(|&&v| v != 0.0).count() as u64;
        let mut net = Network::new([c_in, size, size], c_out);
        net.push(Layer::DecomposedConv(layer.clone()));
        net.push(Layer::GlobalAvgPool);
        let ledger = count_flops(&net).unwrap();
        let row = &ledger.layers[0];
        let out = ((size + 2 * (k / 2) - k) / stride + 1) as u64;
        let hw = out * out;
        let (co, ci, dd, k2) = (c_out as u64, c_in as u64, d as u64, (k * k) as u64);
        assert_eq!(row.dense_macs, co * ci * k2 * hw);
        assert_eq!(row.stage1_macs, ci * dd * k2 * hw);
        assert_eq!(row.stage2_macs, nnz * hw);
        assert_eq!(row.two_stage_total, row.stage1_macs + row.stage2_macs);
        assert_eq!(ledger.params_total, nnz + dd * k2 + co);
        let bound = (ci * co) as f64 * (k2 as f64 - (dd * k2) as f64 / co as f64);
        if dd < co && (nnz as f64) < bound {
            assert!(row.two_stage_total < row.dense_macs);
        }
    }
}

#[test]
fn ledger_totals_add_up() {
    let net = compressed_toy(3, 4, 1.0);
    let l = count_flops(&net).unwrap();
    assert_eq!(l.executed_macs, l.layers.iter().map(|x| x.executed_macs).sum::<u64>());
    assert_eq!(l.dense_macs, l.layers.iter().map(|x| x.dense_macs).sum::<u64>());
    assert_eq!(l.params_total, l.layers.iter().map(|x| x.params).sum::<u64>());
    assert_eq!(l.params_total, l.params.total());
    let json: serde_json::Value = serde_json::from_str(&l.to_json().unwrap()).unwrap();
    assert!(json["layers"].is_array() && json["executed_macs"].is_u64());
}

#[test]
fn vgg16_dense_ledger() {
    let l = count_flops(&arch::vgg16_cifar(10, 0)).unwrap();
    let macs = l.dense_macs as f64;
    let params = l.params_total as f64;
    assert!((macs / 314.26e6 - 1.0).abs() <= 0.01, "{macs}");
    assert!((params / 14.71e6 - 1.0).abs() <= 0.01, "{params}");
}

#[test]
fn benchmark_reports_both_variants() {
    let net = compressed_toy(0, 5, 1.0);
    let report = benchmark(&net, 2, 5, 1, 0).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.median_ms > 0.0 && r.p95_ms >= r.median_ms));
    assert!(report.row(Variant::TwoStage).unwrap().stage1_ms > 0.0);
    assert_eq!(report.row(Variant::Dense).unwrap().stage1_ms, 0.0);
    assert!(report.to_csv().starts_with("variant,batch,median_ms,p95_ms,stage1_ms,stage2_ms,peak_mb\n"));
    assert!(benchmark(&net, 2, 4, 0, 0).is_err());
}

fn single_layer(d: usize, density: f64, seed: u64) -> Network {
    let mut r = rng(seed);
    let layer: DecomposedConv = sparse_decomposed(&mut r, 64, 64, 3, d, density);
    let mut net = Network::new([64, 32, 32], 10);
    net.push(Layer::DecomposedConv(layer));
    net.push(Layer::GlobalAvgPool);
    net.push(Layer::Linear(Linear {
        weight: randn(&mut r, &[10, 64]),
        bias: None,
    }));
    net
}

#[test]
fn unpruned_full_basis_is_not_faster() {
    let report = benchmark(&single_layer(9, 1.0, 1), 1, 5, 1, 0).unwrap();
    let speedup = report.speedup().unwrap();
    assert!(speedup < 1.0, "two-stage with d = k*k ran {speedup:.2}x faster");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csr_round_trip_is_lossless(
        c_out in 1usize..8, c_in in 1usize..8, d in 1usize..6, density in 0.0f64..1.0, seed in 0u64..1000
    ) {
        let mut r = rng(seed);
        let mut layer = sparse_decomposed(&mut r, c_out, c_in, 3, d, density);
        let mask: Vec<bool> = (0..c_out * c_in * d).map(|_| r.gen_bool(0.7)).collect();
        layer.mask = Some(mask);
        layer.apply_mask();
        let csr = CsrCoefficients::from_dense(&layer.coeffs).unwrap();
        prop_assert_eq!(csr.to_dense().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            layer.coeffs.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert!(csr.vals.iter().all(|&v| v != 0.0));
        for i in 0..c_out {
            let (cols, _) = csr.row(i);
            prop_assert!(cols.windows(2).all(|w| w[0] < w[1]));
        }
        let nnz = layer.coeffs.data().iter().filter(|&&v| v != 0.0).count();
        prop_assert_eq!(csr.nnz(), nnz);
    }
}
