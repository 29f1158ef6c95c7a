use cevae::corruption::{corrupt, CorruptionConfig, FillMode};
use cevae::data::{label_from_count, LabelClass};
use cevae::diffcore::{conv_output_size, conv_transpose_output_size, ConvGeometry, Tape, Tensor};
use cevae::evalkit::{auroc, calibrate_threshold, dice, DiceCounts};
use cevae::model::{ArchConfig, CevaeModel};
use cevae::objective::{cevae_loss, combine, kl_term, RecLoss};
use cevae::scoring::AnomalyResult;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn refs(v: &[Tensor<f32>]) -> Vec<&Tensor<f32>> {
    v.iter().collect()
}

fn tiny_arch(image_size: usize) -> ArchConfig {
    ArchConfig {
        image_size,
        conv_channels: vec![2, 2, 3, 3, 4],
        latent_dim: 3,
        ..ArchConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_transpose_is_the_adjoint_of_conv(
        n in 1usize..3, c_in in 1usize..4, c_out in 1usize..4,
        k in 1usize..5, s in 1usize..4, p in 0usize..3, extra in 0usize..6, seed in any::<u64>(),
    ) {
        let geom = ConvGeometry::new(s, p);
        let h = k + extra;
        let out = conv_output_size(h, k, geom);
        prop_assume!(p < k && out.is_some());
        prop_assume!(conv_transpose_output_size(out.unwrap(), k, geom) == Some(h));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[n, c_in, h, h], &mut rng);
        let w = random_tensor(&[c_out, c_in, k, k], &mut rng);
        let tape = Tape::<f64>::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w));
        let y = xv.conv2d(&wv, None, geom).unwrap().value();
        let g = random_tensor(y.shape(), &mut rng);
        let back = tape.constant(g.clone()).conv_transpose2d(&wv, None, geom).unwrap().value();
        prop_assert_eq!(back.shape(), x.shape());
        let (lhs, rhs) = (dot(&y, &g), dot(&x, &back));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn conv_shapes_follow_the_size_formulas(
        c_in in 1usize..4, c_out in 1usize..4, k in 1usize..6, s in 1usize..4,
        p in 0usize..3, h in 1usize..12, w in 1usize..12,
    ) {
        let geom = ConvGeometry::new(s, p);
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, c_in, h, w]));
        let kernel = tape.constant(Tensor::zeros([c_out, c_in, k, k]));
        match (conv_output_size(h, k, geom), conv_output_size(w, k, geom)) {
            (Some(oh), Some(ow)) => {
                let y = x.conv2d(&kernel, None, geom).unwrap();
                prop_assert_eq!(y.shape(), vec![1, c_out, oh, ow]);
            }
            _ => prop_assert!(x.conv2d(&kernel, None, geom).is_err()),
        }
        let t_kernel = tape.constant(Tensor::zeros([c_in, c_out, k, k]));
        match (conv_transpose_output_size(h, k, geom), conv_transpose_output_size(w, k, geom)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
                let y = x.conv_transpose2d(&t_kernel, None, geom).unwrap();
                prop_assert_eq!(y.shape(), vec![1, c_out, oh, ow]);
            }
            _ => prop_assert!(x.conv_transpose2d(&t_kernel, None, geom).is_err()),
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(values in prop::collection::vec(-2.0f64..2.0, 1..64)) {
        let x = Tensor::from_slice(&values);
        let f = |tape: &Tape<f64>, which: u8| {
            let v = tape.leaf(x.clone());
            let a = v.sigmoid().mul(&v).unwrap().sum_all();
            let b = v.mul_scalar(0.5).exp().sum_all();
            let loss = match which {
                0 => a,
                1 => b,
                _ => a.add(&b).unwrap(),
            };
            tape.backward(loss).unwrap().get(&v).unwrap().clone()
        };
        let (ga, gb, gab) = (f(&Tape::new(), 0), f(&Tape::new(), 1), f(&Tape::new(), 2));
        for i in 0..values.len() {
            let sum = ga.data()[i] + gb.data()[i];
            prop_assert!((gab.data()[i] - sum).abs() <= 1e-14 * (1.0 + sum.abs()));
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_at_the_prior(
        mu in prop_oneof![Just(0.0), -5.0f64..-1e-3, 1e-3f64..5.0],
        log_var in prop_oneof![Just(0.0), -5.0f64..-1e-3, 1e-3f64..5.0],
    ) {
        let kl = kl_term(mu, log_var);
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(kl == 0.0, mu == 0.0 && log_var == 0.0);
    }

    #[test]
    fn weighting_interpolates_the_two_objectives(
        kl in 0.0f64..10.0, rec in 0.0f64..10.0, ce in 0.0f64..10.0, lambda in 0.0f64..=1.0,
    ) {
        let total = combine(kl, rec, ce, lambda);
        let expected = (1.0 - lambda) * (kl + rec) + lambda * ce;
        prop_assert!((total - expected).abs() <= 1e-12 * (1.0 + expected));
        prop_assert!(total >= (kl + rec).min(ce) - 1e-12 && total <= (kl + rec).max(ce) + 1e-12);
    }

    #[test]
    fn corruption_keeps_unmasked_pixels_shape_and_range(
        n in 1usize..4, side in 4usize..24, lo in 1usize..3, extra in 0usize..3,
        flo in 0.05f64..0.6, fspan in 0.0f64..0.4, mode in 0usize..3,
        mean in 0.0f64..=1.0, seed in any::<u64>(),
    ) {
        let cfg = CorruptionConfig {
            n_masks_range: [lo, lo + extra],
            mask_side_range: [flo, (flo + fspan).min(1.0)],
            fill_mode: [FillMode::Zero, FillMode::DatasetMean, FillMode::UniformNoise][mode],
            dataset_mean: Some(mean),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(
            [n, 1, side, side],
            (0..n * side * side).map(|_| rng.random_range(0.0f32..=1.0)).collect(),
        )
        .unwrap();
        let (x_tilde, mask) = corrupt(&x, &cfg, &mut rng).unwrap();
        prop_assert_eq!(x_tilde.shape(), x.shape());
        prop_assert_eq!(mask.shape(), x.shape());
        for i in 0..x.numel() {
            let m = mask.data()[i];
            prop_assert!(m == 0.0 || m == 1.0);
            if m == 0.0 {
                prop_assert_eq!(x_tilde.data()[i].to_bits(), x.data()[i].to_bits());
            }
            prop_assert!((0.0..=1.0).contains(&x_tilde.data()[i]));
        }
        for plane in mask.data().chunks(side * side) {
            prop_assert!(plane.iter().any(|&m| m == 1.0));
        }
    }

    #[test]
    fn pixel_score_is_the_bitwise_product(
        pairs in prop::collection::vec((0.0f32..1.0, 0.0f32..10.0), 1..64),
    ) {
        let w = pairs.len();
        let rec = Tensor::new([1, w], pairs.iter().map(|p| p.0).collect()).unwrap();
        let grad = Tensor::new([1, w], pairs.iter().map(|p| p.1).collect()).unwrap();
        let r = AnomalyResult::from_factors(0.0, rec, grad).unwrap();
        for i in 0..w {
            let product = r.recon_error_map.data()[i] * r.kl_grad_map.data()[i];
            prop_assert_eq!(r.pixel_score_map.data()[i].to_bits(), product.to_bits());
        }
    }

    #[test]
    fn auroc_is_invariant_under_increasing_transforms(
        points in prop::collection::vec((0i32..20, any::<bool>()), 2..80),
    ) {
        let labels: Vec<bool> = points.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let base: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
        let a = auroc(&base, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let transforms: [fn(f64) -> f64; 3] = [|v| 3.0 * v - 7.0, |v| (v / 4.0).exp(), |v| v * v * v];
        for t in transforms {
            let moved: Vec<f64> = base.iter().map(|&v| t(v)).collect();
            prop_assert_eq!(auroc(&moved, &labels).unwrap(), a);
        }
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((auroc(&base, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..100)) {
        let as_tensor = |f: fn(&(bool, bool)) -> bool| {
            Tensor::new([1, bits.len()], bits.iter().map(|b| f(b) as u8 as f32).collect()).unwrap()
        };
        let (a, b) = (as_tensor(|p| p.0), as_tensor(|p| p.1));
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn calibrated_threshold_beats_every_candidate(
        maps in prop::collection::vec(prop::collection::vec((0u8..12, any::<bool>()), 4), 1..5),
    ) {
        prop_assume!(maps.iter().flatten().any(|p| p.1));
        let score_t: Vec<Tensor<f32>> = maps
            .iter()
            .map(|m| Tensor::new([2, 2], m.iter().map(|p| p.0 as f32 / 4.0).collect()).unwrap())
            .collect();
        let mask_t: Vec<Tensor<f32>> = maps
            .iter()
            .map(|m| Tensor::new([2, 2], m.iter().map(|p| p.1 as u8 as f32).collect()).unwrap())
            .collect();
        let pooled_dice = |t: f64, reps: usize| {
            let mut c = DiceCounts::default();
            for _ in 0..reps {
                for (s, m) in score_t.iter().zip(&mask_t) {
                    let pred: Vec<bool> = s.data().iter().map(|&v| v as f64 > t).collect();
                    let truth: Vec<bool> = m.data().iter().map(|&v| v == 1.0).collect();
                    c.add(DiceCounts::from_bools(&pred, &truth));
                }
            }
            c.dice()
        };
        let t = calibrate_threshold(&refs(&score_t), &refs(&mask_t)).unwrap();
        let best = pooled_dice(t, 1);
        let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
        candidates.extend((0..12).map(|v| v as f64 / 4.0));
        candidates.extend((0..12).map(|v| (v as f64 + 0.5) / 4.0));
        for c in candidates {
            prop_assert!(best >= pooled_dice(c, 1));
        }
        let doubled_s: Vec<Tensor<f32>> = score_t.iter().chain(&score_t).cloned().collect();
        let doubled_m: Vec<Tensor<f32>> = mask_t.iter().chain(&mask_t).cloned().collect();
        prop_assert_eq!(calibrate_threshold(&refs(&doubled_s), &refs(&doubled_m)).unwrap(), t);
        prop_assert_eq!(pooled_dice(t, 2), best);
    }

    #[test]
    fn labels_depend_only_on_the_count(count in 0usize..10_000) {
        let expected = match count {
            0 => LabelClass::Normal,
            1..=20 => LabelClass::Excluded,
            _ => LabelClass::Anomalous,
        };
        let label = label_from_count(count);
        prop_assert_eq!(label.class, expected);
        prop_assert_eq!(label.annotated_pixels, count);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn bottleneck_is_a_thirty_second_of_the_input(size in prop::sample::select(vec![64usize, 96, 128, 192]), seed in any::<u64>()) {
        let arch = tiny_arch(size);
        prop_assert_eq!(arch.bottleneck_size() * 32, size);
        let model = CevaeModel::<f32>::init(&arch, seed).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let x = tape.constant(Tensor::full([1, 1, size, size], 0.5));
        let code = bound.encode(&x).unwrap();
        prop_assert_eq!(code.mu.shape(), vec![1, arch.latent_dim]);
        prop_assert_eq!(bound.forward_ce(&x).unwrap().shape(), vec![1, 1, size, size]);
    }

    #[test]
    fn fresh_models_are_finite_and_every_parameter_gets_gradient(
        seed in any::<u64>(), lambda in 0.05f64..0.95,
    ) {
        let arch = tiny_arch(32);
        let model = CevaeModel::<f64>::init(&arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new([2, 1, 32, 32], (0..2048).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let x_tilde = Tensor::new([2, 1, 32, 32], (0..2048).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let noise = random_tensor(&[2, arch.latent_dim], &mut rng);
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let (xv, xt) = (tape.constant(x), tape.constant(x_tilde));
        let loss = cevae_loss(&bound, &xv, Some(&xt), &tape.constant(noise), lambda, RecLoss::L1).unwrap();
        prop_assert!(loss.x_hat_vae.value().is_finite());
        prop_assert!(loss.code.mu.value().is_finite() && loss.code.log_var.value().is_finite());
        let grads = tape.backward(loss.total).unwrap();
        for (var, (name, _)) in bound.vars().iter().zip(model.named_params()) {
            let g = grads.get(var).unwrap();
            prop_assert!(g.data().iter().any(|&v| v != 0.0), "{} has no gradient", name);
        }
    }
}
