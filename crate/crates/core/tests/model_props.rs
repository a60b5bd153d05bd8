use candle_core::{DType, Device, Tensor, Var};
use candle_nn::ops::softmax;
use deltagan::condmap::condition_batch;
use deltagan::discriminator::{Discriminator, DiscriminatorConfig};
use deltagan::generator::{composite, Generator, GeneratorConfig};
use deltagan::losses::{
    gan_loss, l1_reconstruction, scalar, total_losses, tv_regularizer, LossReport, LossWeights, Side,
};
use proptest::prelude::*;

fn values(n: usize, lo: f32, hi: f32) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(lo..hi, n)
}

fn tensor(v: Vec<f32>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compositing_matches_elementwise(
        s in values(2 * 3 * 5 * 4, -1.0, 1.0),
        p in values(2 * 3 * 5 * 4, -1.0, 1.0),
        a in values(2 * 5 * 4, 0.0, 1.0),
    ) {
        let out = composite(&tensor(s.clone(), &[2, 3, 5, 4]), &tensor(a.clone(), &[2, 1, 5, 4]), &tensor(p.clone(), &[2, 3, 5, 4]))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for (i, &o) in out.iter().enumerate() {
            let (b, rest) = (i / 60, i % 20);
            let m = a[b * 20 + rest];
            prop_assert_eq!(o, m * s[i] + (1.0 - m) * p[i]);
        }
    }

    #[test]
    fn l1_is_symmetric(x in values(48, -1.0, 1.0), y in values(48, -1.0, 1.0)) {
        let (x, y) = (tensor(x, &[1, 3, 4, 4]), tensor(y, &[1, 3, 4, 4]));
        prop_assert_eq!(scalar(&l1_reconstruction(&x, &y).unwrap()).unwrap(), scalar(&l1_reconstruction(&y, &x).unwrap()).unwrap());
    }

    #[test]
    fn discriminator_gan_loss_is_nonnegative(real in values(18, -60.0, 60.0), fake in values(18, -60.0, 60.0)) {
        let d = scalar(&gan_loss(&tensor(real, &[2, 1, 3, 3]), &tensor(fake, &[2, 1, 3, 3]), Side::Discriminator).unwrap()).unwrap();
        prop_assert!(d >= 0.0);
    }

    #[test]
    fn totals_are_linear_in_each_term(
        terms in prop::collection::vec(-10.0f64..10.0, 8),
        lambdas in prop::collection::vec(0.0f64..20.0, 7),
    ) {
        let w = LossWeights { d: lambdas[0], g: lambdas[1], cls: lambdas[2], rec: lambdas[3], idt: lambdas[4], cyc: lambdas[5], tv: lambdas[6], gp: 10.0 };
        let report = |t: &[f64]| LossReport {
            gan_d: Some(t[0]), cls_real: Some(t[1]), gan_g: Some(t[2]), cls_fake: Some(t[3]),
            rec: Some(t[4]), idt: Some(t[5]), cyc: Some(t[6]), tv: Some(t[7]),
            ..Default::default()
        };
        // Unit probes recover each coefficient exactly.
        let coeffs = [(w.d, 0.0), (w.cls, 0.0), (0.0, w.g), (0.0, w.cls), (0.0, w.rec), (0.0, w.idt), (0.0, w.cyc), (0.0, w.tv)];
        for (k, &(cd, cg)) in coeffs.iter().enumerate() {
            let mut unit = [0.0; 8];
            unit[k] = 1.0;
            prop_assert_eq!(total_losses(&report(&unit), &w).unwrap(), (cd, cg));
        }
        let (d, g) = total_losses(&report(&terms), &w).unwrap();
        let (ed, eg) = coeffs.iter().zip(&terms).fold((0.0, 0.0), |(d, g), (&(cd, cg), &t)| (d + cd * t, g + cg * t));
        prop_assert!((d - ed).abs() <= 1e-9 * (1.0 + ed.abs()));
        prop_assert!((g - eg).abs() <= 1e-9 * (1.0 + eg.abs()));
    }

    #[test]
    fn tv_gradient_matches_central_differences(img in prop::collection::vec(-1.0f64..1.0, 2 * 8 * 8)) {
        let var = Var::from_vec(img.clone(), (1, 2, 8, 8), &Device::Cpu).unwrap();
        let grads = tv_regularizer(var.as_tensor()).unwrap().backward().unwrap();
        let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let tv = |v: &[f64]| {
            scalar(&tv_regularizer(&Tensor::from_slice(v, (1, 2, 8, 8), &Device::Cpu).unwrap()).unwrap()).unwrap()
        };
        let step = 1e-3;
        for i in 0..img.len() {
            let (mut up, mut down) = (img.clone(), img.clone());
            up[i] += step;
            down[i] -= step;
            let numeric = (tv(&up) - tv(&down)) / (2.0 * step);
            let rel = (analytic[i] - numeric).abs() / numeric.abs().max(analytic[i].abs()).max(1e-8);
            prop_assert!(rel < 1e-4 || (analytic[i] - numeric).abs() < 1e-9, "index {i}: {} vs {numeric}", analytic[i]);
        }
    }
}

fn random_input(seed: u64, b: usize, c: usize, h: usize, w: usize) -> Tensor {
    let n = b * c * h * w;
    let v: Vec<f32> = (0..n).map(|i| (((i as u64 * 2654435761 + seed * 97) % 2001) as f32 / 1000.0) - 1.0).collect();
    tensor(v, &[b, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generator_ranges_and_size(hq in 1usize..6, wq in 1usize..6, n_c in 1usize..5, seed in 0u64..1000) {
        let (h, w) = (hq * 4, wq * 4);
        let g = Generator::new(GeneratorConfig::new(h, w, n_c).slimmed(16), seed, &Device::Cpu).unwrap();
        let src = random_input(seed, 2, 3, h, w);
        let maps = random_input(seed + 1, 2, 1, h, w).affine(0.5, 0.5).unwrap();
        let cond = condition_batch(&maps, &[0, n_c - 1], n_c, None).unwrap();
        let out = g.generate(&src, &cond).unwrap();
        prop_assert_eq!(out.composite.dims(), &[2, 3, h, w]);
        prop_assert_eq!(out.attention.dims(), &[2, 1, h, w]);
        let a = out.attention.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let p = out.proposal.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(p.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_parameter_count_ignores_resolution(hq in 1usize..40, wq in 1usize..40, n_c in 1usize..12) {
        let at = |h, w| Generator::new(GeneratorConfig::new(h, w, n_c).slimmed(8), 0, &Device::Cpu).unwrap().num_parameters();
        prop_assert_eq!(at(hq * 4, wq * 4), at(256, 256));
    }

    #[test]
    fn category_softmax_sums_to_one(n_c in 2usize..8, seed in 0u64..1000) {
        let d = Discriminator::new(DiscriminatorConfig::new(16, 16, n_c).with_widths(vec![8, 16]), seed, &Device::Cpu).unwrap();
        let img = random_input(seed, 3, 3, 16, 16);
        let map = random_input(seed + 5, 3, 1, 16, 16);
        let out = d.discriminate(&img, &map).unwrap();
        let probs = softmax(&out.category_logits.to_dtype(DType::F64).unwrap(), 1).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        prop_assert!(probs.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }
}
