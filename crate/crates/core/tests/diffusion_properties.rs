use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use semsr::diffusion::schedule::{add_noise_at, make_schedule, ScheduleConfig};
use semsr::sampler::{initial_latent_with, SamplerConfig};

fn tensor(v: &[f64]) -> Tensor {
    Tensor::from_slice(v, (1, 1, 1, v.len()), &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

proptest! {
    #[test]
    fn add_noise_is_linear(
        (z1, e1, z2, e2) in (1usize..16).prop_flat_map(|n| {
            let v = prop::collection::vec(-3.0f64..3.0, n);
            (v.clone(), v.clone(), v.clone(), v)
        }),
        ab in 0.0f64..=1.0,
        c in -2.0f64..2.0,
    ) {
        let lhs_z: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + c * b).collect();
        let lhs_e: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a + c * b).collect();
        let lhs = values(&add_noise_at(&tensor(&lhs_z), &tensor(&lhs_e), &[ab]).unwrap());
        let p = values(&add_noise_at(&tensor(&z1), &tensor(&e1), &[ab]).unwrap());
        let q = values(&add_noise_at(&tensor(&z2), &tensor(&e2), &[ab]).unwrap());
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (p[i] + c * q[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule_is_monotone_with_valid_spacing(t_max in 2usize..2000, frac in 0.0f64..1.0) {
        let count = 1 + ((t_max - 1) as f64 * frac) as usize;
        let s = make_schedule(t_max, 1e-4, 0.02, count).unwrap();
        let ab = s.alphas_cumprod();
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(ab.iter().all(|a| *a > 0.0 && *a < 1.0));
        let steps = s.spaced_steps();
        prop_assert_eq!(steps.len(), count);
        prop_assert_eq!(steps[0], t_max);
        prop_assert!(steps.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(*steps.last().unwrap() >= 1);
    }
}

#[test]
fn noising_endpoints_are_exact() {
    let z = tensor(&[0.5, -1.25, 2.0]);
    let e = tensor(&[0.1, 0.2, -0.3]);
    assert_eq!(values(&add_noise_at(&z, &e, &[1.0]).unwrap()), values(&z));
    assert_eq!(values(&add_noise_at(&z, &e, &[0.0]).unwrap()), values(&e));
}

#[test]
fn lre_off_starts_from_the_noise_itself() {
    let s = ScheduleConfig::default().build().unwrap();
    let z = Tensor::randn(0f32, 1.0, (2, 4, 4, 4), &Device::Cpu).unwrap();
    let e = Tensor::randn(0f32, 1.0, (2, 4, 4, 4), &Device::Cpu).unwrap();
    let cfg = SamplerConfig {
        use_lre: false,
        ..Default::default()
    };
    let x = initial_latent_with(&z, &e, &s, &cfg).unwrap();
    let diff = (x - &e).unwrap().abs().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap();
    assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
}
