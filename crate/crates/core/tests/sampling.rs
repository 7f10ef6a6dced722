use hqnoise::guidance::{combine_cfg, CfgSchedule};
use hqnoise::scheduler::{descale, initial_noise, SigmaSchedule};
use hqnoise::Tensor;

#[test]
fn descaled_initial_noise_has_unit_std() {
    for (steps, sigma_max) in [(25, 700.0), (50, 36.4214), (10, 2.0)] {
        let schedule = SigmaSchedule::<f64>::karras(steps, 0.002, sigma_max, 7.0).unwrap();
        for seed in 0..5 {
            let z = initial_noise(&[21, 4, 16, 16], seed, schedule.q());
            let (mean, std) = descale(&z, schedule.sigma_max()).mean_std();
            assert!((std - 1.0).abs() < 0.05, "seed {seed}: std {std}");
            assert!(mean.abs() < 0.05, "seed {seed}: mean {mean}");
        }
    }
}

#[test]
fn schedule_ends_at_exact_zero() {
    for steps in [1, 2, 16, 25, 50] {
        let s = SigmaSchedule::<f64>::karras(steps, 0.002, 700.0, 7.0).unwrap();
        assert_eq!(*s.sigmas().last().unwrap(), 0.0);
        assert!(s.sigmas().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.steps(), steps);
    }
}

#[test]
fn zero_inversion_guidance_is_unconditional() {
    let c = Tensor::<f64>::from_fn(&[4, 4], |i| (i as f64).sin());
    let u = Tensor::<f64>::from_fn(&[4, 4], |i| (i as f64 * 0.3).cos());
    assert_eq!(combine_cfg(&c, &u, 0.0).unwrap(), u);
    let sv3d = CfgSchedule::triangular(6.0, 2.5);
    let g = sv3d.gammas(21).unwrap();
    assert_eq!(g[0], 6.0);
    assert_eq!(g[10], 2.5);
    assert!(g.iter().all(|&x| (2.5..=6.0).contains(&x)));
}
