use nalgebra::{DMatrix, DVector, RowDVector};
use rayon::prelude::*;
use subflow_core::flow::{integrate, ito_product_residual, MatrixField};
use subflow_core::malliavin::{small_ball_profile, SmallBallOptions};
use subflow_core::models;
use subflow_core::noise::synthesize_noise;
use subflow_core::oracles::stable_calibration;
use subflow_core::seeding::stream_rng;
use subflow_core::stats::{fokker_planck_residual, FpOptions, TestFunction};
use subflow_core::subordinator::SubordinatorSpec;

fn main() {
    let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
    let which: String = std::env::args().nth(1).unwrap_or_default();

    if which == "fp0" {
        // zero-drift FP at spec scale across seeds
        let model = models::zero_drift(1, DMatrix::identity(1, 1)).unwrap();
        let cal = stable_calibration(&spec).unwrap();
        let z = 0.6 / cal.c_l;
        let f = TestFunction::cosine(DVector::from_vec(vec![z]));
        let analytic = cal.c_l * z * (-(cal.c_l) * z).exp();
        println!("analytic derivative magnitude {analytic:.5}");
        for seed in [101u64, 202, 303, 404, 505] {
            let t0 = std::time::Instant::now();
            let r = fokker_planck_residual(&model, &spec, &f, &DVector::zeros(1), 1.0, 0.01,
                100_000, seed, &FpOptions::for_horizon(1.0)).unwrap();
            println!("seed {seed}: residual {:.5e} budget {:.5e} (sigma {:.2e} dt {:.2e} trunc {:.2e}) cap {:.5e} pass {} time {:?}",
                r.residual, r.budget, r.mc_sigma, r.dt_bias, r.truncation_bias,
                0.05*analytic, r.residual <= r.budget && r.budget <= 0.05*analytic, t0.elapsed());
        }
    }

    if which == "fp1" {
        // pendulum FP with a gaussian bump
        let model = models::pendulum().unwrap();
        let f = TestFunction::gaussian_bump(DVector::from_vec(vec![0.4, 0.1]), 1.0).unwrap();
        for seed in [11u64, 22, 33] {
            let t0 = std::time::Instant::now();
            let r = fokker_planck_residual(&model, &spec, &f, &DVector::from_vec(vec![0.3, 0.0]),
                0.5, 0.01, 100_000, seed, &FpOptions::for_horizon(0.5)).unwrap();
            println!("seed {seed}: residual {:.5e} budget {:.5e} (sigma {:.2e} dt {:.2e} trunc {:.2e}) pass {} time {:?}",
                r.residual, r.budget, r.mc_sigma, r.dt_bias, r.truncation_bias, r.passes(), t0.elapsed());
        }
    }

    if which == "ito" {
        let model = models::pendulum().unwrap();
        let field = MatrixField::drift_jacobian_of(&model).unwrap();
        let x0 = DVector::from_vec(vec![0.9, -0.3]);
        for seed in 0..10u64 {
            let mut rng = stream_rng(900 + seed, 0);
            let clock = spec.sample_path(1.0, 1e-4, &mut rng).unwrap();
            let fine = synthesize_noise(&clock, 2, 1.0 / 1024.0, &mut rng).unwrap();
            let mut res = Vec::new();
            for factor in [4usize, 2, 1] {
                let noise = fine.coarsen(factor);
                let bundle = integrate(&model, &noise, &x0).unwrap();
                res.push(ito_product_residual(&model, &bundle, &field));
            }
            println!("seed {seed}: residuals {:.3e} {:.3e} {:.3e} ratios {:.2} {:.2}",
                res[0], res[1], res[2], res[0]/res[1], res[1]/res[2]);
        }
    }

    if which == "smallball" {
        let model = models::pendulum().unwrap();
        let a_grid = vec![RowDVector::from_vec(vec![1.0, 0.0]), RowDVector::from_vec(vec![0.0, 1.0])];
        for eps_grid in [vec![0.02, 0.04, 0.08, 0.16, 0.32], vec![0.01, 0.03, 0.09, 0.27, 0.81]] {
            let t0 = std::time::Instant::now();
            let profile = small_ball_profile(&model, &spec, &DVector::from_vec(vec![0.3, 0.0]),
                1.0, &a_grid, &eps_grid, 10_000, 31881, SmallBallOptions::for_horizon(1.0)).unwrap();
            println!("eps_grid {eps_grid:?} time {:?}", t0.elapsed());
            for row in &profile.rows {
                println!("  a{} eps {:.3}: p {:.5} [{:.5},{:.5}] hits {}", row.a_index, row.eps, row.p_hat, row.ci_lo, row.ci_hi, row.hits);
            }
            println!("  slopes: {:?}", profile.slopes);
        }
    }

    if which == "flow100" {
        let model = models::pendulum().unwrap();
        let x0 = DVector::from_vec(vec![0.7, 0.0]);
        let t0 = std::time::Instant::now();
        let worst: Vec<(f64, f64)> = (0..100u64).into_par_iter().map(|seed| {
            let mut rng = stream_rng(700, seed);
            let clock = spec.sample_path(1.0, 1e-4, &mut rng).unwrap();
            let noise = synthesize_noise(&clock, 2, 1.0/256.0, &mut rng).unwrap();
            let bundle = integrate(&model, &noise, &x0).unwrap();
            (bundle.max_inverse_flow_residual(), bundle.liouville_residual(&model))
        }).collect();
        let inv = worst.iter().map(|w| w.0).fold(0.0f64, f64::max);
        let liu = worst.iter().map(|w| w.1).fold(0.0f64, f64::max);
        println!("max JK-I {inv:.3e} max liouville {liu:.3e} time {:?}", t0.elapsed());
    }
}
