//! Feasibility layers: the HoP map's guarantee, its ray length against a
//! direct check of the constraints, and monotone DC3 correction.

mod common;

use common::{checks, instance_with, rng, uniform};
use l2o_core::feasibility::{
    dc3_correct_values, hop_direction_values, hop_tmax, hop_tmax_bisection, phi_value, BeamConstraints, Dc3Config, HopContext,
};
use l2o_core::problem::{self, Beamformer};
use l2o_core::ProblemInstance;
use rand::Rng;

#[test]
fn hop_output_feasible_on_ten_thousand_draws() {
    let c = checks::hop_census(10_000);
    println!("{} draws over {} instances: {} violations, worst g {:.3e}", c.draws, c.instances, c.violations, c.worst);
    assert_eq!(c.violations, 0);
}

fn worst_g(inst: &ProblemInstance, ctx: &HopContext, dir: &[f64], t: f64) -> f64 {
    let x: Vec<f64> = ctx.x0.iter().zip(dir).map(|(a, d)| a + t * d).collect();
    let v = Beamformer::from_raw(&x, inst.n(), inst.k()).unwrap();
    problem::constraint_values(inst, &v).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn ray_length_straddles_the_boundary() {
    let mut r = rng(505);
    let mut checked = 0;
    let mut capped = 0;
    for seed in 0..40 {
        let Some((inst, ctx)) = checks::hop_instance(&mut r, seed) else { continue };
        let d = 2 * inst.n() * inst.k();
        for _ in 0..25 {
            let theta = uniform(&mut r, d - 1, 0.0, std::f64::consts::PI);
            let dir = hop_direction_values(&theta);
            let t = hop_tmax(&inst, &ctx, &dir).unwrap();
            assert!(t > 0.0 && t <= ctx.t_cap);
            assert!(worst_g(&inst, &ctx, &dir, t * (1.0 - 1e-9)) <= 1e-9, "inside point infeasible");
            if t < ctx.t_cap {
                assert!(worst_g(&inst, &ctx, &dir, t * (1.0 + 1e-6)) > 0.0, "t_max {t} stops short of the boundary");
            } else {
                capped += 1;
            }
            let tb = hop_tmax_bisection(&inst, &ctx, &dir).unwrap();
            assert!((t - tb).abs() <= 1e-6 * t.max(1e-3), "analytic {t} vs bisection {tb}");
            checked += 1;
        }
    }
    println!("{checked} rays checked, {capped} capped");
    assert!(checked >= 500);
}

#[test]
fn hop_direction_is_unit_length() {
    let mut r = rng(606);
    for _ in 0..200 {
        let d = r.random_range(2..50);
        let dir = hop_direction_values(&uniform(&mut r, d - 1, -10.0, 10.0));
        let norm: f64 = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dc3_correction_descends_at_default_step() {
    let c = checks::dc3_census(100);
    println!("{} corrections, {} accepted steps, {} ended feasible", c.runs, c.steps, c.ended_feasible);
    assert!(c.worst_rise <= 0.0, "phi rose by {:.3e}", c.worst_rise);
}

#[test]
fn correction_trace_matches_direct_phi() {
    let cfg = Dc3Config::default();
    let mut r = rng(708);
    for seed in 0..20u64 {
        let inst = instance_with(3, 20, 10.0, vec![1.0; 3], vec![1.0; 3], 7100 + seed);
        let x = uniform(&mut r, 2 * inst.n() * inst.k(), -0.2, 0.2);
        let (y, trace) = dc3_correct_values(&BeamConstraints { inst: &inst }, &x, &cfg).unwrap();
        assert!(trace.steps.len() <= cfg.t_test);
        assert_eq!(trace.phi.len(), trace.steps.len() + 1);
        let v = Beamformer::from_raw(&y, inst.n(), inst.k()).unwrap();
        let last = *trace.phi.last().unwrap();
        let direct = phi_value(&inst, &v);
        assert!((direct - last).abs() <= 1e-10 * last + 1e-20, "seed {seed}: direct {direct} vs trace {last}");
    }
}
