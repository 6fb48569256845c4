use levisim::model::Axis;
use levisim::protocols::{
    compensate_3d, compensation_scan, cross_cool_calibrate, CrossCoolOptions, ScanSpec,
};
use levisim::SimConfig;
use nalgebra::Vector3;

fn no_gravity() -> SimConfig {
    let mut c = SimConfig::reference();
    c.environment.gravity = Vector3::zeros();
    c
}

#[test]
fn scan_does_not_depend_on_thread_count() {
    let c = no_gravity();
    let mut s = ScanSpec::new(Axis::Z, (-0.5, 0.5), 5, 20e-6);
    s.repetitions = 4;
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| compensation_scan(&s, &c, 21).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn scan_optimum_follows_a_stray_offset() {
    let c = no_gravity();
    let mut s = ScanSpec::new(Axis::Z, (-0.4, 0.4), 9, 30e-6);
    s.repetitions = 4;
    let a = compensation_scan(&s, &c, 5).unwrap();

    // Stray field equivalent to -0.25 V along the scan direction, with the
    // scan window moved along with it.
    let shift = 0.25;
    let mut shifted = c.clone();
    let f = c.electrodes.force(&a.direction) * shift;
    shifted.environment.stray_field = -f / c.particle.charge();
    s.v_min += shift;
    s.v_max += shift;
    let b = compensation_scan(&s, &shifted, 5).unwrap();
    assert!((b.v_opt - a.v_opt - shift).abs() < 1e-6, "{} {}", a.v_opt, b.v_opt);
}

#[test]
fn three_axis_residual_shrinks_with_tau() {
    let mut c = SimConfig::reference();
    let null = Vector3::new(6.0, -4.0, 0.5);
    c.environment.stray_field = -(c.electrodes.transduction * null) / c.particle.charge();
    // Distance to the true optimum along each scan direction, plus margin.
    let n = c.electrodes.normalized_inverse().unwrap();
    let need = n.try_inverse().unwrap() * c.true_optimum().unwrap();
    let half = [0, 1, 2].map(|i| 1.5 * need[i].abs() + 0.5);
    let mut t = ScanSpec::new(Axis::Z, (-1.0, 1.0), 7, 10e-6);
    t.repetitions = 4;
    let taus = [10e-6, 20e-6, 40e-6];
    let r = compensate_3d(&c, &taus, half, &t, 13).unwrap();
    let start = c.static_force(&c.dc()).norm();
    let per_tau: Vec<f64> = r.steps.chunks(3).map(|s| s[2].residual_force.norm()).collect();
    assert!(per_tau[0] < start);
    for w in per_tau.windows(2) {
        assert!(w[1] <= 1.5 * w[0], "{per_tau:?}");
    }
    assert!(per_tau[2] < 0.05 * start, "{per_tau:?} from {start}");
}

#[test]
fn cross_cooling_ignores_charge_scale() {
    let c = SimConfig::reference();
    let o = CrossCoolOptions { settle: 2e-3, duration: 8e-3, ..Default::default() };
    let a = cross_cool_calibrate(&c, 3, &o).unwrap();
    let b = cross_cool_calibrate(&c.with_charge(3 * c.particle.charge_q), 3, &o).unwrap();
    let d = (a.normalized_inverse_hat - b.normalized_inverse_hat).abs().max();
    assert!(d < 1e-6, "{a:?} {b:?}");
}
