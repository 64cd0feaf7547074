use brsmfg::applications::{build_crowd_model, build_wealth_model, crowd_initial_densities, overlap, quadratic_target, CrowdParams, WealthParams};
use brsmfg::fokker_planck::{solve_fpk, FpkConfig};
use brsmfg::measures::{EmpiricalMeasure, GridDensity};
use brsmfg::model::{brs_drift, InitialLaw};
use brsmfg::runner::mirror_x;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn crowd_path(params: &CrowdParams, t_final: f64, records: usize) -> Vec<Vec<GridDensity>> {
    let model = build_crowd_model(params).unwrap();
    let grid = params.grid().unwrap();
    let m0 = crowd_initial_densities(params, &model, &grid).unwrap();
    let (path, rep) = solve_fpk(&model, &m0, &FpkConfig { t_final, record_every: records, ..Default::default() }).unwrap();
    assert!(rep.mass_drift.iter().all(|d| *d <= 1e-10), "{:?}", rep.mass_drift);
    assert!(rep.min_value >= -1e-13);
    path.fields
}

fn small_crowd(lambda: f64) -> CrowdParams {
    let mut p = CrowdParams::crossing(lambda);
    p.domain = [brsmfg::measures::Axis::new(0.0, 10.0, 24), brsmfg::measures::Axis::new(0.0, 10.0, 24)];
    p
}

#[test]
fn crowd_without_xenophobia_and_equal_data_keeps_populations_equal() {
    let mut p = small_crowd(0.0);
    p.initial[1] = p.initial[0].clone();
    p.terminal[1] = quadratic_target([7.5, 5.0], 1.0);
    for f in crowd_path(&p, 1.0, 4) {
        assert!(f[0].l1_distance(&f[1]) <= 1e-12);
    }
}

#[test]
fn crowd_mirror_symmetry() {
    for f in crowd_path(&small_crowd(2.0), 1.0, 4) {
        assert!(mirror_x(&f[0]).unwrap().l1_distance(&f[1]) <= 1e-3);
    }
}

#[test]
fn xenophobia_reduces_peak_overlap() {
    // Groups start apart on a line and head for each other's start.
    let peak = |lambda: f64| {
        let mut p = small_crowd(lambda);
        p.sigma = [0.2, 0.2];
        p.initial = [InitialLaw::gaussian(vec![3.0, 5.0], vec![0.6, 0.6]), InitialLaw::gaussian(vec![7.0, 5.0], vec![0.6, 0.6])];
        crowd_path(&p, 2.0, 8).iter().map(|f| overlap(&f[0], &f[1])).fold(0.0, f64::max)
    };
    let (calm, averse) = (peak(0.0), peak(20.0));
    assert!(averse < calm, "overlap {averse} with aversion vs {calm} without");
}

fn random_wealth(n: usize, seed: u64) -> EmpiricalMeasure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<f64> = (0..n).flat_map(|_| [rng.random_range(-2.0..2.0), rng.random_range(0.2..3.0)]).collect();
    EmpiricalMeasure::uniform(2, pts).unwrap()
}

#[test]
fn wealth_drift_matches_pairwise_sum_for_hundred_players() {
    let p = WealthParams::default();
    let model = build_wealth_model(&p).unwrap();
    let m = random_wealth(100, 3);
    let n = m.len();
    let rho: Vec<f64> = (0..n).map(|k| (0..n).map(|j| p.psi.value(m.point(k)[0] - m.point(j)[0])).sum::<f64>() / n as f64).collect();
    let mut total = 0.0;
    for i in 0..n {
        let oracle = -(0..n)
            .map(|j| {
                p.xi.value(0.5 * (rho[i] + rho[j])) * p.psi.value(m.point(i)[0] - m.point(j)[0]) * p.phi.derivative(m.point(i)[1] - m.point(j)[1])
            })
            .sum::<f64>()
            / n as f64;
        let d = brs_drift(&model, 0, 0.0, m.point(i), &[m.view()]).unwrap();
        assert!((d[1] - oracle).abs() <= 1e-12, "{i}: {} vs {oracle}", d[1]);
        total += d[1];
    }
    // Trades are pairwise antisymmetric, so total wealth drift vanishes.
    assert!(total.abs() <= 1e-12, "{total}");
}

#[test]
fn wealth_particles_stay_above_floor() {
    use brsmfg::brs::MpcConfig;
    use brsmfg::particle_sim::{simulate, BrsPolicy, Coupling, SimConfig};
    let p = WealthParams { kappa: 0.5, z_min: 0.1, ..WealthParams::default() };
    let model = build_wealth_model(&p).unwrap();
    let cfg = SimConfig { dt: 0.01, t0: 0.0, t_final: 1.0, n_particles: 60, seed: 2, record_every: 10, coupling: Coupling::FullEmpirical };
    let rec = simulate(&model, &cfg, &BrsPolicy { mpc: MpcConfig::new(0.01) }, None).unwrap();
    for s in &rec.snapshots {
        assert!(s.positions(0).chunks_exact(2).all(|x| x[1] >= 0.1));
    }
}
