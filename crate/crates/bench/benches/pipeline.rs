use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gridgsp::estimation::{build_measurement_model, place_pmus, Estimator, DEFAULT_MU1};
use gridgsp::grid::fixtures::four_bus_3ph;
use gridgsp::grid::PowerFlow;
use gridgsp::gso::{build_real_gso, graph_signal, kron_reduce, signal_indices};
use gridgsp::gsp::{apply_filter, gft, to_csr, PolynomialFilter};
use gridgsp::nn::{Architecture, GraphModel, GraphShiftOp, Head, ModelConfig, SignalScaler};
use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid(c: &mut Criterion) {
    let case = four_bus_3ph();
    let pf = PowerFlow::new(&case).unwrap();
    let s = case.nominal_injections();
    let v0 = case.nominal_slack_voltage();
    c.bench_function("power_flow/four_bus", |b| b.iter(|| pf.solve_all(black_box(&s), &v0).unwrap()));
    c.bench_function("gso/build_four_bus", |b| b.iter(|| build_real_gso(black_box(&case))));
    let gso = build_real_gso(&case);
    let rows = signal_indices(&[0, 1, 2, 6, 11], case.node_count());
    c.bench_function("gso/kron_reduce", |b| b.iter(|| kron_reduce(black_box(&gso.s_full), &rows).unwrap()));
}

fn gsp(c: &mut Criterion) {
    let case = four_bus_3ph();
    let gso = build_real_gso(&case);
    let csr = to_csr(&gso.s_full);
    let f = PolynomialFilter::new(vec![0.5, -0.2, 0.05, 0.01]).unwrap();
    let x = DVector::from_fn(gso.signal_dim(), |k, _| (k as f64).sin());
    c.bench_function("gsp/filter_order3", |b| b.iter(|| apply_filter(&f, &csr, black_box(&x)).unwrap()));
    c.bench_function("gsp/gft", |b| b.iter(|| gft(black_box(&gso.b_hat)).unwrap()));
    let basis = gft(&gso.b_hat).unwrap();
    c.bench_function("estimation/place_pmus_4", |b| b.iter(|| place_pmus(black_box(&basis), 4, 4).unwrap()));
    let pf = PowerFlow::new(&case).unwrap();
    let v = pf.solve_all(&case.nominal_injections(), &case.nominal_slack_voltage()).unwrap().v;
    let model = build_measurement_model(pf.admittance(), &[0, 4, 8, 11]).unwrap();
    let z = model.measure(&v).unwrap();
    let est = Estimator::new(model, &gso.b_hat, DEFAULT_MU1).unwrap();
    c.bench_function("estimation/recover", |b| b.iter(|| graph_signal(&case, &est.recover(black_box(&z)).unwrap())));
}

fn networks(c: &mut Criterion) {
    let case = four_bus_3ph();
    let gso = build_real_gso(&case);
    let d = gso.signal_dim();
    let shift = GraphShiftOp::new(&gso.s_full, true).unwrap();
    let batch = DMatrix::from_fn(32 * d, 10, |i, j| ((i * 7 + j) as f64).cos());
    for arch in [Architecture::Gcn, Architecture::Grn] {
        let cfg = ModelConfig::new(arch, d, Head::Regression { outputs: d });
        let scaler = SignalScaler::new(vec![0.0; d], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = GraphModel::init(cfg, scaler.clone(), Some(scaler), &mut rng).unwrap();
        c.bench_function(&format!("nn/{arch:?}_forward_batch32").to_lowercase(), |b| {
            b.iter(|| model.predict(&shift, black_box(&batch)).unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = grid, gsp, networks
}
criterion_main!(benches);
