use approx::assert_relative_eq;
use dhcal::calibrate::{calibrate, AssembleOptions, FitOptions};
use dhcal::evaluate::{error_report, export_plots, within_fraction};
use dhcal::forward::{oracle_solve, predict, pressure_residuals};
use dhcal::hysteresis::filter_values;
use dhcal::ingest::{
    consumer_flows, load_dataset, save_dataset, windowed_samples, ColumnMap, Dataset, PipelineConfig, RawRecord,
    Sample, DEFAULT_CLIP,
};
use dhcal::model_file::FittedPreset;
use dhcal::synth::{generate_exciting, random_model, random_topology, SynthConfig};
use dhcal::{basis_grid, valve_resistance, ModelPreset, Network, NetworkTopology, RampSpec, Resistance, ValveBasis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn ramp_spec() -> impl Strategy<Value = RampSpec<f64>> {
    (0.0..0.5f64, 0.05..0.5f64, 0.3..3.0f64)
        .prop_map(|(a, w, c)| RampSpec::new(a, (a + w).min(1.0), c).unwrap())
}

fn small_grid() -> ValveBasis<f64> {
    basis_grid(&[0.1, 0.2], &[0.8, 1.0], &[1.0, 1.5]).unwrap()
}

fn tree_model(seed: u64, max_consumers: usize) -> dhcal::HydraulicModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = random_topology(&mut rng, max_consumers);
    let net = Network::new(topo).unwrap();
    random_model(&mut rng, net, small_grid(), 0.01, 0.0).unwrap()
}

fn line_data(dwells: usize, seed: u64, noise: f64) -> Dataset {
    let truth = FittedPreset::ModelAExciting.load();
    let cfg = SynthConfig {
        seed,
        flow_noise: noise,
        ..SynthConfig::default()
    };
    let out = generate_exciting(&truth, &cfg, dwells).unwrap();
    windowed_samples(&out.records, 40.0, 10.0, DEFAULT_CLIP).unwrap().dataset
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ramp_is_bounded_and_monotone(spec in ramp_spec(), v1 in 0.0..=1.0f64, v2 in 0.0..=1.0f64) {
        let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
        let (klo, khi) = (spec.eval(lo).unwrap(), spec.eval(hi).unwrap());
        prop_assert!((0.0..=1.0).contains(&klo) && (0.0..=1.0).contains(&khi));
        prop_assert!(klo <= khi);
        prop_assert_eq!(spec.eval(0.0).unwrap(), 0.0);
        prop_assert_eq!(spec.eval(1.0).unwrap(), 1.0);
    }

    #[test]
    fn valve_resistance_falls_with_opening(
        theta in prop::collection::vec(prop_oneof![Just(0.0), 0.001..1.0f64], 8),
        v1 in 0.0..=1.0f64,
        v2 in 0.0..=1.0f64,
    ) {
        let basis = small_grid();
        let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
        let rlo = valve_resistance(&theta, &basis, lo).unwrap();
        let rhi = valve_resistance(&theta, &basis, hi).unwrap();
        match (rlo, rhi) {
            (Resistance::Finite(a), Resistance::Finite(b)) => prop_assert!(b <= a * (1.0 + 1e-12)),
            (Resistance::Infinite, _) => {}
            (Resistance::Finite(_), Resistance::Infinite) => prop_assert!(false, "valve closed while opening"),
        }
    }

    #[test]
    fn edge_flow_is_sum_over_downstream_consumers(seed in any::<u64>(), flows_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(random_topology(&mut rng, 12)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(flows_seed);
        let q: Vec<f64> = (0..net.consumer_count()).map(|_| rand::Rng::random_range(&mut rng, 0.0..10.0)).collect();
        let edge_q = net.propagate_flows(&q).unwrap();
        for (j, &flow) in edge_q.iter().enumerate() {
            let expect: f64 = (0..q.len()).filter(|&i| net.path(i).contains(&j)).map(|i| q[i]).sum();
            prop_assert!((flow - expect).abs() <= 1e-12 * (1.0 + expect));
        }
    }

    #[test]
    fn deadband_stays_within_delta_of_command(
        v in prop::collection::vec(0.0..=1.0f64, 1..60),
        delta in 0.0..0.1f64,
    ) {
        let out = filter_values(&v, delta);
        prop_assert_eq!(out.len(), v.len());
        prop_assert_eq!(out[0], v[0]);
        for (f, x) in out.iter().zip(&v) {
            prop_assert!((0.0..=1.0).contains(f));
            prop_assert!((f - x).abs() <= delta + 1e-15);
        }
        prop_assert_eq!(filter_values(&v, 0.0), v);
    }

    #[test]
    fn deadband_is_mirror_symmetric(
        v in prop::collection::vec(0.0..=1.0f64, 1..60),
        delta in 0.0..0.1f64,
    ) {
        let mirrored: Vec<f64> = v.iter().map(|x| 1.0 - x).collect();
        let back: Vec<f64> = filter_values(&mirrored, delta).iter().map(|x| 1.0 - x).collect();
        for (a, b) in back.iter().zip(filter_values(&v, delta)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deadband_follows_monotone_commands(
        steps in prop::collection::vec(0.0..0.05f64, 1..40),
        delta in 0.0..0.05f64,
    ) {
        let v: Vec<f64> = steps.iter().scan(0.0, |acc, s| { *acc = (*acc + s).min(1.0); Some(*acc) }).collect();
        let out = filter_values(&v, delta);
        for w in out.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        for (f, x) in out.iter().zip(&v) {
            prop_assert!(f <= x);
        }
    }

    #[test]
    fn consumer_flows_sum_to_trunk_flow(ft in prop::collection::vec(0.0..20.0f64, 1..8)) {
        let mut ft = ft;
        ft.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let rec = RawRecord { t: 0.0, ft: ft.clone(), pt1: 7.0, pt2: 1.0, v: vec![0.5; ft.len()] };
        let q = consumer_flows(&rec);
        prop_assert!((q.iter().sum::<f64>() - ft[0]).abs() <= 1e-12 * (1.0 + ft[0]));
        prop_assert!(q.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn incomplete_trailing_window_is_ignored(seed in any::<u64>(), tail in 1usize..39) {
        let truth = FittedPreset::ModelAExciting.load();
        let cfg = SynthConfig { seed, flow_noise: 0.02, ..SynthConfig::default() };
        let records = generate_exciting(&truth, &cfg, 4).unwrap().records;
        let base = windowed_samples(&records, 40.0, 10.0, DEFAULT_CLIP).unwrap();
        let extra = generate_exciting(&truth, &SynthConfig { seed: seed ^ 1, ..cfg }, 1).unwrap().records;
        let mut longer = records.clone();
        longer.extend(extra.into_iter().take(tail).enumerate().map(|(k, mut r)| {
            r.t = 160.0 + k as f64;
            r
        }));
        let more = windowed_samples(&longer, 40.0, 10.0, DEFAULT_CLIP).unwrap();
        prop_assert_eq!(base, more);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_rises_with_own_setpoint_and_head(
        seed in any::<u64>(),
        v in prop::collection::vec(0.25..=1.0f64, 10),
        bump in 0.0..0.5f64,
        dp0 in 0.5..10.0f64,
    ) {
        let model = tree_model(seed, 10);
        let n = model.consumer_count();
        let v = &v[..n];
        let q = predict(&model, v, dp0).unwrap();
        let i = (seed % n as u64) as usize;
        let mut w = v.to_vec();
        w[i] = (w[i] + bump).min(1.0);
        let q2 = predict(&model, &w, dp0).unwrap();
        prop_assert!(q2[i] >= q[i] * (1.0 - 1e-12));
        let q3 = predict(&model, v, 4.0 * dp0).unwrap();
        for (a, b) in q.iter().zip(&q3) {
            prop_assert!((b - 2.0 * a).abs() <= 1e-9 * (1.0 + b));
        }
    }

    #[test]
    fn predicted_flows_balance_every_path(
        seed in any::<u64>(),
        v in prop::collection::vec(0.25..=1.0f64, 10),
        dp0 in 0.5..10.0f64,
    ) {
        let model = tree_model(seed, 10);
        let v = &v[..model.consumer_count()];
        let q = predict(&model, v, dp0).unwrap();
        for r in pressure_residuals(&model, v, dp0, &q).unwrap() {
            prop_assert!(r.abs() < 1e-9, "residual {r}");
        }
        let oracle = oracle_solve(&model, v, dp0).unwrap();
        for (a, b) in q.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + b));
        }
    }

    #[test]
    fn within_fraction_grows_with_band(
        errors in prop::collection::vec(-1.0..1.0f64, 1..50),
        b1 in 0.0..1.0f64,
        b2 in 0.0..1.0f64,
    ) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let (flo, fhi) = (within_fraction(&errors, lo), within_fraction(&errors, hi));
        prop_assert!(flo <= fhi);
        prop_assert!((0.0..=1.0).contains(&flo) && (0.0..=1.0).contains(&fhi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fit_objective_scales_with_units(seed in any::<u64>(), c in 0.5..3.0f64) {
        let data = line_data(15, seed, 0.02);
        let scaled = Dataset::new(
            data.samples()
                .iter()
                .map(|s| Sample {
                    t: s.t,
                    dp0: s.dp0 * c * c,
                    v: s.v.clone(),
                    q: s.q.iter().map(|q| q * c).collect(),
                })
                .collect(),
            data.consumer_count(),
        )
        .unwrap();
        let net = Network::new(NetworkTopology::four_consumer_line()).unwrap();
        let basis = ModelPreset::A.basis();
        let opts = FitOptions::default();
        let assemble = AssembleOptions { min_flow: 0.0 };
        let (_, base) = calibrate(&data, &net, &basis, &assemble, &opts).unwrap();
        let (_, big) = calibrate(&scaled, &net, &basis, &assemble, &opts).unwrap();
        prop_assert!(base.optimal && big.optimal);
        assert_relative_eq!(big.info.objective, c * c * base.info.objective, max_relative = 1e-6, epsilon = 1e-9);
    }

    #[test]
    fn duplicated_data_doubles_the_objective(seed in any::<u64>()) {
        let data = line_data(15, seed, 0.02);
        let mut samples = data.samples().to_vec();
        samples.extend_from_slice(data.samples());
        let doubled = Dataset::new(samples, data.consumer_count()).unwrap();
        let net = Network::new(NetworkTopology::four_consumer_line()).unwrap();
        let basis = ModelPreset::A.basis();
        let opts = FitOptions::default();
        let (_, base) = calibrate(&data, &net, &basis, &AssembleOptions::default(), &opts).unwrap();
        let (_, twice) = calibrate(&doubled, &net, &basis, &AssembleOptions::default(), &opts).unwrap();
        assert_relative_eq!(twice.info.objective, 2.0 * base.info.objective, max_relative = 1e-6, epsilon = 1e-9);
    }

    #[test]
    fn processed_csv_round_trips(seed in any::<u64>()) {
        let data = line_data(6, seed, 0.05);
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("data.csv");
        save_dataset(&data, &path).unwrap();
        let back = load_dataset(&path, &ColumnMap::default(), &PipelineConfig::default()).unwrap();
        prop_assert!(back.rejects.is_empty());
        prop_assert_eq!(back.dataset.samples(), data.samples());
    }

    #[test]
    fn exported_errors_are_lossless(seed in any::<u64>()) {
        let data = line_data(8, seed, 0.05);
        let model = FittedPreset::ModelAExciting.load();
        let preds: Vec<Vec<f64>> = data
            .samples()
            .iter()
            .map(|s| predict(&model, &s.v, s.dp0).unwrap())
            .collect();
        let report = error_report(&data, &preds, None).unwrap();
        let dir = TempDir::new().unwrap();
        export_plots(&report, Some(&model), dir.path()).unwrap();
        for (i, valve) in report.valves.iter().enumerate() {
            let mut rdr = csv::Reader::from_path(dir.path().join(format!("errors_{}.csv", i + 1))).unwrap();
            let read: Vec<f64> = rdr.records().map(|r| r.unwrap()[5].parse().unwrap()).collect();
            prop_assert_eq!(&read, &valve.errors);
        }
    }
}
