use contravirt::datakit::{dataset_hash, generate_synthetic, parse_station_reader, write_station_csv, SyntheticConfig, FF, GFF};

const ACCEPTANCE_HASH: &str = "5b2cd153ba50dffd0fbea092ff72906837afb44b412bf238f24cc4b9003e79c3";

#[test]
fn acceptance_dataset_is_frozen() {
    let cfg = SyntheticConfig::acceptance();
    let data = generate_synthetic(&cfg).unwrap();
    assert_eq!(data.dataset.stations.len(), 12);
    assert_eq!(data.dataset.n_steps, 8000);
    assert_eq!(data.withheld, ["S02", "S03", "S10", "S12"]);
    assert_eq!(dataset_hash(&data.dataset).unwrap(), ACCEPTANCE_HASH);
    assert_eq!(data.manifest.sha256, ACCEPTANCE_HASH);
    for s in &data.dataset.stations {
        assert!(cfg.grid.bbox.contains(&s.meta.location));
        for t in 0..data.dataset.n_steps {
            assert!(s.get(t, GFF).unwrap() >= s.get(t, FF).unwrap());
        }
    }
}

#[test]
fn csv_round_trip_preserves_dataset() {
    let cfg = SyntheticConfig { n_steps: 400, seed: 3, ..SyntheticConfig::acceptance() };
    let data = generate_synthetic(&cfg).unwrap();
    let mut buf = Vec::new();
    write_station_csv(&data.dataset, &mut buf).unwrap();
    let parsed = parse_station_reader(buf.as_slice()).unwrap();
    assert!(parsed.issues.is_empty(), "{:?}", parsed.issues.first());
    assert_eq!(parsed.dataset, data.dataset);
    assert_eq!(dataset_hash(&parsed.dataset).unwrap(), dataset_hash(&data.dataset).unwrap());
}

#[test]
fn different_seeds_give_different_data() {
    let a = generate_synthetic(&SyntheticConfig { n_steps: 200, ..SyntheticConfig::acceptance() }).unwrap();
    let b = generate_synthetic(&SyntheticConfig { n_steps: 200, seed: 8, ..SyntheticConfig::acceptance() }).unwrap();
    assert_ne!(a.manifest.sha256, b.manifest.sha256);
}
