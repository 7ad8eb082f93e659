use prgp::checkpoint::Checkpoint;
use prgp::config::RunConfig;
use prgp::dataio::{load_csv, load_dataset, save_dataset, write_observations};
use prgp_core::data::{Dataset, NoiseDistribution};
use prgp_core::physics::PhysicsModel;
use prgp_core::simulate::{run, virtual_sensors, SensorConfig, SimConfig};
use prgp_core::trainer::{train, TrainConfig, TrainingData};

fn simulated_rows() -> Vec<prgp_core::data::Observation> {
    let grid = run(&SimConfig::corridor()).unwrap();
    virtual_sensors(&grid, &SensorConfig::default()).unwrap()
}

#[test]
fn simulated_sensor_csv_loads_back_without_drops() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("s.csv");
    let rows = simulated_rows();
    write_observations(&path, &rows).unwrap();
    let data = load_csv(&path).unwrap();
    assert_eq!(data.dropped_rows, 0);
    assert_eq!(data.samples.iter().map(|s| s.observation()).collect::<Vec<_>>(), rows);
}

#[test]
fn prepared_dataset_round_trips_with_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("d.csv");
    let data = Dataset::from_observations(simulated_rows())
        .unwrap()
        .split(0.5, 8)
        .unwrap()
        .inject_noise(0.5, 100.0, NoiseDistribution::Uniform, 8)
        .unwrap()
        .standardize()
        .unwrap();
    save_dataset(&path, &data).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.samples, data.samples);
    assert_eq!(back.split, data.split);
    assert_eq!(back.noise, data.noise);
    assert_eq!(back.standardization, data.standardization);
}

#[test]
fn checkpoint_round_trips_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig::default();
    let data = Dataset::from_observations(simulated_rows()).unwrap().split(0.5, 0).unwrap().standardize().unwrap();
    let training = TrainingData::from_dataset(&data).unwrap();
    let init = config.initial_params(PhysicsModel::Pw).unwrap();
    let outcome = train(&training, &init, &TrainConfig { iterations: 5, ..TrainConfig::default() }, &mut |_| {}).unwrap();
    let ckpt = Checkpoint::new(&outcome, training.standardization, "abc".into(), config);
    let path = tmp.path().join("c.json");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
}

#[test]
fn config_toml_round_trips_after_edits() {
    let mut c = RunConfig::default();
    c.seed = 99;
    c.physics.model = PhysicsModel::Arz;
    c.physics.gamma = vec![0.5, 2.0];
    c.noise.enabled = true;
    c.train.learning_rate = 0.01;
    c.simulate.dx = 0.1;
    assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    assert_ne!(c.hash().unwrap(), RunConfig::default().hash().unwrap());
}
