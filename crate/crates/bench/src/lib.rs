//! Shared setup for the benchmarks: a small fixture experiment with its
//! seed-0 data split and initial CSRs.

use pcm_core::experiments::{DataSource, ExperimentConfig};
use pcm_core::fixture::FixtureConfig;
use pcm_core::{CsrSet, Experiment, Method, PcmModel, TrainData};

pub struct Setup {
    pub exp: Experiment,
    pub data: TrainData,
    pub csr: CsrSet,
}

pub fn fixture_config(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::fixture(method);
    cfg.data = DataSource::Fixture(FixtureConfig {
        train_rows: 200,
        test_rows: 64,
        ..FixtureConfig::default()
    });
    cfg.seeds = vec![0];
    cfg.unlabeled_cap = Some(64);
    cfg.init_epochs = 2;
    cfg
}

pub fn setup() -> Setup {
    let cfg = fixture_config(Method::Pcm);
    let exp = Experiment::prepare(cfg.clone()).expect("fixture experiment");
    let (data, _) = exp.train_data(&cfg, 0).expect("split");
    let csr = exp.initial_csr(&cfg, &data, 0).expect("initial CSRs");
    Setup { exp, data, csr }
}

impl Setup {
    pub fn model(&self, method: Method) -> PcmModel {
        PcmModel::new(
            self.exp.backbone.encoder.deep_clone().expect("encoder copy"),
            self.exp.num_classes(),
            method.spec().layout,
            self.exp.config.head,
            0,
        )
        .expect("model")
    }
}
