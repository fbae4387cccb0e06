use candle_core::Var;

use pcm_core::experiments::ExperimentConfig;
use pcm_core::fixture::FixtureConfig;
use pcm_core::ssl::{LogRecord, TrainData};
use pcm_core::{CsrSet, Experiment, GateConfig, GateMode, Method, ModelLayout, PcmModel, TrainConfig, Trainer};

fn small_config(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::fixture(method);
    cfg.data = pcm_core::experiments::DataSource::Fixture(FixtureConfig {
        train_rows: 160,
        test_rows: 40,
        ..FixtureConfig::default()
    });
    cfg.seeds = vec![0];
    cfg.unlabeled_cap = Some(48);
    cfg.init_epochs = 3;
    cfg.max_len = 32;
    cfg.train.max_steps = Some(12);
    cfg.train.check_every = 4;
    cfg.train.log_every = 1;
    cfg.train.labeled_batch = 4;
    // Loose thresholds so the untrained model gates some rows.
    cfg.train.gate = GateConfig {
        confid1: 0.3,
        confid2: 0.3,
        temperature: 0.5,
    };
    cfg
}

fn snapshot(vars: &[Var]) -> Vec<Vec<f32>> {
    vars.iter()
        .map(|v| v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap())
        .collect()
}

struct Setup {
    exp: Experiment,
    data: TrainData,
    csr: CsrSet,
}

fn setup() -> Setup {
    let cfg = small_config(Method::Pcm);
    let exp = Experiment::prepare(cfg.clone()).unwrap();
    let (data, _) = exp.train_data(&cfg, 0).unwrap();
    let csr = exp.initial_csr(&cfg, &data, 0).unwrap();
    Setup { exp, data, csr }
}

fn trainer<'a>(s: &'a Setup, cfg: TrainConfig) -> Trainer<'a> {
    let model = PcmModel::new(
        s.exp.backbone.encoder.deep_clone().unwrap(),
        s.exp.num_classes(),
        ModelLayout::DUAL,
        s.exp.config.head,
        0,
    )
    .unwrap();
    Trainer::new(cfg, model, Some(s.csr.clone()), &s.data, s.exp.spec, s.exp.backbone.tokenizer.as_ref()).unwrap()
}

#[test]
fn zero_weight_unlabeled_loss_leaves_the_supervised_trajectory() {
    let s = setup();
    // The untrained heads rarely agree, so gate on the semantic head alone
    // to make sure the unlabeled branch actually runs.
    let base = TrainConfig {
        csr_updates: false,
        gate_mode: GateMode::SemanticConfidence,
        ..s.exp.config.train_config(0)
    };
    let mut with_u = trainer(
        &s,
        TrainConfig {
            lambda_u: 0.0,
            use_unlabeled: true,
            ..base.clone()
        },
    );
    let mut supervised = trainer(
        &s,
        TrainConfig {
            use_unlabeled: false,
            ..base
        },
    );
    let mut gated = 0;
    for _ in 0..10 {
        let a = with_u.train_step().unwrap();
        let b = supervised.train_step().unwrap();
        gated += a.gated_rows;
        assert_eq!(a.labeled, b.labeled);
        assert_eq!(a.total, b.total);
        assert_eq!(b.gated_rows, 0);
    }
    assert!(gated > 0, "the gate never passed, so the comparison is vacuous");
    let vars = |t: &Trainer| t.model().encoder_vars().into_iter().chain(t.model().head_vars()).collect::<Vec<_>>();
    assert_eq!(snapshot(&vars(&with_u)), snapshot(&vars(&supervised)));
    let ca = with_u.check().unwrap();
    let cb = supervised.check().unwrap();
    assert_eq!(ca.test_accuracy, cb.test_accuracy);
    assert_eq!(ca.csr_version, Some(0));
}

#[test]
fn reruns_reproduce_logs_and_csrs() {
    let cfg = small_config(Method::Pcm);
    let exp = Experiment::prepare(cfg.clone()).unwrap();
    let a = exp.run_seed(&cfg, 0, None).unwrap();
    let b = exp.run_seed(&cfg, 0, None).unwrap();
    assert_eq!(serde_json::to_string(&a.log).unwrap(), serde_json::to_string(&b.log).unwrap());
    assert_eq!(a.final_csr, b.final_csr);
    assert_eq!(a.initial_csr, b.initial_csr);
    assert_eq!(a.best, b.best);
    assert_eq!(a.steps, 12);

    // A fresh preparation regenerates the same corpus, vocabulary and weights.
    let again = Experiment::prepare(cfg.clone()).unwrap().run_seed(&cfg, 0, None).unwrap();
    assert_eq!(serde_json::to_string(&a.log).unwrap(), serde_json::to_string(&again.log).unwrap());
}

#[test]
fn csr_versions_follow_the_trigger() {
    let cfg = small_config(Method::Pcm);
    let exp = Experiment::prepare(cfg.clone()).unwrap();
    let run = exp.run_seed(&cfg, 0, None).unwrap();
    let mut version = 0;
    let mut running_max = 0;
    for rec in &run.log {
        match rec {
            LogRecord::Check(c) => {
                assert_eq!(c.triggered, c.qualifying_count > running_max);
                running_max = running_max.max(c.qualifying_count);
                assert_eq!(c.csr_updated, c.triggered);
                if c.csr_updated {
                    version += 1;
                }
                assert_eq!(c.csr_version, Some(version));
                assert_eq!(c.pseudo_label_counts.iter().sum::<usize>(), c.qualifying_count);
            }
            LogRecord::Step(s) => assert_eq!(s.csr_version, Some(version)),
        }
    }
    assert_eq!(run.csr_versions, (0..=version).collect::<Vec<_>>());

    let frozen = exp.run_seed(&cfg.with_method(Method::PcmNoCsrUpdate), 0, None).unwrap();
    assert_eq!(frozen.csr_versions, vec![0]);
    assert_eq!(frozen.final_csr, frozen.initial_csr);
}

#[test]
fn supervised_baseline_ignores_unlabeled_data() {
    let cfg = small_config(Method::BertFt);
    let exp = Experiment::prepare(cfg.clone()).unwrap();
    let run = exp.run_seed(&cfg, 0, None).unwrap();
    assert!(run.initial_csr.is_none() && run.final_csr.is_none());
    for rec in &run.log {
        if let LogRecord::Step(s) = rec {
            assert_eq!(s.unlabeled_rows, 0);
            assert_eq!(s.csr_version, None);
        }
    }
    let acc = run.last.unwrap().accuracy;
    assert!((0.0..=100.0).contains(&acc));
}
