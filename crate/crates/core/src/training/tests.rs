use super::*;
use crate::data::dataset::{Dataset, ModalitySchema, ProblemClass, Sample, TaskSpec};
use crate::data::synth::{synth_generate, SynthConfig, SynthTask};
use crate::error::Error;
use crate::model::config::ModelConfig;
use crate::training::cv::{select_best, GridPoint, GridScore};
use approx::assert_relative_eq;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        modality_hidden: vec![6, 5],
        shared_hidden: vec![6, 5],
        n_feature: 4,
        contrastive_proj_dim: 3,
        contrastive_temperature: 0.1,
        alpha: 0.1,
        autoencoder_hidden: 6,
        autoencoder_latent: 3,
        seed: 0,
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: tiny_model_config(),
        epochs: 3,
        batch_sizes: vec![4],
        learning_rates: vec![0.01],
        ..TrainConfig::default()
    }
}

fn schemas() -> Vec<ModalitySchema> {
    vec![
        ModalitySchema {
            name: "a".into(),
            dim: 3,
        },
        ModalitySchema {
            name: "b".into(),
            dim: 4,
        },
    ]
}

fn three_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::binary("m"),
        TaskSpec::regression("r"),
        TaskSpec::cluster("c", 2),
    ]
}

/// Twelve single-sample patients; binary labels on even rows,
/// regression labels on rows not divisible by three.
fn toy_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..12)
        .map(|i| {
            let emb = |d: usize, rng: &mut ChaCha8Rng| {
                (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            };
            let b = (i % 2 == 0).then_some(((i / 2) % 2) as f64);
            let r = (i % 3 != 0 || i % 2 == 1).then_some(0.4 * i as f64 - 2.0);
            Sample {
                sample_id: format!("s{i:02}"),
                patient_id: format!("p{i:02}"),
                embeddings: vec![emb(3, &mut rng), emb(4, &mut rng)],
                labels: vec![b, r, None],
            }
        })
        .collect();
    Dataset::new(schemas(), three_tasks(), samples).unwrap()
}

/// Binary dataset with a controlled number of positives.
fn imbalanced_dataset(seed: u64, n: usize, positives: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let emb: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Sample {
                sample_id: format!("s{i:03}"),
                patient_id: format!("p{i:03}"),
                embeddings: vec![emb],
                labels: vec![Some(f64::from(i < positives))],
            }
        })
        .collect();
    Dataset::new(
        vec![ModalitySchema {
            name: "a".into(),
            dim: 4,
        }],
        vec![TaskSpec::binary("m")],
        samples,
    )
    .unwrap()
}

mod bias_rule {
    use super::*;

    #[test]
    fn frozen_log_odds() {
        assert_eq!(init_output_bias(10, 90).unwrap(), -2.1972245773362196);
        assert_eq!(init_output_bias(50, 50).unwrap(), 0.0);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(matches!(init_output_bias(0, 5), Err(Error::Domain(_))));
        assert!(matches!(init_output_bias(5, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn rare_positives_trigger_the_bias() {
        let ds = imbalanced_dataset(1, 40, 3);
        let model = initialize_model(&tiny_config(), &ds, 7).unwrap();
        let b = model.param("out.m.b").unwrap();
        assert_eq!(b.get(0, 0), (3.0f64 / 37.0).ln());
    }

    #[test]
    fn common_positives_leave_bias_at_zero() {
        let ds = imbalanced_dataset(2, 40, 8); // prevalence 0.20
        let model = initialize_model(&tiny_config(), &ds, 7).unwrap();
        assert_eq!(model.param("out.m.b").unwrap().get(0, 0), 0.0);
        // Exactly at the threshold: rule is strictly "less than".
        let ds = imbalanced_dataset(3, 40, 4);
        let model = initialize_model(&tiny_config(), &ds, 7).unwrap();
        assert_eq!(model.param("out.m.b").unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn single_class_data_skips_the_bias() {
        let ds = imbalanced_dataset(4, 20, 0);
        let model = initialize_model(&tiny_config(), &ds, 7).unwrap();
        assert_eq!(model.param("out.m.b").unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn initial_mean_prediction_tracks_prevalence() {
        let ds = imbalanced_dataset(5, 120, 8); // prevalence 1/15
        let model = initialize_model(&tiny_config(), &ds, 11).unwrap();
        let rows: Vec<usize> = (0..120).collect();
        let preds = model.predict(&ds, &rows).unwrap();
        let crate::model::net::TaskOutput::Binary(p) = &preds[0].1 else {
            panic!("expected binary");
        };
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!(
            (mean - 8.0 / 120.0).abs() < 0.04,
            "mean prediction {mean} vs prevalence {}",
            8.0 / 120.0
        );
    }
}

mod train_loop {
    use super::*;

    #[test]
    fn terms_run_in_fixed_order() {
        let ds = toy_dataset(20);
        let config = tiny_config();
        let mut model = initialize_model(&config, &ds, 3).unwrap();
        let mut adam = Adam::new(0.01).unwrap();
        let rows: Vec<usize> = (0..12).collect();
        let values = train_step(&mut model, &ds, &rows, &config, &mut adam).unwrap();
        let kinds: Vec<&TermKind> = values.iter().map(|(k, _)| k).collect();
        assert_eq!(
            kinds,
            [
                &TermKind::Contrastive,
                &TermKind::Task("m".into()),
                &TermKind::Task("r".into()),
                &TermKind::Cluster("c".into()),
            ]
        );
        assert!(values.iter().all(|(_, v)| v.is_some()));
    }

    #[test]
    fn unlabeled_batches_log_absent_terms() {
        let ds = toy_dataset(21);
        let config = tiny_config();
        let mut model = initialize_model(&config, &ds, 3).unwrap();
        let mut adam = Adam::new(0.01).unwrap();
        // Rows 1 and 5 carry no binary label.
        let values = train_step(&mut model, &ds, &[1, 5], &config, &mut adam).unwrap();
        let m = values
            .iter()
            .find(|(k, _)| matches!(k, TermKind::Task(n) if n == "m"))
            .unwrap();
        assert!(m.1.is_none());
        let r = values
            .iter()
            .find(|(k, _)| matches!(k, TermKind::Task(n) if n == "r"))
            .unwrap();
        assert!(r.1.is_some());
    }

    #[test]
    fn log_covers_every_epoch_batch_term() {
        let ds = toy_dataset(22);
        let config = tiny_config();
        let tm = train(&config, &ds, 5, 0.01, 9).unwrap();
        // 12 samples in batches of 5 -> 3 batches; 3 epochs; 4 terms.
        assert_eq!(tm.log.len(), 3 * 3 * 4);
        for epoch in 0..3 {
            for batch in 0..3 {
                let n = tm
                    .log
                    .iter()
                    .filter(|e| e.epoch == epoch && e.batch == batch)
                    .count();
                assert_eq!(n, 4);
            }
        }
        assert_eq!(tm.batch_size, 5);
        assert_eq!(tm.learning_rate, 0.01);
    }

    #[test]
    fn determinism_same_seed() {
        let ds = toy_dataset(23);
        let config = tiny_config();
        let a = train(&config, &ds, 4, 0.01, 5).unwrap();
        let b = train(&config, &ds, 4, 0.01, 5).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        let c = train(&config, &ds, 4, 0.01, 6).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn zero_weight_excludes_term_and_freezes_its_output_layer() {
        let ds = toy_dataset(24);
        let mut config = tiny_config();
        config.task_weights.insert("r".into(), 0.0);
        let tm = train(&config, &ds, 4, 0.01, 13).unwrap();
        assert!(tm
            .log
            .iter()
            .all(|e| !matches!(&e.term, TermKind::Task(n) if n == "r")));
        // 12 samples / 4 -> 3 batches; 3 epochs; 3 remaining terms.
        assert_eq!(tm.log.len(), 3 * 3 * 3);
        let init = initialize_model(&config, &ds, 13).unwrap();
        assert_eq!(
            tm.model.param("out.r.w").unwrap(),
            init.param("out.r.w").unwrap()
        );
        assert_eq!(
            tm.model.param("out.r.b").unwrap(),
            init.param("out.r.b").unwrap()
        );
        // The trunk did train.
        assert_ne!(
            tm.model.param("shared.l0.w").unwrap(),
            init.param("shared.l0.w").unwrap()
        );
    }

    #[test]
    fn untouched_parameters_never_move() {
        let ds = toy_dataset(25);
        let mut config = tiny_config();
        // Only the binary task is active: the autoencoder and the
        // regression output layer sit outside every executed graph.
        config.contrastive_weight = 0.0;
        config.task_weights.insert("r".into(), 0.0);
        config.task_weights.insert("c".into(), 0.0);
        let tm = train(&config, &ds, 4, 0.01, 17).unwrap();
        let init = initialize_model(&config, &ds, 17).unwrap();
        for name in ["ae.enc.l0.w", "ae.dec.l1.w", "out.r.w", "contrast.a.w"] {
            assert_eq!(tm.model.param(name).unwrap(), init.param(name).unwrap());
        }
        assert_ne!(
            tm.model.param("out.m.w").unwrap(),
            init.param("out.m.w").unwrap()
        );
    }

    #[test]
    fn fixed_batch_descends_on_a_single_task() {
        let cfg = SynthConfig {
            n_patients: 24,
            samples_per_patient: 1,
            modalities: vec![ModalitySchema {
                name: "x".into(),
                dim: 6,
            }],
            tasks: vec![SynthTask::binary("m", 0.5)],
            latent_dim: 4,
            task_correlation: 0.0,
            noise_scale: 0.1,
            seed: 31,
        };
        let ds = synth_generate(&cfg).unwrap();
        let config = TrainConfig {
            model: tiny_model_config(),
            epochs: 50,
            ..TrainConfig::default()
        };
        // Batch covers the whole set, so every epoch is one step on
        // the same data.
        let tm = train(&config, &ds, 24, 1e-4, 3).unwrap();
        let losses: Vec<f64> = tm.log.iter().map(|e| e.value.unwrap()).collect();
        assert_eq!(losses.len(), 50);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss rose from {} to {}", w[0], w[1]);
        }
        assert!(losses[49] < losses[0]);
    }

    #[test]
    fn separable_task_reaches_high_training_auroc() {
        let cfg = SynthConfig {
            n_patients: 80,
            samples_per_patient: 1,
            modalities: vec![ModalitySchema {
                name: "x".into(),
                dim: 8,
            }],
            tasks: vec![SynthTask::binary("m", 0.5)],
            latent_dim: 4,
            task_correlation: 0.0,
            noise_scale: 0.05,
            seed: 32,
        };
        let ds = synth_generate(&cfg).unwrap();
        let config = TrainConfig {
            model: tiny_model_config(),
            epochs: 15,
            ..TrainConfig::default()
        };
        let tm = train(&config, &ds, 16, 0.005, 4).unwrap();
        let rows: Vec<usize> = (0..80).collect();
        let reports = crate::evaluation::score_model(&tm.model, &ds, &rows, 0).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].raw > 0.95, "training auroc {}", reports[0].raw);
    }

    #[test]
    fn summed_schedule_matches_on_the_first_term_then_diverges() {
        let ds = toy_dataset(26);
        let mut seq_config = tiny_config();
        seq_config.epochs = 2;
        let mut sum_config = seq_config.clone();
        sum_config.schedule = LossSchedule::Summed;
        let seq = train(&seq_config, &ds, 4, 0.01, 19).unwrap();
        let sum = train(&sum_config, &ds, 4, 0.01, 19).unwrap();
        // Identical init and first batch: the first logged value (the
        // contrastive term, measured before any step) must agree.
        assert_eq!(seq.log[0].term, TermKind::Contrastive);
        assert_eq!(sum.log[0].term, TermKind::Contrastive);
        assert_relative_eq!(
            seq.log[0].value.unwrap(),
            sum.log[0].value.unwrap(),
            max_relative = 1e-12
        );
        assert_eq!(seq.log.len(), sum.log.len());
        assert_ne!(seq.model, sum.model);
    }

    #[test]
    fn huge_clip_is_a_no_op_tiny_clip_changes_training() {
        let ds = toy_dataset(27);
        let base = tiny_config();
        // Near-zero projection rows make the contrastive normalizer's
        // backward factor spike into the 1e12 range, so "never fires"
        // needs real headroom.
        let mut huge = base.clone();
        huge.grad_clip = Some(1e15);
        let mut tiny = base.clone();
        tiny.grad_clip = Some(1e-6);
        let plain = train(&base, &ds, 4, 0.01, 23).unwrap();
        let clipped_huge = train(&huge, &ds, 4, 0.01, 23).unwrap();
        let clipped_tiny = train(&tiny, &ds, 4, 0.01, 23).unwrap();
        assert_eq!(plain.model, clipped_huge.model);
        assert_ne!(plain.model, clipped_tiny.model);
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let ds = toy_dataset(28);
        let mut config = tiny_config();
        config.epochs = 0;
        assert!(matches!(
            train(&config, &ds, 4, 0.01, 1),
            Err(Error::Domain(_))
        ));
        let config = tiny_config();
        assert!(matches!(
            train(&config, &ds, 0, 0.01, 1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            train(&config, &ds, 4, 0.0, 1),
            Err(Error::Domain(_))
        ));
        let empty = Dataset::new(schemas(), three_tasks(), vec![]).unwrap();
        assert!(matches!(
            train(&config, &empty, 4, 0.01, 1),
            Err(Error::Domain(_))
        ));
        let mut config = tiny_config();
        config.contrastive_weight = 0.0;
        for t in ["m", "r", "c"] {
            config.task_weights.insert(t.into(), 0.0);
        }
        assert!(matches!(
            train(&config, &ds, 4, 0.01, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn log_csv_layout() {
        let ds = toy_dataset(29);
        let mut config = tiny_config();
        config.epochs = 1;
        let tm = train(&config, &ds, 12, 0.01, 2).unwrap();
        let csv = tm.log_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,batch,term,task,value");
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines[1].starts_with("0,0,contrastive,,"));
        assert!(lines[2].starts_with("0,0,task,m,"));
        assert!(lines[4].starts_with("0,0,cluster,c,"));
    }
}

mod cross_validation {
    use super::*;

    fn cv_dataset(seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..20)
            .map(|i| {
                let emb = |d: usize, rng: &mut ChaCha8Rng| {
                    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
                };
                Sample {
                    sample_id: format!("s{i:02}"),
                    patient_id: format!("p{i:02}"),
                    embeddings: vec![emb(3, &mut rng), emb(4, &mut rng)],
                    labels: vec![Some((i % 2) as f64), Some(0.3 * i as f64), None],
                }
            })
            .collect();
        Dataset::new(schemas(), three_tasks(), samples).unwrap()
    }

    fn cv_config() -> TrainConfig {
        TrainConfig {
            model: tiny_model_config(),
            epochs: 2,
            batch_sizes: vec![8, 16],
            learning_rates: vec![0.005, 0.01],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn full_grid_scored_and_deterministic() {
        let ds = cv_dataset(40);
        let config = cv_config();
        let report = cross_validate(&config, &ds).unwrap();
        assert_eq!(report.n_folds, 5);
        assert_eq!(report.table.len(), 4);
        for row in &report.table {
            assert_eq!(row.fold_scores.len(), 5);
            assert!(row.mean_normalized.is_finite());
            assert!((0.0..=1.0).contains(&row.mean_normalized));
        }
        assert!(report
            .table
            .iter()
            .any(|r| r.point == report.best));
        let again = cross_validate(&config, &ds).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn single_point_grid_returns_it() {
        let ds = cv_dataset(41);
        let mut config = cv_config();
        config.batch_sizes = vec![8];
        config.learning_rates = vec![0.01];
        let report = cross_validate(&config, &ds).unwrap();
        assert_eq!(report.table.len(), 1);
        assert_eq!(
            report.best,
            GridPoint {
                batch_size: 8,
                learning_rate: 0.01
            }
        );
    }

    #[test]
    fn argmax_and_tie_break() {
        let mk = |bs: usize, lr: f64, score: f64| GridScore {
            point: GridPoint {
                batch_size: bs,
                learning_rate: lr,
            },
            fold_scores: vec![Some(score)],
            mean_normalized: score,
        };
        // Strict dominance wins wherever it sits.
        let best = select_best(&[mk(512, 0.001, 0.6), mk(256, 0.001, 0.9)]).unwrap();
        assert_eq!(best.batch_size, 256);
        // Ties fall to the lexicographically smaller pair.
        let best = select_best(&[
            mk(512, 0.0005, 0.7),
            mk(256, 0.001, 0.7),
            mk(256, 0.0005, 0.7),
        ])
        .unwrap();
        assert_eq!(
            best,
            GridPoint {
                batch_size: 256,
                learning_rate: 0.0005
            }
        );
        // Non-finite rows are ignored.
        let best = select_best(&[mk(256, 0.001, f64::NAN), mk(512, 0.001, 0.2)]).unwrap();
        assert_eq!(best.batch_size, 512);
        assert!(select_best(&[mk(256, 0.001, f64::NAN)]).is_err());
    }

    #[test]
    fn final_model_uses_the_winner() {
        let ds = cv_dataset(42);
        let mut config = cv_config();
        config.batch_sizes = vec![8];
        let (report, tm) = select_and_train(&config, &ds).unwrap();
        assert_eq!(tm.batch_size, report.best.batch_size);
        assert_eq!(tm.learning_rate, report.best.learning_rate);
        assert_eq!(tm.epochs, 2);
    }

    #[test]
    fn report_csv_layout() {
        let ds = cv_dataset(43);
        let mut config = cv_config();
        config.batch_sizes = vec![8];
        config.learning_rates = vec![0.01];
        let report = cross_validate(&config, &ds).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "batch_size,learning_rate,mean_normalized,selected");
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("8,0.01,"));
        assert!(lines[1].ends_with(",true"));
    }
}

