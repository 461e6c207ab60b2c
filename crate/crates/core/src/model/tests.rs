use super::*;
use crate::data::dataset::{Dataset, ModalitySchema, ProblemClass, Sample, TaskSpec};
use crate::error::Error;
use crate::numerics::{
    binary_cross_entropy, mean_absolute_error, reconstruction_mse, Matrix,
};
use approx::assert_relative_eq;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        modality_hidden: vec![2],
        shared_hidden: vec![2],
        n_feature: 2,
        contrastive_proj_dim: 2,
        contrastive_temperature: 0.1,
        alpha: 0.1,
        autoencoder_hidden: 4,
        autoencoder_latent: 2,
        seed,
    }
}

fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        modality_hidden: vec![6, 5],
        shared_hidden: vec![7, 6],
        n_feature: 5,
        contrastive_proj_dim: 4,
        contrastive_temperature: 0.1,
        alpha: 0.3,
        autoencoder_hidden: 8,
        autoencoder_latent: 3,
        seed,
    }
}

fn toy_schemas() -> Vec<ModalitySchema> {
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

fn toy_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::binary("m"),
        TaskSpec::regression("r"),
        TaskSpec::cluster("c", 2),
    ]
}

/// Six samples over two modalities; binary labels on rows 0,2,3,5 and
/// regression labels on rows 1,2,4 so the two masks differ.
fn toy_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..6)
        .map(|i| {
            let emb = |d: usize, rng: &mut ChaCha8Rng| {
                (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            };
            let binary = if [0, 2, 3, 5].contains(&i) {
                Some((i % 2) as f64)
            } else {
                None
            };
            let regression = if [1, 2, 4].contains(&i) {
                Some(0.7 * i as f64 - 1.0)
            } else {
                None
            };
            Sample {
                sample_id: format!("s{i}"),
                patient_id: format!("p{i}"),
                embeddings: vec![emb(3, &mut rng), emb(4, &mut rng)],
                labels: vec![binary, regression, None],
            }
        })
        .collect();
    Dataset::new(toy_schemas(), toy_tasks(), samples).unwrap()
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn rand_attention(rng: &mut ChaCha8Rng, n_tasks: usize, f: usize, alpha: f64) -> AttentionParams {
    AttentionParams {
        w_t: rand_matrix(rng, n_tasks, f),
        w_q: rand_matrix(rng, f, f),
        w_k: rand_matrix(rng, f, f),
        w_v: rand_matrix(rng, f, f),
        alpha,
    }
}

mod construction {
    use super::*;

    #[test]
    fn parameter_table_matches_architecture() {
        let model = Model::new(toy_config(1), toy_schemas(), toy_tasks()).unwrap();
        let shape = |name: &str| {
            let m = model.param(name).unwrap();
            (m.rows(), m.cols())
        };
        assert_eq!(shape("modality.a.l0.w"), (3, 6));
        assert_eq!(shape("modality.a.l1.w"), (6, 5));
        assert_eq!(shape("modality.b.l0.w"), (4, 6));
        assert_eq!(shape("shared.l0.w"), (10, 7));
        assert_eq!(shape("shared.l1.w"), (7, 6));
        assert_eq!(shape("contrast.a.w"), (5, 4));
        assert_eq!(shape("head.m.w"), (6, 5));
        assert_eq!(shape("head.r.w"), (6, 5));
        assert_eq!(shape("out.m.w"), (5, 1));
        assert_eq!(shape("out.r.w"), (5, 1));
        assert_eq!(shape("attn.w_t"), (2, 5));
        assert_eq!(shape("attn.w_q"), (5, 5));
        assert_eq!(shape("ae.enc.l0.w"), (7, 8));
        assert_eq!(shape("ae.enc.l1.w"), (8, 3));
        assert_eq!(shape("ae.dec.l1.w"), (8, 7));
        assert_eq!(shape("head.m.b"), (1, 5));
    }

    #[test]
    fn multiclass_output_width_is_class_count() {
        let tasks = vec![TaskSpec::binary("m"), TaskSpec::multiclass("stage", 4)];
        let model = Model::new(toy_config(1), toy_schemas(), tasks).unwrap();
        let m = model.param("out.stage.w").unwrap();
        assert_eq!((m.rows(), m.cols()), (5, 4));
    }

    #[test]
    fn biases_start_at_zero_weights_do_not() {
        let model = Model::new(toy_config(3), toy_schemas(), toy_tasks()).unwrap();
        let b = model.param("head.m.b").unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        let w = model.param("head.m.w").unwrap();
        assert!(w.data().iter().any(|&v| v != 0.0));
        let limit = (6.0 / (6 + 5) as f64).sqrt();
        assert!(w.data().iter().all(|&v| v.abs() < limit));
    }

    #[test]
    fn same_seed_reproduces_different_seed_diverges() {
        let a = Model::new(toy_config(5), toy_schemas(), toy_tasks()).unwrap();
        let b = Model::new(toy_config(5), toy_schemas(), toy_tasks()).unwrap();
        let c = Model::new(toy_config(6), toy_schemas(), toy_tasks()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.param("head.m.w").unwrap(), c.param("head.m.w").unwrap());
    }

    #[test]
    fn single_modality_has_no_contrastive_projection() {
        let schemas = vec![ModalitySchema {
            name: "a".into(),
            dim: 3,
        }];
        let model = Model::new(toy_config(1), schemas, vec![TaskSpec::binary("m")]).unwrap();
        assert!(model.params().keys().all(|k| !k.starts_with("contrast.")));
    }

    #[test]
    fn cluster_free_model_rejects_autoencoder_calls() {
        let model =
            Model::new(toy_config(1), toy_schemas(), vec![TaskSpec::binary("m")]).unwrap();
        assert!(model.params().keys().all(|k| !k.starts_with("ae.")));
        let x = Matrix::zeros(2, 7);
        assert!(matches!(
            model.autoencoder_forward(&x),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unsupervised_model_has_no_attention_stack() {
        let model =
            Model::new(toy_config(1), toy_schemas(), vec![TaskSpec::cluster("c", 3)]).unwrap();
        assert!(model.params().keys().all(|k| !k.starts_with("attn.")));
        let z = Matrix::zeros(2, 6);
        assert!(matches!(
            model.task_heads_forward(&z),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn set_param_rejects_shape_change() {
        let mut model = Model::new(toy_config(1), toy_schemas(), toy_tasks()).unwrap();
        let err = model.set_param("head.m.w", Matrix::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}

mod plain_path {
    use super::*;

    /// All-integer weights so the whole chain is hand-checkable:
    /// relu(x I) = [1,0] -> shared [[2,1],[1,3]] -> [2,1] ->
    /// head +[0.5,-10] -> relu [2.5,0] -> single-task attention passes
    /// V through -> out sums + 0.3 -> 2.8 pre-link.
    fn hand_model(task: TaskSpec) -> (Model, Dataset) {
        let schemas = vec![ModalitySchema {
            name: "a".into(),
            dim: 2,
        }];
        let labels = match task.class {
            ProblemClass::Binary => vec![Some(1.0)],
            ProblemClass::Regression => vec![Some(0.0)],
            _ => vec![Some(2.0)],
        };
        let ds = Dataset::new(
            schemas.clone(),
            vec![task.clone()],
            vec![Sample {
                sample_id: "s0".into(),
                patient_id: "p0".into(),
                embeddings: vec![vec![1.0, -2.0]],
                labels,
            }],
        )
        .unwrap();
        let mut model = Model::new(tiny_config(0), schemas, vec![task.clone()]).unwrap();
        let name = &task.name;
        model
            .set_param("modality.a.l0.w", Matrix::identity(2))
            .unwrap();
        model
            .set_param(
                "shared.l0.w",
                Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap(),
            )
            .unwrap();
        model
            .set_param(&format!("head.{name}.w"), Matrix::identity(2))
            .unwrap();
        model
            .set_param(
                &format!("head.{name}.b"),
                Matrix::from_vec(1, 2, vec![0.5, -10.0]).unwrap(),
            )
            .unwrap();
        model.set_param("attn.w_v", Matrix::identity(2)).unwrap();
        let out_cols = model.param(&format!("out.{name}.w")).unwrap().cols();
        model
            .set_param(
                &format!("out.{name}.w"),
                Matrix::from_vec(2, out_cols, vec![1.0; 2 * out_cols]).unwrap(),
            )
            .unwrap();
        model
            .set_param(
                &format!("out.{name}.b"),
                Matrix::from_vec(1, out_cols, vec![0.3; out_cols]).unwrap(),
            )
            .unwrap();
        (model, ds)
    }

    #[test]
    fn regression_chain_reaches_hand_value() {
        let (model, ds) = hand_model(TaskSpec::regression("t"));
        let preds = model.predict(&ds, &[0]).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].0, "t");
        let TaskOutput::Regression(y) = &preds[0].1 else {
            panic!("expected regression output");
        };
        assert_relative_eq!(y[0], 2.8, max_relative = 1e-14);
    }

    #[test]
    fn binary_chain_applies_logistic_link() {
        let (model, ds) = hand_model(TaskSpec::binary("t"));
        let preds = model.predict(&ds, &[0]).unwrap();
        let TaskOutput::Binary(p) = &preds[0].1 else {
            panic!("expected binary output");
        };
        assert_relative_eq!(p[0], 1.0 / (1.0 + (-2.8f64).exp()), max_relative = 1e-14);
        assert!(p[0] > 0.9 && p[0] < 1.0);
    }

    #[test]
    fn multiclass_chain_emits_log_probabilities() {
        let (model, ds) = hand_model(TaskSpec::multiclass("t", 3));
        let preds = model.predict(&ds, &[0]).unwrap();
        let TaskOutput::Multiclass(lp) = &preds[0].1 else {
            panic!("expected multiclass output");
        };
        // Equal logits (2.8 each): uniform distribution over 3 classes.
        let total: f64 = lp.row(0).iter().map(|v| v.exp()).sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
        for &v in lp.row(0) {
            assert_relative_eq!(v, (1.0f64 / 3.0).ln(), max_relative = 1e-12);
        }
    }

    #[test]
    fn modality_forward_checks_input_width() {
        let model = Model::new(toy_config(1), toy_schemas(), toy_tasks()).unwrap();
        let x = Matrix::zeros(2, 5);
        assert!(matches!(
            model.modality_forward(0, &x),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(model.modality_forward(9, &x), Err(Error::Index(_))));
    }

    #[test]
    fn task_output_rejects_cluster_task() {
        let model = Model::new(toy_config(1), toy_schemas(), toy_tasks()).unwrap();
        let o = Matrix::zeros(2, 5);
        let err = model.task_output(2, &o).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn zero_autoencoder_reconstructs_zero_with_zero_loss() {
        let mut model = Model::new(toy_config(1), toy_schemas(), toy_tasks()).unwrap();
        for name in [
            "ae.enc.l0.w",
            "ae.enc.l1.w",
            "ae.dec.l0.w",
            "ae.dec.l1.w",
        ] {
            let shape = model.param(name).unwrap().shape();
            model
                .set_param(name, Matrix::zeros(shape.0, shape.1))
                .unwrap();
        }
        let x = Matrix::zeros(3, 7);
        let (latent, recon) = model.autoencoder_forward(&x).unwrap();
        assert_eq!(latent.shape(), (3, 3));
        assert!(recon.data().iter().all(|&v| v == 0.0));
        assert_eq!(reconstruction_mse(&x, &recon).unwrap(), 0.0);
    }

    #[test]
    fn autoencoder_loss_matches_direct_mse() {
        let model = Model::new(toy_config(9), toy_schemas(), toy_tasks()).unwrap();
        let ds = toy_dataset(21);
        let x = ds.concat_batch(&[0, 1, 2]).unwrap();
        let (_, recon) = model.autoencoder_forward(&x).unwrap();
        let mut acc = 0.0;
        for (a, b) in x.data().iter().zip(recon.data()) {
            acc += (a - b) * (a - b);
        }
        let direct = acc / x.data().len() as f64;
        assert_relative_eq!(
            reconstruction_mse(&x, &recon).unwrap(),
            direct,
            max_relative = 1e-12
        );
    }

    #[test]
    fn per_element_reslices_heads() {
        let h0 = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h1 = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let elements = per_element(&[h0, h1]).unwrap();
        assert_eq!(elements.len(), 2);
        assert_eq!(elements[0].row(0), &[1.0, 2.0]);
        assert_eq!(elements[0].row(1), &[5.0, 6.0]);
        assert_eq!(elements[1].row(0), &[3.0, 4.0]);
        assert_eq!(elements[1].row(1), &[7.0, 8.0]);
    }
}

mod attention_invariants {
    use super::*;

    #[test]
    fn weight_rows_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = rand_attention(&mut rng, 3, 4, 0.7);
        let x: Vec<Matrix> = (0..5).map(|_| rand_matrix(&mut rng, 3, 4)).collect();
        let out = cross_task_attention(&x, &params).unwrap();
        assert_eq!(out.weights.len(), 5);
        for w in &out.weights {
            for r in 0..w.rows() {
                let sum: f64 = w.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-10, "row sum {sum}");
                assert!(w.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn alpha_zero_makes_weights_content_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let params = rand_attention(&mut rng, 2, 3, 0.0);
        let x1: Vec<Matrix> = (0..3).map(|_| rand_matrix(&mut rng, 2, 3)).collect();
        let x2: Vec<Matrix> = (0..3).map(|_| rand_matrix(&mut rng, 2, 3)).collect();
        let o1 = cross_task_attention(&x1, &params).unwrap();
        let o2 = cross_task_attention(&x2, &params).unwrap();
        for (a, b) in o1.weights.iter().zip(&o2.weights) {
            assert_eq!(a.data(), b.data());
        }
        assert_ne!(o1.outputs[0].data(), o2.outputs[0].data());
    }

    #[test]
    fn single_task_routes_value_through_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let params = rand_attention(&mut rng, 1, 4, 0.8);
        let x: Vec<Matrix> = (0..4).map(|_| rand_matrix(&mut rng, 1, 4)).collect();
        let out = cross_task_attention(&x, &params).unwrap();
        for (xi, (w, o)) in x.iter().zip(out.weights.iter().zip(&out.outputs)) {
            assert_eq!(w.data(), &[1.0]);
            let v = xi.matmul(&params.w_v).unwrap();
            assert_eq!(o.data(), v.data());
        }
    }

    #[test]
    fn queries_do_not_depend_on_the_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let params = rand_attention(&mut rng, 3, 4, 0.5);
        let x1: Vec<Matrix> = (0..2).map(|_| rand_matrix(&mut rng, 3, 4)).collect();
        let x2: Vec<Matrix> = (0..6).map(|_| rand_matrix(&mut rng, 3, 4)).collect();
        let o1 = cross_task_attention(&x1, &params).unwrap();
        let o2 = cross_task_attention(&x2, &params).unwrap();
        assert_eq!(o1.queries.data(), o2.queries.data());
    }

    #[test]
    fn zero_content_falls_back_to_identity_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let params = rand_attention(&mut rng, 2, 3, 0.9);
        let x = vec![Matrix::zeros(2, 3)];
        let out = cross_task_attention(&x, &params).unwrap();
        let w = &out.weights[0];
        // Scores vanish, so each row is softmax of a one-hot vector.
        assert_relative_eq!(w.get(0, 0), 0.7310585786300049, max_relative = 1e-15);
        assert_relative_eq!(w.get(0, 1), 0.2689414213699951, max_relative = 1e-15);
        assert_relative_eq!(w.get(1, 1), 0.7310585786300049, max_relative = 1e-15);
    }

    #[test]
    fn mismatched_element_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let params = rand_attention(&mut rng, 3, 4, 0.5);
        let x = vec![rand_matrix(&mut rng, 2, 4)];
        assert!(matches!(
            cross_task_attention(&x, &params),
            Err(Error::Dimension(_))
        ));
    }
}

mod graph_consistency {
    use super::*;

    #[test]
    fn contrastive_term_matches_plain_loss() {
        let model = Model::new(toy_config(11), toy_schemas(), toy_tasks()).unwrap();
        let ds = toy_dataset(40);
        let rows: Vec<usize> = (0..6).collect();
        let term = model.contrastive_term(&ds, &rows).unwrap().unwrap();
        let mut projs = Vec::new();
        for m in 0..2 {
            let x = ds.modality_batch(m, &rows).unwrap();
            let h = model.modality_forward(m, &x).unwrap();
            projs.push(model.project_contrastive(m, &h).unwrap());
        }
        let plain = contrastive_loss(&projs, 0.1).unwrap();
        assert_relative_eq!(term.graph.loss_value().unwrap(), plain, max_relative = 1e-9);
    }

    #[test]
    fn binary_term_matches_plain_pipeline() {
        let model = Model::new(toy_config(12), toy_schemas(), toy_tasks()).unwrap();
        let ds = toy_dataset(41);
        let rows: Vec<usize> = (0..6).collect();
        let term = model.task_term(&ds, &rows, 0).unwrap().unwrap();
        let labeled = vec![0, 2, 3, 5];
        let preds = model.predict(&ds, &labeled).unwrap();
        let TaskOutput::Binary(p) = &preds[0].1 else {
            panic!("expected binary");
        };
        let targets: Vec<f64> = labeled.iter().map(|&r| ds.label(r, 0).unwrap()).collect();
        let plain = binary_cross_entropy(p, &targets).unwrap();
        assert_relative_eq!(term.graph.loss_value().unwrap(), plain, max_relative = 1e-9);
    }

    #[test]
    fn regression_term_matches_plain_pipeline() {
        let model = Model::new(toy_config(13), toy_schemas(), toy_tasks()).unwrap();
        let ds = toy_dataset(42);
        let rows: Vec<usize> = (0..6).collect();
        let term = model.task_term(&ds, &rows, 1).unwrap().unwrap();
        let labeled = vec![1, 2, 4];
        let preds = model.predict(&ds, &labeled).unwrap();
        let TaskOutput::Regression(y) = &preds[1].1 else {
            panic!("expected regression");
        };
        let targets: Vec<f64> = labeled.iter().map(|&r| ds.label(r, 1).unwrap()).collect();
        let plain = mean_absolute_error(y, &targets).unwrap();
        assert_relative_eq!(term.graph.loss_value().unwrap(), plain, max_relative = 1e-9);
    }

    #[test]
    fn cluster_term_matches_plain_autoencoder() {
        let model = Model::new(toy_config(14), toy_schemas(), toy_tasks()).unwrap();
        let ds = toy_dataset(43);
        let rows: Vec<usize> = (0..6).collect();
        let term = model.cluster_term(&ds, &rows).unwrap().unwrap();
        let x = ds.concat_batch(&rows).unwrap();
        let (_, recon) = model.autoencoder_forward(&x).unwrap();
        let plain = reconstruction_mse(&x, &recon).unwrap();
        assert_relative_eq!(term.graph.loss_value().unwrap(), plain, max_relative = 1e-9);
    }

    #[test]
    fn summed_graph_is_the_weighted_sum_of_terms() {
        let model = Model::new(toy_config(15), toy_schemas(), toy_tasks()).unwrap();
        let ds = toy_dataset(44);
        let rows: Vec<usize> = (0..6).collect();
        let l_con = model
            .contrastive_term(&ds, &rows)
            .unwrap()
            .unwrap()
            .graph
            .loss_value()
            .unwrap();
        let l_m = model
            .task_term(&ds, &rows, 0)
            .unwrap()
            .unwrap()
            .graph
            .loss_value()
            .unwrap();
        let l_r = model
            .task_term(&ds, &rows, 1)
            .unwrap()
            .unwrap()
            .graph
            .loss_value()
            .unwrap();
        let l_c = model
            .cluster_term(&ds, &rows)
            .unwrap()
            .unwrap()
            .graph
            .loss_value()
            .unwrap();
        let summed = model
            .summed_graph(&ds, &rows, 0.7, &[1.3, 0.9, 0.5])
            .unwrap()
            .unwrap();
        let expected = 0.7 * l_con + 1.3 * l_m + 0.9 * l_r + 0.5 * l_c;
        assert_relative_eq!(
            summed.graph.loss_value().unwrap(),
            expected,
            max_relative = 1e-9
        );
        let labels: Vec<&str> = summed.terms.iter().map(|(l, _, _)| l.as_str()).collect();
        assert_eq!(labels, ["contrastive", "m", "r", "c"]);
        let raw_m = summed.graph.value(summed.terms[1].1).get(0, 0);
        assert_relative_eq!(raw_m, l_m, max_relative = 1e-9);
    }

    #[test]
    fn zero_weights_drop_terms_from_the_sum() {
        let model = Model::new(toy_config(16), toy_schemas(), toy_tasks()).unwrap();
        let ds = toy_dataset(45);
        let rows: Vec<usize> = (0..6).collect();
        let l_r = model
            .task_term(&ds, &rows, 1)
            .unwrap()
            .unwrap()
            .graph
            .loss_value()
            .unwrap();
        let summed = model
            .summed_graph(&ds, &rows, 0.0, &[0.0, 0.9, 0.0])
            .unwrap()
            .unwrap();
        assert_relative_eq!(
            summed.graph.loss_value().unwrap(),
            0.9 * l_r,
            max_relative = 1e-10
        );
        assert_eq!(summed.terms.len(), 1);
        // A batch with no labels for the only weighted task has no terms.
        assert!(model
            .summed_graph(&ds, &[0, 3], 0.0, &[0.0, 0.9, 0.0])
            .unwrap()
            .is_none());
    }

    #[test]
    fn terms_absent_when_inputs_do_not_support_them() {
        let model = Model::new(toy_config(17), toy_schemas(), toy_tasks()).unwrap();
        let ds = toy_dataset(46);
        // No binary labels among these rows.
        assert!(model.task_term(&ds, &[1, 4], 0).unwrap().is_none());
        // A single row has no contrastive negatives.
        assert!(model.contrastive_term(&ds, &[2]).unwrap().is_none());
        // A model without a cluster task has no reconstruction term.
        let plain = Model::new(
            toy_config(17),
            toy_schemas(),
            vec![TaskSpec::binary("m"), TaskSpec::regression("r")],
        )
        .unwrap();
        assert!(plain.cluster_term(&ds, &[0, 1]).unwrap().is_none());
    }

    #[test]
    fn term_gradients_pass_finite_difference_check() {
        let model = Model::new(toy_config(18), toy_schemas(), toy_tasks()).unwrap();
        let ds = toy_dataset(47);
        let rows: Vec<usize> = (0..4).collect();
        let mut term = model.task_term(&ds, &rows, 0).unwrap().unwrap();
        let report = crate::numerics::gradient_check(&mut term.graph, 1e-5).unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "max err {}",
            report.max_relative_error
        );
    }
}

mod clustering {
    use super::*;

    fn blobs(seed: u64, centers: &[(f64, f64)], per: usize, spread: f64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..per {
                data.push(cx + spread * rng.sample::<f64, _>(StandardNormal));
                data.push(cy + spread * rng.sample::<f64, _>(StandardNormal));
                labels.push(c);
            }
        }
        (
            Matrix::from_vec(centers.len() * per, 2, data).unwrap(),
            labels,
        )
    }

    fn partitions_match(a: &[usize], b: &[usize]) -> bool {
        let mut map = std::collections::HashMap::new();
        for (&x, &y) in a.iter().zip(b) {
            match map.entry(x) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(y);
                }
                std::collections::hash_map::Entry::Occupied(e) => {
                    if *e.get() != y {
                        return false;
                    }
                }
            }
        }
        let assigned: std::collections::HashSet<_> = map.values().collect();
        assigned.len() == map.len()
    }

    #[test]
    fn far_blobs_are_recovered_exactly() {
        let (data, truth) = blobs(7, &[(0.0, 0.0), (50.0, 50.0)], 20, 1.0);
        let result = kmeans(&data, 2, 7, DEFAULT_RESTARTS).unwrap();
        assert!(partitions_match(&result.assignments, &truth));
    }

    #[test]
    fn points_on_k_sites_reach_zero_inertia() {
        let sites = [(0.0, 0.0), (5.0, 1.0), (-3.0, 4.0)];
        let mut data = Vec::new();
        for &(x, y) in sites.iter().cycle().take(12) {
            data.push(x);
            data.push(y);
        }
        let m = Matrix::from_vec(12, 2, data).unwrap();
        let result = kmeans(&m, 3, 1, DEFAULT_RESTARTS).unwrap();
        assert_eq!(result.inertia, 0.0);
    }

    #[test]
    fn same_seed_is_deterministic() {
        let (data, _) = blobs(9, &[(0.0, 0.0), (3.0, 3.0), (8.0, -2.0)], 15, 0.8);
        let a = kmeans(&data, 3, 42, DEFAULT_RESTARTS).unwrap();
        let b = kmeans(&data, 3, 42, DEFAULT_RESTARTS).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.inertia, b.inertia);
    }

    #[test]
    fn inertia_never_increases_across_iterations() {
        let (data, _) = blobs(10, &[(0.0, 0.0), (2.0, 2.0)], 25, 1.5);
        let result = kmeans(&data, 4, 3, 1).unwrap();
        for pair in result.inertia_trace.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "inertia rose from {} to {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let (data, _) = blobs(11, &[(0.0, 0.0)], 5, 1.0);
        assert!(matches!(kmeans(&data, 1, 0, 1), Err(Error::Domain(_))));
        assert!(matches!(kmeans(&data, 5, 0, 1), Err(Error::Domain(_))));
        assert!(matches!(kmeans(&data, 2, 0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn more_clusters_than_distinct_points_still_terminates() {
        let mut data = Vec::new();
        for &(x, y) in &[(0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (10.0, 10.0), (10.0, 10.0)] {
            data.push(x);
            data.push(y);
        }
        let m = Matrix::from_vec(5, 2, data).unwrap();
        let result = kmeans(&m, 3, 5, DEFAULT_RESTARTS).unwrap();
        assert_eq!(result.inertia, 0.0);
        assert!(result.assignments.iter().all(|&a| a < 3));
    }
}

mod contrastive {
    use super::*;

    #[test]
    fn identity_projections_hit_frozen_value() {
        let a = Matrix::identity(2);
        let b = Matrix::identity(2);
        let loss = contrastive_loss(&[a, b], 1.0).unwrap();
        assert_relative_eq!(loss, 0.31326168751822286, max_relative = 1e-14);
    }

    #[test]
    fn single_modality_contributes_nothing() {
        let a = Matrix::identity(3);
        assert_eq!(contrastive_loss(&[a], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn aligned_views_beat_shuffled_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let a = rand_matrix(&mut rng, 6, 4);
        let aligned = contrastive_loss(&[a.clone(), a.clone()], 0.1).unwrap();
        let mut shuffled_rows = Vec::new();
        for r in (0..6).rev() {
            shuffled_rows.extend_from_slice(a.row(r));
        }
        let b = Matrix::from_vec(6, 4, shuffled_rows).unwrap();
        let shuffled = contrastive_loss(&[a, b], 0.1).unwrap();
        assert!(aligned < shuffled);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let a = Matrix::identity(2);
        assert!(matches!(
            contrastive_loss(&[a.clone(), a.clone()], 0.0),
            Err(Error::Domain(_))
        ));
        let one_row = Matrix::row_vector(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            contrastive_loss(&[one_row.clone(), one_row], 1.0),
            Err(Error::Domain(_))
        ));
        let b = Matrix::identity(3);
        assert!(matches!(
            contrastive_loss(&[Matrix::identity(2), b], 1.0),
            Err(Error::Dimension(_))
        ));
    }
}

mod persistence {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::new(toy_config(77), toy_schemas(), toy_tasks()).unwrap();
        let bytes = checkpoint_bytes(&model).unwrap();
        let restored = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(model, restored);
        assert_eq!(bytes, checkpoint_bytes(&restored).unwrap());
    }

    #[test]
    fn round_trip_preserves_mutated_parameters() {
        let mut model = Model::new(toy_config(78), toy_schemas(), toy_tasks()).unwrap();
        let mut w = model.param("head.m.w").unwrap().clone();
        w.data_mut()[0] = 0.123456789123456789;
        model.set_param("head.m.w", w).unwrap();
        let restored = checkpoint_from_bytes(&checkpoint_bytes(&model).unwrap()).unwrap();
        assert_eq!(model, restored);
    }

    #[test]
    fn file_round_trip_through_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::new(toy_config(79), toy_schemas(), toy_tasks()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let restored = load_checkpoint(&path).unwrap();
        assert_eq!(model, restored);
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let model = Model::new(toy_config(80), toy_schemas(), toy_tasks()).unwrap();
        let bytes = checkpoint_bytes(&model).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bad_magic),
            Err(Error::Format(_))
        ));

        let truncated = &bytes[..bytes.len() - 7];
        assert!(matches!(
            checkpoint_from_bytes(truncated),
            Err(Error::Format(_))
        ));

        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(
            checkpoint_from_bytes(&trailing),
            Err(Error::Format(_))
        ));
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn attention_weights_always_probability_rows(
            seed in 0u64..1000,
            n_tasks in 1usize..5,
            f in 1usize..5,
            batch in 1usize..4,
            alpha in 0.0f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = rand_attention(&mut rng, n_tasks, f, alpha);
            let x: Vec<Matrix> = (0..batch).map(|_| rand_matrix(&mut rng, n_tasks, f)).collect();
            let out = cross_task_attention(&x, &params).unwrap();
            for w in &out.weights {
                for r in 0..w.rows() {
                    let sum: f64 = w.row(r).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-10);
                    prop_assert!(w.row(r).iter().all(|&v| v >= 0.0));
                }
            }
        }

        #[test]
        fn kmeans_assignments_in_range_and_deterministic(
            seed in 0u64..500,
            k in 2usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = rand_matrix(&mut rng, 20, 3);
            let a = kmeans(&data, k, seed, 3).unwrap();
            let b = kmeans(&data, k, seed, 3).unwrap();
            prop_assert!(a.assignments.iter().all(|&c| c < k));
            prop_assert_eq!(a.assignments, b.assignments);
        }
    }
}
