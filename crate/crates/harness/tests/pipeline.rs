use std::collections::BTreeMap;

use condcomp::transformer::ExitPolicy;
use condcomp_harness::checkpoint::Checkpoint;
use condcomp_harness::cli::{parse_values, run_eval, run_train};
use condcomp_harness::data::{generate, Latent, Split, TaskParams};
use condcomp_harness::metrics::{load_cv, median, nmi};
use condcomp_harness::train::{evaluate, initial_model, train, Data};
use condcomp_harness::{ExperimentConfig, HarnessError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiers() -> TaskParams {
    TaskParams::DifficultyTiers {
        tokens: 3,
        dim: 4,
        margins: [1.0, 0.5, 0.2],
        noise: 1.0,
    }
}

fn clusters() -> TaskParams {
    TaskParams::ClusterExperts {
        clusters: 4,
        tokens: 2,
        dim: 4,
        separation: 3.0,
        spread: 1.0,
    }
}

fn needles(noise_var: f64) -> TaskParams {
    TaskParams::NeedleTokens {
        tokens: 8,
        informative: 2,
        dim: 4,
        salience: 2.0,
        signal: 1.0,
        noise_var,
    }
}

const PLAIN: &str = r#"
seed = 3
epochs = 2
batch_size = 8

[model]
d_input = 4
d_model = 8
heads = 2
d_ff = 8
n_classes = 2

[[model.blocks]]

[[model.blocks]]

[dataset]
id = "difficulty-tiers"
tokens = 3
dim = 4
margins = [1.5, 0.8, 0.3]
noise = 1.0
train = 96
val = 32
test = 32
"#;

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

#[test]
fn requested_size_is_met_and_classes_balance() {
    for task in [tiers(), clusters(), needles(1.0)] {
        for split in [Split::Train, Split::Val, Split::Test] {
            let (s, latent) = generate(&task, 1000, 11, split).unwrap();
            assert_eq!(s.len(), 1000);
            assert_eq!(latent.len(), 1000);
            let ones = s.labels.iter().filter(|&&y| y == 1).count() as i64;
            assert!((ones - (1000 - ones)).abs() <= 1, "{} {ones}", task.id());
            assert!(s.inputs.iter().all(|x| x.shape() == [task.tokens(), task.dim()]));
        }
    }
}

#[test]
fn generation_is_reproducible() {
    for task in [tiers(), clusters(), needles(0.5)] {
        let a = generate(&task, 200, 5, Split::Train).unwrap();
        let b = generate(&task, 200, 5, Split::Train).unwrap();
        assert_eq!(a, b);
        let c = generate(&task, 200, 6, Split::Train).unwrap();
        assert_ne!(a.0, c.0);
        let v = generate(&task, 200, 5, Split::Val).unwrap();
        assert_ne!(a.0, v.0);
    }
}

#[test]
fn invalid_task_parameters_are_rejected() {
    let bad = TaskParams::NeedleTokens {
        tokens: 4,
        informative: 5,
        dim: 4,
        salience: 1.0,
        signal: 1.0,
        noise_var: 0.0,
    };
    assert!(matches!(generate(&bad, 10, 0, Split::Train), Err(HarnessError::Invalid(_))));
}

/// A perceptron on the informative tokens alone separates noiseless needles.
#[test]
fn noiseless_needles_are_linearly_separable() {
    let (s, latent) = generate(&needles(0.0), 400, 2, Split::Train).unwrap();
    let rows: Vec<(Vec<f64>, f64)> = s
        .inputs
        .iter()
        .zip(&s.labels)
        .zip(&latent)
        .flat_map(|((x, &y), l)| {
            let Latent::Informative(pos) = l else { panic!("needle latent") };
            let sign = if y == 1 { 1.0 } else { -1.0 };
            pos.iter()
                .map(|&t| {
                    let mut v = x.row_slice(t).to_vec();
                    v.push(1.0);
                    (v, sign)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut w = vec![0.0; rows[0].0.len()];
    for _ in 0..1000 {
        let mut mistakes = 0;
        for (v, y) in &rows {
            let m: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            if m * y <= 0.0 {
                mistakes += 1;
                w.iter_mut().zip(v).for_each(|(w, v)| *w += y * v);
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    let correct = rows
        .iter()
        .filter(|(v, y)| v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() * y > 0.0)
        .count();
    assert_eq!(correct, rows.len());
}

/// Training never reads the latent facts: shuffling them leaves every
/// model-derived quantity unchanged.
#[test]
fn latent_metadata_does_not_reach_the_model() {
    let cfg = config(PLAIN);
    let data = Data::generate(&cfg).unwrap();
    let mut shuffled = data.clone();
    for (_, latent) in [&mut shuffled.train, &mut shuffled.val, &mut shuffled.test] {
        latent.reverse();
        latent.rotate_left(1);
    }
    assert_eq!(data.train.0, shuffled.train.0);
    let a = train(&cfg, &data, None).unwrap();
    let b = train(&cfg, &shuffled, None).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.model.params.values(), b.model.params.values());
}

#[test]
fn nmi_of_a_perfect_router_is_one() {
    let (_, latent) = generate(&clusters(), 400, 1, Split::Test).unwrap();
    let ids: Vec<usize> = latent
        .iter()
        .map(|l| match l {
            Latent::Cluster(c) => *c,
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(nmi(&ids, &ids), 1.0);
    let relabeled: Vec<usize> = ids.iter().map(|c| (c + 1) % 4).collect();
    assert!((nmi(&relabeled, &ids) - 1.0).abs() < 1e-12);
}

#[test]
fn nmi_of_a_random_router_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clusters: Vec<usize> = (0..10_000).map(|i| i % 4).collect();
    let experts: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..4)).collect();
    assert!(nmi(&experts, &clusters) < 0.05);
}

#[test]
fn metric_helpers() {
    assert_eq!(load_cv(&[5, 5, 5, 5]), 0.0);
    // loads 2, 6: mean 4, population sd 2
    assert!((load_cv(&[2, 6]) - 0.5).abs() < 1e-15);
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
}

#[test]
fn keeping_every_token_recalls_every_needle() {
    let mut cfg = config(PLAIN);
    cfg.dataset.task = needles(1.0);
    cfg.model.d_input = 4;
    let model = initial_model(&cfg).unwrap();
    let (test, latent) = generate(&cfg.dataset.task, 50, 1, Split::Test).unwrap();
    let ev = evaluate(&model, &test, &latent, ExitPolicy::Final, 1).unwrap();
    assert_eq!(ev.record.recall, Some(1.0));
}

#[test]
fn plain_training_lowers_the_loss_within_twenty_epochs() {
    let mut cfg = config(PLAIN);
    cfg.epochs = 20;
    let data = Data::generate(&cfg).unwrap();
    let out = train(&cfg, &data, None).unwrap();
    let losses: Vec<f64> = out
        .records
        .iter()
        .filter(|r| r.split == "train")
        .map(|r| r.task_loss.unwrap())
        .collect();
    assert_eq!(losses.len(), 20);
    assert!(losses[19] < losses[0], "{losses:?}");
    assert!(out.records.iter().all(|r| r.balancing_loss.is_none()));
}

#[test]
fn zero_epochs_only_evaluates_the_initial_model() {
    let mut cfg = config(PLAIN);
    cfg.epochs = 0;
    let data = Data::generate(&cfg).unwrap();
    let out = train(&cfg, &data, None).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!((out.records[0].epoch, out.records[0].split.as_str()), (0, "val"));
    assert_eq!(out.model.params.values(), initial_model(&cfg).unwrap().params.values());
}

#[test]
fn one_record_per_epoch_and_split() {
    let cfg = config(PLAIN);
    let out = train(&cfg, &Data::generate(&cfg).unwrap(), None).unwrap();
    let keys: Vec<(usize, &str)> = out.records.iter().map(|r| (r.epoch, r.split.as_str())).collect();
    assert_eq!(keys, [(0, "val"), (1, "train"), (1, "val"), (2, "train"), (2, "val")]);
    assert!(out.records.iter().all(|r| r.is_finite()));
}

#[test]
fn routing_runs_report_the_balancing_loss() {
    let text = PLAIN.replace(
        "[[model.blocks]]\n\n[[model.blocks]]",
        "[[model.blocks]]\n\n[[model.blocks]]\n[model.blocks.moe]\nn_experts = 3\nk = 1\nstrategy = \"token-choice\"\n",
    );
    let cfg = config(&text);
    let out = train(&cfg, &Data::generate(&cfg).unwrap(), None).unwrap();
    let train_rows: Vec<_> = out.records.iter().filter(|r| r.split == "train").collect();
    assert!(train_rows.iter().all(|r| r.balancing_loss.is_some()));
    let val = out.records.last().unwrap();
    assert!(val.load_cv.is_some());
    assert!(val.nmi.is_none());
}

#[test]
fn divergence_is_reported() {
    let mut cfg = config(PLAIN);
    cfg.optimizer.kind = condcomp::OptimizerKind::Sgd;
    cfg.optimizer.lr = 1e200;
    cfg.epochs = 3;
    let err = train(&cfg, &Data::generate(&cfg).unwrap(), None).err().expect("diverges");
    assert!(matches!(err, HarnessError::Diverged(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn same_seed_gives_identical_files() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut cfg = config(PLAIN);
        cfg.output.dir = d.path().to_path_buf();
        run_train(&cfg).unwrap();
    }
    let read = |d: &tempfile::TempDir| -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(d.path())
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
            })
            .collect()
    };
    let (a, b) = (read(&dirs[0]), read(&dirs[1]));
    assert!(a.contains_key("metrics.jsonl") && a.contains_key("checkpoint.json"));
    assert!(a.contains_key("exits.jsonl") && a.contains_key("alive.jsonl"));
    let a_cfg = String::from_utf8(a["config.toml"].clone()).unwrap();
    assert!(a_cfg.contains(&dirs[0].path().display().to_string()));
    for (name, bytes) in &a {
        if name != "config.toml" {
            assert_eq!(Some(bytes), b.get(name), "{name}");
        }
    }
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(PLAIN);
    cfg.output.dir = dir.path().to_path_buf();
    let (model, _, record) = run_train(&cfg).unwrap();
    let restored = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap().into_model().unwrap();
    assert_eq!(restored.params.values(), model.params.values());
    let again = run_eval(&cfg, None).unwrap();
    assert_eq!(again.accuracy, record.accuracy);
    assert_eq!(again.mean_macs, record.mean_macs);

    let bogus = dir.path().join("bogus.json");
    std::fs::write(&bogus, r#"{"format":"other","version":1,"seed":0,"spec":null,"params":[]}"#).unwrap();
    assert!(matches!(Checkpoint::load(&bogus), Err(HarnessError::Invalid(_))));
}

#[test]
fn config_validation() {
    let cfg = config(PLAIN);
    assert_eq!(cfg.batch_size, 8);
    assert_eq!(cfg.sampler.tau(0, 10), 5.0);
    assert!((cfg.sampler.tau(9, 10) - 0.5).abs() < 1e-12);
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

    let invalid = |text: String| matches!(ExperimentConfig::from_toml(&text), Err(HarnessError::Invalid(_)));
    assert!(invalid(PLAIN.replace("seed = 3\n", "")));
    assert!(invalid(PLAIN.replace("epochs = 2", "epochs = 2\nepoch = 3")));
    assert!(invalid(PLAIN.replace("d_input = 4", "d_input = 5")));
    assert!(invalid(PLAIN.replace("batch_size = 8", "batch_size = 0")));
    assert!(invalid(PLAIN.replace("difficulty-tiers", "spirals")));
    assert!(invalid(PLAIN.replace("n_classes = 2", "n_classes = 3")));
}

#[test]
fn value_ranges() {
    assert_eq!(parse_values("0:1:3").unwrap(), [0.0, 0.5, 1.0]);
    assert_eq!(parse_values("0.5, 0.7").unwrap(), [0.5, 0.7]);
    assert_eq!(parse_values("0.5:0.99:10").unwrap().len(), 10);
    assert!(parse_values("0:1:0").is_err());
    assert!(parse_values("a,b").is_err());
}
