use paewc::classifier::probe_responses;
use paewc::fisher::activation_stats;
use paewc::metrics::evaluate_dice;
use paewc::model::{build_model, ModelConfig, ParamStore};
use paewc::objectives::ewc_penalty;
use paewc::prompts::{Lexicon, Tier, Vocab};
use paewc::synth::{default_suite_sized, make_task, Suite, TaskDataset};
use paewc::trainer::{run_sequence, run_sequence_with, train_task, Method, TrainerConfig};
use paewc::{Error, Tape};

const SEED: u64 = 43;

fn suite() -> Suite {
    default_suite_sized(SEED, 32, (64, 32, 32))
}

fn task(i: usize) -> TaskDataset {
    make_task(&suite().specs[i], Tier::Comprehensive, SEED).unwrap()
}

fn cfg(method: Method) -> TrainerConfig {
    TrainerConfig {
        method,
        epochs_per_task: 6,
        learning_rate: 3e-3,
        fisher_samples: 16,
        stability_batches: 4,
        ..TrainerConfig::default()
    }
}

fn fresh() -> ParamStore {
    build_model(&ModelConfig::default(), SEED).unwrap()
}

fn vocab() -> Vocab {
    Vocab::builtin(&Lexicon::default())
}

#[test]
fn sequential_single_task_is_plain_training() {
    let data = task(0);
    let v = vocab();
    let mut seq = fresh();
    let log = train_task(&mut seq, &data, &v, &[], &cfg(Method::Sequential), 0).unwrap();
    assert!(log.epochs.iter().all(|e| e.loss.ewc == 0.0));
    let mut plain = fresh();
    train_task(&mut plain, &data, &v, &[], &cfg(Method::PaEwc), 0).unwrap();
    assert_eq!(seq, plain);
    let first = log.epochs.first().unwrap().loss.total;
    let last = log.epochs.last().unwrap().loss.total;
    assert!(last < first, "training loss did not fall: {first} -> {last}");
}

#[test]
fn single_task_sequence_is_rejected() {
    let r = run_sequence(&[task(0)], &ModelConfig::default(), &cfg(Method::PaEwc), &Lexicon::default());
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn snapshots_anchor_and_track_similarity() {
    let tasks = [task(0), task(1)];
    let mut checked = 0;
    let record = run_sequence_with(&tasks, &ModelConfig::default(), &cfg(Method::PaEwc), &Lexicon::default(), |step| {
        let mut tape = Tape::new();
        let vars = step.params.register(&mut tape);
        let pen = ewc_penalty(&mut tape, &vars, &step.snapshots[step.position..])?;
        assert_eq!(tape.value(pen).item()?, 0.0);
        let sim = step.snapshots[step.position].similarity;
        if step.position == 0 {
            assert_eq!(sim, 1.0);
        } else {
            assert!(sim > 0.0 && sim < 1.0, "similarity {sim}");
        }
        checked += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(checked, 2);
    assert_eq!(record.assignments.len(), 2);
}

#[test]
fn identical_tasks_are_not_forgotten() {
    let tasks = [task(0), task(0)];
    let r = run_sequence(&tasks, &ModelConfig::default(), &cfg(Method::Sequential), &Lexicon::default()).unwrap();
    assert!(r.eval.forgetting_total <= 0.01, "{:?}", r.dice_matrix);
}

#[test]
fn huge_penalty_protects_the_first_task() {
    let mut c = cfg(Method::PaEwc);
    c.loss.w_ewc = 1e6;
    let r = run_sequence(&[task(0), task(1)], &ModelConfig::default(), &c, &Lexicon::default()).unwrap();
    let drop = r.peak[0] - r.dice_matrix[1][0];
    assert!(drop <= 0.02, "task 1 dropped {drop}: {:?}", r.dice_matrix);
}

#[test]
fn tasks_genuinely_differ() {
    let (a, b) = (task(0), task(1));
    let v = vocab();
    let mut p = fresh();
    train_task(&mut p, &a, &v, &[], &cfg(Method::Sequential), 0).unwrap();
    let cross = evaluate_dice(&p, &b.spec, &b.test, &v).unwrap();
    assert!(cross < 0.6, "cross-task dice {cross}");
}

#[test]
fn probe_responses_fixture() {
    let data = task(0);
    let v = vocab();
    let p = fresh();
    let m = probe_responses(&p, &data.spec, data.probe(), &v, 16).unwrap();
    assert!(m.rows.values().flatten().all(|&x| x > 0.0), "dead entries in {:?}", m.rows);
    assert!(matches!(probe_responses(&p, &data.spec, data.probe(), &v, 0), Err(Error::Input(_))));

    let mut severed = p.clone();
    for (name, t) in severed.iter_mut() {
        if name.starts_with("text.") {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    severed.set_trainable("text.", false);
    let m = probe_responses(&severed, &data.spec, data.probe(), &v, 16).unwrap();
    for (name, row) in &m.rows {
        if name.starts_with("vision.") {
            assert!(row[0] == row[1] && row[1] == row[2], "{name}: {row:?}");
        }
    }
}

#[test]
fn activation_stats_fixture() {
    let data = task(0);
    let s = activation_stats(&fresh(), &data.spec, data.probe(), &vocab()).unwrap();
    assert_eq!(s.per_layer.len(), 4);
    assert!(s.per_layer.iter().all(|&(m, sd)| m.is_finite() && sd.is_finite() && sd > 0.0), "{s:?}");
}
