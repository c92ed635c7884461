use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::arc::{parse_task, Origin, Outcome, Provenance};
use crate::ensemble::VoteConfig;
use crate::executor::{evaluate_program, MockExecutor};
use crate::gateway::{EmbeddingVector, MockEmbedder, Role};
use crate::mock::{recolor_source, ProgramLibrary};

fn task() -> Task {
    parse_task(
        "t1",
        r#"{"train":[
            {"input":[[1,2,3],[4,5,6]],"output":[[3,2,1],[6,5,4]]},
            {"input":[[7,8,9],[1,1,1]],"output":[[9,8,7],[1,1,1]]},
            {"input":[[2,2,0],[0,2,2]],"output":[[0,2,2],[2,2,0]]}],
           "test":[{"input":[[5,6,7],[8,9,0]],"output":[[7,6,5],[0,9,8]]}]}"#,
    )
    .unwrap()
}

fn program(id: u64, source: &str) -> Program {
    Program {
        id: ProgramId(id),
        source: source.into(),
        provenance: Provenance::Sampled,
        origin: Origin::default(),
    }
}

fn run(name: &str, id: u64) -> (Program, CandidateEvaluation) {
    let lib = ProgramLibrary::standard();
    let p = program(id, &lib.by_name(name).unwrap().source);
    let e = evaluate_program(&MockExecutor::from_library(&lib), &p, &task(), 1000).unwrap();
    (p, e)
}

fn synthetic_eval(id: u64, acc: f64, test_out: u8) -> CandidateEvaluation {
    let g = Grid::new(vec![vec![test_out]]).unwrap();
    CandidateEvaluation {
        program_id: ProgramId(id),
        train_outcomes: vec![Outcome::Ok { grid: g.clone() }; 3],
        test_outcomes: vec![Outcome::Ok { grid: g }],
        train_accuracy: acc,
    }
}

#[test]
fn identity_relabels_to_itself() {
    let (p, e) = run("identity", 0);
    let ex = relabel(&p, &task(), &e).unwrap();
    for pair in ex.synthetic_task.train() {
        assert_eq!(pair.input, pair.output);
    }
    assert_eq!(task().truth_reads(), 0);
}

#[test]
fn timeout_is_rejected() {
    let (p, mut e) = run("identity", 0);
    e.test_outcomes[0] = Outcome::Timeout;
    assert_eq!(relabel(&p, &task(), &e), Err(Rejection::IncompleteExecution));
}

#[test]
fn transpose_relabel_reexecutes() {
    let (p, e) = run("transpose", 0);
    let ex = relabel(&p, &task(), &e).unwrap();
    for pair in ex.synthetic_task.train() {
        assert_eq!((pair.output.height(), pair.output.width()), (3, 2));
    }
    let again = evaluate_program(
        &MockExecutor::from_library(&ProgramLibrary::standard()),
        &p,
        &ex.synthetic_task,
        1000,
    )
    .unwrap();
    assert!(again.is_train_perfect());
    assert!(again.solves(ex.synthetic_task.truth().unwrap()));
}

/// 100 distinct candidates with spread accuracies, all relabelable.
fn hundred() -> Vec<(Program, CandidateEvaluation)> {
    (0..100)
        .map(|i| {
            (
                program(i, &format!("def transform(g):\n    return g  # v{i}")),
                synthetic_eval(i, (i % 4) as f64 / 3.0, (i % 7) as u8),
            )
        })
        .collect()
}

fn pairs(v: &[(Program, CandidateEvaluation)]) -> Vec<(&Program, &CandidateEvaluation)> {
    v.iter().map(|(p, e)| (p, e)).collect()
}

fn one_by_one_task() -> Task {
    parse_task(
        "s",
        r#"{"train":[{"input":[[1]],"output":[[1]]},{"input":[[2]],"output":[[2]]},{"input":[[3]],"output":[[3]]}],
           "test":[{"input":[[4]],"output":[[4]]}]}"#,
    )
    .unwrap()
}

#[test]
fn greedy_diverse_splits_top_and_bottom() {
    let cands = hundred();
    let reg = sampling_selectors(&VoteConfig::default());
    let policy = SelectionPolicy::sampling_default();
    let got = select_sampling_data(&one_by_one_task(), &pairs(&cands), None, &policy, &reg).unwrap();
    assert_eq!(got.len(), 50);
    let acc: HashMap<ProgramId, f64> = cands.iter().map(|(p, e)| (p.id, e.train_accuracy)).collect();
    let (top, bot) = got.split_at(25);
    assert!(top.iter().all(|x| acc[&x.solution.id] == 1.0));
    assert!(bot.iter().all(|x| acc[&x.solution.id] == 0.0));
    let ids: HashSet<_> = got.iter().map(|x| x.solution.id).collect();
    assert_eq!(ids.len(), 50);
}

#[test]
fn small_pools_are_returned_whole() {
    let cands: Vec<_> = hundred().into_iter().take(30).collect();
    let reg = sampling_selectors(&VoteConfig::default());
    for strategy in ["uniform", "greedy", "greedy-diverse", "ttt-diverse"] {
        let policy = SelectionPolicy {
            strategy: strategy.into(),
            ..SelectionPolicy::sampling_default()
        };
        let got = select_sampling_data(&one_by_one_task(), &pairs(&cands), None, &policy, &reg).unwrap();
        assert_eq!(got.len(), 30, "{strategy}");
    }
}

#[test]
fn greedy_prefers_shorter_source() {
    let cands = vec![
        (
            program(0, "def transform(g):\n    return g  # long comment"),
            synthetic_eval(0, 1.0, 1),
        ),
        (program(1, "def transform(g):\n    return g"), synthetic_eval(1, 1.0, 1)),
    ];
    let reg = sampling_selectors(&VoteConfig::default());
    let policy = SelectionPolicy {
        strategy: "greedy".into(),
        k_per_task: 1,
        seed: 0,
    };
    let got = select_sampling_data(&one_by_one_task(), &pairs(&cands), None, &policy, &reg).unwrap();
    assert_eq!(got[0].solution.id, ProgramId(1));
}

#[test]
fn correct_only_needs_truth() {
    let cands = hundred();
    let reg = sampling_selectors(&VoteConfig::default());
    let policy = SelectionPolicy {
        strategy: "correct-only".into(),
        ..SelectionPolicy::sampling_default()
    };
    let t = one_by_one_task();
    assert!(matches!(
        select_sampling_data(&t, &pairs(&cands), None, &policy, &reg),
        Err(SelfImproveError::TruthRequired(_))
    ));
    let truth = vec![Grid::new(vec![vec![4]]).unwrap()];
    let got = select_sampling_data(&t, &pairs(&cands), Some(&truth), &policy, &reg).unwrap();
    // test output 4 and train accuracy 1: i % 7 == 4 and i % 4 == 3
    assert!(!got.is_empty());
    assert!(got.iter().all(|x| x.solution.id.0 % 7 == 4 && x.solution.id.0 % 4 == 3));
}

#[test]
fn unknown_strategy_is_reported() {
    let cands = hundred();
    let reg = sampling_selectors(&VoteConfig::default());
    let policy = SelectionPolicy {
        strategy: "best".into(),
        ..SelectionPolicy::sampling_default()
    };
    assert!(matches!(
        select_sampling_data(&one_by_one_task(), &pairs(&cands), None, &policy, &reg),
        Err(SelfImproveError::UnknownStrategy(_))
    ));
}

fn refinement_pool(bins: &[ParentBin]) -> Vec<RefinementExample> {
    bins.iter()
        .enumerate()
        .map(|(i, &b)| RefinementExample {
            task: one_by_one_task().without_truth(),
            parent: program(i as u64, "p"),
            parent_eval: synthetic_eval(i as u64, 0.0, 0),
            child: program(1000 + i as u64, "c"),
            child_eval: synthetic_eval(1000 + i as u64, 1.0, 4),
            child_correct: true,
            parent_bin: b,
        })
        .collect()
}

#[test]
fn diverse_refinement_balances_bins() {
    let bins: Vec<ParentBin> = (0..200).map(|i| ParentBin::ALL[i % 4]).collect();
    let pool = refinement_pool(&bins);
    let got = select_refinement_data(
        "s",
        &pool,
        &SelectionPolicy::refinement_default(),
        &refinement_selectors(),
    )
    .unwrap();
    assert_eq!(got.len(), 50);
    let mut counts: HashMap<ParentBin, usize> = HashMap::new();
    for r in &got {
        *counts.entry(r.parent_bin).or_default() += 1;
    }
    let (lo, hi) = (counts.values().min().unwrap(), counts.values().max().unwrap());
    assert!(hi - lo <= 1, "{counts:?}");
}

#[test]
fn diverse_refinement_redistributes_short_bins() {
    let mut bins = vec![ParentBin::Zero; 100];
    bins.extend([ParentBin::High; 3]);
    let pool = refinement_pool(&bins);
    let got = select_refinement_data(
        "s",
        &pool,
        &SelectionPolicy::refinement_default(),
        &refinement_selectors(),
    )
    .unwrap();
    assert_eq!(got.len(), 50);
    assert_eq!(got.iter().filter(|r| r.parent_bin == ParentBin::High).count(), 3);
}

#[test]
fn parent_bins() {
    let truth = vec![Grid::new(vec![vec![4]]).unwrap()];
    let bin = |acc, out| ParentBin::of(&synthetic_eval(0, acc, out), Some(&truth));
    assert_eq!(bin(0.0, 1), Some(ParentBin::Zero));
    assert_eq!(bin(1.0 / 3.0, 1), Some(ParentBin::Low));
    assert_eq!(bin(2.0 / 3.0, 1), Some(ParentBin::High));
    assert_eq!(bin(1.0, 1), Some(ParentBin::PerfectTrainWrongTest));
    assert_eq!(bin(1.0, 4), None);
    assert_eq!(ParentBin::of(&synthetic_eval(0, 1.0, 1), None), None);
    assert_eq!(ParentBin::of(&synthetic_eval(0, 0.5, 1), None), Some(ParentBin::High));
}

#[test]
fn successful_refinements_need_correct_child_and_incorrect_parent() {
    let t = one_by_one_task();
    let truth = vec![Grid::new(vec![vec![4]]).unwrap()];
    let parent = program(0, "p");
    let mut child = program(1, "c");
    child.provenance = Provenance::Refined { parent: ProgramId(0) };
    let mut wrong_child = program(2, "w");
    wrong_child.provenance = Provenance::Refined { parent: ProgramId(0) };
    let pe = synthetic_eval(0, 0.0, 1);
    let ce = synthetic_eval(1, 1.0, 4);
    let we = synthetic_eval(2, 1.0, 5);
    let found = successful_refinements(&t, &[(&parent, &pe), (&child, &ce), (&wrong_child, &we)], &truth);
    assert_eq!(found.len(), 1);
    assert_eq!(found[0].child.id, ProgramId(1));
    assert!(!found[0].task.has_truth());
}

/// Embeds texts from a fixed table.
struct TableEmbedder(HashMap<String, Vec<f64>>);

impl EmbeddingBackend for TableEmbedder {
    fn name(&self) -> &str {
        "table"
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        texts
            .iter()
            .map(|t| EmbeddingVector::new(self.0[t].clone(), "table"))
            .collect()
    }
}

/// Unit vectors with pairwise cosine `s` in three dimensions.
fn equiangular(s: f64) -> [Vec<f64>; 3] {
    // Gram matrix [[1,s,s],[s,1,s],[s,s,1]] via its Cholesky factor.
    let a = (1.0 - s * s).sqrt();
    let b = (s - s * s) / a;
    let c = (1.0 - s * s - b * b).sqrt();
    [vec![1.0, 0.0, 0.0], vec![s, a, 0.0], vec![s, b, c]]
}

#[test]
fn dedup_cases() {
    let e = MockEmbedder::default();
    let src = "def transform(g):\n    return g";
    assert_eq!(dedup(&[src, src], &e, 0.9).unwrap(), vec![0]);
    let other = "def transform(grid):\n    return [r[::-1] for r in grid]";
    assert_eq!(dedup(&[src, other, src], &e, 1.0).unwrap(), vec![0, 1]);

    let [x, y, z] = equiangular(0.95);
    let table = TableEmbedder(HashMap::from([("a".into(), x), ("b".into(), y), ("c".into(), z)]));
    assert_eq!(dedup(&["a", "b", "c"], &table, 0.9).unwrap(), vec![0]);
    assert_eq!(dedup(&["a", "b", "c"], &table, 0.96).unwrap(), vec![0, 1, 2]);
}

#[test]
fn diversity_cases() {
    let [x, y, z] = equiangular(0.5);
    let table = TableEmbedder(HashMap::from([
        ("a".into(), x),
        ("b".into(), y),
        ("c".into(), z),
        ("e1".into(), vec![1.0, 0.0]),
        ("e2".into(), vec![0.0, 1.0]),
    ]));
    assert_eq!(diversity(&["a", "a"], &table).unwrap(), 0.0);
    assert!((diversity(&["e1", "e2"], &table).unwrap() - 1.0).abs() < 1e-12);
    assert!((diversity(&["a", "b", "c"], &table).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(diversity(&["a"], &table), Err(SelfImproveError::TooFewSolutions(1)));
}

#[test]
fn hybrid_filter_cases() {
    let (p, e) = run("identity", 0);
    assert!(filter_hybrid(&p, &e));

    let unrelated = program(
        1,
        "def transform(g):\n    k = [[9, 9, 9, 9, 9, 9], [9, 9, 9, 9, 9, 9]]\n    return g[::-1]",
    );
    let ev = evaluate_program(
        &MockExecutor::from_library(&ProgramLibrary::standard()),
        &program(1, &ProgramLibrary::standard().by_name("flip_vertical").unwrap().source),
        &task(),
        1000,
    )
    .unwrap();
    assert!(filter_hybrid(&unrelated, &ev));

    let big = Grid::new(vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 0, 1, 2]]).unwrap();
    let copied = CandidateEvaluation {
        train_outcomes: vec![Outcome::Ok { grid: big.clone() }],
        ..synthetic_eval(2, 1.0, 1)
    };
    let python_literal = format!("def transform(g):\n    return {}", big.to_json().replace(",", ", "));
    assert!(!filter_hybrid(&program(2, &python_literal), &copied));
    let rendered_literal = format!("def transform(g):\n    s = '''{}'''\n    return g", render_grid(&big));
    assert!(!filter_hybrid(&program(3, &rendered_literal), &copied));

    // 1x1 outputs are far too short to count as copied.
    let tiny = synthetic_eval(4, 1.0, 7);
    assert!(filter_hybrid(&program(4, "def transform(g):\n    return [[7]]"), &tiny));
}

#[test]
fn ttt_single_group_takes_everything() {
    let evals: Vec<_> = (0..5).map(|i| synthetic_eval(i, 0.5, 1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let got = ttt_select(&evals, 12, &VoteConfig::default(), &mut rng).unwrap();
    assert_eq!(got.len(), 12);
}

#[test]
fn ttt_allocation_matches_multinomial_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let trials = 1000;
    let mut first = 0usize;
    for _ in 0..trials {
        let a = ttt_allocate(&[3.0, 1.0], 10_000, &mut rng);
        assert_eq!(a.iter().sum::<usize>(), 10_000);
        first += a[0];
    }
    let mean = first as f64 / trials as f64;
    assert!((mean - 7500.0).abs() <= 0.02 * 7500.0, "{mean}");
}

#[test]
fn ttt_zero_scores_sample_uniformly() {
    let evals: Vec<_> = (0..4).map(|i| synthetic_eval(i, 0.0, 1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let got = ttt_select(&evals, 40_000, &VoteConfig::default(), &mut rng).unwrap();
    let mut counts = [0usize; 4];
    for id in got {
        counts[id.0 as usize] += 1;
    }
    for c in counts {
        assert!((c as f64 - 10_000.0).abs() < 500.0, "{counts:?}");
    }
}

#[test]
fn ttt_weights_members_by_accuracy() {
    let evals = vec![synthetic_eval(0, 0.0, 1), synthetic_eval(1, 1.0, 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let got = ttt_select(&evals, 100, &VoteConfig::default(), &mut rng).unwrap();
    assert!(got.iter().all(|id| *id == ProgramId(1)));
}

fn sampling_example() -> RelabeledExample {
    let (p, e) = run("flip_horizontal", 3);
    relabel(&p, &task(), &e).unwrap()
}

#[test]
fn sampling_record_shape_and_shuffle() {
    let exec = MockExecutor::from_library(&ProgramLibrary::standard());
    let ex = sampling_example();
    let plain = sampling_records(std::slice::from_ref(&ex), false, 0, &exec, 1000).unwrap();
    assert_eq!(plain.len(), 1);
    let roles: Vec<_> = plain[0].messages.iter().map(|m| m.role).collect();
    assert_eq!(roles, vec![Role::System, Role::User, Role::Assistant]);
    assert_eq!(plain[0].meta.train_order, vec![0, 1, 2]);
    assert!(plain[0].messages[2].content.starts_with("```python\n"));

    let a = sampling_records(std::slice::from_ref(&ex), true, 9, &exec, 1000).unwrap();
    let b = sampling_records(std::slice::from_ref(&ex), true, 9, &exec, 1000).unwrap();
    assert_eq!(a, b);
    let mut sorted = a[0].meta.train_order.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2]);
}

#[test]
fn verification_catches_drifted_solutions() {
    let ex = sampling_example();
    let mut lib = ProgramLibrary::standard();
    let src = ex.solution.source.clone();
    // Rebind the solution source to a different transform.
    let mut drifted = ProgramLibrary::new(vec![]);
    for e in lib.entries() {
        if e.source != src {
            drifted.push(e.clone());
        }
    }
    let mut swapped = lib.by_name("identity").unwrap().clone();
    swapped.source = src;
    drifted.push(swapped);
    lib = drifted;
    let exec = MockExecutor::from_library(&lib);
    assert!(matches!(
        sampling_records(&[ex], false, 0, &exec, 1000),
        Err(SelfImproveError::VerificationFailure { .. })
    ));
}

#[test]
fn refinement_record_mentions_train_score() {
    let lib = ProgramLibrary::standard();
    let exec = MockExecutor::from_library(&lib);
    let t = task();
    let (parent, pe) = run("identity", 0);
    let (mut child, ce) = run("flip_horizontal", 1);
    child.provenance = Provenance::Refined { parent: parent.id };
    let found = successful_refinements(&t, &[(&parent, &pe), (&child, &ce)], t.truth().unwrap());
    assert_eq!(found.len(), 1);
    let recs = refinement_records(&found, true, 3, &exec, 1000).unwrap();
    let user = &recs[0].messages[1].content;
    assert!(user.contains("correctly worked on 0/3 train input-output pairs."));
    assert_eq!(recs[0].meta.kind, DatasetKind::Refinement);
}

#[test]
fn dataset_file_round_trip() {
    let exec = MockExecutor::from_library(&ProgramLibrary::standard());
    let recs = sampling_records(&[sampling_example()], true, 1, &exec, 1000).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d/sampling.jsonl");
    let digest = write_dataset(&path, &recs).unwrap();
    assert_eq!(digest.len(), 64);
    assert_eq!(read_dataset(&path).unwrap(), recs);
    let line = std::fs::read_to_string(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert!(v["messages"].is_array() && v["meta"]["task_id"] == "t1");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dedup_is_idempotent(words in prop::collection::vec("[a-d]{1,3}( [a-d]{1,3}){0,4}", 1..20), threshold in 0.5f64..1.0) {
        let e = MockEmbedder { dim: 16 };
        let texts: Vec<&str> = words.iter().map(String::as_str).collect();
        let once = dedup(&texts, &e, threshold).unwrap();
        let kept: Vec<&str> = once.iter().map(|&i| texts[i]).collect();
        let twice = dedup(&kept, &e, threshold).unwrap();
        prop_assert_eq!(twice, (0..kept.len()).collect::<Vec<_>>());
    }

    #[test]
    fn allocations_sum_to_n(weights in prop::collection::vec(0.0f64..10.0, 1..8), n in 0usize..5000, s in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        prop_assert_eq!(ttt_allocate(&weights, n, &mut rng).iter().sum::<usize>(), n);
    }

    #[test]
    fn greedy_diverse_halves_are_disjoint(k in 2usize..60, s in any::<u64>()) {
        let cands = hundred();
        let reg = sampling_selectors(&VoteConfig::default());
        let policy = SelectionPolicy { strategy: "greedy-diverse".into(), k_per_task: k, seed: s };
        let got = select_sampling_data(&one_by_one_task(), &pairs(&cands), None, &policy, &reg).unwrap();
        prop_assert!(got.len() <= k);
        let ids: HashSet<_> = got.iter().map(|x| x.solution.id).collect();
        prop_assert_eq!(ids.len(), got.len());
    }

    #[test]
    fn hybrid_guard_never_fires_without_shared_literal(src in "[a-z_ ()=:\n]{0,200}") {
        let (_, e) = run("identity", 0);
        prop_assert!(filter_hybrid(&program(9, &src), &e));
    }
}

#[test]
fn recolor_programs_are_distinct() {
    assert_ne!(recolor_source(1, 2), recolor_source(2, 1));
}
