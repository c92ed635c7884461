//! Reference implementations the acceptance checks compare against. None of
//! these call into the code they check.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use soar_core::arc::{Grid, Outcome, Pair, Program, Task};
use soar_core::executor::MockExecutor;
use soar_core::mock::{recolor, ProgramLibrary};
use statrs::distribution::{Beta, Continuous, ContinuousCDF};

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

/// P(X0 > X1) for independent Beta variables, by Simpson's rule on
/// ∫ pdf0(x) cdf1(x) dx.
pub fn beta_win_probability(a0: f64, b0: f64, a1: f64, b1: f64) -> f64 {
    let d0 = Beta::new(a0, b0).unwrap();
    let d1 = Beta::new(a1, b1).unwrap();
    let n = 40_000;
    let h = 1.0 / n as f64;
    let f = |x: f64| {
        let p = d0.pdf(x);
        if p.is_finite() {
            p * d1.cdf(x)
        } else {
            0.0
        }
    };
    let mut s = f(0.0) + f(1.0);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * h);
    }
    s * h / 3.0
}

/// One candidate as the voting oracle sees it: test outputs (None for any
/// failed execution) and train accuracy in quarters.
#[derive(Clone, Debug)]
pub struct OracleCandidate {
    pub id: u64,
    pub outputs: Option<Vec<Vec<Vec<i64>>>>,
    pub quarters: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleGroup {
    pub key: String,
    pub members: Vec<u64>,
}

/// Ranks output groups by `count + c * mean_accuracy` with exact rational
/// arithmetic, then by count, then by key. `c` must be an integer.
pub fn brute_force_vote(cands: &[OracleCandidate], c: u64) -> Vec<OracleGroup> {
    let mut groups: BTreeMap<String, Vec<&OracleCandidate>> = BTreeMap::new();
    for cand in cands {
        if let Some(o) = &cand.outputs {
            groups.entry(serde_json::to_string(o).unwrap()).or_default().push(cand);
        }
    }
    // weight = (4 n^2 + c * q) / (4 n), q = summed quarters
    let stats: Vec<(String, u64, u64, Vec<u64>)> = groups
        .into_iter()
        .map(|(k, m)| {
            let n = m.len() as u64;
            let q: u64 = m.iter().map(|c| u64::from(c.quarters)).sum();
            let mut ids: Vec<u64> = m.iter().map(|c| c.id).collect();
            ids.sort_unstable();
            (k, n, q, ids)
        })
        .collect();
    let beats = |a: &(String, u64, u64, Vec<u64>), b: &(String, u64, u64, Vec<u64>)| -> bool {
        let (na, qa) = (a.1 as u128, a.2 as u128);
        let (nb, qb) = (b.1 as u128, b.2 as u128);
        let c = c as u128;
        let lhs = (4 * na * na + c * qa) * nb;
        let rhs = (4 * nb * nb + c * qb) * na;
        match lhs.cmp(&rhs) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => na > nb || (na == nb && a.0 < b.0),
        }
    };
    // A group's rank is the number of groups that beat it.
    let mut ranked: Vec<(usize, OracleGroup)> = stats
        .iter()
        .map(|g| {
            let rank = stats.iter().filter(|o| beats(o, g)).count();
            (
                rank,
                OracleGroup {
                    key: g.0.clone(),
                    members: g.3.clone(),
                },
            )
        })
        .collect();
    ranked.sort_by_key(|(r, _)| *r);
    ranked.into_iter().map(|(_, g)| g).collect()
}

/// The program's own outputs as a task: each train target and the test
/// truth are replaced by what the program produced.
pub fn self_labelled(task: &Task, train: &[Outcome], test: &[Outcome]) -> Option<Task> {
    let pairs = task
        .train()
        .iter()
        .zip(train)
        .map(|(p, o)| {
            o.ok_grid().map(|g| Pair {
                input: p.input.clone(),
                output: g.clone(),
            })
        })
        .collect::<Option<Vec<_>>>()?;
    let truth = test
        .iter()
        .map(|o| o.ok_grid().cloned())
        .collect::<Option<Vec<Grid>>>()?;
    Task::new(task.task_id(), pairs, task.test_inputs().to_vec(), Some(truth)).ok()
}

/// 50 honest programs: the library's geometric transforms plus recolors.
pub fn legitimate_programs() -> (Vec<String>, MockExecutor) {
    let lib = ProgramLibrary::standard();
    let mut exec = MockExecutor::from_library(&lib);
    let mut sources: Vec<String> = [
        "identity",
        "transpose",
        "flip_horizontal",
        "flip_vertical",
        "rotate_180",
        "rotate_cw",
        "tile_horizontal",
        "upscale2",
        "first_row",
    ]
    .iter()
    .map(|n| lib.by_name(n).unwrap().source.clone())
    .collect();
    'outer: for from in 0..10u8 {
        for to in 0..10u8 {
            if sources.len() == 50 {
                break 'outer;
            }
            if from == to {
                continue;
            }
            let src = format!(
                "def transform(grid):\n    out = [row[:] for row in grid]\n    for r, row in enumerate(out):\n        for c, v in enumerate(row):\n            if v == {from}:\n                out[r][c] = {to}\n    return out"
            );
            exec.insert(src.clone(), Arc::new(move |g: &Grid| Ok(recolor(g, from, to))));
            sources.push(src);
        }
    }
    (sources, exec)
}

pub fn program(id: u64, source: &str) -> Program {
    Program {
        id: soar_core::arc::ProgramId(id),
        source: source.to_string(),
        provenance: soar_core::arc::Provenance::Sampled,
        origin: Default::default(),
    }
}
