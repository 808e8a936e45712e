use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How many training runs a hyperparameter search costs per extra loss weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RgraMode {
    /// Ten runs per weight, the others held fixed: divisor `10·(N−1)`.
    FixedOthers,
    /// Full grid over all weights: divisor `10^(N−1)`.
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgraInputs {
    pub a_opt: f64,
    pub a_source_only: f64,
    pub a_target_sup: f64,
    pub n_loss: u32,
    pub mode: RgraMode,
}

/// Relative gain over source-only, as a fraction of the supervised-target
/// headroom, divided by the search cost. Returned in percent.
pub fn compute_rgra(inp: &RgraInputs) -> Result<f64> {
    let headroom = inp.a_target_sup - inp.a_source_only;
    if headroom == 0.0 {
        return Err(Error::contract("supervised-target and source-only accuracies coincide"));
    }
    if inp.n_loss < 2 {
        return Err(Error::contract("n_loss must be at least 2"));
    }
    let runs = match inp.mode {
        RgraMode::FixedOthers => 10.0 * f64::from(inp.n_loss - 1),
        RgraMode::Greedy => 10f64.powi(inp.n_loss as i32 - 1),
    };
    Ok((inp.a_opt - inp.a_source_only) / headroom / runs * 100.0)
}

/// How a benchmark's "Average" RGRA cell was derived from the accuracies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingRule {
    /// Mean of the per-task RGRA values.
    MeanOfCells,
    /// RGRA of the accuracy tables' own "Average" column.
    AverageColumn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgraCell {
    pub method: String,
    pub task: String,
    pub mode: RgraMode,
    pub computed: f64,
    pub reported: f64,
    /// For average cells, the first rule whose value lies within tolerance.
    pub rule: Option<AveragingRule>,
    pub pass: bool,
}

struct Benchmark {
    tasks: &'static [&'static str],
    source_only: &'static [f64],
    target_sup: &'static [f64],
    /// `(method, N_loss, accuracies)`.
    methods: &'static [(&'static str, u32, &'static [f64])],
}

// Accuracies per task, with the table's own average column last.
const UCF_HMDB: Benchmark = Benchmark {
    tasks: &["U→H", "H→U"],
    source_only: &[80.3, 88.8, 84.5],
    target_sup: &[95.0, 96.9, 95.9],
    methods: &[("MetaTrans", 2, &[92.2, 99.0, 95.4]), ("TranSVAE", 5, &[87.8, 99.0, 93.4])],
};

const EPIC_KITCHENS: Benchmark = Benchmark {
    tasks: &["P08→P01", "P08→P22", "P01→P08", "P01→P22", "P22→P08", "P22→P01"],
    source_only: &[32.8, 34.1, 35.4, 39.1, 34.6, 35.8, 35.3],
    target_sup: &[64.0, 63.7, 57.0, 63.7, 57.0, 64.0, 61.5],
    methods: &[
        ("MetaTrans", 2, &[48.0, 50.4, 47.4, 56.6, 48.5, 55.1, 51.0]),
        ("TranSVAE", 5, &[50.5, 50.3, 50.3, 58.6, 48.0, 58.0, 52.6]),
    ],
};

/// Published RGRA cells per method: per-task values then the average.
fn reported(method: &str, mode: RgraMode, epic: bool) -> &'static [f64] {
    match (method, mode, epic) {
        ("MetaTrans", _, true) => &[4.87, 5.51, 5.56, 7.11, 6.21, 6.84, 6.02],
        ("MetaTrans", _, false) => &[8.11, 12.59, 10.35],
        ("TranSVAE", RgraMode::FixedOthers, true) => &[1.42, 1.37, 1.72, 1.98, 1.50, 1.97, 1.65],
        ("TranSVAE", RgraMode::FixedOthers, false) => &[1.27, 3.13, 1.94],
        ("TranSVAE", RgraMode::Greedy, true) => &[0.01; 7],
        ("TranSVAE", RgraMode::Greedy, false) => &[0.01; 3],
        _ => unreachable!("fixture methods are listed above"),
    }
}

/// Recomputes the MetaTrans and TranSVAE RGRA cells of both benchmarks from
/// the published accuracies and compares them with the published values.
pub fn reproduce_rgra_table(mode: RgraMode, tol: f64) -> Result<Vec<RgraCell>> {
    let mut cells = Vec::new();
    for (bench, epic) in [(&EPIC_KITCHENS, true), (&UCF_HMDB, false)] {
        let n = bench.tasks.len();
        for &(method, n_loss, acc) in bench.methods {
            let published = reported(method, mode, epic);
            let value = |i: usize| {
                compute_rgra(&RgraInputs {
                    a_opt: acc[i],
                    a_source_only: bench.source_only[i],
                    a_target_sup: bench.target_sup[i],
                    n_loss,
                    mode,
                })
            };
            let per_task = (0..n).map(value).collect::<Result<Vec<_>>>()?;
            for (i, task) in bench.tasks.iter().enumerate() {
                cells.push(RgraCell {
                    method: method.into(),
                    task: (*task).into(),
                    mode,
                    computed: per_task[i],
                    reported: published[i],
                    rule: None,
                    pass: (per_task[i] - published[i]).abs() <= tol,
                });
            }
            let candidates = [
                (AveragingRule::MeanOfCells, per_task.iter().sum::<f64>() / n as f64),
                (AveragingRule::AverageColumn, value(n)?),
            ];
            let target = published[n];
            let hit = candidates.iter().find(|(_, v)| (v - target).abs() <= tol);
            let (rule, computed) = match hit {
                Some(&(r, v)) => (Some(r), v),
                None => (None, candidates[0].1),
            };
            cells.push(RgraCell {
                method: method.into(),
                task: "Average".into(),
                mode,
                computed,
                reported: target,
                rule,
                pass: hit.is_some(),
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixed(a_opt: f64, a_so: f64, a_ts: f64, n_loss: u32) -> f64 {
        compute_rgra(&RgraInputs {
            a_opt,
            a_source_only: a_so,
            a_target_sup: a_ts,
            n_loss,
            mode: RgraMode::FixedOthers,
        })
        .unwrap()
    }

    #[test]
    fn published_examples() {
        assert!((fixed(99.0, 88.8, 96.9, 2) - 12.59).abs() < 0.005);
        assert!((fixed(58.6, 39.1, 63.7, 5) - 1.98).abs() < 0.005);
        assert_eq!(fixed(70.0, 70.0, 90.0, 4), 0.0);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let mut inp = RgraInputs {
            a_opt: 1.0,
            a_source_only: 2.0,
            a_target_sup: 2.0,
            n_loss: 2,
            mode: RgraMode::Greedy,
        };
        assert!(compute_rgra(&inp).is_err());
        inp.a_target_sup = 3.0;
        inp.n_loss = 1;
        assert!(compute_rgra(&inp).is_err());
    }

    #[test]
    fn modes_agree_for_two_losses() {
        let mut inp = RgraInputs {
            a_opt: 92.2,
            a_source_only: 80.3,
            a_target_sup: 95.0,
            n_loss: 2,
            mode: RgraMode::Greedy,
        };
        let g = compute_rgra(&inp).unwrap();
        inp.mode = RgraMode::FixedOthers;
        assert_eq!(g, compute_rgra(&inp).unwrap());
        inp.n_loss = 4;
        inp.mode = RgraMode::Greedy;
        // 30 runs against 1000
        assert!((compute_rgra(&inp).unwrap() * 1000.0 - g * 10.0).abs() < 1e-9);
    }

    #[test]
    fn published_table_is_reproduced() {
        for mode in [RgraMode::FixedOthers, RgraMode::Greedy] {
            let cells = reproduce_rgra_table(mode, 0.05).unwrap();
            assert_eq!(cells.len(), 2 * (7 + 3));
            for c in &cells {
                assert!(c.pass, "{c:?}");
            }
        }
        let cells = reproduce_rgra_table(RgraMode::FixedOthers, 0.05).unwrap();
        let avg = |m: &str, r: f64| cells.iter().find(|c| c.method == m && c.task == "Average" && c.reported == r).unwrap();
        assert_eq!(avg("MetaTrans", 10.35).rule, Some(AveragingRule::MeanOfCells));
        assert_eq!(avg("TranSVAE", 1.94).rule, Some(AveragingRule::AverageColumn));
    }

    proptest! {
        #[test]
        fn invariant_under_shared_affine_rescaling(
            a in 0.0f64..100.0, so in 0.0f64..100.0, ts in 0.0f64..100.0,
            scale in 0.1f64..10.0, shift in -50.0f64..50.0, n in 2u32..6,
        ) {
            prop_assume!((ts - so).abs() > 1e-3);
            let f = |x: f64| scale * x + shift;
            let base = fixed(a, so, ts, n);
            let moved = fixed(f(a), f(so), f(ts), n);
            prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
        }
    }
}
