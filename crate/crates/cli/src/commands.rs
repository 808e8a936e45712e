use std::path::{Path, PathBuf};

use serde::Serialize;

use metatrans::model::{read_checkpoint, write_checkpoint};
use metatrans::synth::{
    generate_domain_pair, read_feature_file, write_feature_file, DomainPair, GeneratorSpec, Split, StaticsFile,
};
use metatrans::train::{grid_search_lambda, paper_grid, EvalSets, ExperimentReport, TrainConfig, Trainer, Variant};
use metatrans::verify::{
    check_permutation_invariance, reproduce_rgra_table, summary_csv, temporal_mean, verify_theorem3,
    verify_theorem4, compute_rgra, RgraCell, RgraInputs, RgraMode, Theorem3Input, Theorem3Options,
    Theorem4Options, TheoremReport,
};
use metatrans::{Model64, ModelConfig, VideoSet};

use crate::config::{parse_grid, pick, RunConfig};
use crate::error::{usage, CliError, CliResult};
use crate::manifest::RunManifest;

pub const FEATURE_EXT: &str = "mtfv";
pub const STATICS_FILE: &str = "statics.json";
pub const CHECKPOINT_FILE: &str = "model.mtck";

/// Tolerance of the exact-arithmetic checks in 64-bit.
const INVARIANCE_TOL: f64 = 1e-9;
/// Tolerance on reproduced RGRA cells, in percentage points.
const RGRA_TOL: f64 = 0.05;
/// Slope window for a learned `M2`, which only needs to shrink with `T`.
const MODEL_SLOPE_RANGE: (f64, f64) = (-1.0, -0.25);

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<String>,
    pub variant: Option<String>,
}

/// Flags of `train` and `sweep`.
#[derive(Clone, Debug, Default)]
pub struct TrainFlags {
    pub data: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lambda1: Option<f64>,
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyFlags {
    pub theorem: Option<String>,
    pub oracle: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub samples: Option<usize>,
    pub frame: Option<usize>,
    pub table: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct RgraFlags {
    pub table: Option<String>,
    pub a_opt: Option<f64>,
    pub a_source_only: Option<f64>,
    pub a_target_sup: Option<f64>,
    pub n_loss: u32,
    pub mode: String,
}

struct Ctx {
    file: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> CliResult<Self> {
        let file = RunConfig::load(common.config.as_deref())?;
        let seed = pick(common.seed, file.seed).unwrap_or(0);
        let out = pick(common.out.clone(), file.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self { file, seed, out })
    }

    fn start(&self, subcommand: &str, common: &Common, effective: &impl Serialize) -> CliResult<()> {
        let text = serde_json::to_string(effective).expect("effective config serializes");
        RunManifest::new(subcommand, common.config.as_deref(), self.seed, &self.out, &text).write()
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        std::fs::write(&path, contents)?;
        Ok(path)
    }
}

fn feature_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.{FEATURE_EXT}"))
}

fn generator_spec(ctx: &Ctx) -> GeneratorSpec {
    let mut spec = ctx.file.generator.clone().unwrap_or_else(|| GeneratorSpec::benchmark(ctx.seed));
    spec.seed = ctx.seed;
    spec
}

fn describe(name: &str, set: &VideoSet<f64>) -> String {
    let mut counts = vec![0usize; set.labels.as_ref().map_or(0, |l| l.iter().max().map_or(0, |m| m + 1))];
    for &l in set.labels.iter().flatten() {
        counts[l] += 1;
    }
    format!("{name:<13} n={:<5} T={:<4} d={:<5} per-class {counts:?}", set.n, set.t, set.d)
}

pub fn cmd_generate(common: &Common) -> CliResult<()> {
    let ctx = Ctx::new(common)?;
    let spec = generator_spec(&ctx);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    ctx.start("generate", common, &spec)?;
    let pair = generate_domain_pair(&spec)?;
    for (name, split) in pair.splits() {
        write_feature_file(&split.set, feature_path(&ctx.out, name))?;
        println!("{}", describe(name, &split.set));
    }
    let statics = serde_json::to_string(&pair.statics_file()).expect("statics serialize");
    ctx.write(STATICS_FILE, &statics)?;
    println!("wrote 4 feature files and {STATICS_FILE} to {}", ctx.out.display());
    Ok(())
}

struct DataDir {
    source_train: VideoSet<f64>,
    source_eval: VideoSet<f64>,
    target_train: VideoSet<f64>,
    target_eval: VideoSet<f64>,
}

fn load_set(dir: &Path, name: &str) -> CliResult<VideoSet<f64>> {
    let path = feature_path(dir, name);
    if !path.is_file() {
        return Err(usage(format!("missing feature file {}", path.display())));
    }
    Ok(read_feature_file(&path)?)
}

fn load_data(dir: &Path) -> CliResult<DataDir> {
    Ok(DataDir {
        source_train: load_set(dir, "source_train")?,
        source_eval: load_set(dir, "source_eval")?,
        target_train: load_set(dir, "target_train")?,
        target_eval: load_set(dir, "target_eval")?,
    })
}

fn load_pair(dir: &Path) -> CliResult<DomainPair> {
    let data = load_data(dir)?;
    let path = dir.join(STATICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let statics: StaticsFile =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let split = |set: VideoSet<f64>, statics: Vec<Vec<f64>>| Split { set, statics };
    Ok(DomainPair {
        source_train: split(data.source_train, statics.source_train),
        source_eval: split(data.source_eval, statics.source_eval),
        target_train: split(data.target_train, statics.target_train),
        target_eval: split(data.target_eval, statics.target_eval),
    })
}

#[derive(Serialize)]
struct TrainEffective<'a> {
    data: &'a Path,
    train: &'a TrainConfig,
    grid: Option<&'a [f64]>,
}

fn train_config(ctx: &Ctx, common: &Common, flags: &TrainFlags, data: &DataDir) -> CliResult<TrainConfig> {
    let f = &ctx.file;
    let src = &data.source_train;
    if src.is_empty() {
        return Err(usage("source_train is empty"));
    }
    if data.target_train.d != src.d || data.target_train.t != src.t {
        return Err(usage("source and target feature files disagree on T or d"));
    }
    let classes = match pick(flags.classes, f.classes) {
        Some(k) => k,
        None => src
            .labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map(|m| m + 1)
            .ok_or_else(|| usage("source_train carries no labels"))?,
    };
    let preset = pick(common.preset.clone(), f.preset.clone()).unwrap_or_else(|| "desk".into());
    let mut cfg = TrainConfig::preset(&preset, src.d, src.t, classes)?;
    if preset == "paper" {
        // the published widths assume 2048-dimensional inputs
        cfg.model = ModelConfig { d: src.d, ..cfg.model };
    }
    if let Some(v) = pick(common.variant.clone(), f.variant.clone()) {
        cfg.variant = Variant::parse(&v).ok_or_else(|| usage(format!("unknown variant `{v}`")))?;
    }
    if let Some(e) = pick(flags.epochs, f.epochs) {
        cfg.epochs = e;
        cfg.pseudo_start_epoch = cfg.pseudo_start_epoch.min(e);
    }
    if let Some(p) = f.pseudo_start_epoch {
        cfg.pseudo_start_epoch = p;
    }
    cfg.lambda1 = pick(flags.lambda1, f.lambda1).unwrap_or(cfg.lambda1);
    cfg.learning_rate = f.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.weight_decay = f.weight_decay.unwrap_or(cfg.weight_decay);
    cfg.batch_size = f.batch_size.unwrap_or(cfg.batch_size);
    cfg.pseudo_threshold = f.pseudo_threshold.or(cfg.pseudo_threshold);
    cfg.seed = ctx.seed;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn data_dir(ctx: &Ctx, flag: &Option<PathBuf>) -> CliResult<PathBuf> {
    pick(flag.clone(), ctx.file.data.clone()).ok_or_else(|| usage("--data DIR is required"))
}

fn epochs_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("epoch,loss_cls,loss_adv,source_acc,target_acc,pseudo_active\n");
    for e in &report.epochs {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.4},{:.4},{}\n",
            e.epoch, e.loss_cls, e.loss_adv, e.source_acc, e.target_acc, e.pseudo_active
        ));
    }
    out
}

pub fn cmd_train(common: &Common, flags: &TrainFlags) -> CliResult<()> {
    let ctx = Ctx::new(common)?;
    let dir = data_dir(&ctx, &flags.data)?;
    let data = load_data(&dir)?;
    let cfg = train_config(&ctx, common, flags, &data)?;
    ctx.start("train", common, &TrainEffective { data: &dir, train: &cfg, grid: None })?;
    let eval = EvalSets {
        source: &data.source_eval,
        target: &data.target_eval,
    };
    let trainer = Trainer::new(&data.source_train, &data.target_train, cfg.clone())?;
    let (model, report) = trainer.run(&eval, |r, _| {
        log::info!(
            "epoch {:>3} cls {:.4} adv {:.4} src {:.2} tgt {:.2}",
            r.epoch,
            r.loss_cls,
            r.loss_adv,
            r.source_acc,
            r.target_acc
        );
        Ok(())
    })?;
    write_checkpoint(&model, ctx.out.join(CHECKPOINT_FILE))?;
    ctx.write("report.json", &report.to_json())?;
    ctx.write("epochs.csv", &epochs_csv(&report))?;
    let f = &report.final_;
    println!(
        "{} λ1={} source_acc {:.2} target_acc {:.2}",
        f.variant.name(),
        f.lambda1,
        f.source_acc,
        f.target_acc
    );
    Ok(())
}

pub fn cmd_sweep(common: &Common, flags: &TrainFlags, grid: Option<&str>) -> CliResult<()> {
    let ctx = Ctx::new(common)?;
    let dir = data_dir(&ctx, &flags.data)?;
    let data = load_data(&dir)?;
    let cfg = train_config(&ctx, common, flags, &data)?;
    let grid = match grid {
        Some(g) => parse_grid(g)?,
        None => ctx.file.grid.clone().unwrap_or_else(paper_grid),
    };
    if grid.is_empty() {
        return Err(usage("the λ1 grid is empty"));
    }
    ctx.start("sweep", common, &TrainEffective { data: &dir, train: &cfg, grid: Some(&grid) })?;
    let result = grid_search_lambda(&data.source_train, &data.target_train, &cfg, &grid, Some(&data.target_eval))?;
    ctx.write("sweep.csv", &result.to_csv())?;
    ctx.write("sweep.json", &serde_json::to_string_pretty(&result).expect("grid serializes"))?;
    print!("{}", result.to_csv());
    println!("best lambda1 {}", result.best_lambda);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Oracle {
    Mean,
    Exact,
    Model,
}

fn parse_oracle(s: &str) -> CliResult<Oracle> {
    match s {
        "mean" => Ok(Oracle::Mean),
        "exact" => Ok(Oracle::Exact),
        "model" => Ok(Oracle::Model),
        other => Err(usage(format!("unknown oracle `{other}` (mean, exact, model)"))),
    }
}

#[derive(Serialize)]
struct VerifyEffective {
    theorems: Vec<String>,
    oracle: Oracle,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    generator: Option<GeneratorSpec>,
    samples: Option<usize>,
    frame: Option<usize>,
    seed: u64,
}

fn load_model(path: &Path) -> CliResult<Model64> {
    if !path.is_file() {
        return Err(usage(format!("missing checkpoint {}", path.display())));
    }
    read_checkpoint(path).map_err(|e| usage(format!("checkpoint {}: {e}", path.display())))
}

fn rgra_report(mode: RgraMode) -> CliResult<(TheoremReport, Vec<RgraCell>)> {
    let cells = reproduce_rgra_table(mode, RGRA_TOL)?;
    let worst = cells.iter().map(|c| (c.computed - c.reported).abs()).fold(0.0, f64::max);
    let name = match mode {
        RgraMode::FixedOthers => "rgra_table3",
        RgraMode::Greedy => "rgra_table_b5_greedy",
    };
    let mut r = TheoremReport::new(name, cells.len(), worst, RGRA_TOL, cells.iter().all(|c| c.pass));
    r.notes = cells
        .iter()
        .map(|c| format!("{} {}: computed {:.3}, reported {:.2}", c.method, c.task, c.computed, c.reported))
        .collect();
    Ok((r, cells))
}

fn rgra_csv(cells: &[RgraCell]) -> String {
    let mut out = String::from("method,task,mode,computed,reported,rule,pass\n");
    for c in cells {
        let mode = match c.mode {
            RgraMode::FixedOthers => "fixed_others",
            RgraMode::Greedy => "greedy",
        };
        let rule = c.rule.map_or(String::new(), |r| {
            serde_json::to_value(r).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
        });
        out.push_str(&format!("{},{},{mode},{:.4},{:.2},{rule},{}\n", c.method, c.task, c.computed, c.reported, c.pass));
    }
    out
}

fn rgra_table(table: Option<&str>) -> CliResult<(Vec<TheoremReport>, Vec<RgraCell>)> {
    match table.unwrap_or("paper") {
        "paper" => {}
        other => return Err(usage(format!("unknown RGRA table `{other}` (paper)"))),
    }
    let (a, mut cells) = rgra_report(RgraMode::FixedOthers)?;
    let (b, greedy) = rgra_report(RgraMode::Greedy)?;
    cells.extend(greedy);
    Ok((vec![a, b], cells))
}

fn finish_reports(ctx: &Ctx, reports: &[TheoremReport]) -> CliResult<()> {
    ctx.write("verify.json", &serde_json::to_string_pretty(reports).expect("reports serialize"))?;
    ctx.write("verify.csv", &summary_csv(reports))?;
    let mut failed = Vec::new();
    for r in reports.iter().flat_map(TheoremReport::flatten) {
        println!(
            "{:<6} {:<40} trials {:>5} max_violation {:.3e} tol {:.1e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.theorem,
            r.trials,
            r.max_violation,
            r.tolerance
        );
        if !r.pass {
            failed.push(r.theorem.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}

pub fn cmd_verify(common: &Common, flags: &VerifyFlags) -> CliResult<()> {
    let ctx = Ctx::new(common)?;
    let f = &ctx.file;
    let theorem = pick(flags.theorem.clone(), f.theorem.clone()).unwrap_or_else(|| "all".into());
    let theorems: Vec<String> = match theorem.as_str() {
        "all" => ["1", "3", "4", "rgra"].map(String::from).to_vec(),
        "1" | "3" | "4" | "rgra" => vec![theorem.clone()],
        other => return Err(usage(format!("unknown theorem `{other}` (1, 3, 4, rgra, all)"))),
    };
    let oracle = parse_oracle(&pick(flags.oracle.clone(), f.oracle.clone()).unwrap_or_else(|| "mean".into()))?;
    let checkpoint = pick(flags.checkpoint.clone(), f.checkpoint.clone());
    let data = pick(flags.data.clone(), f.data.clone());
    let samples = pick(flags.samples, f.samples);
    let frame = pick(flags.frame, f.frame);
    if oracle == Oracle::Model && checkpoint.is_none() && theorems.iter().any(|t| t == "3" || t == "4") {
        return Err(usage("--oracle model needs --checkpoint"));
    }
    if oracle == Oracle::Exact && theorem == "4" {
        return Err(usage("theorem 4 has no exact oracle: the static is not observable from X"));
    }
    let model = checkpoint.as_deref().map(load_model).transpose()?;
    let generator = (data.is_none() && theorems.iter().any(|t| t == "3")).then(|| generator_spec(&ctx));
    let effective = VerifyEffective {
        theorems: theorems.clone(),
        oracle,
        checkpoint: checkpoint.clone(),
        data: data.clone(),
        generator: generator.clone(),
        samples,
        frame,
        seed: ctx.seed,
    };
    ctx.start("verify", common, &effective)?;

    let mut reports = Vec::new();
    let mut rgra_cells = Vec::new();
    for t in &theorems {
        match t.as_str() {
            "1" => {
                let random;
                let m = match &model {
                    Some(m) => m,
                    None => {
                        random = Model64::new(ModelConfig::desk(32, 16, 4), ctx.seed)?;
                        &random
                    }
                };
                let n = samples.unwrap_or(20);
                reports.push(check_permutation_invariance(m, n, n, INVARIANCE_TOL, ctx.seed)?);
            }
            "3" => {
                let pair = match (&data, &generator) {
                    (Some(dir), _) => load_pair(dir)?,
                    (None, Some(spec)) => generate_domain_pair(spec)?,
                    (None, None) => unreachable!("a generator is resolved whenever no data is given"),
                };
                let (src, tgt) = (&pair.source_eval, &pair.target_eval);
                let input = match oracle {
                    Oracle::Mean => Theorem3Input::mean_oracle(src, tgt)?,
                    Oracle::Exact => Theorem3Input::exact_oracle(src, tgt)?,
                    Oracle::Model => Theorem3Input::from_model(model.as_ref().expect("checked above"), src, tgt)?,
                };
                let opts = Theorem3Options {
                    seed: ctx.seed,
                    frame,
                    ..Theorem3Options::default()
                };
                reports.push(verify_theorem3(&input, &opts)?);
            }
            "4" => {
                let mut opts = Theorem4Options {
                    seed: ctx.seed,
                    ..Theorem4Options::oracle_defaults()
                };
                let report = match (oracle, &model) {
                    (Oracle::Model, Some(m)) => {
                        opts.d = m.config.d;
                        opts.n_samples = samples.unwrap_or(100);
                        opts.slope_range = MODEL_SLOPE_RANGE;
                        verify_theorem4(&|x, t| m.static_repr(x, t), &opts)?
                    }
                    _ => {
                        opts.n_samples = samples.unwrap_or(opts.n_samples);
                        verify_theorem4(&|x, t| temporal_mean(x, t), &opts)?
                    }
                };
                reports.push(report);
            }
            _ => {
                let (r, cells) = rgra_table(flags.table.as_deref())?;
                reports.extend(r);
                rgra_cells = cells;
            }
        }
    }
    if !rgra_cells.is_empty() {
        ctx.write("rgra.csv", &rgra_csv(&rgra_cells))?;
    }
    finish_reports(&ctx, &reports)
}

#[derive(Serialize)]
struct RgraEffective<'a> {
    table: Option<&'a str>,
    inputs: Option<RgraInputs>,
}

pub fn cmd_rgra(common: &Common, flags: &RgraFlags) -> CliResult<()> {
    let ctx = Ctx::new(common)?;
    let mode = match flags.mode.as_str() {
        "fixed_others" => RgraMode::FixedOthers,
        "greedy" => RgraMode::Greedy,
        other => return Err(usage(format!("unknown RGRA mode `{other}` (fixed_others, greedy)"))),
    };
    let inputs = match (flags.a_opt, flags.a_source_only, flags.a_target_sup) {
        (Some(a_opt), Some(a_source_only), Some(a_target_sup)) => Some(RgraInputs {
            a_opt,
            a_source_only,
            a_target_sup,
            n_loss: flags.n_loss,
            mode,
        }),
        (None, None, None) => None,
        _ => return Err(usage("--a-opt, --a-source-only and --a-target-sup go together")),
    };
    let table = match (&inputs, flags.table.as_deref()) {
        (None, None) => Some("paper"),
        (_, t) => t,
    };
    ctx.start("rgra", common, &RgraEffective { table, inputs })?;
    if let Some(inp) = inputs {
        let value = compute_rgra(&inp).map_err(|e| usage(e.to_string()))?;
        let json = serde_json::json!({ "inputs": inp, "rgra": value });
        ctx.write("rgra.json", &serde_json::to_string_pretty(&json).expect("rgra serializes"))?;
        println!("RGRA {value:.4}");
    }
    if let Some(t) = table {
        let (reports, cells) = rgra_table(Some(t))?;
        ctx.write("rgra_table.csv", &rgra_csv(&cells))?;
        ctx.write("rgra_table.json", &serde_json::to_string_pretty(&cells).expect("cells serialize"))?;
        print!("{}", rgra_csv(&cells));
        if let Some(bad) = reports.iter().find(|r| !r.pass) {
            return Err(CliError::CheckFailed(bad.theorem.clone()));
        }
    }
    Ok(())
}
