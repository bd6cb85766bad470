//! Experiment runner: pretraining, adaptation grids and reports.
//!
//! Output layout of a run directory:
//!
//! ```text
//! config.toml            configuration the grid ran with
//! base.ckpt              pretrained weights
//! pretrain_metrics.csv   per-sample source validation metrics
//! pretrain_loss.csv      step,loss
//! runs/<scheme>_seed<s>_T<t>.csv
//! ablation.csv           scheme,pa_mpjpe,mpjpe (medians over seeds)
//! steps.csv              scheme,steps,mpjpe,pa_mpjpe
//! loss_metric.csv        per-frame normalized 2D loss vs MPJPE for B1, B3, Final
//! report_long.csv        scheme,steps,metric,median,q1,q3,runs,diverged
//! summary.txt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{
    adapt_stream, diagnostics_csv, AdaptConfig, AdaptContext, FrameDiagnostics, Scheme, DIAGNOSTICS_HEADER,
};
use crate::body::{default_body, BodySpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{FrameMetrics, MetricsReport};
use crate::pretrain::{evaluate, pretrain, PretrainConfig, PretrainReport};
use crate::regressor::{init_weights, ModelWeights, RegressorSpec};
use crate::world::{make_source_dataset, make_target_stream, DomainConfig, SourceDataset, SourceSample, StreamShift};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodyConfig {
    pub joints: usize,
}

impl Default for BodyConfig {
    fn default() -> Self {
        Self {
            joints: crate::body::HUMANOID_JOINTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub source: DomainConfig,
    pub target: DomainConfig,
    pub source_size: usize,
    pub validation_size: usize,
    pub stream_length: usize,
    /// Seed of the source and validation sets; stream seeds come from the grid.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<StreamShift>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            source: DomainConfig::default(),
            target: DomainConfig::shifted(),
            source_size: 4000,
            validation_size: 300,
            stream_length: 500,
            seed: 1,
            shift: None,
        }
    }
}

/// A check evaluated on median stream MPJPE over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// `median(better) < (1 − margin)·median(worse)` at `steps`.
    Better {
        better: Scheme,
        worse: Scheme,
        #[serde(default)]
        margin: f64,
        #[serde(default = "one")]
        steps: usize,
    },
    /// The rise in median MPJPE from `from` to `to` inner steps is strictly
    /// larger for `single_level` than for `bilevel`.
    StepsOverfit {
        single_level: Scheme,
        bilevel: Scheme,
        from: usize,
        to: usize,
    },
    /// `median(scheme) ≤ (1 + tolerance)·median(reference)` at `steps`.
    NoHarm {
        scheme: Scheme,
        reference: Scheme,
        tolerance: f64,
        #[serde(default = "one")]
        steps: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
    pub steps: Vec<usize>,
    pub assertions: Vec<Assertion>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            schemes: Scheme::ABLATION.to_vec(),
            seeds: (0..5).collect(),
            steps: vec![1],
            assertions: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub body: BodyConfig,
    pub world: WorldConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub loss: LossWeights,
    pub experiment: GridConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::parse(line, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.source.validate()?;
        self.world.target.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.loss.validate()?;
        if self.world.source.distractors != self.world.target.distractors {
            return Err(Error::invalid(
                "source and target must have the same number of distractors",
            ));
        }
        if self.world.source_size == 0 || self.world.validation_size == 0 || self.world.stream_length == 0 {
            return Err(Error::invalid("dataset sizes and stream length must be at least 1"));
        }
        let g = &self.experiment;
        if g.seeds.is_empty() || g.schemes.is_empty() || g.steps.is_empty() {
            return Err(Error::invalid(
                "the grid needs at least one seed, scheme and step count",
            ));
        }
        if g.steps.contains(&0) {
            return Err(Error::invalid("inner step counts must be at least 1"));
        }
        Ok(())
    }

    pub fn body(&self) -> Result<BodySpec> {
        default_body(self.body.joints)
    }
}

fn mix(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Source training set and held-out validation set of a configuration.
pub struct SourceData {
    pub body: BodySpec,
    pub train: SourceDataset,
    pub validation: Vec<SourceSample>,
}

pub fn source_data(cfg: &ExperimentConfig) -> Result<SourceData> {
    let body = cfg.body()?;
    let w = &cfg.world;
    let train = make_source_dataset(&w.source, &body, w.source_size, mix(w.seed, 1))?;
    let validation = make_source_dataset(&w.source, &body, w.validation_size, mix(w.seed, 2))?.samples;
    Ok(SourceData {
        body,
        train,
        validation,
    })
}

pub struct PretrainOutcome {
    pub weights: ModelWeights,
    pub report: PretrainReport,
    pub validation: MetricsReport,
    /// Validation metrics of the untrained initialization.
    pub initial: MetricsReport,
}

pub fn pretrain_model(cfg: &ExperimentConfig, data: &SourceData) -> Result<PretrainOutcome> {
    let (weights, report) = pretrain(&data.body, &data.train.samples, &cfg.pretrain)?;
    let init = init_weights(weights.spec(), cfg.pretrain.seed);
    Ok(PretrainOutcome {
        validation: evaluate(&weights, &data.body, &data.validation)?,
        initial: evaluate(&init, &data.body, &data.validation)?,
        weights,
        report,
    })
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("base.ckpt")
}

/// Pretrains on the source domain and writes the checkpoint and metrics.
pub fn run_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let data = source_data(cfg)?;
    let outcome = pretrain_model(cfg, &data)?;
    let mut ckpt = Vec::new();
    outcome.weights.write_checkpoint(&mut ckpt)?;
    write_atomic(&checkpoint_path(out), &ckpt)?;
    write_atomic(
        &out.join("pretrain_metrics.csv"),
        outcome.validation.to_csv().as_bytes(),
    )?;
    let mut loss = String::from("step,loss\n");
    for (s, l) in &outcome.report.losses {
        let _ = writeln!(loss, "{s},{l:?}");
    }
    write_atomic(&out.join("pretrain_loss.csv"), loss.as_bytes())?;
    let summary = format!(
        "source validation (pretrained)\n{}\nsource validation (initialization)\n{}\n",
        outcome.validation.summary(),
        outcome.initial.summary()
    );
    write_atomic(&out.join("pretrain_summary.txt"), summary.as_bytes())?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    /// The run aborted at `frame` with a numerical failure.
    Diverged {
        frame: usize,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub scheme: Scheme,
    pub seed: u64,
    pub steps: usize,
    pub status: RunStatus,
    pub diagnostics: Vec<FrameDiagnostics>,
}

impl RunResult {
    fn mean(&self, f: impl Fn(&FrameMetrics) -> f64) -> f64 {
        match self.status {
            RunStatus::Diverged { .. } => f64::INFINITY,
            RunStatus::Completed if self.diagnostics.is_empty() => 0.0,
            RunStatus::Completed => {
                self.diagnostics.iter().map(|d| f(&d.metrics)).sum::<f64>() / self.diagnostics.len() as f64
            }
        }
    }

    /// Mean MPJPE over the stream; infinite for a diverged run.
    pub fn mpjpe(&self) -> f64 {
        self.mean(|m| m.mpjpe)
    }

    pub fn pa_mpjpe(&self) -> f64 {
        self.mean(|m| m.pa_mpjpe)
    }

    /// Mean PCK over the stream; zero for a diverged run.
    pub fn pck(&self) -> f64 {
        match self.status {
            RunStatus::Diverged { .. } => 0.0,
            RunStatus::Completed => self.mean(|m| m.pck),
        }
    }

    pub fn file_name(&self) -> String {
        run_file_name(self.scheme, self.seed, self.steps)
    }
}

pub fn run_file_name(scheme: Scheme, seed: u64, steps: usize) -> String {
    format!("{scheme}_seed{seed}_T{steps}.csv")
}

/// Seed of the target stream for grid seed `seed`.
pub fn stream_seed(seed: u64) -> u64 {
    mix(seed, 3)
}

/// Runs every (scheme, seed, T) of the grid on the configured target streams.
/// Runs are independent and executed on all available cores; the result order
/// is the grid order.
pub fn run_grid(cfg: &ExperimentConfig, base: &ModelWeights, data: &SourceData) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let g = &cfg.experiment;
    let streams = g
        .seeds
        .iter()
        .map(|&s| {
            make_target_stream(
                &cfg.world.target,
                &data.body,
                cfg.world.stream_length,
                stream_seed(s),
                cfg.world.shift.as_ref(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for &scheme in &g.schemes {
        for &steps in &g.steps {
            for (si, &seed) in g.seeds.iter().enumerate() {
                jobs.push((scheme, steps, seed, si));
            }
        }
    }
    let ctx = AdaptContext {
        body: &data.body,
        source: &data.train,
        loss: &cfg.loss,
    };
    let run_one = |&(scheme, steps, seed, si): &(Scheme, usize, u64, usize)| -> Result<RunResult> {
        let acfg = AdaptConfig {
            scheme,
            steps,
            seed: mix(seed, 4),
            ..cfg.adapt.clone()
        };
        let stream = &streams[si];
        let (status, diagnostics) = match adapt_stream(base, stream, ctx, &acfg) {
            Ok(run) => (RunStatus::Completed, run.diagnostics),
            Err(Error::Frame { frame, source }) if matches!(source.root(), Error::Numerical { .. }) => {
                // keep the frames that completed
                let partial = adapt_stream(base, &stream[..frame], ctx, &acfg)?;
                (
                    RunStatus::Diverged {
                        frame,
                        message: source.to_string(),
                    },
                    partial.diagnostics,
                )
            }
            Err(e) => return Err(e),
        };
        Ok(RunResult {
            scheme,
            seed,
            steps,
            status,
            diagnostics,
        })
    };
    parallel_map(&jobs, run_one).into_iter().collect()
}

fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                done.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

fn status_text(status: &RunStatus) -> String {
    match status {
        RunStatus::Completed => "completed".to_string(),
        RunStatus::Diverged { frame, .. } => format!("diverged@{frame}"),
    }
}

/// Run CSV: a `#` header line with run metadata, then the diagnostics table.
pub fn run_csv(run: &RunResult, config_hash: &str) -> String {
    let mut out = format!(
        "# config_hash={config_hash},scheme={},seed={},steps={},version={VERSION},status={}\n",
        run.scheme,
        run.seed,
        run.steps,
        status_text(&run.status)
    );
    out.push_str(&diagnostics_csv(&run.diagnostics));
    out
}

/// Median and interquartile range of a metric over the seeds of one group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    if lo == hi || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "spread of an empty group");
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub scheme: Scheme,
    pub steps: usize,
    pub runs: usize,
    pub diverged: usize,
    pub mpjpe: Spread,
    pub pa_mpjpe: Spread,
    pub pck: Spread,
}

/// Per-run stream averages, as read back from disk or taken from memory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub scheme: Scheme,
    pub seed: u64,
    pub steps: usize,
    pub diverged: bool,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pck: f64,
}

impl From<&RunResult> for RunSummary {
    fn from(r: &RunResult) -> Self {
        Self {
            scheme: r.scheme,
            seed: r.seed,
            steps: r.steps,
            diverged: r.status != RunStatus::Completed,
            mpjpe: r.mpjpe(),
            pa_mpjpe: r.pa_mpjpe(),
            pck: r.pck(),
        }
    }
}

/// Groups runs by (scheme, T); groups are sorted by scheme then T.
pub fn aggregate(runs: &[RunSummary]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(Scheme, usize), Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.scheme, r.steps)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((scheme, steps), rs)| {
            let col = |f: fn(&RunSummary) -> f64| Spread::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            GroupSummary {
                scheme,
                steps,
                runs: rs.len(),
                diverged: rs.iter().filter(|r| r.diverged).count(),
                mpjpe: col(|r| r.mpjpe),
                pa_mpjpe: col(|r| r.pa_mpjpe),
                pck: col(|r| r.pck),
            }
        })
        .collect()
}

fn find(groups: &[GroupSummary], scheme: Scheme, steps: usize) -> Option<&GroupSummary> {
    groups.iter().find(|g| g.scheme == scheme && g.steps == steps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssertionOutcome {
    pub assertion: Assertion,
    pub passed: bool,
    pub detail: String,
}

pub fn check_assertion(a: &Assertion, groups: &[GroupSummary]) -> AssertionOutcome {
    let med = |s: Scheme, t: usize| find(groups, s, t).map(|g| g.mpjpe.median);
    let missing = |what: String| AssertionOutcome {
        assertion: a.clone(),
        passed: false,
        detail: format!("missing results for {what}"),
    };
    let (passed, detail) = match *a {
        Assertion::Better {
            better,
            worse,
            margin,
            steps,
        } => {
            let (Some(b), Some(w)) = (med(better, steps), med(worse, steps)) else {
                return missing(format!("{better}/{worse} at T={steps}"));
            };
            let rel = if w.is_finite() { (w - b) / w } else { f64::INFINITY };
            (
                b < (1.0 - margin) * w,
                format!("{better} {b:.5} vs {worse} {w:.5}: relative improvement {rel:.4}, required > {margin}"),
            )
        }
        Assertion::StepsOverfit {
            single_level,
            bilevel,
            from,
            to,
        } => {
            let (Some(s0), Some(s1), Some(b0), Some(b1)) = (
                med(single_level, from),
                med(single_level, to),
                med(bilevel, from),
                med(bilevel, to),
            ) else {
                return missing(format!("{single_level}/{bilevel} at T={from},{to}"));
            };
            let (ds, db) = (s1 - s0, b1 - b0);
            (
                ds > db,
                format!("T={from}->{to}: {single_level} change {ds:.5}, {bilevel} change {db:.5}"),
            )
        }
        Assertion::NoHarm {
            scheme,
            reference,
            tolerance,
            steps,
        } => {
            let (Some(s), Some(r)) = (med(scheme, steps), med(reference, steps)) else {
                return missing(format!("{scheme}/{reference} at T={steps}"));
            };
            (
                s <= (1.0 + tolerance) * r,
                format!(
                    "{scheme} {s:.5} vs {reference} {r:.5}: ratio {:.4}, allowed {:.4}",
                    s / r,
                    1.0 + tolerance
                ),
            )
        }
    };
    AssertionOutcome {
        assertion: a.clone(),
        passed,
        detail,
    }
}

pub struct AdaptOutcome {
    pub runs: Vec<RunResult>,
    pub groups: Vec<GroupSummary>,
}

impl AdaptOutcome {
    pub fn diverged(&self) -> usize {
        self.runs.iter().filter(|r| r.status != RunStatus::Completed).count()
    }
}

fn ablation_csv(groups: &[GroupSummary], steps: usize) -> String {
    let mut out = String::from("scheme,pa_mpjpe,mpjpe\n");
    for g in groups.iter().filter(|g| g.steps == steps) {
        let _ = writeln!(out, "{},{:?},{:?}", g.scheme, g.pa_mpjpe.median, g.mpjpe.median);
    }
    out
}

fn steps_csv(groups: &[GroupSummary]) -> String {
    let mut out = String::from("scheme,steps,mpjpe,pa_mpjpe\n");
    for g in groups {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?}",
            g.scheme, g.steps, g.mpjpe.median, g.pa_mpjpe.median
        );
    }
    out
}

fn loss_metric_csv(runs: &[RunResult]) -> String {
    let mut out = String::from("scheme,seed,steps,frame,normalized_2d,mpjpe\n");
    for r in runs
        .iter()
        .filter(|r| matches!(r.scheme, Scheme::B1 | Scheme::B3 | Scheme::Final))
    {
        for d in &r.diagnostics {
            let _ = writeln!(
                out,
                "{},{},{},{},{:?},{:?}",
                r.scheme, r.seed, r.steps, d.frame, d.normalized_2d, d.metrics.mpjpe
            );
        }
    }
    out
}

/// Runs the grid from the checkpoint in `out` and writes per-run and
/// aggregate CSVs.
pub fn run_adapt(cfg: &ExperimentConfig, base: &ModelWeights, out: &Path) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let data = source_data(cfg)?;
    let spec = RegressorSpec::new(
        cfg.world.target.observation_dim(&data.body),
        base.spec().hidden.clone(),
        data.body.joint_count(),
    )?;
    if base.spec() != &spec {
        return Err(Error::invalid(
            "checkpoint does not match the configured body and observation size",
        ));
    }
    let runs = run_grid(cfg, base, &data)?;
    let hash = cfg.hash();
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    for r in &runs {
        write_atomic(&out.join("runs").join(r.file_name()), run_csv(r, &hash).as_bytes())?;
    }
    let groups = aggregate(&runs.iter().map(RunSummary::from).collect::<Vec<_>>());
    let table_steps = if cfg.experiment.steps.contains(&cfg.adapt.steps) {
        cfg.adapt.steps
    } else {
        cfg.experiment.steps[0]
    };
    write_atomic(&out.join("ablation.csv"), ablation_csv(&groups, table_steps).as_bytes())?;
    write_atomic(&out.join("steps.csv"), steps_csv(&groups).as_bytes())?;
    write_atomic(&out.join("loss_metric.csv"), loss_metric_csv(&runs).as_bytes())?;
    Ok(AdaptOutcome { runs, groups })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    let file =
        fs::File::open(path).map_err(|e| Error::invalid(format!("cannot open checkpoint {}: {e}", path.display())))?;
    ModelWeights::read_checkpoint(std::io::BufReader::new(file))
}

/// Reads one run CSV back into its stream averages.
pub fn parse_run_csv(text: &str) -> Result<RunSummary> {
    let mut lines = text.lines();
    let meta = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| Error::parse(1, "missing metadata line"))?;
    let mut fields = BTreeMap::new();
    for kv in meta.split(',') {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("malformed metadata field {kv:?}")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::parse(1, format!("missing {k}")))
    };
    let scheme: Scheme = get("scheme")?
        .parse()
        .map_err(|e: Error| Error::parse(1, e.to_string()))?;
    let seed: u64 = get("seed")?.parse().map_err(|_| Error::parse(1, "bad seed"))?;
    let steps: usize = get("steps")?.parse().map_err(|_| Error::parse(1, "bad steps"))?;
    let status = get("status")?;
    let diverged = match status {
        "completed" => false,
        s if s.starts_with("diverged@") => true,
        s => return Err(Error::parse(1, format!("unknown status {s:?}"))),
    };
    if lines.next() != Some(DIAGNOSTICS_HEADER) {
        return Err(Error::parse(2, "unexpected column header"));
    }
    let ncols = DIAGNOSTICS_HEADER.split(',').count();
    let (mut sum, mut n) = ([0.0; 3], 0usize);
    for (i, line) in lines.enumerate() {
        let row = i + 3;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != ncols {
            return Err(Error::parse(
                row,
                format!("expected {ncols} fields, found {}", cols.len()),
            ));
        }
        let num = |j: usize| {
            cols[j]
                .parse::<f64>()
                .map_err(|_| Error::parse(row, format!("column {j}: not a number: {:?}", cols[j])))
        };
        sum[0] += num(9)?;
        sum[1] += num(10)?;
        sum[2] += num(11)?;
        n += 1;
    }
    let mean = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
    Ok(RunSummary {
        scheme,
        seed,
        steps,
        diverged,
        mpjpe: if diverged { f64::INFINITY } else { mean(sum[0]) },
        pa_mpjpe: if diverged { f64::INFINITY } else { mean(sum[1]) },
        pck: if diverged { 0.0 } else { mean(sum[2]) },
    })
}

pub struct Report {
    pub groups: Vec<GroupSummary>,
    pub assertions: Vec<AssertionOutcome>,
    pub summary: String,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

fn long_csv(groups: &[GroupSummary]) -> String {
    let mut out = String::from("scheme,steps,metric,median,q1,q3,runs,diverged\n");
    for g in groups {
        for (name, s) in [("mpjpe", g.mpjpe), ("pa_mpjpe", g.pa_mpjpe), ("pck", g.pck)] {
            let _ = writeln!(
                out,
                "{},{},{name},{:?},{:?},{:?},{},{}",
                g.scheme, g.steps, s.median, s.q1, s.q3, g.runs, g.diverged
            );
        }
    }
    out
}

fn summary_text(groups: &[GroupSummary], assertions: &[AssertionOutcome]) -> String {
    let mut out = format!(
        "{:<13} {:>3} {:>5} {:>22} {:>22} {:>8}\n",
        "scheme", "T", "runs", "MPJPE med [q1, q3]", "PA-MPJPE med [q1, q3]", "PCK"
    );
    for g in groups {
        let _ = writeln!(
            out,
            "{:<13} {:>3} {:>5} {:>8.4} [{:.4}, {:.4}] {:>8.4} [{:.4}, {:.4}] {:>8.3}{}",
            g.scheme.to_string(),
            g.steps,
            g.runs,
            g.mpjpe.median,
            g.mpjpe.q1,
            g.mpjpe.q3,
            g.pa_mpjpe.median,
            g.pa_mpjpe.q1,
            g.pa_mpjpe.q3,
            g.pck.median,
            if g.diverged > 0 {
                format!("  ({} diverged)", g.diverged)
            } else {
                String::new()
            }
        );
    }
    for a in assertions {
        let _ = writeln!(out, "[{}] {}", if a.passed { "PASS" } else { "FAIL" }, a.detail);
    }
    out
}

/// Aggregates the run CSVs of a results directory, writes the long-format CSV
/// and summary, and evaluates the assertions of the saved configuration.
pub fn emit_report(dir: &Path) -> Result<Report> {
    let runs_dir = dir.join("runs");
    let mut paths: Vec<PathBuf> = match fs::read_dir(&runs_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no run CSVs in {}", runs_dir.display())));
    }
    let runs = paths
        .iter()
        .map(|p| {
            parse_run_csv(&fs::read_to_string(p)?).map_err(|e| match e {
                Error::Parse { line, message } => Error::parse(line, format!("{}: {message}", p.display())),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let groups = aggregate(&runs);
    let config_path = dir.join("config.toml");
    let assertions = if config_path.exists() {
        ExperimentConfig::load(&config_path)?.experiment.assertions
    } else {
        Vec::new()
    };
    let outcomes: Vec<AssertionOutcome> = assertions.iter().map(|a| check_assertion(a, &groups)).collect();
    let summary = summary_text(&groups, &outcomes);
    write_atomic(&dir.join("report_long.csv"), long_csv(&groups).as_bytes())?;
    write_atomic(&dir.join("summary.txt"), summary.as_bytes())?;
    Ok(Report {
        groups,
        assertions: outcomes,
        summary,
    })
}
