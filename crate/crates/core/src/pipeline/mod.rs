//! The bias identification and mitigation procedure.
//!
//! Stage outputs are content-addressed: every dataset and model lives in a
//! cache directory named by a hash of the inputs that determine it, so reruns
//! reuse whatever is unchanged.

pub mod config;
pub mod summary;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{parse_stage_list, read_config, Bounds, ExperimentConfig, StageId, CONFIG_HEADER};
pub use summary::{bias_gap, ratio, summarize, BiasSummary, Check, Mitigation, Ratio};

use crate::dataset::{mix_datasets, read_manifest, write_manifest, ClassSet, ConditionTag, DatasetManifest};
use crate::detector::{load_model, save_model, train, Architecture, ModelState, TrainConfig};
use crate::error::{io_err, PipelineError};
use crate::evaluation::{evaluate, render_report_table, DetectionSource, EvalReport, TableFormat};
use crate::imaging::{corrupt_dataset, CorruptionChain};
use crate::rng::{derive_seed, sha256_hex};
use crate::scenegen::{generate_dataset, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
}

impl Family {
    fn name(self) -> &'static str {
        match self {
            Family::A => "A",
            Family::B => "B",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

/// A dataset materialized in the cache.
#[derive(Clone, Debug)]
pub struct DatasetArtifact {
    pub id: String,
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

#[derive(Clone, Debug)]
pub struct ModelArtifact {
    pub id: String,
    pub path: PathBuf,
    pub model: ModelState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageResult {
    /// Row key such as `A/stage1` or `A/tech2`.
    pub key: String,
    pub stage: StageId,
    pub family: Family,
    pub train_set: String,
    pub test_set: String,
    pub report: EvalReport,
    /// Checkpoint path relative to the output directory.
    pub checkpoint: String,
    #[serde(skip)]
    pub seconds: f64,
}

impl PartialEq for StageResult {
    /// Wall-clock time is not part of a result.
    fn eq(&self, other: &Self) -> bool {
        (&self.key, self.stage, self.family, &self.train_set, &self.test_set, &self.report, &self.checkpoint)
            == (&other.key, other.stage, other.family, &other.train_set, &other.test_set, &other.report, &other.checkpoint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_id: String,
    pub stages: Vec<StageResult>,
    pub bias: BiasSummary,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Content-addressed directory store. `reuse = false` rebuilds every entry
/// once per run.
struct Store {
    root: PathBuf,
    reuse: bool,
    built: HashSet<String>,
}

const DONE_MARKER: &str = ".complete";

impl Store {
    fn slot(&self, kind: &str, key: &impl Serialize) -> (String, PathBuf) {
        let json = serde_json::to_string(key).expect("cache keys serialize");
        let id = format!("{kind}-{}", &sha256_hex(format!("{kind}\n{json}").as_bytes())[..16]);
        let dir = self.root.join(&id);
        (id, dir)
    }

    fn ensure(
        &mut self,
        kind: &str,
        key: &impl Serialize,
        build: impl FnOnce(&Path) -> Result<(), PipelineError>,
    ) -> Result<(String, PathBuf, bool), PipelineError> {
        let (id, dir) = self.slot(kind, key);
        let done = dir.join(DONE_MARKER);
        if (self.reuse || self.built.contains(&id)) && done.exists() {
            return Ok((id, dir, true));
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err::<PipelineError>(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err::<PipelineError>(&dir))?;
        build(&dir)?;
        fs::write(&done, b"").map_err(io_err::<PipelineError>(&done))?;
        self.built.insert(id.clone());
        Ok((id, dir, false))
    }
}

/// Progress messages go here; the CLI prints them to stderr.
pub type Logger<'a> = &'a mut dyn FnMut(&str);

struct Runner<'a, 'l> {
    cfg: &'a ExperimentConfig,
    store: Store,
    log: Logger<'l>,
}

fn stage_error(stage: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage: stage.to_string(), message: e.to_string() }
}

impl Runner<'_, '_> {
    fn scene_spec(&self, family: Family, split: Split) -> SceneSpec {
        let base = match family {
            Family::A => &self.cfg.scenes.clean_a,
            Family::B => &self.cfg.scenes.clean_b,
        };
        let label = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        SceneSpec { seed: derive_seed(base.seed, label), ..base.clone() }
    }

    fn clean(&mut self, family: Family, split: Split) -> Result<DatasetArtifact, PipelineError> {
        let spec = self.scene_spec(family, split);
        let n = match split {
            Split::Train => self.cfg.data.train_size,
            Split::Test => self.cfg.data.test_size,
        };
        let (id, dir, cached) = self.store.ensure("clean", &(&spec, n), |dir| {
            generate_dataset(&spec, n, dir)?;
            Ok(())
        })?;
        (self.log)(&format!("  dataset {id} ({n} {} scenes, family {}){}", if split == Split::Train { "train" } else { "test" }, family.name(), cached_note(cached)));
        let manifest = read_manifest(&dir.join("manifest.tsv"))?;
        Ok(DatasetArtifact { id, dir, manifest })
    }

    fn corrupted(&mut self, base: &DatasetArtifact, chain: &CorruptionChain) -> Result<DatasetArtifact, PipelineError> {
        let (id, dir, cached) = self.store.ensure("corrupt", &(&base.id, chain.to_string()), |dir| {
            let m = corrupt_dataset(&base.manifest, chain, &dir.join("images"))?;
            write_manifest(&m, &dir.join("manifest.tsv"))?;
            Ok(())
        })?;
        (self.log)(&format!("  dataset {id} ({} applied to {}){}", chain.tag(), base.id, cached_note(cached)));
        let manifest = read_manifest(&dir.join("manifest.tsv"))?;
        Ok(DatasetArtifact { id, dir, manifest })
    }

    fn mixed(&mut self, clean: &DatasetArtifact, corrupted: &DatasetArtifact, family: Family) -> Result<DatasetArtifact, PipelineError> {
        let fraction = self.cfg.mix_fraction;
        let seed = derive_seed(self.cfg.seed, &format!("mix/{}", family.name()));
        let (id, dir, _) = self.store.ensure("mix", &(&clean.id, &corrupted.id, fraction, seed), |dir| {
            let m = mix_datasets(&clean.manifest, &corrupted.manifest, fraction, seed)?;
            write_manifest(&m, &dir.join("manifest.tsv"))?;
            Ok(())
        })?;
        let manifest = read_manifest(&dir.join("manifest.tsv"))?;
        Ok(DatasetArtifact { id, dir, manifest })
    }

    fn init_model(&self, family: Family) -> Result<ModelState, PipelineError> {
        let seed = derive_seed(self.cfg.seed, &format!("init/{}", family.name()));
        Ok(ModelState::init(Architecture::desk_scale(ClassSet::canonical().len()), ClassSet::canonical(), seed)?)
    }

    fn trained(
        &mut self,
        data: &DatasetArtifact,
        train_cfg: &TrainConfig,
        start: Option<&ModelArtifact>,
        family: Family,
    ) -> Result<ModelArtifact, PipelineError> {
        let init = match start {
            Some(m) => m.model.clone(),
            None => self.init_model(family)?,
        };
        let init_id = match start {
            Some(m) => m.id.clone(),
            None => sha256_hex(&crate::detector::checkpoint::encode_model(&init))[..16].to_string(),
        };
        let key = (&data.id, &init_id, train_cfg);
        let t0 = Instant::now();
        let (id, dir, cached) = self.store.ensure("model", &key, |dir| {
            let out = train(&init, &data.manifest, train_cfg)?;
            save_model(&out.model, &dir.join("model.wbh"))?;
            let trace = serde_json::to_string(&out.loss_trace).expect("trace serializes");
            let p = dir.join("loss_trace.json");
            fs::write(&p, trace).map_err(io_err::<PipelineError>(&p))?;
            Ok(())
        })?;
        (self.log)(&format!(
            "  model {id} ({} steps on {}){} {:.1}s",
            train_cfg.steps,
            data.id,
            cached_note(cached),
            t0.elapsed().as_secs_f64()
        ));
        let path = dir.join("model.wbh");
        let model = load_model(&path)?;
        Ok(ModelArtifact { id, path, model })
    }

    /// The stage-1 model for `family`, trained now or taken from the cache.
    fn stage1_model(&mut self, family: Family, train_set: &DatasetArtifact, may_train: bool) -> Result<ModelArtifact, PipelineError> {
        if !may_train {
            let init = self.init_model(family)?;
            let init_id = sha256_hex(&crate::detector::checkpoint::encode_model(&init))[..16].to_string();
            let (_, dir) = self.store.slot("model", &(&train_set.id, &init_id, &self.cfg.train));
            if !dir.join(DONE_MARKER).exists() {
                return Err(stage_error(
                    "stage1",
                    "this stage needs the stage-1 checkpoint; add stage1 to the stage list or run it first with the cache enabled",
                ));
            }
        }
        let cfg = self.cfg.train.clone();
        self.trained(train_set, &cfg, None, family)
    }

    fn eval(&self, model: &ModelArtifact, test: &DatasetArtifact, label: &str) -> Result<EvalReport, PipelineError> {
        Ok(evaluate(DetectionSource::Model(&model.model), &test.manifest, &self.cfg.eval, label)?)
    }
}

fn cached_note(cached: bool) -> &'static str {
    if cached {
        " [cached]"
    } else {
        ""
    }
}

fn row_label(key: &str) -> String {
    match key {
        "A/tech1" => "Technique 1: fine-tuning".into(),
        "A/tech2" => "Technique 2: double Gaussian blurring".into(),
        _ => {
            let (fam, stage) = key.split_once('/').unwrap_or(("A", key));
            let what = match stage {
                "stage1" => "Stage 1: trained clean, tested clean",
                "stage2" => "Stage 2: trained clean, tested target",
                _ => "Stage 3: trained mixed, tested target",
            };
            format!("{what} [{fam}]")
        }
    }
}

/// File names of every image a manifest refers to.
fn file_names(m: &DatasetManifest) -> BTreeSet<String> {
    m.records
        .iter()
        .filter_map(|r| r.image_path.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect()
}

/// Confirms that `train` shares no image identity with `test` and, when
/// `forbidden` is given, reads nothing from those dataset directories or
/// with that condition tag.
pub fn split_hygiene(
    train: &DatasetManifest,
    test: &DatasetManifest,
    forbidden: &[&Path],
    forbidden_tag: Option<&ConditionTag>,
) -> Result<(), String> {
    let shared: Vec<String> = file_names(train).intersection(&file_names(test)).cloned().collect();
    if let Some(name) = shared.first() {
        return Err(format!("{} image(s) appear in both training and test data, e.g. {name}", shared.len()));
    }
    for r in &train.records {
        if forbidden.iter().any(|dir| r.image_path.starts_with(dir)) {
            return Err(format!("training image {} lies in a target-condition dataset", r.image_path.display()));
        }
        if Some(&r.condition) == forbidden_tag {
            return Err(format!("training image {} carries the target condition {}", r.image_path.display(), r.condition));
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err::<PipelineError>(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn map_of<'a>(results: &'a [StageResult], key: &str) -> Option<&'a EvalReport> {
    results.iter().find(|r| r.key == key).map(|r| &r.report)
}

/// Applies the configured bounds to whatever stages ran.
pub fn check_bounds(results: &[StageResult], bounds: &Bounds) -> Vec<Check> {
    let m = |k: &str| map_of(results, k).map(|r| r.map);
    let mut checks = Vec::new();
    for fam in ["A", "B"] {
        let (s1, s2) = (m(&format!("{fam}/stage1")), m(&format!("{fam}/stage2")));
        if let Some(s1) = s1 {
            checks.push(Check::new(
                format!("{fam}: stage1 mAP >= {}", bounds.stage1_min_map),
                s1 >= bounds.stage1_min_map,
                format!("{s1:.2}"),
            ));
        }
        if let (Some(s1), Some(s2)) = (s1, s2) {
            checks.push(Check::new(
                format!("{fam}: stage2 mAP <= {} x stage1", bounds.stage2_max_fraction),
                s2 <= bounds.stage2_max_fraction * s1,
                format!("{s2:.2} vs {s1:.2}"),
            ));
        }
    }
    let s2 = m("A/stage2");
    if let (Some(s3), Some(s2)) = (m("A/stage3"), s2) {
        checks.push(Check::new("A: stage3 mAP >= stage2", s3 >= s2, format!("{s3:.2} vs {s2:.2}")));
    }
    if let (Some(t1), Some(s2)) = (m("A/tech1"), s2) {
        checks.push(Check::new("tech1 mAP > stage2", t1 > s2, format!("{t1:.2} vs {s2:.2}")));
    }
    if let (Some(t2), Some(s2)) = (m("A/tech2"), s2) {
        checks.push(Check::new(
            format!("tech2 mAP >= {} x stage2", bounds.tech2_min_ratio),
            t2 >= bounds.tech2_min_ratio * s2,
            format!("{t2:.2} vs {s2:.2}"),
        ));
    }
    checks
}

fn table(results: &[StageResult], keys: &[&str], format: TableFormat) -> Result<String, PipelineError> {
    let reports: Vec<EvalReport> = keys.iter().filter_map(|k| map_of(results, k).cloned()).collect();
    Ok(render_report_table(&reports, ClassSet::canonical().names(), format)?)
}

const TABLE1: [&str; 6] = ["A/stage1", "A/stage2", "A/stage3", "B/stage1", "B/stage2", "B/stage3"];
const TABLE2: [&str; 3] = ["A/stage2", "A/tech1", "A/tech2"];

/// Writes tables, summary, timings and the artifact list for the stages
/// completed so far.
fn finalize(cfg: &ExperimentConfig, results: &[StageResult], extra: &[Check]) -> Result<ExperimentSummary, PipelineError> {
    let out = &cfg.output_dir;
    let r = |k: &str| map_of(results, k);
    let techniques: Vec<(&str, &EvalReport)> =
        [("tech1", "A/tech1"), ("tech2", "A/tech2")].iter().filter_map(|(n, k)| Some((*n, r(k)?))).collect();
    let bias = summarize(r("A/stage1"), r("A/stage2"), r("B/stage1"), r("B/stage2"), &techniques);
    let mut checks = check_bounds(results, &cfg.bounds);
    checks.extend(extra.iter().cloned());
    let summary = ExperimentSummary {
        config_id: cfg.result_id(),
        stages: results.to_vec(),
        bias,
        passed: checks.iter().all(|c| c.passed),
        checks,
    };

    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<(), PipelineError> {
        write_file(&out.join(name), body.as_bytes())?;
        written.push(name.to_string());
        Ok(())
    };
    for (name, keys) in [("table1", &TABLE1[..]), ("table2", &TABLE2[..])] {
        emit(&format!("{name}.md"), table(results, keys, TableFormat::Markdown)?)?;
        emit(&format!("{name}.csv"), table(results, keys, TableFormat::Csv)?)?;
    }
    emit("summary.json", serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    let timings: BTreeMap<&str, f64> = results.iter().map(|r| (r.key.as_str(), r.seconds)).collect();
    write_file(&out.join("timings.json"), (serde_json::to_string_pretty(&timings).unwrap() + "\n").as_bytes())?;

    let mut files: Vec<String> = written;
    for r in results {
        files.push(format!("stages/{}/report.json", r.key.replace('/', "-")));
        if !files.contains(&r.checkpoint) {
            files.push(r.checkpoint.clone());
        }
    }
    files.sort();
    let mut list = String::new();
    for f in &files {
        let bytes = fs::read(out.join(f)).map_err(io_err::<PipelineError>(&out.join(f)))?;
        let _ = writeln!(list, "{f}\t{}", sha256_hex(&bytes));
    }
    let _ = writeln!(list, "timings.json\t-");
    write_file(&out.join("artifacts.tsv"), list.as_bytes())?;
    Ok(summary)
}

fn record(
    cfg: &ExperimentConfig,
    results: &mut Vec<StageResult>,
    stage: StageId,
    family: Family,
    key: &str,
    train_set: &str,
    test_set: &str,
    mut report: EvalReport,
    checkpoint: &ModelArtifact,
    seconds: f64,
) -> Result<(), PipelineError> {
    report.label = row_label(key);
    let dir_name = key.replace('/', "-");
    let stage_dir = cfg.output_dir.join("stages").join(&dir_name);
    let report_path = stage_dir.join("report.json");
    write_file(&report_path, (serde_json::to_string_pretty(&report).unwrap() + "\n").as_bytes())?;
    // stage 2 evaluates the stage-1 model; point at its checkpoint instead of copying
    let checkpoint_rel = match stage {
        StageId::Stage2 => format!("stages/{}-stage1/model.wbh", family.name()),
        _ => {
            let dst = stage_dir.join("model.wbh");
            fs::copy(&checkpoint.path, &dst).map_err(io_err::<PipelineError>(&dst))?;
            format!("stages/{dir_name}/model.wbh")
        }
    };
    results.push(StageResult {
        key: key.to_string(),
        stage,
        family,
        train_set: train_set.to_string(),
        test_set: test_set.to_string(),
        report,
        checkpoint: checkpoint_rel,
        seconds,
    });
    Ok(())
}

/// Runs the requested stages in dependency order and writes every output.
pub fn run_experiment(cfg: &ExperimentConfig, log: Logger<'_>) -> Result<ExperimentSummary, PipelineError> {
    cfg.validate()?;
    let wanted: BTreeSet<StageId> = cfg.stages.iter().copied().collect();
    fs::create_dir_all(&cfg.output_dir).map_err(io_err::<PipelineError>(&cfg.output_dir))?;
    write_file(&cfg.output_dir.join("config.wbh"), cfg.to_text().as_bytes())?;

    let mut runner = Runner { cfg, store: Store { root: cfg.cache_root(), reuse: cfg.cache, built: HashSet::new() }, log };
    let mut results: Vec<StageResult> = Vec::new();
    let mut extra: Vec<Check> = Vec::new();

    let mut families = Vec::new();
    if wanted.iter().any(|s| *s != StageId::Stage4) {
        families.push(Family::A);
    }
    if wanted.contains(&StageId::Stage4) {
        families.push(Family::B);
    }

    for family in families {
        let f = family.name();
        let stages_here: Vec<StageId> = match family {
            Family::A => [StageId::Stage1, StageId::Stage2, StageId::Stage3, StageId::Tech1, StageId::Tech2]
                .into_iter()
                .filter(|s| wanted.contains(s))
                .collect(),
            Family::B => vec![StageId::Stage1, StageId::Stage2, StageId::Stage3],
        };
        (runner.log)(&format!("family {f}: {}", stages_here.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")));
        let train_set = runner.clean(family, Split::Train)?;
        let test_set = runner.clean(family, Split::Test)?;
        let needs_target = stages_here.iter().any(|s| *s != StageId::Stage1);
        let target_test = if needs_target { Some(runner.corrupted(&test_set, &cfg.corruption.target)?) } else { None };
        let mut stage1: Option<ModelArtifact> = None;

        for stage in stages_here {
            let key = format!("{f}/{stage}");
            (runner.log)(&format!("{key}"));
            let t0 = Instant::now();
            let may_train_stage1 = family == Family::B || wanted.contains(&StageId::Stage1);
            match stage {
                StageId::Stage1 | StageId::Stage2 => {
                    if stage1.is_none() {
                        stage1 = Some(runner.stage1_model(family, &train_set, may_train_stage1)?);
                    }
                    let model = stage1.as_ref().unwrap();
                    let test = if stage == StageId::Stage1 { &test_set } else { target_test.as_ref().unwrap() };
                    let report = runner.eval(model, test, &key)?;
                    if stage == StageId::Stage2 && !results.iter().any(|r| r.key == format!("{f}/stage1")) {
                        // keep the checkpoint reachable from the output directory
                        let dst = cfg.output_dir.join(format!("stages/{f}-stage1/model.wbh"));
                        write_file(&dst, &fs::read(&model.path).map_err(io_err::<PipelineError>(&model.path))?)?;
                    }
                    let train_id = train_set.id.clone();
                    record(cfg, &mut results, stage, family, &key, &train_id, &test.id, report, model, t0.elapsed().as_secs_f64())?;
                }
                StageId::Stage3 => {
                    let target_train = runner.corrupted(&train_set, &cfg.corruption.target)?;
                    let mix = runner.mixed(&train_set, &target_train, family)?;
                    let test = target_test.as_ref().unwrap();
                    if let Err(e) = split_hygiene(&mix.manifest, &test.manifest, &[], None) {
                        return Err(stage_error(&key, e));
                    }
                    let cfg_train = cfg.train.clone();
                    let model = runner.trained(&mix, &cfg_train, None, family)?;
                    let report = runner.eval(&model, test, &key)?;
                    record(cfg, &mut results, stage, family, &key, &mix.id, &test.id, report, &model, t0.elapsed().as_secs_f64())?;
                }
                StageId::Tech1 => {
                    if stage1.is_none() {
                        stage1 = Some(runner.stage1_model(family, &train_set, may_train_stage1)?);
                    }
                    let target_train = runner.corrupted(&train_set, &cfg.corruption.target)?;
                    let test = target_test.as_ref().unwrap();
                    if let Err(e) = split_hygiene(&target_train.manifest, &test.manifest, &[], None) {
                        return Err(stage_error(&key, e));
                    }
                    let ft = cfg.fine_tune_config();
                    let base = stage1.clone().unwrap();
                    let model = runner.trained(&target_train, &ft, Some(&base), family)?;
                    let report = runner.eval(&model, test, &key)?;
                    record(cfg, &mut results, stage, family, &key, &target_train.id, &test.id, report, &model, t0.elapsed().as_secs_f64())?;
                }
                StageId::Tech2 => {
                    let blurred = runner.corrupted(&train_set, &cfg.corruption.technique2)?;
                    let test = target_test.as_ref().unwrap();
                    // the target-condition training set may exist from other stages; tech2 must not touch it
                    let (_, target_train_dir) = runner.store.slot("corrupt", &(&train_set.id, cfg.corruption.target.to_string()));
                    let tag = ConditionTag::Corrupted(cfg.corruption.target.tag());
                    let hygiene = split_hygiene(&blurred.manifest, &test.manifest, &[&target_train_dir, &test.dir], Some(&tag));
                    extra.push(Check::new(
                        "tech2 training reads no target-condition images",
                        hygiene.is_ok(),
                        hygiene.clone().err().unwrap_or_else(|| format!("{} training images checked", blurred.manifest.len())),
                    ));
                    if let Err(e) = hygiene {
                        return Err(stage_error(&key, e));
                    }
                    let cfg_train = cfg.train.clone();
                    let model = runner.trained(&blurred, &cfg_train, None, family)?;
                    let report = runner.eval(&model, test, &key)?;
                    record(cfg, &mut results, stage, family, &key, &blurred.id, &test.id, report, &model, t0.elapsed().as_secs_f64())?;
                }
                StageId::Stage4 => unreachable!("stage 4 is expanded into family B"),
            }
            let r = results.last().unwrap();
            (runner.log)(&format!("  mAP {:.2}  AP {:?}", r.report.map, r.report.ap.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>()));
            finalize(cfg, &results, &extra)?;
        }
    }
    finalize(cfg, &results, &extra)
}

/// Reads a summary written by [`run_experiment`].
pub fn read_summary(path: &Path) -> Result<ExperimentSummary, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err::<PipelineError>(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

/// Re-renders the two tables from a summary.
pub fn render_tables(summary: &ExperimentSummary, format: TableFormat) -> Result<String, PipelineError> {
    let t1 = table(&summary.stages, &TABLE1, format)?;
    let t2 = table(&summary.stages, &TABLE2, format)?;
    Ok(format!("{t1}\n{t2}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Annotation, ImageRecord};
    use crate::BBox;

    fn manifest(names: &[&str], dir: &str, tag: ConditionTag) -> DatasetManifest {
        let mut m = DatasetManifest::empty(ClassSet::canonical(), "t");
        for n in names {
            m.records.push(ImageRecord {
                image_path: PathBuf::from(dir).join(n),
                width: 64,
                height: 64,
                annotations: vec![Annotation::new(BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(), 0)],
                condition: tag.clone(),
            });
        }
        m
    }

    #[test]
    fn hygiene_catches_shared_images_and_target_data() {
        let blur = ConditionTag::Corrupted("double_gaussian".into());
        let target = ConditionTag::Corrupted("fog+rain".into());
        let train = manifest(&["a.ppm", "b.ppm"], "/c/blur", blur.clone());
        let test = manifest(&["x.ppm"], "/c/target-test", target.clone());
        assert!(split_hygiene(&train, &test, &[Path::new("/c/target-train")], Some(&target)).is_ok());
        let leaky = manifest(&["x.ppm"], "/c/blur", blur);
        assert!(split_hygiene(&leaky, &test, &[], None).is_err());
        let wrong_dir = manifest(&["q.ppm"], "/c/target-train", ConditionTag::Clean);
        assert!(split_hygiene(&wrong_dir, &test, &[Path::new("/c/target-train")], None).is_err());
        let wrong_tag = manifest(&["q.ppm"], "/c/other", target.clone());
        assert!(split_hygiene(&wrong_tag, &test, &[], Some(&target)).is_err());
    }

    #[test]
    fn store_keys_are_stable_and_distinct() {
        let s = Store { root: "/cache".into(), reuse: true, built: HashSet::new() };
        assert_eq!(s.slot("clean", &(1, 2)), s.slot("clean", &(1, 2)));
        assert_ne!(s.slot("clean", &(1, 2)).0, s.slot("clean", &(1, 3)).0);
        assert_ne!(s.slot("clean", &(1, 2)).0, s.slot("mix", &(1, 2)).0);
    }

    #[test]
    fn row_labels() {
        assert_eq!(row_label("B/stage2"), "Stage 2: trained clean, tested target [B]");
        assert_eq!(row_label("A/tech2"), "Technique 2: double Gaussian blurring");
    }
}
