//! Command implementations. Each takes raw config *text* (the flag layer
//! reads files and applies overrides) and returns the manifest it wrote, so
//! `rerun` can re-execute any recorded run from its manifest alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsgg::EvalMode;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalConfig, MetricsReport};
use crate::model::{forward_video, Models, Variant};
use crate::numerics::{checkpoint, ParamStore, Tape};
use crate::scenegraph::dataset::{load_dataset, save_video};
use crate::scenegraph::generator::{derive_seed, generate_synthetic_video, GeneratorConfig};
use crate::scenegraph::pairs::{label_candidates, negative_sampling, Positivity, SamplingConfig};
use crate::training::{train, LossTraceRow};

use super::kv;
use super::manifest::RunManifest;

/// Seed stream for parameter initialization, disjoint from the per-epoch
/// sampling streams (which use small epoch numbers).
pub const MODEL_INIT_STREAM: u64 = 0x6d6f_6465_6c5f_696e;

// ---------------------------------------------------------------- helpers

/// Model-config sidecar written next to every checkpoint.
pub fn model_cfg_path(checkpoint: &Path) -> PathBuf {
    PathBuf::from(format!("{}.model.cfg", checkpoint.display()))
}

/// Loss-trace sidecar written next to every checkpoint.
pub fn trace_path(checkpoint: &Path) -> PathBuf {
    PathBuf::from(format!("{}.trace.csv", checkpoint.display()))
}

/// Manifest location for a command whose `--out` is a single file.
pub fn file_manifest_path(out_file: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", out_file.display()))
}

/// Manifest location for a command whose `--out` is a directory.
pub fn dir_manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

fn write_atomic(path: &Path, body: &str) -> Result<()> {
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn check_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::Config("--threads must be ≥ 1".into()));
    }
    Ok(())
}

/// Run `f` over the items on up to `threads` worker threads. Items are
/// independent, so the outcome never depends on the thread count.
fn parallel_for_each<T: Sync>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<()> + Sync,
) -> Result<()> {
    if threads <= 1 || items.len() <= 1 {
        for item in items {
            f(item)?;
        }
        return Ok(());
    }
    let workers = threads.min(items.len());
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                scope.spawn(move || {
                    for item in items.iter().skip(w).step_by(workers) {
                        f(item)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Numerical("worker thread panicked".into())))
            })
            .collect()
    });
    results.into_iter().collect()
}

// ---------------------------------------------------------------- gen-data

/// Generate `n_videos` videos into `out` (one JSON file each) plus a
/// manifest. Video `i` is seeded with `derive_seed(seed, i)`, so output
/// bytes are independent of the thread count.
pub fn cmd_gen_data(
    config_text: &str,
    out: &Path,
    seed: u64,
    threads: usize,
) -> Result<RunManifest> {
    let started = Instant::now();
    check_threads(threads)?;
    let cfg = kv::generator_from_kv(config_text)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let indices: Vec<usize> = (0..cfg.n_videos).collect();
    parallel_for_each(&indices, threads, |&i| {
        let video = generate_synthetic_video(&cfg, derive_seed(seed, i as u64))?;
        save_video(out, i, &cfg, &video)?;
        Ok(())
    })?;
    let mut manifest = RunManifest::new("gen-data", Some(seed), threads, kv::generator_to_kv(&cfg))
        .with_output("out", out)?;
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.save(&dir_manifest_path(out))?;
    Ok(manifest)
}

// ---------------------------------------------------------------- train

pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub trace: Vec<LossTraceRow>,
    pub videos: usize,
}

/// Train on the dataset in `data`, writing the checkpoint to `out` with
/// model-config and loss-trace sidecars. The checkpoint is saved after
/// every epoch, so an aborted run keeps its last completed epoch.
pub fn cmd_train(
    data: &Path,
    config_text: &str,
    out: &Path,
    seed_override: Option<u64>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut file = kv::train_from_kv(config_text)?;
    if let Some(seed) = seed_override {
        file.train.seed = seed;
    }
    let (gen_cfg, dataset) = load_dataset(data)?;
    let model_cfg = file.arch.model_config(&gen_cfg);

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(file.train.seed, MODEL_INIT_STREAM));
    let models = Models::new(&mut store, &mut rng, model_cfg.clone())?;
    if let Some(resume_path) = resume {
        checkpoint::load_into(&mut store, resume_path)?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_atomic(&model_cfg_path(out), &kv::model_to_kv(&model_cfg))?;

    let trace = train(&mut store, &models, &dataset, &file.train, |_, st| {
        checkpoint::save(st, out)
    })?;
    checkpoint::save(&store, out)?; // covers epochs = 0
    write_atomic(&trace_path(out), &render_trace_csv(&trace))?;

    let mut manifest =
        RunManifest::new("train", Some(file.train.seed), 1, kv::train_to_kv(&file))
            .with_input("data", data)?
            .with_output("checkpoint", out)?
            .with_output("model_config", &model_cfg_path(out))?
            .with_output("trace", &trace_path(out))?;
    if let Some(resume_path) = resume {
        manifest = manifest.with_input("resume", resume_path)?;
    }
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.save(&file_manifest_path(out))?;
    Ok(TrainOutcome { manifest, trace, videos: dataset.len() })
}

fn render_trace_csv(trace: &[LossTraceRow]) -> String {
    let mut out = String::from("epoch,video,l_od,l_rel,l_rsn,total\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch, row.video, row.l_od, row.l_rel, row.l_rsn, row.total
        ));
    }
    out
}

/// Read a loss trace written by [`cmd_train`].
pub fn read_trace_csv(path: &Path) -> Result<Vec<LossTraceRow>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = body.lines();
    match lines.next() {
        Some("epoch,video,l_od,l_rel,l_rsn,total") => {}
        other => {
            return Err(Error::Data(format!(
                "{}: unexpected trace header {other:?}",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Data(format!(
                "{}:{}: expected 6 fields, got {}",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let parse_err =
            |what: &str| Error::Data(format!("{}:{}: bad {what}", path.display(), i + 2));
        rows.push(LossTraceRow {
            epoch: fields[0].parse().map_err(|_| parse_err("epoch"))?,
            video: fields[1].parse().map_err(|_| parse_err("video"))?,
            l_od: fields[2].parse().map_err(|_| parse_err("l_od"))?,
            l_rel: fields[3].parse().map_err(|_| parse_err("l_rel"))?,
            l_rsn: fields[4].parse().map_err(|_| parse_err("l_rsn"))?,
            total: fields[5].parse().map_err(|_| parse_err("total"))?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- shared model loading

fn check_model_matches_data(model: &crate::model::ModelConfig, gen: &GeneratorConfig) -> Result<()> {
    let pairs = [
        ("d_v", model.d_v, gen.d_v),
        ("n_entity_classes", model.n_entity_classes, gen.n_entity_classes),
        ("n_attention", model.n_attention, gen.n_attention),
        ("n_spatial", model.n_spatial, gen.n_spatial),
        ("n_contact", model.n_contact, gen.n_contact),
    ];
    for (name, m, g) in pairs {
        if m != g {
            return Err(Error::Data(format!(
                "checkpoint was trained with {name} = {m}, dataset has {name} = {g}"
            )));
        }
    }
    Ok(())
}

/// Rebuild the architecture from the checkpoint's sidecar, verify it fits
/// the dataset, and load the weights.
fn load_checkpointed_model(
    gen: &GeneratorConfig,
    checkpoint_path: &Path,
) -> Result<(ParamStore, Models)> {
    let sidecar = model_cfg_path(checkpoint_path);
    let text = fs::read_to_string(&sidecar).map_err(|_| {
        Error::Data(format!(
            "{}: missing model config sidecar (written by `rsnet train` next to the checkpoint)",
            sidecar.display()
        ))
    })?;
    let model_cfg = kv::model_from_kv(&text)?;
    check_model_matches_data(&model_cfg, gen)?;
    let mut store = ParamStore::new();
    // any seed works: the checkpoint overwrites every parameter bit-exactly
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let models = Models::new(&mut store, &mut rng, model_cfg)?;
    checkpoint::load_into(&mut store, checkpoint_path)?;
    Ok((store, models))
}

// ---------------------------------------------------------------- eval

/// One comparison line per evaluated variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub recall: Vec<Option<f64>>,
    pub precision: Vec<Option<f64>>,
    pub mean_recall: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub mode: String,
    pub ks: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let fmt = |v: &Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "  —  ".to_string(),
        };
        let mut out = format!("mode {}\n{:<16}", self.mode, "variant");
        for k in &self.ks {
            out.push_str(&format!("{:>9}{:>9}{:>9}", format!("R@{k}"), format!("P@{k}"), format!("mR@{k}")));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<16}", row.variant));
            for i in 0..self.ks.len() {
                out.push_str(&format!(
                    "{:>9}{:>9}{:>9}",
                    fmt(&row.recall[i]),
                    fmt(&row.precision[i]),
                    fmt(&row.mean_recall[i])
                ));
            }
            out.push('\n');
        }
        out
    }
}

/// File-name-safe identifier of a variant (`+rsnet+fusion` → `rsnet-fusion`).
pub fn variant_slug(variant: Variant) -> String {
    variant.name().trim_start_matches('+').replace('+', "-")
}

pub struct EvalOutcome {
    pub manifest: RunManifest,
    pub reports: Vec<(Variant, MetricsReport)>,
    pub ablation: AblationTable,
}

/// Evaluate the checkpoint under every requested variant, writing one
/// report per variant plus a comparison table into `out`.
pub fn cmd_eval(
    data: &Path,
    checkpoint_path: &Path,
    out: &Path,
    file: &kv::EvalFile,
) -> Result<EvalOutcome> {
    let started = Instant::now();
    if file.variants.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }
    let (gen_cfg, dataset) = load_dataset(data)?;
    let (store, models) = load_checkpointed_model(&gen_cfg, checkpoint_path)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut reports = Vec::new();
    for &variant in &file.variants {
        let report = evaluate(&store, &models, variant, &dataset, &file.eval)?;
        report.save_json(&out.join(format!("report-{}.json", variant_slug(variant))))?;
        write_atomic(
            &out.join(format!("report-{}.txt", variant_slug(variant))),
            &format!("variant {}\n{}", variant.name(), report.table()),
        )?;
        reports.push((variant, report));
    }
    let ablation = AblationTable {
        mode: file.eval.mode.name().to_string(),
        ks: file.eval.ks.clone(),
        rows: reports
            .iter()
            .map(|(v, r)| AblationRow {
                variant: v.name().to_string(),
                recall: r.recall.clone(),
                precision: r.precision.clone(),
                mean_recall: r.mean_recall.clone(),
            })
            .collect(),
    };
    let ablation_json = serde_json::to_string_pretty(&ablation)
        .map_err(|e| Error::Data(format!("failed to serialize comparison table: {e}")))?;
    write_atomic(&out.join("ablation.json"), &(ablation_json + "\n"))?;
    write_atomic(&out.join("ablation.txt"), &ablation.render())?;

    let mut manifest = RunManifest::new("eval", None, 1, kv::eval_to_kv(file))
        .with_input("data", data)?
        .with_input("checkpoint", checkpoint_path)?
        .with_output("out", out)?;
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.save(&dir_manifest_path(out))?;
    Ok(EvalOutcome { manifest, reports, ablation })
}

// ---------------------------------------------------------------- score-dump

/// One candidate pair's relation score and label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video: usize,
    pub frame: usize,
    pub subject: usize,
    pub object: usize,
    /// Probability the pair is contextually meaningful.
    pub p0: f64,
    pub positivity: Positivity,
}

/// Write score records as line-delimited JSON (atomically).
pub fn write_score_dump(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut body = String::new();
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Data(format!("failed to serialize score record: {e}")))?;
        body.push_str(&line);
        body.push('\n');
    }
    write_atomic(path, &body)
}

/// Read a dump written by [`write_score_dump`].
pub fn read_score_dump(path: &Path) -> Result<Vec<ScoreRecord>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}:{}: malformed score record: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub struct ScoreDumpOutcome {
    pub manifest: RunManifest,
    pub records: usize,
}

/// Dump every candidate pair's relation score p₀ with its positivity label
/// (positive / negative / excluded under the training exclusion rule).
pub fn cmd_score_dump(
    data: &Path,
    checkpoint_path: &Path,
    out: &Path,
    variant: Variant,
) -> Result<ScoreDumpOutcome> {
    let started = Instant::now();
    if !variant.uses_rsnet() {
        return Err(Error::Config(format!(
            "variant `{}` computes no relation scores; pick a variant with the scoring branch",
            variant.name()
        )));
    }
    let (gen_cfg, dataset) = load_dataset(data)?;
    let (store, models) = load_checkpointed_model(&gen_cfg, checkpoint_path)?;

    // Keep every pair: a cap no frame can reach means the sampling RNG is
    // never consulted, so only the deterministic exclusion rule applies.
    let keep_all = SamplingConfig {
        ratio: f64::MAX,
        iou_thresh: SamplingConfig::default().iou_thresh,
        min_negatives: usize::MAX,
    };
    let mut records = Vec::new();
    for (vi, video) in dataset.iter().enumerate() {
        let mut tape = Tape::new();
        let full: Vec<Vec<usize>> = video
            .frames
            .iter()
            .map(|f| {
                (0..crate::scenegraph::pairs::enumerate_candidate_pairs(f, video.person_centric)
                    .len())
                    .collect()
            })
            .collect();
        let fwd = forward_video(&mut tape, &store, &models, variant, video, &full)?;
        for (t, ff) in fwd.frames.iter().enumerate() {
            if ff.pairs.is_empty() {
                continue;
            }
            let frame = &video.frames[t];
            let mut labels = label_candidates(frame, &ff.pairs, keep_all.iou_thresh);
            let mut rng = ChaCha8Rng::seed_from_u64(0); // never drawn from
            negative_sampling(&mut labels, frame, &keep_all, &mut rng);
            let scores = ff
                .scores
                .ok_or_else(|| Error::Numerical("relation scores missing from forward pass".into()))?;
            let values = tape.values(scores);
            for (k, lp) in labels.iter().enumerate() {
                records.push(ScoreRecord {
                    video: vi,
                    frame: t,
                    subject: lp.pair.subject,
                    object: lp.pair.object,
                    p0: values[2 * k],
                    positivity: lp.positivity,
                });
            }
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_score_dump(out, &records)?;

    let config_text = format!("variant = {}\n", variant.name());
    let mut manifest = RunManifest::new("score-dump", None, 1, config_text)
        .with_input("data", data)?
        .with_input("checkpoint", checkpoint_path)?
        .with_output("out", out)?;
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.save(&file_manifest_path(out))?;
    Ok(ScoreDumpOutcome { manifest, records: records.len() })
}

// ---------------------------------------------------------------- rerun

/// Re-execute a recorded run. `out_override` redirects the outputs (useful
/// for byte-comparing a rerun against the original).
pub fn cmd_rerun(
    manifest_path: &Path,
    out_override: Option<&Path>,
    threads: usize,
) -> Result<RunManifest> {
    let m = RunManifest::load(manifest_path)?;
    match m.command.as_str() {
        "gen-data" => {
            let out = out_override.map(PathBuf::from).unwrap_or(m.output("out")?);
            let seed = m
                .seed
                .ok_or_else(|| Error::Data("gen-data manifest records no seed".into()))?;
            cmd_gen_data(&m.config_text, &out, seed, threads)
        }
        "train" => {
            let out = out_override.map(PathBuf::from).unwrap_or(m.output("checkpoint")?);
            let resume = m.inputs.get("resume").map(PathBuf::from);
            let outcome =
                cmd_train(&m.input("data")?, &m.config_text, &out, None, resume.as_deref())?;
            Ok(outcome.manifest)
        }
        "eval" => {
            let out = out_override.map(PathBuf::from).unwrap_or(m.output("out")?);
            let file = kv::eval_from_kv(&m.config_text)?;
            let outcome = cmd_eval(&m.input("data")?, &m.input("checkpoint")?, &out, &file)?;
            Ok(outcome.manifest)
        }
        "score-dump" => {
            let out = out_override.map(PathBuf::from).unwrap_or(m.output("out")?);
            let map = kv::parse_kv(&m.config_text)?;
            let variant = Variant::parse(map.get("variant").map(String::as_str).ok_or_else(
                || Error::Data("score-dump manifest records no variant".into()),
            )?)?;
            let outcome =
                cmd_score_dump(&m.input("data")?, &m.input("checkpoint")?, &out, variant)?;
            Ok(outcome.manifest)
        }
        other => Err(Error::Data(format!("manifest records unknown command `{other}`"))),
    }
}

/// Evaluate using a prediction dump instead of a live model (same report
/// format); the dump must reference videos of `data` by index.
pub fn eval_records_against(
    data: &Path,
    records_path: &Path,
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    let (_, dataset) = load_dataset(data)?;
    let records = crate::dsgg::read_predictions(records_path)?;
    crate::metrics::evaluate_records(&records, &dataset, eval)
}

/// Convenience for tests and tooling: predictions of one variant, dumped in
/// the format `eval_records_against` consumes.
pub fn dump_predictions(
    data: &Path,
    checkpoint_path: &Path,
    out: &Path,
    variant: Variant,
    mode: EvalMode,
) -> Result<usize> {
    let (gen_cfg, dataset) = load_dataset(data)?;
    let (store, models) = load_checkpointed_model(&gen_cfg, checkpoint_path)?;
    let mut records = Vec::new();
    for (vi, video) in dataset.iter().enumerate() {
        for triplets in crate::dsgg::predict_video(&store, &models, variant, mode, video, false)? {
            for t in triplets {
                records.push(crate::dsgg::PredictionRecord { video: vi, triplet: t });
            }
        }
    }
    crate::dsgg::write_predictions(out, &records)?;
    Ok(records.len())
}
