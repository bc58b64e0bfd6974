//! End-to-end tests of the `rsnet` binary: every subcommand, the exit-code
//! contract, and byte-level reproducibility through run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rsnet::cli::commands::read_score_dump;
use rsnet::metrics::MetricsReport;
use rsnet::scenegraph::dataset::load_dataset;
use rsnet::scenegraph::pairs::{
    enumerate_candidate_pairs, label_candidates, negative_sampling, SamplingConfig,
};

fn rsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsnet"))
        .args(args)
        .output()
        .expect("failed to launch rsnet binary")
}

fn run_ok(args: &[&str]) -> Output {
    let out = rsnet(args);
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str], expected_code: i32) -> String {
    let out = rsnet(args);
    assert_eq!(
        out.status.code(),
        Some(expected_code),
        "command {:?} exited with {:?}, expected {expected_code}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const GEN_CFG: &str = "\
n_videos = 4
t_frames = 3
min_objects = 3
max_objects = 4
n_entity_classes = 4
n_attention = 2
n_spatial = 2
n_contact = 2
d_v = 8
";

const TRAIN_CFG: &str = "\
epochs = 2
seed = 11
lr = 0.01
d_p = 4
d_m = 8
t_max = 8
spatial_blocks = 1
temporal_blocks = 1
baseline_blocks = 1
heads = 2
";

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

/// All regular files directly in `dir`, except manifests (whose recorded
/// duration legitimately differs between runs).
fn files_excluding_manifests(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().into_string().unwrap();
        if entry.file_type().unwrap().is_file() && !name.ends_with("manifest.json") {
            out.insert(name, fs::read(entry.path()).unwrap());
        }
    }
    out
}

fn assert_same_files(a: &Path, b: &Path) {
    let fa = files_excluding_manifests(a);
    let fb = files_excluding_manifests(b);
    assert_eq!(
        fa.keys().collect::<Vec<_>>(),
        fb.keys().collect::<Vec<_>>(),
        "file sets differ between {} and {}",
        a.display(),
        b.display()
    );
    for (name, bytes) in &fa {
        assert_eq!(bytes, &fb[name], "{name} differs between {} and {}", a.display(), b.display());
    }
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn generation_is_deterministic_and_thread_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "gen.cfg", GEN_CFG);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");
    let out_d = dir.path().join("d");
    run_ok(&["gen-data", "--config", &s(&cfg), "--out", &s(&out_a), "--seed", "7"]);
    run_ok(&["gen-data", "--config", &s(&cfg), "--out", &s(&out_b), "--seed", "7"]);
    run_ok(&[
        "gen-data", "--config", &s(&cfg), "--out", &s(&out_c), "--seed", "7", "--threads", "3",
    ]);
    run_ok(&["gen-data", "--config", &s(&cfg), "--out", &s(&out_d), "--seed", "8"]);

    let a = files_excluding_manifests(&out_a);
    assert_eq!(a.len(), 4, "expected one file per video");
    assert!(a.keys().all(|n| n.starts_with("video_") && n.ends_with(".json")));
    assert!(out_a.join("manifest.json").is_file());
    assert_same_files(&out_a, &out_b);
    assert_same_files(&out_a, &out_c);
    assert_ne!(a, files_excluding_manifests(&out_d), "different seeds must differ");

    // generated data loads back and matches the requested shape
    let (gen_cfg, videos) = load_dataset(&out_a).unwrap();
    assert_eq!(gen_cfg.n_videos, 4);
    assert_eq!(videos.len(), 4);
    assert!(videos.iter().all(|v| v.frames.len() == 3));
}

#[test]
fn zero_videos_yield_an_empty_dataset_with_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "gen.cfg", "n_videos = 0\n");
    let out = dir.path().join("empty");
    run_ok(&["gen-data", "--config", &s(&cfg), "--out", &s(&out)]);
    assert!(files_excluding_manifests(&out).is_empty());
    assert!(out.join("manifest.json").is_file());

    // training on it is a data error
    let ckpt = dir.path().join("model.ckpt");
    let stderr = run_err(&["train", "--data", &s(&out), "--out", &s(&ckpt)], 3);
    assert!(stderr.contains("error:"), "stderr was: {stderr}");
}

#[test]
fn config_errors_exit_with_code_2_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");

    let bogus = write_cfg(dir.path(), "bogus.cfg", "bogus_key = 1\n");
    let stderr = run_err(&["gen-data", "--config", &s(&bogus), "--out", &s(&out)], 2);
    assert!(stderr.contains("bogus_key"), "stderr was: {stderr}");

    let bad_lr = write_cfg(dir.path(), "bad_lr.cfg", "lr = banana\n");
    let stderr =
        run_err(&["train", "--data", &s(&out), "--config", &s(&bad_lr), "--out", &s(&out)], 2);
    assert!(stderr.contains("lr"), "stderr was: {stderr}");

    // unknown variant is rejected before any file is touched, listing the options
    let stderr = run_err(
        &[
            "eval", "--data", &s(&out), "--checkpoint", &s(&out), "--out", &s(&out), "--variant",
            "nonsense",
        ],
        2,
    );
    assert!(stderr.contains("baseline") && stderr.contains("+rsnet+fusion"), "stderr: {stderr}");

    // the baseline variant has no relation scores to dump
    let stderr = run_err(
        &[
            "score-dump",
            "--data",
            &s(&out),
            "--checkpoint",
            &s(&out),
            "--out",
            &s(&out),
            "--variant",
            "baseline",
        ],
        2,
    );
    assert!(stderr.contains("baseline"), "stderr was: {stderr}");

    let stderr = run_err(&["gen-data", "--out", &s(&out), "--threads", "0"], 2);
    assert!(stderr.contains("threads"), "stderr was: {stderr}");
}

#[test]
fn data_errors_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "gen.cfg", GEN_CFG);
    let data = dir.path().join("data");
    run_ok(&["gen-data", "--config", &s(&cfg), "--out", &s(&data), "--seed", "1"]);

    // checkpoint path that was never trained
    let missing = dir.path().join("never-trained.ckpt");
    let eval_out = dir.path().join("eval");
    let stderr = run_err(
        &["eval", "--data", &s(&data), "--checkpoint", &s(&missing), "--out", &s(&eval_out)],
        3,
    );
    assert!(stderr.contains("sidecar"), "stderr was: {stderr}");

    // corrupted manifest
    let junk = write_cfg(dir.path(), "junk-manifest.json", "{ not json");
    run_err(&["rerun", &s(&junk)], 3);

    // dataset directory that does not exist
    let ckpt = dir.path().join("model.ckpt");
    run_err(&["train", "--data", &s(&dir.path().join("nowhere")), "--out", &s(&ckpt)], 3);
}

#[test]
fn training_writes_sidecars_resumes_and_reproduces_itself() {
    let dir = tempfile::tempdir().unwrap();
    let gen_cfg = write_cfg(dir.path(), "gen.cfg", GEN_CFG);
    let data = dir.path().join("data");
    run_ok(&["gen-data", "--config", &s(&gen_cfg), "--out", &s(&data), "--seed", "5"]);

    // identical configs produce byte-identical checkpoints and traces
    let train_cfg = write_cfg(dir.path(), "train.cfg", TRAIN_CFG);
    let run_a = dir.path().join("runa");
    let run_b = dir.path().join("runb");
    for run in [&run_a, &run_b] {
        run_ok(&[
            "train",
            "--data",
            &s(&data),
            "--config",
            &s(&train_cfg),
            "--out",
            &s(&run.join("model.ckpt")),
        ]);
    }
    assert_same_files(&run_a, &run_b);
    let ckpt_a = run_a.join("model.ckpt");
    assert!(ckpt_a.is_file());
    assert!(run_a.join("model.ckpt.model.cfg").is_file());
    assert!(run_a.join("model.ckpt.manifest.json").is_file());

    // the loss trace covers every (epoch, video) and improves on average
    let trace = fs::read_to_string(run_a.join("model.ckpt.trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().collect();
    assert_eq!(rows[0], "epoch,video,l_od,l_rel,l_rsn,total");
    assert_eq!(rows.len(), 1 + 2 * 4, "2 epochs x 4 videos");
    let epoch_mean = |epoch: &str| -> f64 {
        let totals: Vec<f64> = rows[1..]
            .iter()
            .filter(|r| r.starts_with(&format!("{epoch},")))
            .map(|r| r.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        totals.iter().sum::<f64>() / totals.len() as f64
    };
    assert!(
        epoch_mean("1") < epoch_mean("0"),
        "mean total loss should drop: epoch0 {} vs epoch1 {}",
        epoch_mean("0"),
        epoch_mean("1")
    );

    // a seed override changes the run; the same override reproduces it
    let run_s = dir.path().join("runs");
    run_ok(&[
        "train",
        "--data",
        &s(&data),
        "--config",
        &s(&train_cfg),
        "--out",
        &s(&run_s.join("model.ckpt")),
        "--seed",
        "99",
    ]);
    assert_ne!(
        fs::read(run_s.join("model.ckpt")).unwrap(),
        fs::read(&ckpt_a).unwrap(),
        "different seed must change the weights"
    );

    // epochs = 0 takes no steps, so resuming from a checkpoint re-saves it
    let zero_cfg = write_cfg(dir.path(), "zero.cfg", &TRAIN_CFG.replace("epochs = 2", "epochs = 0"));
    let resumed = dir.path().join("resumed");
    run_ok(&[
        "train",
        "--data",
        &s(&data),
        "--config",
        &s(&zero_cfg),
        "--out",
        &s(&resumed.join("model.ckpt")),
        "--resume",
        &s(&ckpt_a),
    ]);
    assert_eq!(
        fs::read(resumed.join("model.ckpt")).unwrap(),
        fs::read(&ckpt_a).unwrap(),
        "zero-epoch resume must pass the weights through unchanged"
    );
}

#[test]
fn full_pipeline_runs_and_reruns_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let gen_cfg = write_cfg(dir.path(), "gen.cfg", GEN_CFG);
    let data = dir.path().join("data");
    run_ok(&["gen-data", "--config", &s(&gen_cfg), "--out", &s(&data), "--seed", "3"]);

    let train_cfg = write_cfg(dir.path(), "train.cfg", TRAIN_CFG);
    let run = dir.path().join("run");
    let ckpt = run.join("model.ckpt");
    run_ok(&["train", "--data", &s(&data), "--config", &s(&train_cfg), "--out", &s(&ckpt)]);

    // -------- eval with flag overrides
    let eval_out = dir.path().join("eval");
    let out = run_ok(&[
        "eval",
        "--data",
        &s(&data),
        "--checkpoint",
        &s(&ckpt),
        "--out",
        &s(&eval_out),
        "--variant",
        "baseline",
        "--variant",
        "+rsnet+fusion",
        "--mode",
        "sgcls",
        "--k",
        "5,10",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("baseline") && stdout.contains("+rsnet+fusion"), "stdout: {stdout}");

    for slug in ["baseline", "rsnet-fusion"] {
        let report = MetricsReport::load_json(&eval_out.join(format!("report-{slug}.json"))).unwrap();
        assert_eq!(report.ks, vec![5, 10], "the --k flag must override the cutoffs");
        assert_eq!(report.mode, rsnet::dsgg::EvalMode::Sgcls, "the --mode flag must override the mode");
        assert_eq!(report.videos, 4);
        assert_eq!(report.frames, 12);
        assert!(eval_out.join(format!("report-{slug}.txt")).is_file());
    }
    let ablation = fs::read_to_string(eval_out.join("ablation.txt")).unwrap();
    assert!(ablation.contains("baseline") && ablation.contains("+rsnet+fusion"));
    assert!(eval_out.join("ablation.json").is_file());

    // -------- score dump agrees with the library's own pair labeling
    let scores = dir.path().join("scores.jsonl");
    run_ok(&["score-dump", "--data", &s(&data), "--checkpoint", &s(&ckpt), "--out", &s(&scores)]);
    let records = read_score_dump(&scores).unwrap();
    let (_, videos) = load_dataset(&data).unwrap();

    let expected_pairs: usize = videos
        .iter()
        .flat_map(|v| {
            v.frames.iter().map(move |f| enumerate_candidate_pairs(f, v.person_centric).len())
        })
        .sum();
    assert_eq!(records.len(), expected_pairs, "one record per candidate pair");
    assert!(records.iter().all(|r| r.p0 > 0.0 && r.p0 < 1.0), "p0 must be a probability");

    let keep_all = SamplingConfig {
        ratio: f64::MAX,
        iou_thresh: SamplingConfig::default().iou_thresh,
        min_negatives: usize::MAX,
    };
    let mut cursor = 0;
    for (vi, video) in videos.iter().enumerate() {
        for (t, frame) in video.frames.iter().enumerate() {
            let pairs = enumerate_candidate_pairs(frame, video.person_centric);
            let mut labels = label_candidates(frame, &pairs, keep_all.iou_thresh);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            negative_sampling(&mut labels, frame, &keep_all, &mut rng);
            for lp in &labels {
                let rec = &records[cursor];
                cursor += 1;
                assert_eq!(
                    (rec.video, rec.frame, rec.subject, rec.object, rec.positivity),
                    (vi, t, lp.pair.subject, lp.pair.object, lp.positivity)
                );
            }
        }
    }
    assert_eq!(cursor, records.len());

    // -------- every manifest reruns to byte-identical outputs
    let data2 = dir.path().join("data2");
    run_ok(&["rerun", &s(&data.join("manifest.json")), "--out", &s(&data2), "--threads", "2"]);
    assert_same_files(&data, &data2);

    let run2 = dir.path().join("run2");
    run_ok(&["rerun", &s(&run.join("model.ckpt.manifest.json")), "--out", &s(&run2.join("model.ckpt"))]);
    assert_same_files(&run, &run2);

    let eval2 = dir.path().join("eval2");
    run_ok(&["rerun", &s(&eval_out.join("manifest.json")), "--out", &s(&eval2)]);
    assert_same_files(&eval_out, &eval2);

    let scores2 = dir.path().join("scores2.jsonl");
    run_ok(&["rerun", &s(&PathBuf::from(format!("{}.manifest.json", scores.display()))), "--out", &s(&scores2)]);
    assert_eq!(fs::read(&scores).unwrap(), fs::read(&scores2).unwrap());
}
