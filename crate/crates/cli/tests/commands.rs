use std::fs;
use std::path::Path;
use std::process::Command;

use streamdiff::memory::Strategy;
use streamdiff::svdt;
use streamdiff::train::Phase;
use streamdiff::video::read_dataset;
use streamdiff_cli::{cmd_bench, cmd_edit, cmd_gen, cmd_inspect, cmd_train, RunConfig};

fn tiny(out: &Path) -> RunConfig {
    let mut c = RunConfig::from_toml(
        r#"
        timing = false
        [model]
        image_size = 16
        patch_size = 4
        d = 16
        layers = 1
        heads = 2
        total_steps = 20
        memory_h = 2
        memory_w = 2
        [data]
        videos = 3
        frames = 8
        [train]
        steps = 4
        batch_size = 2
        clip_len = 4
        video_len = 8
        lr = 0.001
        [bench]
        seeds = [1, 2]
        frames = 4
        "#,
    )
    .unwrap();
    c.out = out.to_path_buf();
    c.validate().unwrap();
    c
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamdiff"))
}

fn base_checkpoint(dir: &Path) -> RunConfig {
    let mut c = tiny(dir);
    let out = cmd_train(&c).unwrap();
    c.paths.checkpoint = Some(out.checkpoint);
    c
}

#[test]
fn gen_is_deterministic_and_writes_every_video() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let da = cmd_gen(&tiny(a.path())).unwrap();
    let db = cmd_gen(&tiny(b.path())).unwrap();
    let videos = read_dataset(&da).unwrap();
    assert_eq!(videos.len(), 3);
    assert!(videos.iter().all(|v| v.len() == 8));
    let mut names: Vec<_> = fs::read_dir(&da)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in &names {
        assert_eq!(
            fs::read(da.join(n)).unwrap(),
            fs::read(db.join(n)).unwrap(),
            "{n:?}"
        );
    }
    let mut other = tiny(b.path());
    other.seed = 9;
    other.out = b.path().join("other");
    let dc = cmd_gen(&other).unwrap();
    assert_ne!(read_dataset(&dc).unwrap()[0].frames, videos[0].frames);
}

#[test]
fn memory_phase_without_base_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.train.phase = Phase::Memory;
    let err = cmd_train(&c).err().unwrap();
    assert_eq!(err.exit_code(), 1);

    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, c.to_toml()).unwrap();
    let status = bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut full = tiny(&dir.path().join("full"));
    full.train.steps = 6;
    let whole = cmd_train(&full).unwrap();

    let mut first = tiny(&dir.path().join("first"));
    first.train.steps = 3;
    let half = cmd_train(&first).unwrap();
    let mut second = tiny(&dir.path().join("second"));
    second.train.steps = 6;
    second.paths.resume = Some(half.checkpoint);
    let resumed = cmd_train(&second).unwrap();

    // Reports carry the whole loss history, restored from the checkpoint.
    assert_eq!(resumed.report.losses, whole.report.losses);
    assert_eq!(
        fs::read(&resumed.checkpoint).unwrap(),
        fs::read(&whole.checkpoint).unwrap()
    );

    // A base checkpoint cannot resume the memory phase.
    let mut wrong = tiny(&dir.path().join("wrong"));
    wrong.train.phase = Phase::Memory;
    wrong.paths.resume = Some(whole.checkpoint);
    assert_eq!(cmd_train(&wrong).err().unwrap().exit_code(), 1);
}

#[test]
fn memory_phase_trains_from_the_base_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let base = cmd_train(&tiny(&dir.path().join("base"))).unwrap();
    let mut c = tiny(&dir.path().join("mem"));
    c.train.phase = Phase::Memory;
    c.train.steps = 2;
    c.paths.base_checkpoint = Some(base.checkpoint);
    let out = cmd_train(&c).unwrap();
    assert_eq!(out.report.phase, Phase::Memory);
    assert_eq!(out.report.losses.len(), 2);
    let csv = fs::read_to_string(dir.path().join("mem/loss_memory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let info = cmd_inspect(&out.checkpoint).unwrap();
    assert_eq!(info["kind"], "checkpoint");
    assert_eq!(info["phase"], "memory");
}

#[test]
fn edit_stream_handles_long_raw_streams() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base_checkpoint(&dir.path().join("train"));
    // 150 frames concatenated into one file, as a capture device would emit.
    let mut long = c.clone();
    long.data.frames = 150;
    long.data.videos = 1;
    let videos = streamdiff_cli::build_videos(&long).unwrap();
    let input = dir.path().join("input.svdts");
    let mut bytes = Vec::new();
    for f in &videos[0].frames {
        svdt::write_tensor(&mut bytes, f).unwrap();
    }
    fs::write(&input, bytes).unwrap();
    c.paths.input = Some(input);
    c.edit.prompt = Some(2);
    c.out = dir.path().join("edit");
    let out = cmd_edit(&c).unwrap();
    assert_eq!(out.count, 150);
    let diag = fs::read_to_string(&out.diagnostics).unwrap();
    assert_eq!(diag.lines().count(), 150);
    let sizes: Vec<u64> = diag
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["state_size"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert!(sizes.windows(2).all(|w| w[0] == w[1]));
    let mut reader = std::io::BufReader::new(fs::File::open(&out.frames).unwrap());
    let (mut n, mut offset) = (0, 0);
    while let Some(t) = svdt::read_tensor(&mut reader, offset).unwrap() {
        assert_eq!(t.shape(), videos[0].frames[0].shape());
        offset += svdt::encode(&t).len() as u64;
        n += 1;
    }
    assert_eq!(n, 150);
    assert_eq!(
        cmd_inspect(&c.out.join("bank.svdi")).unwrap()["frames_processed"],
        150
    );

    // Raw input needs an explicit prompt.
    c.edit.prompt = None;
    assert_eq!(cmd_edit(&c).err().unwrap().exit_code(), 1);
}

#[test]
fn edit_stream_strategy_flag_switches_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base_checkpoint(&dir.path().join("train"));
    c.paths.input = Some(cmd_gen(&c).unwrap());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, c.to_toml()).unwrap();
    let mut outputs = Vec::new();
    for strategy in ["svdiff", "window_kv"] {
        let out = dir.path().join(strategy);
        let status = bin()
            .args(["edit-stream", "--strategy", strategy, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        outputs.push(fs::read(out.join("diagnostics.jsonl")).unwrap());
        assert_eq!(out.join("bank.svdi").exists(), strategy == "svdiff");
    }
    assert_ne!(outputs[0], outputs[1]);
    let status = bin()
        .args(["edit-stream", "--strategy", "bogus", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn bench_emits_a_row_per_strategy_and_video() {
    let dir = tempfile::tempdir().unwrap();
    let c = base_checkpoint(&dir.path().join("train"));
    let table = cmd_bench(&c).unwrap();
    let csv = fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * Strategy::ALL.len());
    let reports = fs::read_dir(dir.path().join("train/bench"))
        .unwrap()
        .count();
    assert_eq!(reports, 2 * Strategy::ALL.len());
    // Different seeds are different held-out videos.
    let svdiff: Vec<&str> = rows
        .iter()
        .filter(|r| r.starts_with("svdiff,"))
        .copied()
        .collect();
    assert_eq!(svdiff.len(), 2);
    let metrics = |r: &str| r.splitn(3, ',').nth(2).unwrap().to_string();
    assert_ne!(metrics(svdiff[0]), metrics(svdiff[1]));
    // Identical configs reproduce the table byte for byte.
    assert_eq!(fs::read(cmd_bench(&c).unwrap()).unwrap(), csv.as_bytes());
}

#[test]
fn inspect_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    let data = cmd_gen(&c).unwrap();
    let info = cmd_inspect(&data).unwrap();
    assert_eq!(
        (info["kind"].as_str(), info["videos"].as_u64()),
        (Some("dataset"), Some(3))
    );

    let out = bin().arg("inspect").arg(&data).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, info);

    assert_eq!(bin().arg("frobnicate").status().unwrap().code(), Some(1));
    assert_eq!(bin().arg("--help").status().unwrap().code(), Some(0));
    assert_eq!(
        bin()
            .args(["gen", "--steps", "a,b"])
            .status()
            .unwrap()
            .code(),
        Some(1)
    );
    assert_eq!(
        bin()
            .args(["gen", "--config", "/nonexistent.toml"])
            .status()
            .unwrap()
            .code(),
        Some(1)
    );
    assert_eq!(
        bin()
            .arg("inspect")
            .arg(dir.path().join("missing"))
            .status()
            .unwrap()
            .code(),
        Some(2)
    );
    let garbage = dir.path().join("garbage.bin");
    fs::write(&garbage, b"not a tensor").unwrap();
    assert_ne!(
        bin().arg("inspect").arg(&garbage).status().unwrap().code(),
        Some(0)
    );
}
