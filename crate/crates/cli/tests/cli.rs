use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SPEC: &str = "\
dataset_id = toy
n_subjects = 3
n_sensors = 6
n_sources = 3
duration_s = 40
event_rate_hz = 0.2
event_duration_s = 1.5
event_amplitude = 3
";

const CONFIG: &str = "\
window_s = 0.5
d_shared = 8
d_backbone = 8
conv_channels = 8, 8, 8, 8
projector_hidden = 8
head_hidden = 8
pretrain_epochs = 1
finetune_epochs = 2
lr = 0.003
batch_size = 16
";

fn neurossl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurossl")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = neurossl(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let w = Workspace { dir: TempDir::new().unwrap() };
        fs::write(w.path("spec.txt"), SPEC).unwrap();
        fs::write(w.path("config.txt"), CONFIG).unwrap();
        w
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn synth(&self) -> PathBuf {
        let data = self.path("data");
        if !data.exists() {
            ok(&["synth", "--spec", p(&self.path("spec.txt")), "--out", p(&data)]);
        }
        data
    }

    fn pretrain(&self, out: &str, extra: &[&str]) -> PathBuf {
        let data = self.synth();
        let out = self.path(out);
        let config = self.path("config.txt");
        let mut args = vec!["pretrain", "--config", p(&config), "--data", p(&data), "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }

    fn finetune_args(&self, out: &Path, task: &str, backbone: Option<&Path>, extra: &[&str]) -> Vec<String> {
        let mut args: Vec<String> = ["finetune", "--config", p(&self.path("config.txt")), "--data", p(&self.synth()), "--out", p(out), "--task", task, "--mode", "shallow"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        match backbone {
            Some(b) => args.extend(["--pretrained".to_string(), p(b).to_string()]),
            None => args.push("--no-pretrain".into()),
        }
        args.extend(extra.iter().map(|s| s.to_string()));
        args
    }
}

fn run(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    neurossl(&refs)
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn synth_manifest_lists_every_subject_and_reruns_identically() {
    let w = Workspace::new();
    let data = w.synth();
    let manifest = read(&data.join("manifest.txt"));
    assert!(manifest.contains("recordings = 3"), "{manifest}");
    assert_eq!(manifest.lines().filter(|l| l.starts_with("recording.")).count(), 3);
    assert!(manifest.contains(concat!("tool = neurossl ", env!("CARGO_PKG_VERSION"))));
    assert!(manifest.lines().any(|l| l.starts_with("spec_sha256 = ") && l.len() == "spec_sha256 = ".len() + 64));

    let again = w.path("again");
    ok(&["synth", "--spec", p(&w.path("spec.txt")), "--out", p(&again)]);
    for entry in fs::read_dir(&data).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(data.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap(), "{name:?}");
    }

    let other = w.path("other");
    ok(&["synth", "--spec", p(&w.path("spec.txt")), "--out", p(&other), "--seed", "9"]);
    assert_ne!(fs::read(data.join("sub-01.bin")).unwrap(), fs::read(other.join("sub-01.bin")).unwrap());
    assert!(read(&other.join("manifest.txt")).contains("seed = 9"));
}

#[test]
fn synth_rejects_carrier_above_nyquist_with_line_number() {
    let w = Workspace::new();
    fs::write(w.path("bad.txt"), "n_subjects = 1\nvoiceless_carrier_hz = 200\n").unwrap();
    let out = neurossl(&["synth", "--spec", p(&w.path("bad.txt")), "--out", p(&w.path("x"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn preprocess_resamples_recordings_and_tracks() {
    let w = Workspace::new();
    fs::write(w.path("fast.txt"), format!("{SPEC}sample_rate_hz = 1000\nduration_s = 20\n").replace("duration_s = 40\n", "")).unwrap();
    let raw = w.path("raw");
    ok(&["synth", "--spec", p(&w.path("fast.txt")), "--out", p(&raw)]);
    let clean = w.path("clean");
    ok(&["preprocess", "--data", p(&raw), "--out", p(&clean)]);
    let header = read(&clean.join("sub-01.hdr"));
    assert!(header.contains("sample_rate_hz = 250"), "{header}");
    assert!(header.contains("samples = 5000"), "{header}");
    let before = read(&raw.join("sub-01.detection.csv"));
    let after = read(&clean.join("sub-01.detection.csv"));
    let first = |s: &str| s.lines().nth(1).unwrap().split(',').map(|v| v.parse::<usize>().unwrap()).collect::<Vec<_>>();
    let (b, a) = (first(&before), first(&after));
    assert_eq!(a[0], (b[0] as f64 / 4.0).round() as usize);
    assert_eq!(a[2], b[2]);
    assert!(read(&clean.join("qc.txt")).contains("toy/sub-01"));

    // 250 Hz input needs the explicit low-rate flag
    let data = w.synth();
    let out = neurossl(&["preprocess", "--data", p(&data), "--out", p(&w.path("low"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    ok(&["preprocess", "--data", p(&data), "--out", p(&w.path("low")), "--allow-low-rate"]);
}

#[test]
fn three_seeds_give_three_records_and_a_summary_row() {
    let w = Workspace::new();
    let pre = w.pretrain("pre", &[]);
    for s in 0..3 {
        let csv = read(&pre.join(format!("seed-{s}/pretrain.csv")));
        assert!(csv.starts_with("epoch,loss,"), "{csv}");
        assert!(pre.join(read(&pre.join(format!("seed-{s}/checkpoint.txt"))).trim()).exists());
    }
    assert!(read(&pre.join("run.txt")).contains("pretrain_hours = "));

    let out = w.path("ft");
    let o = run(&w.finetune_args(&out, "speech", Some(&pre), &[]));
    assert!(o.status.success(), "{}", stderr(&o));
    for s in 0..3 {
        assert!(read(&out.join(format!("seed-{s}/finetune.csv"))).starts_with("epoch,loss,val_bacc,test_bacc\n"));
    }
    let summary = read(&out.join("summary.csv"));
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "label,mean,sem,n,t,p");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("speech-shallow-pretrained,"), "{summary}");
    assert_eq!(lines[1].split(',').nth(3), Some("3"));
}

#[test]
fn random_backbone_control_row() {
    let w = Workspace::new();
    let out = w.path("ctl");
    let o = run(&w.finetune_args(&out, "speech", None, &["--seeds", "0,1"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(read(&out.join("summary.csv")).lines().nth(1).unwrap().starts_with("speech-shallow-random,"));
    let run_txt = read(&out.join("run.txt"));
    assert!(run_txt.contains("backbone = random") && run_txt.contains("pretrain_hours = 0.000000"), "{run_txt}");
}

#[test]
fn reruns_produce_identical_metric_csvs() {
    let w = Workspace::new();
    let a = w.pretrain("a", &["--seeds", "4"]);
    let b = w.pretrain("b", &["--seeds", "4"]);
    assert_eq!(read(&a.join("seed-4/pretrain.csv")), read(&b.join("seed-4/pretrain.csv")));
    let (fa, fb) = (w.path("fa"), w.path("fb"));
    for (out, pre) in [(&fa, &a), (&fb, &b)] {
        let o = run(&w.finetune_args(out, "voicing", Some(pre), &["--seeds", "4"]));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read(&fa.join("seed-4/finetune.csv")), read(&fb.join("seed-4/finetune.csv")));
    assert_eq!(read(&fa.join("summary.csv")), read(&fb.join("summary.csv")));
}

#[test]
fn semi_supervised_pretraining_logs_the_auxiliary_loss() {
    let w = Workspace::new();
    let pre = w.pretrain("semi", &["--seeds", "0", "--semi-supervised"]);
    let csv = read(&pre.join("seed-0/pretrain.csv"));
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "loss_semi").unwrap();
    let v: f64 = csv.lines().nth(1).unwrap().split(',').nth(col).unwrap().parse().unwrap();
    assert!(v > 0.0);
    assert!(read(&pre.join("run.txt")).contains("semi_supervised_weight = 1.0"));
}

#[test]
fn missing_checkpoint_exits_3_naming_the_path() {
    let w = Workspace::new();
    let pre = w.pretrain("pre", &["--seeds", "0"]);
    let pointer = read(&pre.join("seed-0/checkpoint.txt"));
    let ck = pre.join(pointer.trim());
    fs::remove_file(&ck).unwrap();
    let o = run(&w.finetune_args(&w.path("ft"), "speech", Some(&pre), &["--seeds", "0"]));
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains(p(&ck)), "{}", stderr(&o));
}

#[test]
fn non_finite_loss_exits_4() {
    let w = Workspace::new();
    fs::write(w.path("hot.txt"), CONFIG.replace("lr = 0.003", "lr = 1e30")).unwrap();
    let o = neurossl(&["pretrain", "--config", p(&w.path("hot.txt")), "--data", p(&w.synth()), "--out", p(&w.path("x")), "--seeds", "0"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_with_line() {
    let w = Workspace::new();
    fs::write(w.path("typo.txt"), "window_s = 0.5\nlearning_rate = 0.1\n").unwrap();
    let o = neurossl(&["pretrain", "--config", p(&w.path("typo.txt")), "--data", p(&w.synth()), "--out", p(&w.path("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn sensor_count_mismatch_with_checkpoint_exits_3() {
    let w = Workspace::new();
    let pre = w.pretrain("pre", &["--seeds", "0"]);
    fs::write(w.path("wide.txt"), SPEC.replace("n_sensors = 6", "n_sensors = 7")).unwrap();
    let wide = w.path("wide");
    ok(&["synth", "--spec", p(&w.path("wide.txt")), "--out", p(&wide)]);
    let mut args = w.finetune_args(&w.path("ft"), "speech", Some(&pre), &["--seeds", "0"]);
    let i = args.iter().position(|a| a == "--data").unwrap();
    args[i + 1] = p(&wide).to_string();
    assert_eq!(code(&run(&args)), 3);
}

#[test]
fn zero_shot_evaluation_and_leakage() {
    let w = Workspace::new();
    let pre = w.pretrain("pre", &["--seeds", "0"]);
    let ft = w.path("ft");
    let o = run(&w.finetune_args(&ft, "speech", Some(&pre), &["--seeds", "0", "--holdout", "sub-03"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!read(&ft.join("seed-0/subjects.txt")).contains("sub-03"));

    let config = w.path("config.txt");
    let data = w.synth();
    let eval = w.path("eval");
    ok(&["evaluate", "--config", p(&config), "--data", p(&data), "--finetuned", p(&ft), "--out", p(&eval), "--zero-shot", "--heldout", "sub-03", "--seeds", "0"]);
    let table = read(&eval.join("evaluation.csv"));
    assert!(table.starts_with("seed,seen_bacc,unseen_bacc\n0,"), "{table}");

    let o = neurossl(&["evaluate", "--config", p(&config), "--data", p(&data), "--finetuned", p(&ft), "--out", p(&eval), "--zero-shot", "--heldout", "sub-02", "--seeds", "0"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("sub-02"), "{}", stderr(&o));

    ok(&["evaluate", "--config", p(&config), "--data", p(&data), "--finetuned", p(&ft), "--out", p(&w.path("plain")), "--seeds", "0"]);
    assert!(read(&w.path("plain/evaluation.csv")).starts_with("seed,test_bacc\n"));
}

fn fake_run(dir: &Path, task: &str, backbone: &str, hours: f64, mean: f64) {
    fs::create_dir_all(dir).unwrap();
    let text = format!(
        "kind = finetune\ntask = {task}\nmode = shallow\nbackbone = {backbone}\npretrain_hours = {hours:.6}\nmean = {mean:.6}\nsem = 0.010000\nn = 3\nt = 1.0\np = 1.0e-1\n"
    );
    fs::write(dir.join("run.txt"), text).unwrap();
}

#[test]
fn report_sorts_by_hours_and_groups_tasks() {
    let w = Workspace::new();
    let runs = w.path("runs");
    fake_run(&runs.join("a"), "speech", "pretrained", 2.0, 0.56);
    fake_run(&runs.join("b"), "speech", "pretrained", 0.5, 0.53);
    fake_run(&runs.join("c"), "voicing", "pretrained", 1.0, 0.51);
    let out = w.path("report");
    ok(&["report", "--runs", p(&runs), "--out", p(&out)]);
    let table = read(&out.join("report.csv"));
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(table.lines().next().unwrap(), "task,mode,backbone,pretrain_hours,mean,sem,n,t,p");
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("speech,shallow,pretrained,0.500000,"));
    assert!(rows[1].starts_with("speech,shallow,pretrained,2.000000,"));
    assert!(rows[2].starts_with("voicing,"));
    let speech = read(&out.join("series-speech.csv"));
    assert_eq!(speech.lines().count(), 3);
    assert_eq!(read(&out.join("series-voicing.csv")).lines().count(), 2);
}

#[test]
fn report_rejects_empty_dirs_and_foreign_runs() {
    let w = Workspace::new();
    let empty = w.path("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&neurossl(&["report", "--runs", p(&empty), "--out", p(&w.path("r"))])), 2);

    let pre = w.path("pre-only");
    fs::create_dir_all(&pre).unwrap();
    fs::write(pre.join("run.txt"), "kind = pretrain\npretrain_hours = 1\n").unwrap();
    assert_eq!(code(&neurossl(&["report", "--runs", p(&pre), "--out", p(&w.path("r"))])), 2);

    let broken = w.path("broken");
    fs::create_dir_all(&broken).unwrap();
    fs::write(broken.join("run.txt"), "kind = finetune\ntask = speech\n").unwrap();
    let o = neurossl(&["report", "--runs", p(&broken), "--out", p(&w.path("r"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("schema mismatch"), "{}", stderr(&o));
}
