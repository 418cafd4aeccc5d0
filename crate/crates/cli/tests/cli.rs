use std::path::Path;
use std::process::{Command, Output};

use gemma_mini::audit::AuditReport;
use gemma_mini::kvcache::kv_bytes;
use gemma_mini::memplan::{self, MemoryReport};
use gemma_mini::model::layer_kinds;
use gemma_mini::panscan::CropPlan;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gemma-mini")).args(args).output().unwrap()
}

fn stdout(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const CORPUS: &str = "Sphinx of black quartz, judge my vow. The five boxing wizards jump quickly. \
Amazingly few discotheques provide jukeboxes. How razorback-jumping frogs can level six piqued gymnasts!

Jackdaws love my big sphinx of quartz. We promptly judged antique ivory buckles for the next prize. \
Crazy Fredrick bought many very exquisite opal jewels.
";

fn write_corpus(dir: &Path) -> String {
    let p = dir.join("corpus.txt");
    std::fs::write(&p, CORPUS).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn pattern() {
    assert_eq!(stdout(&["pattern", "--layers", "12", "--ratio", "5"]), "LLLLLGLLLLLG\n");
    assert_eq!(stdout(&["pattern", "--layers", "4", "--ratio", "1"]), "LGLG\n");
}

#[test]
fn plan_table_and_json() {
    let t = stdout(&["plan", "--preset", "gemma3-27b", "--scheme", "bf16"]);
    let row = t.lines().find(|l| l.starts_with("gemma3-27b")).unwrap();
    assert!(row.contains("54.0 GB"), "{t}");

    let json = stdout(&["plan", "--json", "--context", "8192", "--kv-bits", "16"]);
    let reports: Vec<MemoryReport> = serde_json::from_str(&json).unwrap();
    assert_eq!(reports.len(), 4);
    assert_eq!(reports[0], memplan::report("gemma3-1b", 8192, 16).unwrap());
    assert_eq!(serde_json::to_string_pretty(&reports).unwrap() + "\n", json);
}

#[test]
fn kv_curve_matches_library() {
    let csv = stdout(&["kv-curve", "--ratio", "5", "--window", "1024", "--contexts", "1024,32768,131072"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("context,bytes"));
    let want = kv_bytes(&layer_kinds(6, 5), 32768, 1024, 1, 256, 16).total;
    assert!(csv.lines().any(|l| l == format!("32768,{want}")), "{csv}");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["pattern"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["plan", "--scheme", "fp4"]).status.code(), Some(2));
    let missing = run(&["plan", "--preset", "gemma3-2b"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("gemma3-2b"));
    assert_eq!(run(&["kv-curve", "--contexts", "10,5"]).status.code(), Some(1));
    assert_eq!(run(&["panscan", "--width", "10"]).status.code(), Some(1));
}

#[test]
fn panscan_plan_and_crops() {
    let json = stdout(&["panscan", "--width", "4000", "--height", "1000"]);
    let plan: CropPlan = serde_json::from_str(&json).unwrap();
    assert_eq!(plan.grid, (4, 1));
    assert_eq!(serde_json::to_string_pretty(&plan).unwrap() + "\n", json);

    let dir = tempfile::tempdir().unwrap();
    let img_path = dir.path().join("wide.png");
    image::RgbImage::from_fn(1792, 896, |x, _| image::Rgb([(x % 256) as u8, 7, 200]))
        .save(&img_path)
        .unwrap();
    let out = dir.path().join("crops");
    let json = stdout(&["panscan", "--image", img_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let plan: CropPlan = serde_json::from_str(&json).unwrap();
    assert_eq!((plan.image_w, plan.grid), (1792, (2, 1)));
    for i in 0..2 {
        let bytes = std::fs::read(out.join(format!("crop_{i}.rgb"))).unwrap();
        assert_eq!(bytes.len(), 896 * 896 * 3);
        assert_eq!(&bytes[..3], &[(i * 896 % 256) as u8, 7, 200]);
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["crops"].as_array().unwrap().len(), 2);
}

#[test]
fn train_generate_distill_audit() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let teacher = dir.path().join("teacher.bin");
    let t = teacher.to_str().unwrap();
    let log = stdout(&["train", "--corpus", &corpus, "--steps", "20", "--seq-len", "64", "--layers", "2", "--save", t]);
    assert!(log.starts_with("step,loss\n"));
    assert_eq!(log.lines().count(), 21);
    assert!(Path::new(&format!("{t}.cfg")).exists() && Path::new(&format!("{t}.manifest")).exists());

    let a = stdout(&["generate", "--weights", t, "--prompt", "Sphinx", "--max-new", "8"]);
    assert_eq!(a, stdout(&["generate", "--weights", t, "--prompt", "Sphinx", "--max-new", "8"]));
    let s1 = stdout(&["generate", "--weights", t, "--prompt", "x", "--temperature", "1", "--seed", "4"]);
    assert_eq!(s1, stdout(&["generate", "--weights", t, "--prompt", "x", "--temperature", "1", "--seed", "4"]));
    stdout(&["generate", "--weights", t, "--prompt", "hi", "--chat", "--max-new", "4"]);

    let student = dir.path().join("student.bin");
    let log = stdout(&[
        "distill", "--teacher", t, "--corpus", &corpus, "--k", "8", "--steps", "10", "--seq-len", "32",
        "--save", student.to_str().unwrap(),
    ]);
    assert_eq!(log.lines().count(), 11);
    assert!(log.lines().nth(1).unwrap().starts_with("0,"));

    let report = dir.path().join("report.json");
    let r = report.to_str().unwrap();
    stdout(&["audit", "--corpus", &corpus, "--weights", t, "--stride", "40", "--out", r]);
    let text = std::fs::read_to_string(&report).unwrap();
    let parsed: AuditReport = serde_json::from_str(&text).unwrap();
    assert!(parsed.n_samples >= 2);
    assert_eq!(parsed.per_source.len(), 2);
    assert_eq!(serde_json::to_string_pretty(&parsed).unwrap(), text);
    let again = stdout(&["audit", "--corpus", &corpus, "--weights", t, "--stride", "40"]);
    assert_eq!(again.trim_end(), text);
}
