use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sbmt(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbmt")).args(args).env("SBMT_OUT_DIR", out_root).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    text.lines()
        .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == key).map(|(_, v)| v.trim().to_string()))
        .unwrap_or_else(|| panic!("{key} missing from manifest:\n{text}"))
}

const SMALL: [&str; 10] = [
    "--set",
    "seq_len=12",
    "--set",
    "batch_size=6",
    "--set",
    "clusters=3",
    "--set",
    "checkpoint_every=2",
    "--set",
    "eval_batches=2",
];

fn small_train(tmp: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let dir = tmp.join(name);
    let mut args = vec!["train", "--steps", "4", "--out-dir", dir.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    let o = sbmt(&args, tmp);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn default_synthetic_config_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    let o = sbmt(&["train", "--steps", "0", "--set", "eval_batches=0", "--out-dir", dir.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for (k, v) in [
        ("seq_len", "256"),
        ("batch_size", "256"),
        ("learning_rate", "0.001"),
        ("n_layers", "1"),
        ("n_heads", "1"),
        ("d_model", "32"),
        ("clusters", "128"),
    ] {
        assert_eq!(manifest_value(&dir, k), v);
    }
    assert_eq!(manifest_value(&dir, "config_hash").len(), 64);
    assert!(dir.join("model.ckpt").is_file());
}

#[test]
fn lambda_override_reaches_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_train(tmp.path(), "l", &["--lambda", "0.1"]);
    assert_eq!(manifest_value(&dir, "density_weight"), "0.1");
}

#[test]
fn training_writes_documented_outputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_train(tmp.path(), "a", &["--seed", "9"]);
    let b = small_train(tmp.path(), "b", &["--seed", "9"]);
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "step,loss,task_loss,accuracy,mean_density,attention_flops,density_l0_h0");
    assert_eq!(lines.count(), 4);
    assert!(a.join("checkpoints/step_000002.ckpt").is_file());
    assert!(a.join("checkpoints/step_000004.ckpt").is_file());
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());

    // The manifest is a config: training from it repeats the run.
    let c = tmp.path().join("c");
    let o = sbmt(
        &["train", "--config", a.join("manifest.txt").to_str().unwrap(), "--out-dir", c.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(metrics, fs::read_to_string(c.join("metrics.csv")).unwrap());

    let d = small_train(tmp.path(), "d", &["--seed", "10"]);
    assert_ne!(metrics, fs::read_to_string(d.join("metrics.csv")).unwrap());
}

#[test]
fn unknown_config_key_is_a_usage_error_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sbmt(&["train", "--set", "n_hedas=2"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_hedas"));

    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "seq_len = 16\ndropout = lots\n").unwrap();
    let o = sbmt(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dropout"));
}

#[test]
fn divergence_stops_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("x");
    let mut args = vec!["train", "--steps", "6", "--set", "lr=1e200", "--out-dir", dir.to_str().unwrap()];
    args.extend(SMALL);
    let o = sbmt(&args, tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    assert!(fs::read_to_string(dir.join("failure.txt")).unwrap().contains("step"));
    assert!(!dir.join("model.ckpt").exists());
}

#[test]
fn eval_reports_one_density_pair_per_head() {
    let tmp = tempfile::tempdir().unwrap();
    let run = small_train(tmp.path(), "r", &["--set", "n_layers=2", "--set", "n_heads=2", "--set", "d_model=8"]);
    let ckpt = run.join("model.ckpt");
    let eval = |name: &str| {
        let dir = tmp.path().join(name);
        let o = sbmt(
            &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--set", "eval_batches=2", "--out-dir", dir.to_str().unwrap()],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(dir.join("density.csv")).unwrap()
    };
    let csv = eval("e1");
    assert_eq!(csv, eval("e2"));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "layer,head,metric,value");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    for r in &rows {
        let v: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{r:?}");
    }
    let means = rows.iter().filter(|r| r[2] == "mean").count();
    assert_eq!(means, 4);
}

#[test]
fn eval_warns_on_hash_mismatch_and_proceeds() {
    let tmp = tempfile::tempdir().unwrap();
    let run = small_train(tmp.path(), "r", &[]);
    let edited = tmp.path().join("edited.txt");
    let text = fs::read_to_string(run.join("manifest.txt")).unwrap().replace("eval_batches = 2", "eval_batches = 1");
    fs::write(&edited, text).unwrap();
    let o = sbmt(
        &[
            "eval",
            "--checkpoint",
            run.join("model.ckpt").to_str().unwrap(),
            "--config",
            edited.to_str().unwrap(),
            "--out-dir",
            tmp.path().join("e").to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean_density"));
}

fn sample(tmp: &Path, name: &str, extra: &[&str]) -> (String, f64) {
    let dir = tmp.join(name);
    let mut args = vec!["sample-mask", "--out-dir", dir.to_str().unwrap()];
    args.extend(extra);
    let o = sbmt(&args, tmp);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = stdout(&o);
    let density: f64 = summary.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!(fs::read_to_string(dir.join("cost_l0_h0.csv")).unwrap().starts_with("component,flops,bytes\n"));
    (fs::read_to_string(dir.join("mask_l0_h0.txt")).unwrap(), density)
}

#[test]
fn fresh_model_masks_have_moderate_density() {
    let tmp = tempfile::tempdir().unwrap();
    let (dump, density) = sample(tmp.path(), "s", &["--seed", "4"]);
    assert!((0.10..=0.40).contains(&density), "{density}");
    let header: Vec<usize> = dump.lines().next().unwrap().split(' ').map(|t| t.parse().unwrap()).collect();
    assert_eq!(&header[..2], &[256, 256]);
    assert_eq!(header[2], dump.lines().count() - 1);
}

#[test]
fn injected_full_mask_has_density_one() {
    let tmp = tempfile::tempdir().unwrap();
    let (dump, density) = sample(tmp.path(), "f", &["--inject", "full", "--set", "seq_len=16", "--set", "clusters=4"]);
    assert_eq!(density, 1.0);
    assert_eq!(dump.lines().next().unwrap(), "16 16 256");
}

#[test]
fn sample_mask_respects_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let small = ["--set", "seq_len=24", "--set", "clusters=4"];
    let a = sample(tmp.path(), "a", &[&small[..], &["--seed", "1"]].concat());
    let b = sample(tmp.path(), "b", &[&small[..], &["--seed", "1"]].concat());
    let c = sample(tmp.path(), "c", &[&small[..], &["--seed", "2"]].concat());
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn sample_mask_reads_sequences_and_rejects_over_length_input() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("seq.txt");
    fs::write(&input, "3 1 4 1 5 9 2 6\n").unwrap();
    let base = ["--set", "seq_len=10", "--set", "clusters=3", "--input", input.to_str().unwrap()];
    let (dump, _) = sample(tmp.path(), "ok", &base);
    assert!(dump.starts_with("8 8 "));

    fs::write(&input, "1 2 3 4 5 6 7 8 9 10 1 2\n").unwrap();
    let o = sbmt(&["sample-mask", "--set", "seq_len=10", "--set", "clusters=3", "--input", input.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("exceeds"), "{}", stderr(&o));
}

#[test]
fn verify_theory_passes_for_sixteen_tokens() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sbmt(&["verify-theory", "--n", "16", "--k", "4"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let s: usize = out.lines().find_map(|l| l.strip_prefix("s = ")).unwrap().trim().parse().unwrap();
    assert!(s <= 3);
    assert!(out.contains("result = PASS"));
}

#[test]
fn verify_theory_rejects_impossible_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sbmt(&["verify-theory", "--n", "16", "--k", "0"], tmp.path());
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn tiny_gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sbmt(&["gradcheck", "--tiny"], tmp.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().skip(1).take_while(|l| !l.starts_with("max_rel")).all(|l| l.ends_with("PASS")));
    assert!(!stderr(&o).contains("warning"));
}

#[test]
fn flops_match_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sbmt(&["flops", "--n", "256", "--m", "65536", "--k", "128", "--d", "32"], tmp.path());
    assert!(o.status.success());
    let (n, m, k, d) = (256u64, 65536u64, 128u64, 32u64);
    let expected = [
        ("memberships", 4 * (2 * n * d * d + n * d * k)),
        ("block_matrix", 2 * k * k * d),
        ("sampling", 4 * m + 4 * n * k + 2 * k * k + n),
        ("masked_dot_products", 2 * m * d),
        ("softmax_pool", 2 * m * d + 5 * m),
    ];
    let out = stdout(&o);
    for (name, flops) in expected {
        let line = out.lines().find(|l| l.starts_with(&format!("{name},"))).unwrap();
        assert_eq!(line.split(',').nth(1).unwrap().parse::<u64>().unwrap(), flops, "{name}");
    }
    let total: u64 = expected.iter().map(|e| e.1).sum();
    assert!(out.contains(&format!("# total_flops = {total}")));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(sbmt(&["flops", "--n", "4"], tmp.path()).status.code(), Some(2));
    assert_eq!(sbmt(&["flops", "--n", "4", "--m", "17", "--k", "2", "--d", "2"], tmp.path()).status.code(), Some(2));
    assert_eq!(sbmt(&["no-such-command"], tmp.path()).status.code(), Some(2));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sbmt(&["sample-mask", "--set", "seq_len=8", "--set", "clusters=2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dirs: Vec<String> =
        fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].starts_with("sample-mask-"));
}

#[test]
fn generated_data_is_a_labelled_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data.txt");
    let o = sbmt(&["generate-data", "--seq-len", "10", "--batch-size", "3", "--out", out.to_str().unwrap()], tmp.path());
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let (toks, labels) = line.split_once('|').unwrap();
        let toks: Vec<u32> = toks.split_whitespace().map(|t| t.parse().unwrap()).collect();
        let labels: Vec<u8> = labels.split_whitespace().map(|t| t.parse().unwrap()).collect();
        for (t, &l) in toks.iter().zip(&labels) {
            assert_eq!(l == 1, toks.iter().filter(|&&x| x == *t).count() > 1);
        }
    }
}
