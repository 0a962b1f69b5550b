use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn desk() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn vpn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpn"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vpn")
}

fn last_stderr_line(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).lines().last().unwrap_or("").to_string()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    o
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect()
}

const TINY: [&str; 6] = ["--set", "data.synthetic.samples_per_class=1", "--set", "data.test_samples_per_class=1", "--set", "train.epochs=1"];

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = vpn(dir.path(), &["--config", "/no/such/vpn.toml", "train"]);
    assert_eq!(o.status.code(), Some(2));
    let line = last_stderr_line(&o);
    assert!(line.starts_with("error: kind=config msg=\""), "{line}");
    assert!(line.contains("/no/such/vpn.toml"), "{line}");
}

#[test]
fn unknown_keys_and_subcommands_fail_with_a_parsable_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = vpn(dir.path(), &["--set", "train.model.widht=3", "gen"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(last_stderr_line(&o).starts_with("error: kind=config"));
    let o = vpn(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(last_stderr_line(&o).starts_with("error: kind=usage"));
}

#[test]
fn eval_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vpn(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(last_stderr_line(&o).contains("checkpoint"));
}

#[test]
fn gen_train_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let desk = desk();
    let desk = desk.to_str().unwrap();
    let mut args = vec!["--config", desk];
    args.extend(TINY);

    let g = d.join("gen");
    ok(vpn(&g, &[&args[..], &["gen"]].concat()));
    assert_eq!(rows(&g.join("train/manifest.csv")).len(), 8);
    assert!(g.join("resolved_config.toml").exists());

    let train_manifest = format!("data.train_manifest=\"{}\"", g.join("train/manifest.csv").display());
    let test_manifest = format!("data.test_manifest=\"{}\"", g.join("test/manifest.csv").display());
    let t = d.join("train");
    ok(vpn(&t, &[&args[..], &["--set", &train_manifest, "train"]].concat()));
    let history = rows(&t.join("history.csv"));
    assert_eq!(history.len(), 1);
    assert_eq!(rows(&t.join("steps.csv")).len(), 1);
    assert!(t.join("checkpoint.vpnc").exists());

    let e = d.join("eval");
    let ckpt = t.join("checkpoint.vpnc");
    let o = ok(vpn(
        &e,
        &[&args[..], &["--set", &test_manifest, "--set", "eval.dump_attention=true", "--set", "eval.dump_embedding=true", "eval", "--checkpoint", ckpt.to_str().unwrap()]].concat(),
    ));
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy"));
    assert_eq!(rows(&e.join("predictions.csv")).len(), 8);
    let confusion = rows(&e.join("confusion.csv"));
    assert_eq!(confusion.len(), 8);
    assert!(confusion.iter().all(|r| r[1..].iter().map(|v| v.parse::<usize>().unwrap()).sum::<usize>() == 1));
    let attention = rows(&e.join("attention.csv"));
    assert_eq!(attention.len(), 8);
    assert_eq!(attention[0][1].split(';').count(), 49);
    assert_eq!(attention[0][2].split(';').count(), 4);
    assert_eq!(attention[0][3].split(';').count(), 4 * 49);
    let embedding = rows(&e.join("embedding.csv"));
    let loss: f64 = embedding[0][1].parse().unwrap();
    assert!((0.0..=4.0).contains(&loss));
    let snapshot = fs::read_to_string(e.join("resolved_config.toml")).unwrap();
    assert!(snapshot.contains("checkpoint.vpnc"));

    let dy = d.join("dyn");
    ok(vpn(&dy, &[&args[..], &["--set", &test_manifest, "dynamicity", "--checkpoint", ckpt.to_str().unwrap()]].concat()));
    let bins = rows(&dy.join("dynamicity_bins.csv"));
    assert_eq!(bins.len(), 4);
    assert_eq!(bins.iter().map(|b| b[3].parse::<usize>().unwrap()).sum::<usize>(), 8);
    assert!(bins.iter().all(|b| !b[4].is_empty()));
    let per_sample = rows(&dy.join("dynamicity.csv"));
    assert!(per_sample.iter().all(|r| r[2].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn warm_start_loads_matching_checkpoints_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let desk = desk();
    let mut args = vec!["--config", desk.to_str().unwrap()];
    args.extend(TINY);
    ok(vpn(&d.join("a"), &[&args[..], &["train"]].concat()));
    let ckpt = format!("warm_start=\"{}\"", d.join("a/checkpoint.vpnc").display());
    ok(vpn(&d.join("b"), &[&args[..], &["--set", &ckpt, "train"]].concat()));
    let o = vpn(&d.join("c"), &[&args[..], &["--set", &ckpt, "--set", "train.model.d_a=8", "train"]].concat());
    assert_eq!(o.status.code(), Some(2), "{}", last_stderr_line(&o));
    assert!(last_stderr_line(&o).contains("warm start"));
}

#[test]
fn gradcheck_reports_every_group() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(vpn(dir.path(), &["--set", "gradcheck.backbones=[\"gcn\"]", "--set", "gradcheck.losses=[\"kl_fp\"]", "gradcheck"]));
    let last = String::from_utf8_lossy(&o.stdout).lines().last().unwrap().to_string();
    let err: f64 = last.strip_prefix("max_rel_error=").unwrap().parse().unwrap();
    assert!(err < 1e-4);
    let groups: Vec<String> = rows(&dir.path().join("gradcheck.csv")).into_iter().map(|r| r[2].clone()).collect();
    for g in ["visual.conv0", "visual.bn1", "pose.gcn", "attn.r1", "attn.r2", "embed.tv", "embed.tp", "cls.w", "cls.b"] {
        assert!(groups.iter().any(|x| x == g), "{g} missing from {groups:?}");
    }
}

#[test]
fn ablation_writes_cells_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let desk = desk();
    let mut args = vec!["--config", desk.to_str().unwrap()];
    args.extend(TINY);
    args.extend(["--set", "ablate.seeds=[1, 2, 3]", "--set", "ablate.variants=[\"backbone\", \"gcn-dissociated-ne\"]", "ablate"]);
    ok(vpn(dir.path(), &args));
    let cells = rows(&dir.path().join("ablation.csv"));
    assert_eq!(cells.len(), 6);
    assert!(cells.iter().all(|c| c[4].is_empty() && !c[3].is_empty()));
    let summary = rows(&dir.path().join("ablation_summary.csv"));
    assert_eq!(summary.iter().map(|s| s[0].as_str()).collect::<Vec<_>>(), ["backbone", "gcn-dissociated-ne"]);
    assert!(summary.iter().all(|s| s[1] == "3"));

    let o = vpn(dir.path(), &["--set", "ablate.seeds=[1, 2]", "ablate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(last_stderr_line(&o).contains("3 seeds"));
}
