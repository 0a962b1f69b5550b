use std::fs;
use std::path::{Path, PathBuf};

use vpn::config::{apply_override, resolve, RunConfig, SNAPSHOT_NAME};
use vpn::Error;
use vpn_core::embedding::EmbeddingLossKind;

fn desk() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

#[test]
fn defaults_resolve_without_a_file() {
    let cfg = resolve(None, &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.train.epochs, 30);
    assert_eq!(cfg.train.base_lr, 0.01);
    assert!(cfg.warm_start.is_none());
}

#[test]
fn desk_preset_resolves() {
    let cfg = resolve(Some(&desk()), &[]).unwrap();
    assert_eq!(cfg.train.base_lr, 0.1);
    assert_eq!(cfg.train.model.d_g, 16);
    assert_eq!(cfg.train.model.pose_conv_channels, [16, 16, 32]);
    assert_eq!(cfg.ablate.seeds.len(), 5);
}

#[test]
fn overrides_are_typed() {
    let cfg = resolve(
        None,
        &[
            "train.epochs=3".into(),
            "train.model.lambda1=0.5".into(),
            "train.model.coupler_enabled=false".into(),
            "train.model.embedding_loss_kind=kl_bi".into(),
            "ablate.seeds=[7, 8, 9]".into(),
            "ablate.variants=[\"backbone\"]".into(),
            "eval.checkpoint=runs/a b.vpnc".into(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.train.model.lambda1, 0.5);
    assert!(!cfg.train.model.coupler_enabled);
    assert_eq!(cfg.train.model.embedding_loss_kind, EmbeddingLossKind::KlBi);
    assert_eq!(cfg.ablate.seeds, vec![7, 8, 9]);
    assert_eq!(cfg.ablate.variants, vec!["backbone".to_string()]);
    assert_eq!(cfg.eval.checkpoint.as_deref(), Some(Path::new("runs/a b.vpnc")));
}

#[test]
fn unknown_keys_are_rejected_everywhere() {
    for o in ["bogus=1", "train.bogus=1", "train.model.bogus=1", "data.synthetic.bogus=1", "gradcheck.bogus=1"] {
        let err = resolve(None, &[o.into()]).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("bogus")), "{o}: {err}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "[train]\nepochs = 2\nlearning_rate = 0.1\n").unwrap();
    let err = resolve(Some(&path), &[]).unwrap_err();
    assert!(err.to_string().contains("learning_rate"), "{err}");
}

#[test]
fn malformed_overrides_and_values_fail() {
    for o in ["train.epochs", "train..epochs=1", "=3", "train.epochs=-1", "train.model.lambda1=2.0", "ablate.variants=[\"nope\"]"] {
        assert!(resolve(None, &[o.into()]).is_err(), "{o}");
    }
    let mut t = toml::Table::new();
    apply_override(&mut t, "a=1").unwrap();
    assert!(apply_override(&mut t, "a.b=2").is_err());
}

#[test]
fn missing_config_names_the_path() {
    let err = resolve(Some(Path::new("/no/such/dir/run.toml")), &[]).unwrap_err();
    assert_eq!(err.kind(), "config");
    assert!(err.to_string().contains("/no/such/dir/run.toml"));
}

#[test]
fn inconsistent_sections_are_rejected() {
    for o in [
        "data.synthetic.height=64",
        "train.model.classes=4",
        "data.test_first_index=0",
        "ablate.pair=[0, 9]",
        "dynamicity.bins=0",
        "gradcheck.step=0.0",
    ] {
        let err = resolve(None, &[o.into()]).unwrap_err();
        assert_eq!(err.kind(), "config", "{o}: {err}");
    }
}

#[test]
fn snapshot_alone_reproduces_the_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = resolve(
        Some(&desk()),
        &["train.model.lambda2=3.3e-7".into(), "warm_start=w.vpnc".into(), "train.seed=11".into()],
    )
    .unwrap();
    let snap = cfg.write_snapshot(dir.path()).unwrap();
    assert_eq!(snap, dir.path().join(SNAPSHOT_NAME));
    assert_eq!(resolve(Some(&snap), &[]).unwrap(), cfg);
}
