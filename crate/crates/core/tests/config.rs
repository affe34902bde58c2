use gpm_core::config::{format_report, parse_report, Config};
use gpm_core::training::{KlForm, PatchSampling, Seeds};
use gpm_core::GpmError;

#[test]
fn desk_defaults_are_consistent() {
    let c = Config::desk();
    c.validate().unwrap();
    assert_eq!(c.dvae.vocab, c.gpm.vocab);
    assert_eq!(c.dvae.groups, c.gpm.groups);
    assert_eq!(c.dvae.hidden, c.gpm.input_dim);
    assert_eq!(c.dvae_train.optim.steps, 3000);
    assert_eq!(c.gpm_train.optim.steps, 2000);
    Config::full().validate().unwrap();
}

#[test]
fn file_values_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "seed = 3\ndvae_train.patch_sampling = per_step\ndvae_train.kl_form = per_patch\n").unwrap();
    let mut c = Config::load(&path).unwrap();
    assert_eq!(c.seeds, Seeds::from_base(3));
    assert_eq!(c.dvae_train.patch_sampling, PatchSampling::PerStep);
    assert_eq!(c.dvae_train.kl_form, KlForm::PerPatch);
    c.set_override("gpm_train.steps=50").unwrap();
    assert_eq!(c.gpm_train.optim.steps, 50);
    assert!(matches!(c.set_override("gpm_train.steps"), Err(GpmError::Config { line: 0, .. })));
}

#[test]
fn snapshot_survives_edits() {
    let mut c = Config::desk();
    c.set_override("classify.steps=7").unwrap();
    c.set_override("generate.mask_ratio=0.2").unwrap();
    assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
}

#[test]
fn inconsistent_models_fail_validation() {
    let err = Config::parse("gpm.vocab = 17\n").unwrap_err();
    match err {
        GpmError::Config { key, .. } => assert_eq!(key, "gpm.vocab"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(Config::parse("generate.mask_ratio = 1.5\n").is_err());
}

#[test]
fn unknown_key_reports_its_line() {
    let err = Config::parse("seed = 1\n\ndvae.vocabulary = 4\n").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 3") && msg.contains("dvae.vocabulary"), "{msg}");
}

#[test]
fn reports_preserve_order() {
    let pairs = [("z", "1".to_string()), ("a", "0.5".to_string())];
    let parsed = parse_report(&format_report(&pairs)).unwrap();
    assert_eq!(parsed[0].0, "z");
    assert_eq!(parsed[1].1, "0.5");
}
