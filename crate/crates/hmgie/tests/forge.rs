mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use hmgie::config::{BackendSource, RunConfig};
use hmgie::core::forge::ForgeStatus;
use hmgie::forge::{list_images, Forge, ForgeConfig};
use hmgie::gateway::{Backend, FnBackend};
use serde_json::Value;

fn forge_with(backend: FnBackend, config: ForgeConfig) -> Forge {
    let run = RunConfig::default();
    let backend: Arc<dyn Backend> = Arc::new(backend);
    let bindings = run.forge_bindings(&BackendSource::Custom(backend)).unwrap();
    Forge::new(bindings, config).unwrap()
}

fn two_images() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("b.png"), common::PNG).unwrap();
    let mut other = common::PNG.to_vec();
    other.push(0);
    std::fs::write(dir.path().join("a.png"), other).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "not an image").unwrap();
    dir
}

fn lines(out: &[u8]) -> Vec<Value> {
    String::from_utf8(out.to_vec())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn two_images_give_sixteen_lines() {
    let dir = two_images();
    let images = list_images(dir.path()).unwrap();
    assert_eq!(images.len(), 2);
    let forge = forge_with(common::forge_backend(2), ForgeConfig::default());
    let mut out = Vec::new();
    let summary = forge.build_dataset(&images, &mut out).unwrap();
    assert_eq!(summary.lines, 16);
    assert!(summary.skipped.is_empty());
    let lines = lines(&out);
    assert_eq!(lines.len(), 16);
    let clean = lines.iter().filter(|l| l["label"] == 0).count();
    assert_eq!(clean, 8);
    for g in 1..=4u8 {
        let counts = &summary.per_granularity[&g];
        assert_eq!((counts.clean, counts.adversarial), (2, 2));
    }
    assert!(lines[0]["image_path"].as_str().unwrap().ends_with("a.png"));
}

#[test]
fn history_and_verdicts_follow_the_detector() {
    let dir = two_images();
    let image = hmgie::image::ImageInput::load(&dir.path().join("b.png")).unwrap();
    let forge = forge_with(common::forge_backend(3), ForgeConfig::default());
    let record = forge
        .perturb_iteratively("A brown dog sits in a green park.", &image, "b.png", 2)
        .unwrap();
    assert_eq!(record.status, ForgeStatus::AdversarialFound);
    assert_eq!(record.detector_verdicts, [1, 1, 0]);
    assert_eq!(record.perturbation_history.len(), 3);
    assert_eq!(record.perturbed_caption.as_deref(), record.perturbation_history.last().map(String::as_str));
    assert!(record.perturbation_history[2].contains("(attempt 3)"));
}

#[test]
fn budget_exhaustion_is_reported() {
    let dir = two_images();
    let image = hmgie::image::ImageInput::load(&dir.path().join("b.png")).unwrap();
    let config = ForgeConfig {
        max_iterations: 4,
        ..ForgeConfig::default()
    };
    let forge = forge_with(common::forge_backend(0), config);
    let record = forge.perturb_iteratively("A dog.", &image, "b.png", 1).unwrap();
    assert_eq!(record.status, ForgeStatus::MaxIterReached);
    assert_eq!(record.detector_verdicts, [1, 1, 1, 1]);
}

#[test]
fn undetected_lines_only_on_request() {
    let dir = two_images();
    let images = list_images(dir.path()).unwrap();
    let config = ForgeConfig {
        max_iterations: 2,
        ..ForgeConfig::default()
    };
    let mut out = Vec::new();
    let summary = forge_with(common::forge_backend(0), config.clone())
        .build_dataset(&images, &mut out)
        .unwrap();
    assert_eq!(summary.lines, 8);
    assert_eq!(summary.per_granularity[&1].undetected_omitted, 2);

    let config = ForgeConfig {
        include_undetected: true,
        ..config
    };
    let mut out = Vec::new();
    let summary = forge_with(common::forge_backend(0), config)
        .build_dataset(&images, &mut out)
        .unwrap();
    assert_eq!(summary.lines, 16);
}

#[test]
fn unchanged_perturbation_skips_the_detector() {
    let detector_calls = Arc::new(AtomicUsize::new(0));
    let seen = Arc::clone(&detector_calls);
    let backend = FnBackend::new("lazy", move |req| match common::classify(&req.prompt) {
        common::Kind::Perturb => Ok("A dog.".into()),
        common::Kind::Detector => {
            seen.fetch_add(1, Ordering::SeqCst);
            Ok(r#"{"Answer": "Yes", "Explanation": ""}"#.into())
        }
        _ => unreachable!(),
    });
    let config = ForgeConfig {
        max_iterations: 3,
        ..ForgeConfig::default()
    };
    let record = forge_with(backend, config)
        .perturb_iteratively("A dog.", &common::image(), "x.png", 1)
        .unwrap();
    assert_eq!(record.status, ForgeStatus::MaxIterReached);
    assert_eq!(record.detector_verdicts, [1, 1, 1]);
    assert_eq!(detector_calls.load(Ordering::SeqCst), 0);
}

#[test]
fn empty_image_list_writes_nothing() {
    let forge = forge_with(common::forge_backend(1), ForgeConfig::default());
    let mut out = Vec::new();
    let summary = forge.build_dataset(&[], &mut out).unwrap();
    assert_eq!((summary.images, summary.lines), (0, 0));
    assert!(out.is_empty());
}

#[test]
fn zero_iterations_is_invalid() {
    let config = ForgeConfig {
        max_iterations: 0,
        ..ForgeConfig::default()
    };
    let run = RunConfig::default();
    let backend: Arc<dyn Backend> = Arc::new(common::forge_backend(1));
    let bindings = run.forge_bindings(&BackendSource::Custom(backend)).unwrap();
    assert!(Forge::new(bindings, config).is_err());
}

#[test]
fn failing_captioners_skip_the_image() {
    let dir = two_images();
    let images = list_images(dir.path()).unwrap();
    let forge = forge_with(common::failing_backend("offline"), ForgeConfig::default());
    let mut out = Vec::new();
    let summary = forge.build_dataset(&images, &mut out).unwrap();
    assert_eq!(summary.lines, 0);
    assert_eq!(summary.skipped.len(), 8);
    assert!(summary.skipped[0].contains("offline"));
}
