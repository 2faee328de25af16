#![cfg(feature = "onnx")]

use std::path::PathBuf;

use ndarray::Array3;
use resad_core::backbone::{check_fixture, extract_features, ExpectedOutputs, ExportManifest};
use resad_core::dataset::InputTensor;
use resad_core::{load_model, Backbone, Error};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn tiny() -> PathBuf {
    fixtures().join("tiny_backbone.onnx")
}

#[test]
fn loads_named_outputs_and_reports_shapes() {
    let handle = load_model(
        tiny(),
        &ExpectedOutputs {
            side: Some(64),
            channels: Some((8, 16)),
        },
    )
    .unwrap();
    assert_eq!(handle.side(), 64);
    assert_eq!(handle.channels(), (8, 16));
    assert_eq!(handle.grids(), [(8, 8), (4, 4)]);
    assert_eq!(handle.strides(), (8, 16));
    assert_eq!(handle.fingerprint().len(), 64);
}

#[test]
fn extraction_is_deterministic_and_channel_last() {
    let handle = load_model(tiny(), &ExpectedOutputs::default()).unwrap();
    let x = InputTensor::from_chw(Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
        ((c * 31 + y * 7 + x) % 17) as f32 / 17.0 - 0.5
    }))
    .unwrap();
    let (a2, a3) = extract_features(&handle, &x).unwrap();
    let (b2, b3) = extract_features(&handle, &x).unwrap();
    assert_eq!(a2.dim(), (8, 8, 8));
    assert_eq!(a3.dim(), (4, 4, 16));
    assert_eq!(a2, b2);
    assert_eq!(a3, b3);
}

#[test]
fn wrong_input_side_is_rejected() {
    let handle = load_model(tiny(), &ExpectedOutputs::default()).unwrap();
    let x = InputTensor::from_chw(Array3::zeros((3, 96, 96))).unwrap();
    assert!(matches!(extract_features(&handle, &x), Err(Error::Shape(_))));
    assert!(matches!(
        load_model(
            tiny(),
            &ExpectedOutputs {
                side: Some(96),
                channels: None
            }
        ),
        Err(Error::Shape(_))
    ));
}

#[test]
fn fixture_parity_within_tolerance() {
    let handle = load_model(tiny(), &ExpectedOutputs::default()).unwrap();
    let report = check_fixture(&handle, fixtures()).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.max_abs_err_stage2 <= 1e-4 && report.max_abs_err_stage3 <= 1e-4);
}

#[test]
fn manifest_matches_model() {
    let m = ExportManifest::load(fixtures().join("manifest.json")).unwrap();
    m.validate().unwrap();
    assert_eq!(m.outputs["stage2"], [1, 8, 8, 8]);
    assert_eq!(m.outputs["stage3"], [1, 16, 4, 4]);
}

#[test]
fn load_errors_are_classified() {
    assert!(matches!(
        load_model(fixtures().join("missing.onnx"), &ExpectedOutputs::default()),
        Err(Error::ModelLoad { .. })
    ));
    assert!(matches!(
        load_model(fixtures().join("tiny_missing_stage3.onnx"), &ExpectedOutputs::default()),
        Err(Error::OutputMismatch(_))
    ));
    assert!(matches!(
        load_model(fixtures().join("manifest.json"), &ExpectedOutputs::default()),
        Err(Error::ModelLoad { .. })
    ));
    assert!(matches!(
        load_model(
            tiny(),
            &ExpectedOutputs {
                side: None,
                channels: Some((512, 1024))
            }
        ),
        Err(Error::ChannelMismatch(_))
    ));
    for e in [
        Error::ModelLoad {
            path: "x".into(),
            message: String::new(),
        },
        Error::OutputMismatch(String::new()),
        Error::ChannelMismatch(String::new()),
    ] {
        assert_eq!(e.exit_code(), 2);
    }
}
