use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use mmcot::data::{tokenize, Vocabulary, VisionFeatures};
use mmcot::model::{save_checkpoint, Model, ModelConfig};
use mmcot::pipeline::{StageModel, StageSpec};
use mmcot_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> StageModel {
    let vocab = Vocabulary::build(["there are 3 red patches . the answer is ( A ) ."]);
    let config = ModelConfig {
        d_model: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_dim: 32,
        max_len: 24,
        patches: 3,
        vision_dim: 4,
        ..ModelConfig::default()
    };
    let model = Model::new(config, vocab, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    StageModel {
        spec: StageSpec::rationale(true),
        model,
    }
}

fn write_model(dir: &Path) -> (StageModel, CString) {
    let m = tiny_model();
    let path = dir.join("m.mmck");
    save_checkpoint(&path, &m.to_checkpoint()).unwrap();
    (m, CString::new(path.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    let p = mmcot_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn generate_matches_the_rust_api() {
    let dir = tempfile::tempdir().unwrap();
    let (reference, path) = write_model(dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { mmcot_model_load(path.as_ptr(), &mut handle) }, MmcotStatus::Ok);
    assert!(mmcot_last_error().is_null());

    let (mut p, mut d, mut v) = (0, 0, 0);
    assert_eq!(unsafe { mmcot_model_shape(handle, &mut p, &mut d, &mut v) }, MmcotStatus::Ok);
    assert_eq!((p, d, v), (3, 4, reference.model.vocab.len()));

    let feats: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
    let input = CString::new("there are red patches").unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { mmcot_model_generate(handle, input.as_ptr(), feats.as_ptr(), feats.len(), 10, &mut out) };
    assert_eq!(status, MmcotStatus::Ok);
    let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { mmcot_string_free(out) };

    let m = &reference.model;
    let ids = tokenize("there are red patches", &m.vocab);
    let expected = m
        .generate_greedy(&ids, &VisionFeatures::new(3, 4, feats).unwrap(), 10)
        .unwrap();
    assert_eq!(text, expected.text);

    let mut zeros_out = ptr::null_mut();
    let status = unsafe { mmcot_model_generate(handle, input.as_ptr(), ptr::null(), 0, 10, &mut zeros_out) };
    assert_eq!(status, MmcotStatus::Ok);
    let zeros_text = unsafe { CStr::from_ptr(zeros_out) }.to_str().unwrap().to_owned();
    unsafe { mmcot_string_free(zeros_out) };
    let expected = m.generate_greedy(&ids, &VisionFeatures::zeros(3, 4), 10).unwrap();
    assert_eq!(zeros_text, expected.text);

    unsafe { mmcot_model_free(handle) };
}

#[test]
fn error_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.mmck").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mmcot_model_load(missing.as_ptr(), &mut handle) }, MmcotStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("none.mmck"));

    let junk = dir.path().join("junk.mmck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mmcot_model_load(junk.as_ptr(), &mut handle) }, MmcotStatus::Format);
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { mmcot_model_load(ptr::null(), &mut handle) }, MmcotStatus::NullPointer);
    assert_eq!(unsafe { mmcot_model_load(junk.as_ptr(), ptr::null_mut()) }, MmcotStatus::NullPointer);

    let (_, path) = write_model(dir.path());
    assert_eq!(unsafe { mmcot_model_load(path.as_ptr(), &mut handle) }, MmcotStatus::Ok);
    let input = CString::new("red").unwrap();
    let feats = [0.0f32; 5];
    let mut out = ptr::null_mut();
    let status = unsafe { mmcot_model_generate(handle, input.as_ptr(), feats.as_ptr(), 5, 4, &mut out) };
    assert_eq!(status, MmcotStatus::InvalidArgument);
    assert!(out.is_null());
    assert!(last_error().contains("3x4"));

    let bad = [0xffu8, 0xfe, 0];
    let status = unsafe { mmcot_model_generate(handle, bad.as_ptr().cast(), ptr::null(), 0, 4, &mut out) };
    assert_eq!(status, MmcotStatus::InvalidUtf8);
    unsafe { mmcot_model_free(handle) };
    unsafe { mmcot_model_free(ptr::null_mut()) };
    unsafe { mmcot_string_free(ptr::null_mut()) };
}

#[test]
fn scoring_helpers() {
    let a = CString::new("the cat sat on the mat").unwrap();
    let b = CString::new("the cat on the mat").unwrap();
    let mut score = 0.0;
    assert_eq!(unsafe { mmcot_rouge_l(a.as_ptr(), b.as_ptr(), &mut score) }, MmcotStatus::Ok);
    assert!((score - 2.0 * 5.0 / 11.0).abs() < 1e-12);

    let text = CString::new("so the answer is (C) and then The answer is ( b ).").unwrap();
    let mut index = 0;
    assert_eq!(unsafe { mmcot_extract_answer(text.as_ptr(), 4, &mut index) }, MmcotStatus::Ok);
    assert_eq!(index, 1);
    let none = CString::new("no option mentioned").unwrap();
    assert_eq!(unsafe { mmcot_extract_answer(none.as_ptr(), 4, &mut index) }, MmcotStatus::Ok);
    assert_eq!(index, -1);
    assert_eq!(
        unsafe { mmcot_extract_answer(none.as_ptr(), 9, &mut index) },
        MmcotStatus::InvalidArgument
    );

    let mut n = 0;
    assert_eq!(unsafe { mmcot_count_tokens(b.as_ptr(), &mut n) }, MmcotStatus::Ok);
    assert_eq!(n, 5);

    let v = unsafe { CStr::from_ptr(mmcot_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mmcot.h")).unwrap();
    for name in [
        "mmcot_model_load",
        "mmcot_model_free",
        "mmcot_model_generate",
        "mmcot_model_shape",
        "mmcot_rouge_l",
        "mmcot_extract_answer",
        "mmcot_string_free",
        "mmcot_last_error",
        "MMCOT_STATUS_NULL_POINTER",
        "typedef struct MmcotModel MmcotModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mmcot.h\"\nint main(void) { MmcotModel *m = 0; return (int)mmcot_model_load(\"x\", &m); }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = std::process::Command::new(cc)
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
