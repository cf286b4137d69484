use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use varsig::model::{Method, Model, ModelConfig, Stats};
use varsig::physics::{PhysicsConfig, VideoCsConfig};
use varsig_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(varsig_last_error()) }.to_str().unwrap().to_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn video_model() -> *mut VarsigForwardModel {
    let json = cstr(r#"{"system": "video_cs", "n": 8, "mask_seed": 3}"#);
    let mut fm = ptr::null_mut();
    assert_eq!(unsafe { varsig_forward_model_new(json.as_ptr(), &mut fm) }, VarsigStatus::Ok, "{}", last_error());
    fm
}

#[test]
fn forward_model_matches_the_library() {
    let fm = video_model();
    let (mut n, mut m) = (0, 0);
    unsafe {
        assert_eq!(varsig_forward_model_lengths(fm, &mut n, &mut m), VarsigStatus::Ok);
    }
    assert_eq!((n, m), (8 * 8 * 4 * 3, 8 * 8 * 3));
    let f: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin().abs()).collect();
    let mut g = vec![0.0; m];
    unsafe {
        assert_eq!(varsig_forward_model_apply(fm, f.as_ptr(), n, g.as_mut_ptr(), m), VarsigStatus::Ok);
    }
    let cfg = VideoCsConfig {
        n: 8,
        mask_seed: 3,
        ..Default::default()
    };
    let want = PhysicsConfig::VideoCs(cfg).build().unwrap().apply_flat(&f).unwrap();
    assert_eq!(g, want);

    let mut fid = 0.0;
    unsafe {
        let st = varsig_fidelity(fm, f.as_ptr(), n, g.as_ptr(), m, VarsigPsnrFormula::Standard, &mut fid);
        assert_eq!(st, VarsigStatus::Ok);
    }
    assert_eq!(fid, 99.0);

    let st = unsafe { varsig_forward_model_apply(fm, f.as_ptr(), n - 1, g.as_mut_ptr(), m) };
    assert_eq!(st, VarsigStatus::Shape);
    assert!(!last_error().is_empty());
    unsafe { varsig_forward_model_free(fm) };
}

#[test]
fn bad_arguments_map_to_status_codes() {
    let mut fm = ptr::null_mut();
    unsafe {
        assert_eq!(varsig_forward_model_new(ptr::null(), &mut fm), VarsigStatus::NullPointer);
        assert!(last_error().contains("config_json"));
        let json = cstr(r#"{"system": "telescope"}"#);
        assert_eq!(varsig_forward_model_new(json.as_ptr(), &mut fm), VarsigStatus::Config);
        let json = cstr(r#"{"system": "video_cs", "n": 0}"#);
        assert_ne!(varsig_forward_model_new(json.as_ptr(), &mut fm), VarsigStatus::Ok);
        assert!(fm.is_null());

        let mut model = ptr::null_mut();
        let dir = cstr("/no/such/artifact");
        assert_eq!(varsig_model_load(dir.as_ptr(), &mut model), VarsigStatus::MissingFile);
        assert!(model.is_null());

        let (mut n, mut m) = (0, 0);
        assert_eq!(varsig_forward_model_lengths(ptr::null(), &mut n, &mut m), VarsigStatus::NullPointer);
        varsig_forward_model_free(ptr::null_mut());
        varsig_model_free(ptr::null_mut());
        varsig_tensor_free(ptr::null_mut());
    }
    let fm = video_model();
    assert_eq!(last_error(), "");
    unsafe { varsig_forward_model_free(fm) };
}

#[test]
fn tensors_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let path = cstr(tmp.path().join("t.tns").to_str().unwrap());
    let dims = [2usize, 3];
    let data = [1.0, -2.5, 3.0, 0.0, 1e-300, 7.0];
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(varsig_tensor_write(path.as_ptr(), dims.as_ptr(), 2, data.as_ptr(), 6), VarsigStatus::Ok);
        assert_eq!(varsig_tensor_read(path.as_ptr(), &mut t), VarsigStatus::Ok);
        let (mut rank, mut len) = (0, 0);
        assert_eq!(varsig_tensor_info(t, &mut rank, &mut len), VarsigStatus::Ok);
        assert_eq!((rank, len), (2, 6));
        let (mut d, mut v) = ([0usize; 2], [0.0; 6]);
        assert_eq!(varsig_tensor_copy(t, d.as_mut_ptr(), 2, v.as_mut_ptr(), 6), VarsigStatus::Ok);
        assert_eq!((d, v), (dims, data));
        assert_eq!(varsig_tensor_copy(t, d.as_mut_ptr(), 2, v.as_mut_ptr(), 5), VarsigStatus::Shape);
        varsig_tensor_free(t);

        let garbage = tmp.path().join("bad.tns");
        std::fs::write(&garbage, b"not a tensor").unwrap();
        let garbage = cstr(garbage.to_str().unwrap());
        let mut t = ptr::null_mut();
        assert_eq!(varsig_tensor_read(garbage.as_ptr(), &mut t), VarsigStatus::Format);
    }
}

#[test]
fn psnr_of_known_error() {
    let a = [0.0, 1.0, 2.0, 3.0];
    let b = [0.0, 1.0, 2.0, 4.0];
    let (mut linear, mut standard) = (0.0, 0.0);
    unsafe {
        assert_eq!(varsig_psnr(a.as_ptr(), b.as_ptr(), 4, VarsigPsnrFormula::Linear, &mut linear), VarsigStatus::Ok);
        assert_eq!(varsig_psnr(a.as_ptr(), b.as_ptr(), 4, VarsigPsnrFormula::Standard, &mut standard), VarsigStatus::Ok);
    }
    // max 4, MSE 1/4
    assert!((linear - 10.0 * 16f64.log10()).abs() < 1e-12);
    assert!((standard - 10.0 * 64f64.log10()).abs() < 1e-12);
}

#[test]
fn saved_model_retrieves_through_the_c_api() {
    let cfg = VideoCsConfig {
        n: 8,
        mask_seed: 1,
        ..Default::default()
    };
    let mcfg = ModelConfig {
        latent_dim: 4,
        recurrences: 2,
        enc_channels: [4, 4, 4],
        dec_channels: [4, 4],
        z_channels: 2,
        lstm_hidden: 3,
        ..Default::default()
    };
    let model = Model::new(mcfg, Method::Variational, PhysicsConfig::VideoCs(cfg), Stats::identity()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    varsig::artifact::save_model(&model, tmp.path()).unwrap();

    let g: Vec<f64> = (0..192).map(|i| (i % 5) as f64 * 0.2).collect();
    let want = model.reconstruct(&g, 3, 11).unwrap();

    let dir = cstr(tmp.path().to_str().unwrap());
    let mut h = ptr::null_mut();
    let (mut n, mut m) = (0, 0);
    let mut out = vec![0.0; 3 * 768];
    unsafe {
        assert_eq!(varsig_model_load(dir.as_ptr(), &mut h), VarsigStatus::Ok, "{}", last_error());
        assert_eq!(varsig_model_lengths(h, &mut n, &mut m), VarsigStatus::Ok);
        assert_eq!((n, m), (768, 192));
        let st = varsig_model_retrieve(h, g.as_ptr(), 192, 3, 11, out.as_mut_ptr(), out.len());
        assert_eq!(st, VarsigStatus::Ok, "{}", last_error());
        let st = varsig_model_retrieve(h, g.as_ptr(), 192, 3, 11, out.as_mut_ptr(), 10);
        assert_eq!(st, VarsigStatus::Shape);
        varsig_model_free(h);
    }
    for (k, f) in want.iter().enumerate() {
        assert_eq!(&out[k * 768..(k + 1) * 768], f.as_flat());
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(varsig_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point_and_compiles() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/varsig.h")).unwrap();
    let src = std::fs::read_to_string(dir.join("src/lib.rs")).unwrap();
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from header");
        }
    }
    if std::process::Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping syntax check");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("use.c");
    std::fs::write(
        &c,
        "#include \"varsig.h\"\nint main(void) { VarsigStatus s = VARSIG_STATUS_OK; (void)varsig_version(); return (int)s; }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-std=c99", "-I"])
        .arg(dir.join("include"))
        .arg(&c)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
