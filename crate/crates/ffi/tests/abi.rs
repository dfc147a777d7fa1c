use std::ffi::CString;
use std::ptr;

use sparsect_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { sct_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    assert!(n >= bytes.len());
    String::from_utf8(bytes).unwrap()
}

fn geometry() -> SctGeometry {
    SctGeometry { sad: 1000.0, sid: 1500.0, detector_rows: 8, detector_cols: 8, pixel_pitch: 16.0, volume_half_extent: 40.0 }
}

#[test]
fn volume_lifecycle_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("v.vol").to_str().unwrap()).unwrap();
    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(sct_phantom_make(3, 8, 40.0, &mut v), SctStatus::Ok);
        let mut dims = [0usize; 3];
        assert_eq!(sct_volume_dims(v, dims.as_mut_ptr()), SctStatus::Ok);
        assert_eq!(dims, [8, 8, 8]);
        let mut data = vec![0.0; 512];
        assert_eq!(sct_volume_copy_data(v, data.as_mut_ptr(), 512), SctStatus::Ok);
        assert!(data.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(sct_volume_copy_data(v, data.as_mut_ptr(), 10), SctStatus::Usage);

        assert_eq!(sct_volume_write(v, path.as_ptr()), SctStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(sct_volume_read(path.as_ptr(), &mut back), SctStatus::Ok);
        let mut m = SctMetrics::default();
        assert_eq!(sct_volume_compare(back, v, &mut m), SctStatus::Ok);
        assert_eq!(m.psnr_db, 999.0);
        assert_eq!(m.ssim, 1.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.rmse_hu, 0.0);

        let mut set = ptr::null_mut();
        assert_eq!(sct_drr_generate(v, geometry(), 5, &mut set), SctStatus::Ok);
        assert_eq!(sct_projections_len(set), 5);
        assert_eq!(sct_drr_generate(v, geometry(), 3, &mut set), SctStatus::Config);
        assert!(last_error().contains("preset"));
        sct_projections_free(set);
        sct_volume_free(back);
        sct_volume_free(v);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(sct_volume_read(ptr::null(), &mut v), SctStatus::NullArgument);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/volume.vol").unwrap();
        assert_eq!(sct_volume_read(missing.as_ptr(), &mut v), SctStatus::Io);
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.vol");
        std::fs::write(&bad, b"not a volume\n").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(sct_volume_read(bad.as_ptr(), &mut v), SctStatus::Format);
        assert!(v.is_null());
        assert_eq!(sct_projections_len(ptr::null()), 0);
        sct_volume_free(ptr::null_mut());
        // Length query without a buffer.
        assert!(sct_last_error_message(ptr::null_mut(), 0) > 0);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sparsect.h")).unwrap();
    for name in [
        "sct_last_error_message",
        "sct_volume_read",
        "sct_volume_free",
        "sct_phantom_make",
        "sct_drr_generate",
        "sct_model_load",
        "sct_reconstruct",
        "sct_volume_compare",
        "SCT_STATUS_OK",
        "typedef struct SctVolume SctVolume",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn reconstruct_from_checkpoint() {
    use sparsect::field::FieldArch;
    use sparsect::trainer::{save_checkpoint, TrainConfig, TrainState};

    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        samples_per_ray: 8,
        field: FieldArch { hidden_width: 16, shape_layers: 2, latent_shape_dim: 4, latent_app_dim: 4, ..FieldArch::default() },
        ..TrainConfig::default()
    };
    let state = TrainState::new(&cfg, 1).unwrap();
    save_checkpoint(&state, dir.path()).unwrap();
    let ckpt = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(sct_model_load(ckpt.as_ptr(), &mut model), SctStatus::Ok);
        let mut v = ptr::null_mut();
        assert_eq!(sct_phantom_make(1, 8, 40.0, &mut v), SctStatus::Ok);
        let mut refs = ptr::null_mut();
        assert_eq!(sct_drr_generate(v, geometry(), 2, &mut refs), SctStatus::Ok);
        let mut recon = ptr::null_mut();
        assert_eq!(sct_reconstruct(model, refs, 2, 6, &mut recon), SctStatus::Ok);
        let mut dims = [0usize; 3];
        sct_volume_dims(recon, dims.as_mut_ptr());
        assert_eq!(dims, [6, 6, 6]);
        let mut out = ptr::null_mut();
        assert_eq!(sct_reconstruct(ptr::null(), refs, 2, 6, &mut out), SctStatus::NullArgument);
        let mut m = SctMetrics::default();
        assert_eq!(sct_volume_compare(recon, v, &mut m), SctStatus::Data);
        for h in [v, recon] {
            sct_volume_free(h);
        }
        sct_projections_free(refs);
        sct_model_free(model);
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"sparsect.h\"\nint main(void) { SctVolume *v = 0; char b[8];\n\
         SctStatus s = sct_phantom_make(1, 4, 40.0, &v); sct_last_error_message(b, sizeof b);\n\
         sct_volume_free(v); return s == SCT_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
