//! Exercises the C ABI through the exported extern functions, the same way a
//! foreign binding would (modulo linking).

use std::ffi::{CStr, CString};

use groundflow_capi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(gf_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn version_is_nonempty() {
    let v = unsafe { CStr::from_ptr(gf_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn field_lifecycle_and_evaluation() {
    let mut field: *mut GfField = std::ptr::null_mut();
    let status = unsafe {
        gf_field_create(1.0, 408.0, 408.0, 1020.0, 1020.0, 0.0, 20, 7, &mut field)
    };
    assert_eq!(status, GfStatus::Ok);
    assert_eq!(unsafe { gf_field_n_terms(field) }, 20);

    let mut logk = [0.0f64; 3];
    assert_eq!(
        unsafe { gf_field_logk(field, 510.0, 510.0, logk.as_mut_ptr()) },
        GfStatus::Ok
    );
    let mut k = [0.0f64; 3];
    assert_eq!(
        unsafe { gf_field_conductivity(field, 510.0, 510.0, k.as_mut_ptr()) },
        GfStatus::Ok
    );
    // K = exp(Z) and dK = K dZ
    assert!((k[0] - logk[0].exp()).abs() < 1e-12);
    assert!((k[1] - k[0] * logk[1]).abs() < 1e-12);

    // save / load round trip preserves evaluation
    let dir = tempdir();
    let path = dir.join("field.txt");
    let cpath = c(path.to_str().unwrap());
    assert_eq!(unsafe { gf_field_save(field, cpath.as_ptr()) }, GfStatus::Ok);
    let mut reloaded: *mut GfField = std::ptr::null_mut();
    assert_eq!(
        unsafe { gf_field_load(cpath.as_ptr(), &mut reloaded) },
        GfStatus::Ok
    );
    let mut logk2 = [0.0f64; 3];
    assert_eq!(
        unsafe { gf_field_logk(reloaded, 510.0, 510.0, logk2.as_mut_ptr()) },
        GfStatus::Ok
    );
    assert_eq!(logk, logk2);

    unsafe {
        gf_field_free(field);
        gf_field_free(reloaded);
        gf_field_free(std::ptr::null_mut()); // NULL is a no-op
    }
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn invalid_arguments_set_error_codes() {
    let mut field: *mut GfField = std::ptr::null_mut();
    // negative variance -> spec error
    let status = unsafe {
        gf_field_create(-1.0, 408.0, 408.0, 1020.0, 1020.0, 0.0, 20, 7, &mut field)
    };
    assert_eq!(status, GfStatus::Spec);
    assert!(last_error().contains("variance"));

    // NULL handle -> null-arg error
    let mut out = [0.0f64; 3];
    let status = unsafe { gf_field_logk(std::ptr::null(), 0.0, 0.0, out.as_mut_ptr()) };
    assert_eq!(status, GfStatus::NullArg);

    // missing file -> io error
    let mut loaded: *mut GfField = std::ptr::null_mut();
    let missing = c("/nonexistent/field.txt");
    let status = unsafe { gf_field_load(missing.as_ptr(), &mut loaded) };
    assert_eq!(status, GfStatus::Io);
}

#[test]
fn simulation_through_the_abi() {
    let mut field: *mut GfField = std::ptr::null_mut();
    unsafe {
        assert_eq!(
            gf_field_create(1.0, 408.0, 408.0, 1020.0, 1020.0, 0.0, 10, 3, &mut field),
            GfStatus::Ok
        );
    }
    let mut sol: *mut GfSolution = std::ptr::null_mut();
    let status = unsafe { gf_simulate(field, 21, 21, 0.2, 10, 1.0, 0.0, 1e-4, &mut sol) };
    assert_eq!(status, GfStatus::Ok);
    assert_eq!(unsafe { gf_solution_n_steps(sol) }, 10);

    let mut buf = vec![0.0f64; 21 * 21];
    assert_eq!(
        unsafe { gf_solution_heads(sol, 10, buf.as_mut_ptr(), buf.len()) },
        GfStatus::Ok
    );
    // maximum principle holds for the copied slice
    assert!(buf.iter().all(|h| (-1e-9..=1.0 + 1e-9).contains(h)));
    // left column sits at the prescribed head
    assert!((buf[0] - 1.0).abs() < 1e-12);

    // out-of-range step and short buffer are rejected
    assert_eq!(
        unsafe { gf_solution_heads(sol, 11, buf.as_mut_ptr(), buf.len()) },
        GfStatus::Spec
    );
    assert_eq!(
        unsafe { gf_solution_heads(sol, 1, buf.as_mut_ptr(), 5) },
        GfStatus::Spec
    );

    unsafe {
        gf_solution_free(sol);
        gf_field_free(field);
    }
}

#[test]
fn network_checkpoint_via_abi() {
    use groundflow::net::{write_checkpoint, Activation, MlpParams, Scaling};
    let params = MlpParams::init(
        5,
        &[3, 10, 10, 1],
        Activation::Tanh,
        Scaling {
            t_scale: 10.0,
            x_scale: 1020.0,
            y_scale: 1020.0,
            head_offset: 0.0,
            head_scale: 1.0,
        },
    )
    .unwrap();
    let dir = tempdir();
    let path = dir.join("checkpoint.txt");
    std::fs::write(&path, write_checkpoint(&params)).unwrap();

    let cpath = c(path.to_str().unwrap());
    let mut network: *mut GfNetwork = std::ptr::null_mut();
    assert_eq!(
        unsafe { gf_network_load(cpath.as_ptr(), &mut network) },
        GfStatus::Ok
    );
    let mut h = 0.0f64;
    assert_eq!(
        unsafe { gf_network_predict(network, 3.0, 510.0, 510.0, &mut h) },
        GfStatus::Ok
    );
    assert_eq!(h, groundflow::net::predict(&params, 3.0, 510.0, 510.0));

    let mut jet = [0.0f64; 7];
    assert_eq!(
        unsafe { gf_network_jet(network, 3.0, 510.0, 510.0, jet.as_mut_ptr()) },
        GfStatus::Ok
    );
    assert_eq!(jet[0], h);
    let reference = groundflow::net::jet_physical(&params, 3.0, 510.0, 510.0);
    assert_eq!(jet[2], reference.d_x);
    assert_eq!(jet[5], reference.d_xx);

    unsafe { gf_network_free(network) };
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn scenario_through_the_abi() {
    // desk-top sized run so the test stays quick
    let spec_text = "kind = future_prediction\n\
                     nx = 11\nny = 11\nn_steps = 10\nn_terms = 5\n\
                     obs_first_step = 1\nobs_last_step = 4\nobs_points_per_step = 30\n\
                     eval_first_step = 5\neval_last_step = 10\n\
                     epochs = 30\nlr = 2e-3\nhidden_layers = 2\nhidden_width = 8\n\
                     n_colloc = 40\nn_bc = 20\nn_ic = 20\nlog_every = 10\n";
    let dir = tempdir();
    let spec_path = dir.join("tiny.spec");
    std::fs::write(&spec_path, spec_text).unwrap();

    let cspec = c(spec_path.to_str().unwrap());
    let cout = c(dir.join("run").to_str().unwrap());
    let mut metrics = GfPairMetrics::default();
    let status = unsafe { gf_run_scenario(cspec.as_ptr(), cout.as_ptr(), &mut metrics) };
    assert_eq!(status, GfStatus::Ok, "error: {}", last_error());
    assert!(metrics.guided_relative_l2.is_finite() && metrics.guided_relative_l2 >= 0.0);
    assert!(metrics.baseline_r2 <= 1.0);
    assert!(dir.join("run").join("metrics.json").exists());
    assert!(dir.join("run").join("guided_checkpoint.txt").exists());
    std::fs::remove_dir_all(dir).ok();
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "gfcapi-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
