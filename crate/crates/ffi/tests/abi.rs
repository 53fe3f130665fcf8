use std::ffi::{CStr, CString};
use std::ptr;

use fedrec_ffi::*;

fn last_error() -> String {
    let p = fedrec_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn synth(rows: usize, dim: usize, seed: u64) -> *mut FedrecEmbeddings {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fedrec_embeddings_synth(rows, dim, 0, seed, &mut h) }, FedrecStatus::Ok);
    h
}

fn values(h: *const FedrecEmbeddings) -> Vec<f32> {
    unsafe {
        let mut v = vec![0.0; fedrec_embeddings_rows(h) * fedrec_embeddings_dim(h)];
        assert_eq!(fedrec_embeddings_copy(h, v.as_mut_ptr(), v.len()), FedrecStatus::Ok);
        v
    }
}

#[test]
fn encrypt_audit_and_upload_round_trip() {
    unsafe {
        let raw = synth(12, 8, 1);
        assert_eq!(fedrec_embeddings_stage(raw), 0);
        let mut enc = ptr::null_mut();
        let mut map = vec![usize::MAX; 12];
        assert_eq!(fedrec_encrypt(raw, 0.1, 3, &mut enc, map.as_mut_ptr()), FedrecStatus::Ok);
        assert_eq!(fedrec_embeddings_stage(enc), 2);
        assert!(map.iter().enumerate().all(|(j, &m)| m != j && m < 12));

        let mut sim = 0.0;
        assert_eq!(fedrec_audit_similarity(raw, enc, &mut sim), FedrecStatus::Ok);
        assert!(sim < 1.0);

        let domain = CString::new("books").unwrap();
        let mut buf = FedrecBuffer { data: ptr::null_mut(), len: 0 };
        assert_eq!(fedrec_upload_encode(domain.as_ptr(), enc, &mut buf), FedrecStatus::Ok);
        assert_eq!(std::slice::from_raw_parts(buf.data, 4), b"SFM1");
        let mut back = ptr::null_mut();
        assert_eq!(fedrec_upload_decode(buf.data, buf.len, &mut back), FedrecStatus::Ok);
        assert_eq!(values(back), values(enc));

        // Raw rows cannot be uploaded.
        let mut bad = FedrecBuffer { data: ptr::null_mut(), len: 0 };
        assert_eq!(fedrec_upload_encode(domain.as_ptr(), raw, &mut bad), FedrecStatus::Format);
        assert!(!last_error().is_empty());

        fedrec_buffer_free(buf);
        for h in [raw, enc, back] {
            fedrec_embeddings_free(h);
        }
    }
}

#[test]
fn federate_returns_centroid_rows() {
    unsafe {
        let (ra, rb) = (synth(10, 6, 1), synth(8, 6, 2));
        let (mut ea, mut eb) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(fedrec_encrypt(ra, 0.05, 1, &mut ea, ptr::null_mut()), FedrecStatus::Ok);
        assert_eq!(fedrec_encrypt(rb, 0.05, 2, &mut eb, ptr::null_mut()), FedrecStatus::Ok);
        let names = [CString::new("a").unwrap(), CString::new("b").unwrap()];
        let name_ptrs = [names[0].as_ptr(), names[1].as_ptr()];
        let ups = [ea as *const _, eb as *const _];
        let mut out = [ptr::null_mut(); 2];
        let mut inertia = -1.0;
        let s = fedrec_federate(ups.as_ptr(), name_ptrs.as_ptr(), 2, 4, 300, 1e-4, 7, out.as_mut_ptr(), &mut inertia);
        assert_eq!(s, FedrecStatus::Ok, "{}", last_error());
        assert!(inertia >= 0.0);
        assert_eq!(fedrec_embeddings_rows(out[0]), 10);
        assert_eq!(fedrec_embeddings_rows(out[1]), 8);
        assert_eq!(fedrec_embeddings_stage(out[0]), 3);
        let mut distinct: Vec<Vec<u32>> = values(out[0])
            .chunks(6)
            .chain(values(out[1]).chunks(6))
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        distinct.sort();
        distinct.dedup();
        assert!(distinct.len() <= 4);

        let s = fedrec_federate(ups.as_ptr(), name_ptrs.as_ptr(), 2, 100, 300, 1e-4, 7, out.as_mut_ptr(), ptr::null_mut());
        assert_eq!(s, FedrecStatus::InvalidInput);
        for h in [ra, rb, ea, eb, out[0], out[1]] {
            fedrec_embeddings_free(h);
        }
    }
}

#[test]
fn errors_and_null_arguments() {
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(fedrec_embeddings_read(ptr::null(), &mut h), FedrecStatus::NullArgument);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/x.sfub").unwrap();
        assert_eq!(fedrec_embeddings_read(missing.as_ptr(), &mut h), FedrecStatus::Io);
        assert_eq!(fedrec_upload_decode(b"nope".as_ptr(), 4, &mut h), FedrecStatus::Format);
        assert_eq!(fedrec_embeddings_rows(ptr::null()), 0);
        assert_eq!(fedrec_embeddings_stage(ptr::null()), -1);
        fedrec_embeddings_free(ptr::null_mut());

        let one = synth(1, 4, 1);
        let mut enc = ptr::null_mut();
        assert_eq!(fedrec_encrypt(one, 0.1, 1, &mut enc, ptr::null_mut()), FedrecStatus::InvalidInput);
        assert_eq!(fedrec_encrypt(one, -1.0, 1, &mut enc, ptr::null_mut()), FedrecStatus::InvalidInput);
        let mut small = [0.0f32; 2];
        assert_eq!(fedrec_embeddings_copy(one, small.as_mut_ptr(), 2), FedrecStatus::InvalidInput);
        fedrec_embeddings_free(one);

        let nan = [f32::NAN, 1.0];
        assert_eq!(fedrec_embeddings_from_raw(nan.as_ptr(), 1, 2, &mut h), FedrecStatus::InvalidInput);
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("e.sfub").to_str().unwrap()).unwrap();
    unsafe {
        let data: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect();
        let mut h = ptr::null_mut();
        assert_eq!(fedrec_embeddings_from_raw(data.as_ptr(), 3, 4, &mut h), FedrecStatus::Ok);
        assert_eq!(fedrec_embeddings_write(h, path.as_ptr()), FedrecStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(fedrec_embeddings_read(path.as_ptr(), &mut back), FedrecStatus::Ok);
        assert_eq!(values(back), data);
        fedrec_embeddings_free(h);
        fedrec_embeddings_free(back);
    }
}

#[test]
fn header_declares_the_api_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/fedrec.h")).unwrap();
    for f in ["fedrec_encrypt", "fedrec_federate", "fedrec_last_error", "fedrec_buffer_free", "FEDREC_STATUS_OK"] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"fedrec.h\"\nint main(void) { FedrecEmbeddings *h = 0; \
         FedrecStatus s = fedrec_embeddings_synth(4, 8, 0, 1, &h); fedrec_embeddings_free(h); return s; }\n",
    )
    .unwrap();
    let Ok(status) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler; skipped the compile check");
        return;
    };
    assert!(status.success());
}
