//! C ABI over the client-side privacy steps and the server round.
//!
//! Every function returns a status code; results go through out-pointers.
//! Handles are opaque and must be released with the matching `_free`
//! function. On failure, `fedrec_last_error` returns a message for the
//! calling thread, valid until its next call into this library.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use fedrec::datamodel::{
    read_embeddings, synth_embeddings, write_embeddings, EmbeddingMatrix, Stage, SynthSpec,
};
use fedrec::federation::{run_round, ClientUpload, ClusterConfig, ServerConfig};
use fedrec::numerics::{Matrix, Rng};
use fedrec::privacy::{audit_similarity, encrypt, PerturbationConfig};
use fedrec::Error;

/// Status codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedrecStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Bad input: arguments, files, stage or shape.
    InvalidInput = 2,
    /// Malformed embedding file or wire message.
    Format = 3,
    Io = 4,
    /// A computation failed.
    Runtime = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Embedding table with its processing stage.
pub struct FedrecEmbeddings {
    inner: EmbeddingMatrix,
}

/// Byte buffer owned by the library; release with `fedrec_buffer_free`.
#[repr(C)]
pub struct FedrecBuffer {
    pub data: *mut u8,
    pub len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FedrecStatus {
    match e {
        Error::Io { .. } => FedrecStatus::Io,
        Error::Format(_) | Error::Protocol(_) => FedrecStatus::Format,
        e if e.is_validation() => FedrecStatus::InvalidInput,
        _ => FedrecStatus::Runtime,
    }
}

struct Fail(FedrecStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(name: &str) -> Fail {
    Fail(FedrecStatus::NullArgument, format!("`{name}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FedrecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FedrecStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            FedrecStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FedrecStatus::InvalidInput, format!("`{name}` is not UTF-8")))
}

unsafe fn handle<'a>(p: *const FedrecEmbeddings, name: &str) -> Result<&'a EmbeddingMatrix, Fail> {
    p.as_ref().map(|h| &h.inner).ok_or_else(|| null(name))
}

unsafe fn emit(out: *mut *mut FedrecEmbeddings, inner: EmbeddingMatrix) {
    *out = Box::into_raw(Box::new(FedrecEmbeddings { inner }));
}

/// Message for the last failed call on this thread, or null.
#[no_mangle]
pub extern "C" fn fedrec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Read an `SFUB` embedding file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedrec_embeddings_read(path: *const c_char, out: *mut *mut FedrecEmbeddings) -> FedrecStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        emit(out, read_embeddings(&path)?);
        Ok(())
    })
}

/// Write a table as an `SFUB` file.
///
/// # Safety
/// `emb` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fedrec_embeddings_write(emb: *const FedrecEmbeddings, path: *const c_char) -> FedrecStatus {
    guard(|| {
        let e = handle(emb, "emb")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        write_embeddings(&path, e)?;
        Ok(())
    })
}

/// Raw table from `rows * dim` row-major floats.
///
/// # Safety
/// `data` must point to `rows * dim` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedrec_embeddings_from_raw(
    data: *const f32,
    rows: usize,
    dim: usize,
    out: *mut *mut FedrecEmbeddings,
) -> FedrecStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = rows
            .checked_mul(dim)
            .ok_or_else(|| Fail(FedrecStatus::InvalidInput, "rows * dim overflows".into()))?;
        let values = Matrix::new(rows, dim, std::slice::from_raw_parts(data, n).to_vec())?;
        emit(out, EmbeddingMatrix::new(Stage::Raw, values)?);
        Ok(())
    })
}

/// Random unit-norm raw rows; `clusters = 0` gives i.i.d. rows.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedrec_embeddings_synth(
    rows: usize,
    dim: usize,
    clusters: usize,
    seed: u64,
    out: *mut *mut FedrecEmbeddings,
) -> FedrecStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if dim == 0 {
            return Err(Fail(FedrecStatus::InvalidInput, "dim must be positive".into()));
        }
        let spec = SynthSpec {
            dim,
            clusters,
            ..SynthSpec::default()
        };
        emit(out, synth_embeddings(rows, &spec, &mut Rng::new(seed)).0);
        Ok(())
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `emb` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedrec_embeddings_rows(emb: *const FedrecEmbeddings) -> usize {
    emb.as_ref().map_or(0, |h| h.inner.rows())
}

/// Row width, or 0 for a null handle.
///
/// # Safety
/// `emb` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedrec_embeddings_dim(emb: *const FedrecEmbeddings) -> usize {
    emb.as_ref().map_or(0, |h| h.inner.dim())
}

/// Stage tag: 0 raw, 1 perturbed, 2 encrypted, 3 synchronized; -1 for null.
///
/// # Safety
/// `emb` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedrec_embeddings_stage(emb: *const FedrecEmbeddings) -> i32 {
    emb.as_ref().map_or(-1, |h| i32::from(h.inner.stage.tag()))
}

/// Copy the row-major values into `buf`, which holds `len` floats.
///
/// # Safety
/// `emb` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn fedrec_embeddings_copy(emb: *const FedrecEmbeddings, buf: *mut f32, len: usize) -> FedrecStatus {
    guard(|| {
        let e = handle(emb, "emb")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let src = e.values.data();
        if len < src.len() {
            return Err(Fail(
                FedrecStatus::InvalidInput,
                format!("buffer of {len} floats for {} values", src.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
        Ok(())
    })
}

/// # Safety
/// `emb` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedrec_embeddings_free(emb: *mut FedrecEmbeddings) {
    if !emb.is_null() {
        drop(Box::from_raw(emb));
    }
}

/// Perturb and nearest-neighbour replace a raw table. When
/// `replacement_map` is non-null it receives one source index per row.
///
/// # Safety
/// `raw` must be a live handle, `out` writable, and `replacement_map` null
/// or valid for `rows` writes.
#[no_mangle]
pub unsafe extern "C" fn fedrec_encrypt(
    raw: *const FedrecEmbeddings,
    sigma: f64,
    seed: u64,
    out: *mut *mut FedrecEmbeddings,
    replacement_map: *mut usize,
) -> FedrecStatus {
    guard(|| {
        let r = handle(raw, "raw")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let enc = encrypt(r, &PerturbationConfig::new(sigma, seed)?)?;
        if !replacement_map.is_null() {
            std::ptr::copy_nonoverlapping(enc.replacement_map.as_ptr(), replacement_map, enc.replacement_map.len());
        }
        emit(out, enc.rows);
        Ok(())
    })
}

/// Mean row-wise cosine similarity between a raw and a protected table.
///
/// # Safety
/// Both handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedrec_audit_similarity(
    raw: *const FedrecEmbeddings,
    masked: *const FedrecEmbeddings,
    out: *mut f64,
) -> FedrecStatus {
    guard(|| {
        let (r, p) = (handle(raw, "raw")?, handle(masked, "masked")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = audit_similarity(r, p)?;
        Ok(())
    })
}

/// Serialize an encrypted table as an upload message.
///
/// # Safety
/// `domain` must be a nul-terminated string, `enc` a live handle and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fedrec_upload_encode(
    domain: *const c_char,
    enc: *const FedrecEmbeddings,
    out: *mut FedrecBuffer,
) -> FedrecStatus {
    guard(|| {
        let d = str_arg(domain, "domain")?;
        let e = handle(enc, "enc")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = ClientUpload::new(d, e.clone())?.to_bytes()?.into_boxed_slice();
        let len = bytes.len();
        *out = FedrecBuffer {
            data: Box::into_raw(bytes).cast::<u8>(),
            len,
        };
        Ok(())
    })
}

/// Parse an upload message back into its encrypted table.
///
/// # Safety
/// `data` must be valid for `len` reads and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedrec_upload_decode(
    data: *const u8,
    len: usize,
    out: *mut *mut FedrecEmbeddings,
) -> FedrecStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let up = ClientUpload::from_bytes(std::slice::from_raw_parts(data, len))?;
        emit(out, up.embeddings);
        Ok(())
    })
}

/// # Safety
/// `buf` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fedrec_buffer_free(buf: FedrecBuffer) {
    if !buf.data.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(buf.data, buf.len)));
    }
}

/// One server round over `n` encrypted uploads. `out` receives `n`
/// synchronized handles in upload order; `inertia` may be null.
///
/// # Safety
/// `uploads` and `domains` must hold `n` live handles and nul-terminated
/// strings; `out` must be valid for `n` writes.
#[no_mangle]
pub unsafe extern "C" fn fedrec_federate(
    uploads: *const *const FedrecEmbeddings,
    domains: *const *const c_char,
    n: usize,
    k: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
    out: *mut *mut FedrecEmbeddings,
    inertia: *mut f64,
) -> FedrecStatus {
    guard(|| {
        if uploads.is_null() {
            return Err(null("uploads"));
        }
        if domains.is_null() {
            return Err(null("domains"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let mut ups = Vec::with_capacity(n);
        for i in 0..n {
            let e = handle(*uploads.add(i), "uploads[i]")?;
            let d = str_arg(*domains.add(i), "domains[i]")?;
            ups.push(ClientUpload::new(d, e.clone())?);
        }
        let cluster = ClusterConfig {
            k,
            max_iter,
            tol,
            ..ClusterConfig::default()
        };
        let outcome = run_round(&ups, &ServerConfig { cluster, seed })?;
        if !inertia.is_null() {
            *inertia = outcome.report.inertia;
        }
        for (i, r) in outcome.responses.into_iter().enumerate() {
            emit(out.add(i), r.embeddings);
        }
        Ok(())
    })
}
