//! C ABI for loading checkpoints, computing embeddings and concepts,
//! applying explicit interventions, and running top-k retrieval.
//!
//! Every fallible function returns a [`ChairStatus`]; on failure the
//! thread-local message is available from [`chair_last_error`]. Handles are
//! opaque and must be released with their `*_free` function.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use chair_core::data;
use chair_core::intervention::intervene_explicit;
use chair_core::model::{load_checkpoint, Checkpoint};
use chair_core::retrieval::{self, Gallery};
use chair_core::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChairStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Checkpoint = 5,
    State = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Loaded checkpoint: model plus intervention values.
pub struct ChairModel {
    ck: Checkpoint,
}

/// Normalized embedding index.
pub struct ChairGallery {
    gallery: Gallery,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChairDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ChairStatus {
    match e {
        Error::Dimension { .. } => ChairStatus::Dimension,
        Error::Io { .. } => ChairStatus::Io,
        Error::Checkpoint { .. } => ChairStatus::Checkpoint,
        Error::State(_) => ChairStatus::State,
        _ => ChairStatus::InvalidArgument,
    }
}

struct Fail(ChairStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ChairStatus::NullPointer, format!("{what} is null"))
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> ChairStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ChairStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ChairStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len < need {
        return Err(Fail(ChairStatus::BufferTooSmall, format!("{what} holds {len}, need {need}")));
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, need))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ChairStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn model_ref<'a>(m: *const ChairModel) -> Result<&'a ChairModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn gallery_ref<'a>(g: *const ChairGallery) -> Result<&'a ChairGallery, Fail> {
    g.as_ref().ok_or_else(|| null("gallery"))
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn chair_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn chair_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chair_model_load(path: *const c_char, out: *mut *mut ChairModel) -> ChairStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ChairModel { ck }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`chair_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn chair_model_free(model: *mut ChairModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chair_model_dims(model: *const ChairModel, out: *mut ChairDims) -> ChairStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = m.ck.model.dims();
        *out = ChairDims {
            input_dim: d.input_dim,
            hidden: d.hidden,
            embed_dim: d.embed_dim,
            num_concepts: d.num_concepts,
            num_classes: d.num_classes,
        };
        Ok(())
    })
}

/// Writes whether the model has a concept layer (1) or not (0).
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chair_model_has_concepts(model: *const ChairModel, out: *mut u8) -> ChairStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.ck.model.has_concepts() as u8;
        Ok(())
    })
}

/// Per-concept intervention values (`num_concepts` each).
///
/// # Safety
/// Buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn chair_model_intervention_values(
    model: *const ChairModel,
    high: *mut f64,
    low: *mut f64,
    len: usize,
) -> ChairStatus {
    guard(|| {
        let m = model_ref(model)?;
        let v = m
            .ck
            .intervention_values
            .as_ref()
            .ok_or_else(|| Fail(ChairStatus::State, "checkpoint has no intervention values".into()))?;
        output(high, len, v.len(), "high")?.copy_from_slice(&v.high);
        output(low, len, v.len(), "low")?.copy_from_slice(&v.low);
        Ok(())
    })
}

/// Concept logits and activations for one input.
///
/// # Safety
/// `x` must hold `x_len` doubles; outputs must hold `k_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn chair_model_concepts(
    model: *const ChairModel,
    x: *const f64,
    x_len: usize,
    logits_out: *mut f64,
    activations_out: *mut f64,
    k_len: usize,
) -> ChairStatus {
    guard(|| {
        let m = model_ref(model)?;
        let base = m.ck.model.base(input(x, x_len, "x")?)?;
        let c = base
            .concepts
            .ok_or_else(|| Fail(ChairStatus::State, format!("{} model has no concepts", m.ck.model.kind())))?;
        output(logits_out, k_len, c.logits.len(), "logits_out")?.copy_from_slice(&c.logits);
        output(activations_out, k_len, c.activations.len(), "activations_out")?.copy_from_slice(&c.activations);
        Ok(())
    })
}

/// Explicit intervention: `forced[i]` is -1 to keep `c_pred[i]`, 0 to force
/// absent, 1 to force present.
///
/// # Safety
/// `c_pred`, `forced` and `out` must hold `k_len` elements.
#[no_mangle]
pub unsafe extern "C" fn chair_intervene_explicit(
    model: *const ChairModel,
    c_pred: *const f64,
    forced: *const i8,
    k_len: usize,
    out: *mut f64,
) -> ChairStatus {
    guard(|| {
        let m = model_ref(model)?;
        let values = m
            .ck
            .intervention_values
            .as_ref()
            .ok_or_else(|| Fail(ChairStatus::State, "checkpoint has no intervention values".into()))?;
        let c = input(c_pred, k_len, "c_pred")?;
        let f = input(forced, k_len, "forced")?;
        let mut map = BTreeMap::new();
        for (i, &v) in f.iter().enumerate() {
            match v {
                -1 => {}
                0 | 1 => {
                    map.insert(i, v == 1);
                }
                other => {
                    return Err(Fail(
                        ChairStatus::InvalidArgument,
                        format!("forced[{i}] = {other}; expected -1, 0 or 1"),
                    ))
                }
            }
        }
        let edited = intervene_explicit(c, &map, values)?;
        output(out, k_len, edited.len(), "out")?.copy_from_slice(&edited);
        Ok(())
    })
}

/// Retrieval embedding of `x`. `c_hat` (nullable) overrides the predicted
/// concept activations.
///
/// # Safety
/// `x` holds `x_len` doubles, `c_hat` `c_len` doubles or is null, `out`
/// holds `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn chair_model_embed(
    model: *const ChairModel,
    x: *const f64,
    x_len: usize,
    c_hat: *const f64,
    c_len: usize,
    out: *mut f64,
    out_len: usize,
) -> ChairStatus {
    guard(|| {
        let m = model_ref(model)?;
        let base = m.ck.model.base(input(x, x_len, "x")?)?;
        let c = if c_hat.is_null() { None } else { Some(input(c_hat, c_len, "c_hat")?) };
        let e = m.ck.model.embedding(&base, c)?;
        output(out, out_len, e.len(), "out")?.copy_from_slice(&e);
        Ok(())
    })
}

/// Predicted class of `x`, optionally with concept override `c_hat`.
///
/// # Safety
/// As for [`chair_model_embed`]; `out_class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chair_model_predict(
    model: *const ChairModel,
    x: *const f64,
    x_len: usize,
    c_hat: *const f64,
    c_len: usize,
    out_class: *mut usize,
) -> ChairStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out_class.as_mut().ok_or_else(|| null("out_class"))?;
        let base = m.ck.model.base(input(x, x_len, "x")?)?;
        let c = if c_hat.is_null() {
            base.concepts.as_ref().map(|c| c.activations.clone())
        } else {
            Some(input(c_hat, c_len, "c_hat")?.to_vec())
        };
        *out = m.ck.model.predict(&base, c.as_deref())?;
        Ok(())
    })
}

/// Gallery from `n` row-major embeddings of width `dim`.
///
/// # Safety
/// `ids` and `labels` hold `n` elements, `embeddings` `n·dim`; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn chair_gallery_from_embeddings(
    ids: *const u64,
    labels: *const usize,
    embeddings: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut ChairGallery,
) -> ChairStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if dim == 0 {
            return Err(Fail(ChairStatus::InvalidArgument, "dim must be >= 1".into()));
        }
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| Fail(ChairStatus::InvalidArgument, "n·dim overflows".into()))?;
        let rows = input(embeddings, len, "embeddings")?.chunks(dim).map(<[f64]>::to_vec).collect();
        let gallery = Gallery::from_embeddings(
            input(ids, n, "ids")?.to_vec(),
            input(labels, n, "labels")?.to_vec(),
            rows,
            0.0,
        )?;
        *out = Box::into_raw(Box::new(ChairGallery { gallery }));
        Ok(())
    })
}

/// Gallery over the unseen-class split of a JSONL dataset, with
/// concepts corrected at `fraction` using RNG `seed`.
///
/// # Safety
/// `model` is live, `data_path` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn chair_gallery_from_dataset(
    model: *const ChairModel,
    data_path: *const c_char,
    fraction: f64,
    seed: u64,
    out: *mut *mut ChairGallery,
) -> ChairStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = data::read_jsonl(path_arg(data_path)?)?;
        let eval = data::retrieval_split(&ds)?.eval;
        let gallery = retrieval::build_gallery(&m.ck.model, &eval, m.ck.intervention_values.as_ref(), fraction, seed)?;
        *out = Box::into_raw(Box::new(ChairGallery { gallery }));
        Ok(())
    })
}

/// Releases a gallery. Null is ignored.
///
/// # Safety
/// `gallery` must come from a `chair_gallery_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn chair_gallery_free(gallery: *mut ChairGallery) {
    if !gallery.is_null() {
        drop(Box::from_raw(gallery));
    }
}

/// # Safety
/// `gallery` is live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn chair_gallery_len(gallery: *const ChairGallery, out: *mut usize) -> ChairStatus {
    guard(|| {
        let g = gallery_ref(gallery)?;
        *out.as_mut().ok_or_else(|| null("out"))? = g.gallery.len();
        Ok(())
    })
}

/// Cosine-distance top-k. `exclude_id < 0` disables leave-one-out. Writes
/// up to `k` results and their count to `n_out`; `truncated_out`
/// (nullable) receives 1 when fewer than `k` were available.
///
/// # Safety
/// `query` holds `dim` doubles; each output buffer holds `k` elements.
#[no_mangle]
pub unsafe extern "C" fn chair_gallery_top_k(
    gallery: *const ChairGallery,
    query: *const f64,
    dim: usize,
    k: usize,
    exclude_id: i64,
    ids_out: *mut u64,
    distances_out: *mut f64,
    labels_out: *mut usize,
    n_out: *mut usize,
    truncated_out: *mut u8,
) -> ChairStatus {
    guard(|| {
        let g = gallery_ref(gallery)?;
        let n = n_out.as_mut().ok_or_else(|| null("n_out"))?;
        let exclude = u64::try_from(exclude_id).ok();
        let r = retrieval::top_k(&g.gallery, input(query, dim, "query")?, k, exclude)?;
        output(ids_out, k, r.len(), "ids_out")?.copy_from_slice(&r.ids);
        output(distances_out, k, r.len(), "distances_out")?.copy_from_slice(&r.distances);
        output(labels_out, k, r.len(), "labels_out")?.copy_from_slice(&r.labels);
        *n = r.len();
        if let Some(t) = truncated_out.as_mut() {
            *t = r.truncated as u8;
        }
        Ok(())
    })
}

fn results_from(labels: &[usize], n: usize, k: usize) -> Vec<retrieval::QueryResult> {
    labels
        .chunks(k)
        .take(n)
        .map(|row| retrieval::QueryResult {
            query_id: None,
            ids: vec![0; row.len()],
            indices: vec![0; row.len()],
            distances: vec![0.0; row.len()],
            labels: row.to_vec(),
            truncated: false,
        })
        .collect()
}

unsafe fn metric(
    retrieved: *const usize,
    n: usize,
    k: usize,
    truth: *const usize,
    out: *mut f64,
    f: fn(&[retrieval::QueryResult], &[usize]) -> chair_core::Result<f64>,
) -> ChairStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if n == 0 || k == 0 {
            return Err(Fail(ChairStatus::InvalidArgument, "n and k must be >= 1".into()));
        }
        let len = n
            .checked_mul(k)
            .ok_or_else(|| Fail(ChairStatus::InvalidArgument, "n·k overflows".into()))?;
        let res = results_from(input(retrieved, len, "retrieved")?, n, k);
        *out = f(&res, input(truth, n, "truth")?)?;
        Ok(())
    })
}

/// Recall@k over `n` queries whose retrieved labels are given row-major
/// (`n·k`).
///
/// # Safety
/// `retrieved` holds `n·k` labels, `truth` `n`; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn chair_recall_at_k(
    retrieved: *const usize,
    n: usize,
    k: usize,
    truth: *const usize,
    out: *mut f64,
) -> ChairStatus {
    metric(retrieved, n, k, truth, out, retrieval::recall_at_k)
}

/// RecallAccuracy@k; layout as for [`chair_recall_at_k`].
///
/// # Safety
/// As for [`chair_recall_at_k`].
#[no_mangle]
pub unsafe extern "C" fn chair_recall_accuracy_at_k(
    retrieved: *const usize,
    n: usize,
    k: usize,
    truth: *const usize,
    out: *mut f64,
) -> ChairStatus {
    metric(retrieved, n, k, truth, out, retrieval::recall_accuracy_at_k)
}
