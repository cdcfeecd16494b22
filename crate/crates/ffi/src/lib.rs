//! C interface to `complm`: load a vocabulary or a trained model and score
//! text with it.
//!
//! Every fallible function returns a [`ComplmStatus`]. On failure, a
//! description is kept per thread and can be read with
//! [`complm_last_error`]. Handles are opaque and must be released with the
//! matching `*_free` function. Panics never cross the boundary; they are
//! reported as [`ComplmStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use complm::components::LstmLm;
use complm::composite::{CompositeModel, COMPOSITE_CHECKPOINT_KIND};
use complm::eval::{perplexity, Scorer};
use complm::neural::Checkpoint;
use complm::vocab::{TokenSeq, Vocabulary};
use complm::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComplmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Shape = 4,
    TokenRange = 5,
    Format = 6,
    NonFinite = 7,
    Io = 8,
    Json = 9,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for ComplmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => ComplmStatus::InvalidInput,
            Error::Shape(_) => ComplmStatus::Shape,
            Error::TokenOutOfRange { .. } => ComplmStatus::TokenRange,
            Error::Format(_) => ComplmStatus::Format,
            Error::NonFinite(_) => ComplmStatus::NonFinite,
            Error::Io(_) => ComplmStatus::Io,
            Error::Json(_) => ComplmStatus::Json,
        }
    }
}

/// A subword vocabulary.
pub struct ComplmVocab(Vocabulary);

enum Inner {
    Lm(LstmLm, Vocabulary),
    Composite(CompositeModel),
}

/// A trained model: either a composite checkpoint or an LSTM LM with its
/// vocabulary.
pub struct ComplmModel(Inner);

impl ComplmModel {
    fn vocab(&self) -> &Vocabulary {
        match &self.0 {
            Inner::Lm(_, v) => v,
            Inner::Composite(m) => m.vocab(),
        }
    }

    fn scorer(&self) -> &dyn Scorer {
        match &self.0 {
            Inner::Lm(m, _) => m,
            Inner::Composite(m) => m,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(ComplmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(ComplmStatus::from(&e), format!("{}: {e}", e.kind()))
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ComplmStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ComplmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            ComplmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ComplmStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `s` is null or a NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and NUL-terminated per the caller's contract.
    unsafe { CStr::from_ptr(s) }
        .to_str()
        .map_err(|_| Failure(ComplmStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or valid for reads.
unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: forwarded from the caller.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

fn load_model(path: &Path, vocab: Option<&Path>) -> Result<ComplmModel, Failure> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.get("kind").and_then(|k| k.as_str()) == Some(COMPOSITE_CHECKPOINT_KIND) {
        return Ok(ComplmModel(Inner::Composite(CompositeModel::from_checkpoint(&ck)?)));
    }
    let lm = LstmLm::from_checkpoint(&ck)?;
    let vocab =
        vocab.ok_or_else(|| Failure::from(Error::invalid("vocab_path is required for an LSTM LM checkpoint")))?;
    let v = Vocabulary::load(vocab)?;
    if v.len() != lm.vocab_size() {
        return Err(
            Error::invalid(format!("vocabulary has {} entries, model expects {}", v.len(), lm.vocab_size())).into()
        );
    }
    Ok(ComplmModel(Inner::Lm(lm, v)))
}

/// Message describing the most recent failure on this thread, or null. The
/// pointer stays valid until the next `complm_*` call on the same thread.
#[no_mangle]
pub extern "C" fn complm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn complm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a vocabulary file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn complm_vocab_load(path: *const c_char, out: *mut *mut ComplmVocab) -> ComplmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: caller contract.
        let path = unsafe { str_arg(path, "path")? };
        let v = Vocabulary::load(path)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(ComplmVocab(v))) };
        Ok(())
    })
}

/// Releases a vocabulary. Null is ignored.
///
/// # Safety
/// `vocab` is null or came from [`complm_vocab_load`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn complm_vocab_free(vocab: *mut ComplmVocab) {
    if !vocab.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(vocab) });
    }
}

/// Number of subwords, including the reserved ones. Zero for null.
///
/// # Safety
/// `vocab` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn complm_vocab_size(vocab: *const ComplmVocab) -> usize {
    // SAFETY: caller contract.
    unsafe { vocab.as_ref() }.map_or(0, |v| v.0.len())
}

/// Segments `text` into token ids, ending with the sentence terminator.
///
/// The required length is always written to `out_len`. When it exceeds
/// `capacity`, nothing is copied and `BUFFER_TOO_SMALL` is returned; `ids`
/// may be null when `capacity` is zero.
///
/// # Safety
/// `vocab` is live, `text` is NUL-terminated, `ids` is writable for
/// `capacity` elements, and `out_len` is writable.
#[no_mangle]
pub unsafe extern "C" fn complm_vocab_encode(
    vocab: *const ComplmVocab,
    text: *const c_char,
    ids: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> ComplmStatus {
    guard(|| {
        // SAFETY: caller contract.
        let v = unsafe { ref_arg(vocab, "vocab")? };
        let text = unsafe { str_arg(text, "text")? };
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        let seq = v.0.encode(text);
        let n = seq.ids().len();
        // SAFETY: checked non-null above.
        unsafe { *out_len = n };
        if n > capacity {
            return Err(Failure(ComplmStatus::BufferTooSmall, format!("{n} ids do not fit in {capacity}")));
        }
        if ids.is_null() {
            return Err(null("ids"));
        }
        // SAFETY: `ids` has room for `capacity >= n` elements.
        unsafe { ptr::copy_nonoverlapping(seq.ids().as_ptr(), ids, n) };
        Ok(())
    })
}

/// Loads a model checkpoint. Composite checkpoints carry their own
/// vocabulary and ignore `vocab_path`; LSTM LM checkpoints need it.
///
/// # Safety
/// `path` is NUL-terminated, `vocab_path` is null or NUL-terminated, and
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn complm_model_load(
    path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut ComplmModel,
) -> ComplmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: caller contract.
        let path = unsafe { str_arg(path, "path")? };
        let vocab = if vocab_path.is_null() {
            None
        } else {
            // SAFETY: caller contract.
            Some(unsafe { str_arg(vocab_path, "vocab_path")? })
        };
        let m = load_model(Path::new(path), vocab.map(Path::new))?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(m)) };
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` is null or came from [`complm_model_load`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn complm_model_free(model: *mut ComplmModel) {
    if !model.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of entity components; zero for a plain LSTM LM or null.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn complm_model_num_components(model: *const ComplmModel) -> usize {
    // SAFETY: caller contract.
    match unsafe { model.as_ref() } {
        Some(ComplmModel(Inner::Composite(m))) => m.num_entity_components(),
        _ => 0,
    }
}

/// Natural-log probability of `text` followed by the sentence terminator.
///
/// # Safety
/// `model` is live, `text` is NUL-terminated, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn complm_model_sentence_logprob(
    model: *const ComplmModel,
    text: *const c_char,
    out: *mut f64,
) -> ComplmStatus {
    guard(|| {
        // SAFETY: caller contract.
        let m = unsafe { ref_arg(model, "model")? };
        let text = unsafe { str_arg(text, "text")? };
        if out.is_null() {
            return Err(null("out"));
        }
        let lp = m.scorer().sentence_log_prob(&m.vocab().encode(text))?;
        // SAFETY: checked non-null above.
        unsafe { *out = lp };
        Ok(())
    })
}

/// Per-token log probabilities of `text`; one value per id that
/// [`complm_vocab_encode`] would produce. Buffer protocol as there.
///
/// # Safety
/// `model` is live, `text` is NUL-terminated, `log_probs` is writable for
/// `capacity` elements, `out_len` is writable.
#[no_mangle]
pub unsafe extern "C" fn complm_model_token_logprobs(
    model: *const ComplmModel,
    text: *const c_char,
    log_probs: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> ComplmStatus {
    guard(|| {
        // SAFETY: caller contract.
        let m = unsafe { ref_arg(model, "model")? };
        let text = unsafe { str_arg(text, "text")? };
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        let lps = m.scorer().token_log_probs(&m.vocab().encode(text))?;
        // SAFETY: checked non-null above.
        unsafe { *out_len = lps.len() };
        if lps.len() > capacity {
            return Err(Failure(
                ComplmStatus::BufferTooSmall,
                format!("{} values do not fit in {capacity}", lps.len()),
            ));
        }
        if log_probs.is_null() {
            return Err(null("log_probs"));
        }
        // SAFETY: room for `capacity >= len` elements.
        unsafe { ptr::copy_nonoverlapping(lps.as_ptr(), log_probs, lps.len()) };
        Ok(())
    })
}

/// Per-token perplexity of `count` sentences.
///
/// # Safety
/// `model` is live, `sentences` points to `count` NUL-terminated strings,
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn complm_model_perplexity(
    model: *const ComplmModel,
    sentences: *const *const c_char,
    count: usize,
    out: *mut f64,
) -> ComplmStatus {
    guard(|| {
        // SAFETY: caller contract.
        let m = unsafe { ref_arg(model, "model")? };
        if sentences.is_null() || out.is_null() {
            return Err(null(if out.is_null() { "out" } else { "sentences" }));
        }
        // SAFETY: `sentences` holds `count` pointers.
        let ptrs = unsafe { std::slice::from_raw_parts(sentences, count) };
        let corpus = ptrs
            .iter()
            // SAFETY: each entry is NUL-terminated per the caller's contract.
            .map(|&p| unsafe { str_arg(p, "sentence") }.map(|s| m.vocab().encode(s)))
            .collect::<Result<Vec<TokenSeq>, Failure>>()?;
        let ppl = perplexity(m.scorer(), &corpus)?;
        // SAFETY: checked non-null above.
        unsafe { *out = ppl };
        Ok(())
    })
}
