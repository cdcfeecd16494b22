use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use complm::components::{fst_build, Component, FstBuildOptions, LstmLm, LstmLmConfig};
use complm::composite::{CompositeConfig, CompositeModel};
use complm::eval::Scorer;
use complm::vocab::Vocabulary;
use complm_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    _dir: tempfile::TempDir,
    vocab: PathBuf,
    lm: PathBuf,
    composite: PathBuf,
    lm_model: LstmLm,
    composite_model: CompositeModel,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let v =
        Vocabulary::from_subwords(["call_", "play_", "the_", "mum_", "san_", "jose_", "music_", "ka", "lo_"]).unwrap();
    let cfg = LstmLmConfig { vocab_size: v.len(), width: 8, layers: 1, dropout: 0.0, skip: true };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lm = LstmLm::new(cfg, &mut rng).unwrap();
    let ents = vec![("san jose".to_string(), 2.0), ("kalo".to_string(), 1.0)];
    let fst = fst_build(&ents, &v, &FstBuildOptions::default()).unwrap();
    let ccfg = CompositeConfig {
        ctx_width: 6,
        embed_width: 4,
        act_width: 4,
        act_layers: 1,
        att_width: 4,
        att_layers: 1,
        ..CompositeConfig::default()
    };
    let composite =
        CompositeModel::new(v.clone(), vec![Component::Lstm(lm.clone()), Component::Wfst(fst)], ccfg, &mut rng)
            .unwrap();
    let f = Fixture {
        vocab: dir.path().join("vocab.json"),
        lm: dir.path().join("lm.ckpt"),
        composite: dir.path().join("composite.ckpt"),
        lm_model: lm,
        composite_model: composite,
        _dir: dir,
    };
    v.save(&f.vocab).unwrap();
    f.lm_model.save(&f.lm).unwrap();
    f.composite_model.save(&f.composite).unwrap();
    f
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = complm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn load(path: &Path, vocab: Option<&Path>) -> *mut ComplmModel {
    let path = c(path);
    let vocab = vocab.map(c);
    let mut m = ptr::null_mut();
    let st = unsafe { complm_model_load(path.as_ptr(), vocab.as_ref().map_or(ptr::null(), |v| v.as_ptr()), &mut m) };
    assert_eq!(st, ComplmStatus::Ok);
    assert!(complm_last_error().is_null());
    m
}

#[test]
fn scores_match_the_library() {
    let f = fixture();
    let text = CString::new("call mum san jose").unwrap();
    let expected_lm = f.lm_model.sentence_log_prob(&f.composite_model.vocab().encode("call mum san jose")).unwrap();
    let expected_comp =
        f.composite_model.sentence_log_prob(&f.composite_model.vocab().encode("call mum san jose")).unwrap();

    for (m, expected, comps) in
        [(load(&f.lm, Some(&f.vocab)), expected_lm, 0), (load(&f.composite, None), expected_comp, 1)]
    {
        assert_eq!(unsafe { complm_model_num_components(m) }, comps);
        let mut lp = 0.0;
        assert_eq!(unsafe { complm_model_sentence_logprob(m, text.as_ptr(), &mut lp) }, ComplmStatus::Ok);
        assert_eq!(lp.to_bits(), expected.to_bits());

        let mut len = 0usize;
        assert_eq!(
            unsafe { complm_model_token_logprobs(m, text.as_ptr(), ptr::null_mut(), 0, &mut len) },
            ComplmStatus::BufferTooSmall
        );
        let mut buf = vec![0.0; len];
        assert_eq!(
            unsafe { complm_model_token_logprobs(m, text.as_ptr(), buf.as_mut_ptr(), len, &mut len) },
            ComplmStatus::Ok
        );
        assert!((buf.iter().sum::<f64>() - expected).abs() < 1e-9);

        let sentences = [CString::new("play music").unwrap(), CString::new("call kalo").unwrap()];
        let ptrs: Vec<_> = sentences.iter().map(|s| s.as_ptr()).collect();
        let mut ppl = 0.0;
        assert_eq!(unsafe { complm_model_perplexity(m, ptrs.as_ptr(), ptrs.len(), &mut ppl) }, ComplmStatus::Ok);
        assert!(ppl.is_finite() && ppl > 1.0);
        unsafe { complm_model_free(m) };
    }
}

#[test]
fn vocab_encode_uses_the_buffer_protocol() {
    let f = fixture();
    let path = c(&f.vocab);
    let mut v = ptr::null_mut();
    assert_eq!(unsafe { complm_vocab_load(path.as_ptr(), &mut v) }, ComplmStatus::Ok);
    assert_eq!(unsafe { complm_vocab_size(v) }, f.composite_model.vocab().len());

    let text = CString::new("call the mum").unwrap();
    let mut len = 0usize;
    let mut small = [0u32; 2];
    let st = unsafe { complm_vocab_encode(v, text.as_ptr(), small.as_mut_ptr(), small.len(), &mut len) };
    assert_eq!(st, ComplmStatus::BufferTooSmall);
    assert_eq!(len, 4);
    let mut ids = vec![0u32; len];
    assert_eq!(
        unsafe { complm_vocab_encode(v, text.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut len) },
        ComplmStatus::Ok
    );
    assert_eq!(ids, f.composite_model.vocab().encode("call the mum").ids());
    unsafe { complm_vocab_free(v) };
    unsafe { complm_vocab_free(ptr::null_mut()) };
}

#[test]
fn failures_report_status_and_message() {
    let f = fixture();
    let mut m = ptr::null_mut();

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let st = unsafe { complm_model_load(missing.as_ptr(), ptr::null(), &mut m) };
    assert_eq!(st, ComplmStatus::Io);
    assert!(last_error().starts_with("io: "));
    assert!(m.is_null());

    let lm = c(&f.lm);
    let st = unsafe { complm_model_load(lm.as_ptr(), ptr::null(), &mut m) };
    assert_eq!(st, ComplmStatus::InvalidInput);
    assert!(last_error().contains("vocab_path"));

    let st = unsafe { complm_model_load(ptr::null(), ptr::null(), &mut m) };
    assert_eq!(st, ComplmStatus::NullPointer);

    let bad = [0xffu8, 0xfe, 0];
    let st = unsafe { complm_model_load(bad.as_ptr().cast(), ptr::null(), &mut m) };
    assert_eq!(st, ComplmStatus::InvalidUtf8);

    let mut lp = 0.0;
    let text = CString::new("x").unwrap();
    assert_eq!(
        unsafe { complm_model_sentence_logprob(ptr::null(), text.as_ptr(), &mut lp) },
        ComplmStatus::NullPointer
    );

    let comp = load(&f.composite, None);
    let mut ppl = 0.0;
    let none: [*const std::ffi::c_char; 0] = [];
    let st = unsafe { complm_model_perplexity(comp, none.as_ptr(), 0, &mut ppl) };
    assert_eq!(st, ComplmStatus::InvalidInput);
    unsafe { complm_model_free(comp) };
    unsafe { complm_model_free(ptr::null_mut()) };
}

#[test]
fn version_is_the_package_version() {
    let v = unsafe { CStr::from_ptr(complm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
