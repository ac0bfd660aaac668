//! C ABI over the hiernmt core: language trees and layer allocation,
//! subword vocabularies, checkpoint-backed translation and corpus BLEU.
//!
//! Every fallible function returns an [`HnStatus`]; on failure a message is
//! available from [`hn_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings returned
//! by the library are released with [`hn_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hiernmt::corpus::BpeVocab;
use hiernmt::evaluation::{corpus_bleu, max_output_len, whitespace_tokens};
use hiernmt::hier_model::{model_from_checkpoint, NmtModel};
use hiernmt::lang_tree::{allocate_layers, baseline_depths, parse_tree, LanguageTree, LayerAllocation, NodeId};
use hiernmt::numerics::Checkpoint;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Infeasible = 4,
    Io = 5,
    Model = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

pub struct HnTree(LanguageTree);

pub struct HnAllocation(LayerAllocation);

pub struct HnVocab(BpeVocab);

pub struct HnTranslator {
    model: Box<dyn NmtModel>,
    vocab: BpeVocab,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(HnStatus, String);

type FfiResult<T> = Result<T, Failure>;

fn fail<T>(status: HnStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> HnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HnStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(HnStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(HnStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .map_or_else(|| fail(HnStatus::NullArgument, format!("{name} is null")), Ok)
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .map_or_else(|| fail(HnStatus::NullArgument, format!("{name} is null")), Ok)
}

fn new_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s)
        .map(CString::into_raw)
        .or_else(|_| fail(HnStatus::InvalidInput, "string contains NUL"))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn hn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a tree in parenthesised form, e.g. `((az,tr),de)`.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hn_tree_parse(spec: *const c_char, out: *mut *mut HnTree) -> HnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let tree = parse_tree(str_arg(spec, "spec")?).or_else(|e| fail(HnStatus::InvalidInput, e.to_string()))?;
        *out = Box::into_raw(Box::new(HnTree(tree)));
        Ok(())
    })
}

/// # Safety
/// `tree` must come from [`hn_tree_parse`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hn_tree_free(tree: *mut HnTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// # Safety
/// `tree` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hn_tree_num_leaves(tree: *const HnTree) -> usize {
    tree.as_ref().map_or(0, |t| t.0.leaves().len())
}

/// Canonical rendering of the tree; free with [`hn_string_free`].
///
/// # Safety
/// `tree` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hn_tree_render(tree: *const HnTree, out: *mut *mut c_char) -> HnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = new_string(ref_arg(tree, "tree")?.0.render())?;
        Ok(())
    })
}

/// Spreads `depth_budget` layers over the tree so every leaf path sums to it.
///
/// # Safety
/// `tree` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hn_allocate_layers(
    tree: *const HnTree,
    depth_budget: usize,
    out: *mut *mut HnAllocation,
) -> HnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let alloc = allocate_layers(&ref_arg(tree, "tree")?.0, depth_budget)
            .or_else(|e| fail(HnStatus::Infeasible, e.to_string()))?;
        *out = Box::into_raw(Box::new(HnAllocation(alloc)));
        Ok(())
    })
}

/// # Safety
/// `alloc` must come from [`hn_allocate_layers`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hn_allocation_free(alloc: *mut HnAllocation) {
    if !alloc.is_null() {
        drop(Box::from_raw(alloc));
    }
}

/// Layers of one node; `node_id` joins leaf codes with `+` (`az+tr`).
///
/// # Safety
/// `alloc` must be a live handle, `node_id` NUL-terminated, `layers` writable.
#[no_mangle]
pub unsafe extern "C" fn hn_allocation_layers(
    alloc: *const HnAllocation,
    node_id: *const c_char,
    layers: *mut usize,
) -> HnStatus {
    guard(|| {
        let layers = out_arg(layers, "layers")?;
        let id = NodeId::from_codes(str_arg(node_id, "node_id")?.split('+'));
        match ref_arg(alloc, "alloc")?.0.get(&id) {
            Some(n) => {
                *layers = n;
                Ok(())
            }
            None => fail(HnStatus::InvalidInput, format!("no node {id}")),
        }
    })
}

/// Encoder and decoder depths of the full-sharing baseline.
///
/// # Safety
/// Both allocations must be live handles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn hn_baseline_depths(
    enc: *const HnAllocation,
    dec: *const HnAllocation,
    enc_layers: *mut usize,
    dec_layers: *mut usize,
) -> HnStatus {
    guard(|| {
        let (e, d) = baseline_depths(&ref_arg(enc, "enc")?.0, &ref_arg(dec, "dec")?.0);
        *out_arg(enc_layers, "enc_layers")? = e;
        *out_arg(dec_layers, "dec_layers")? = d;
        Ok(())
    })
}

fn read_vocab(path: &str) -> FfiResult<BpeVocab> {
    let text = std::fs::read_to_string(path).or_else(|e| fail(HnStatus::Io, format!("{path}: {e}")))?;
    BpeVocab::from_file_string(&text).or_else(|e| fail(HnStatus::InvalidInput, e.to_string()))
}

/// Loads a vocabulary file written by `hiernmt vocab learn`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hn_vocab_load(path: *const c_char, out: *mut *mut HnVocab) -> HnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let v = read_vocab(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(HnVocab(v)));
        Ok(())
    })
}

/// # Safety
/// `vocab` must come from [`hn_vocab_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hn_vocab_free(vocab: *mut HnVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// # Safety
/// `vocab` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hn_vocab_size(vocab: *const HnVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.len())
}

/// Encodes a sentence with BOS and EOS into `ids`. `len` receives the
/// required length; `HN_STATUS_BUFFER_TOO_SMALL` when it exceeds `capacity`.
///
/// # Safety
/// `ids` must have room for `capacity` values (may be null when 0).
#[no_mangle]
pub unsafe extern "C" fn hn_vocab_encode(
    vocab: *const HnVocab,
    sentence: *const c_char,
    ids: *mut u32,
    capacity: usize,
    len: *mut usize,
) -> HnStatus {
    guard(|| {
        let enc = ref_arg(vocab, "vocab")?.0.encode(str_arg(sentence, "sentence")?);
        *out_arg(len, "len")? = enc.len();
        if enc.len() > capacity {
            return fail(HnStatus::BufferTooSmall, format!("need {} slots", enc.len()));
        }
        if !enc.is_empty() {
            if ids.is_null() {
                return fail(HnStatus::NullArgument, "ids is null");
            }
            ptr::copy_nonoverlapping(enc.as_ptr(), ids, enc.len());
        }
        Ok(())
    })
}

/// Detokenises `ids`; free the result with [`hn_string_free`].
///
/// # Safety
/// `ids` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn hn_vocab_decode(
    vocab: *const HnVocab,
    ids: *const u32,
    len: usize,
    out: *mut *mut c_char,
) -> HnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ids = if len == 0 {
            &[][..]
        } else if ids.is_null() {
            return fail(HnStatus::NullArgument, "ids is null");
        } else {
            std::slice::from_raw_parts(ids, len)
        };
        *out = new_string(ref_arg(vocab, "vocab")?.0.decode(ids))?;
        Ok(())
    })
}

fn open_translator(ckpt_path: &str, vocab_path: &str) -> FfiResult<HnTranslator> {
    let vocab = read_vocab(vocab_path)?;
    let ckpt = Checkpoint::load(Path::new(ckpt_path)).or_else(|e| fail(HnStatus::Io, format!("{ckpt_path}: {e}")))?;
    if ckpt.metadata.get("vocab_hash").is_some_and(|h| *h != vocab.hash()) {
        return fail(HnStatus::Model, "checkpoint was trained with a different vocabulary");
    }
    let model = model_from_checkpoint(&ckpt).or_else(|e| fail(HnStatus::Model, e.to_string()))?;
    if model.meta().vocab_size != vocab.len() {
        return fail(HnStatus::Model, "vocabulary size differs from the model's");
    }
    Ok(HnTranslator { model, vocab })
}

/// Opens a checkpoint written by `hiernmt train` with its vocabulary.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hn_translator_open(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut HnTranslator,
) -> HnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let t = open_translator(
            str_arg(checkpoint_path, "checkpoint_path")?,
            str_arg(vocab_path, "vocab_path")?,
        )?;
        *out = Box::into_raw(Box::new(t));
        Ok(())
    })
}

/// # Safety
/// `t` must come from [`hn_translator_open`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hn_translator_free(t: *mut HnTranslator) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Greedy translation of one sentence; free the result with
/// [`hn_string_free`].
///
/// # Safety
/// `t` must be a live handle; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hn_translate(
    t: *const HnTranslator,
    src_lang: *const c_char,
    tgt_lang: *const c_char,
    sentence: *const c_char,
    out: *mut *mut c_char,
) -> HnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let t = ref_arg(t, "translator")?;
        let src = t.vocab.encode(str_arg(sentence, "sentence")?);
        let limit = max_output_len(src.len().saturating_sub(2));
        let mut hyp = t
            .model
            .translate(
                str_arg(src_lang, "src_lang")?,
                str_arg(tgt_lang, "tgt_lang")?,
                &[src],
                limit,
            )
            .or_else(|e| fail(HnStatus::Model, e.to_string()))?
            .pop()
            .unwrap_or_default();
        hyp.truncate(limit);
        *out = new_string(t.vocab.decode(&hyp))?;
        Ok(())
    })
}

/// Corpus BLEU (0-100) of `n` whitespace-tokenised candidates against one
/// reference each.
///
/// # Safety
/// `candidates` and `references` must each point to `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn hn_corpus_bleu(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    score: *mut f64,
) -> HnStatus {
    guard(|| {
        let score = out_arg(score, "score")?;
        if n > 0 && (candidates.is_null() || references.is_null()) {
            return fail(HnStatus::NullArgument, "sentence arrays are null");
        }
        let mut cands = Vec::with_capacity(n);
        let mut refs = Vec::with_capacity(n);
        for i in 0..n {
            cands.push(whitespace_tokens(str_arg(*candidates.add(i), "candidate")?));
            refs.push(whitespace_tokens(str_arg(*references.add(i), "reference")?));
        }
        *score = corpus_bleu(&cands, &refs)
            .or_else(|e| fail(HnStatus::InvalidInput, e.to_string()))?
            .score;
        Ok(())
    })
}
