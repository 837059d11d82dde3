//! C entry points exchanging flat byte buffers and scalar dimensions.
//!
//! Every function returns 0 on success or a nonzero status:
//!   1 null pointer / bad argument
//!   2 malformed DHC1 image
//!   3 dimension mismatch
//!   4 output buffer too small
//!   5 internal panic

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use crate::{map_score, KernelError, PackedCodeDb};

const OK: i32 = 0;
const ERR_ARG: i32 = 1;
const ERR_PARSE: i32 = 2;
const ERR_DIM: i32 = 3;
const ERR_BUFFER: i32 = 4;
const ERR_PANIC: i32 = 5;

fn status_of(err: &KernelError) -> i32 {
    match err {
        KernelError::BadMagic | KernelError::Truncated | KernelError::ZeroWidth => ERR_PARSE,
        KernelError::DimensionMismatch => ERR_DIM,
        KernelError::BadArgument => ERR_ARG,
    }
}

fn guarded(body: impl FnOnce() -> i32) -> i32 {
    catch_unwind(AssertUnwindSafe(body)).unwrap_or(ERR_PANIC)
}

/// Size in bytes of the DHC1 image for an (n, k, l) database.
#[no_mangle]
pub extern "C" fn dh_packed_size(n: u64, k: u64, l: u64) -> u64 {
    16 + n * ((k + 7) / 8 + (l + 7) / 8)
}

/// Pack +-1 codes (n*k i8) and 0/1 labels (n*l u8) into a DHC1 image.
///
/// # Safety
/// `codes`, `labels` and `out` must point to buffers of at least n*k,
/// n*l and `out_cap` bytes respectively.
#[no_mangle]
pub unsafe extern "C" fn dh_pack(codes: *const i8, labels: *const u8, n: u64,
                                 k: u64, l: u64, out: *mut u8, out_cap: u64) -> i32 {
    if codes.is_null() || labels.is_null() || out.is_null() {
        return ERR_ARG;
    }
    guarded(|| {
        let codes = slice::from_raw_parts(codes, (n * k) as usize);
        let labels = slice::from_raw_parts(labels, (n * l) as usize);
        let db = match PackedCodeDb::pack(codes, labels, n as usize, k as usize, l as usize) {
            Ok(db) => db,
            Err(e) => return status_of(&e),
        };
        let blob = db.to_dhc1();
        if blob.len() > out_cap as usize {
            return ERR_BUFFER;
        }
        slice::from_raw_parts_mut(out, blob.len()).copy_from_slice(&blob);
        OK
    })
}

unsafe fn parse(db: *const u8, db_len: u64) -> Result<PackedCodeDb, i32> {
    if db.is_null() {
        return Err(ERR_ARG);
    }
    PackedCodeDb::from_dhc1(slice::from_raw_parts(db, db_len as usize))
        .map_err(|e| status_of(&e))
}

unsafe fn query_words(query: *const u8, query_len: u64, k: usize) -> Result<Vec<u64>, i32> {
    if query.is_null() {
        return Err(ERR_ARG);
    }
    let bytes = slice::from_raw_parts(query, query_len as usize);
    if bytes.len() != k.div_ceil(8) {
        return Err(ERR_DIM);
    }
    let mut words = vec![0u64; k.div_ceil(64)];
    for (bi, &b) in bytes.iter().enumerate() {
        words[bi / 8] |= (b as u64) << (8 * (bi % 8));
    }
    if let Some(last) = words.last_mut() {
        *last &= match k % 64 {
            0 => u64::MAX,
            r => (1u64 << r) - 1,
        };
    }
    Ok(words)
}

/// Hamming distance between two packed codes of width k (ceil(k/8) bytes
/// each); the result lands in `out_dist`.
///
/// # Safety
/// `a` and `b` must point to ceil(k/8) readable bytes each.
#[no_mangle]
pub unsafe extern "C" fn dh_distance(a: *const u8, b: *const u8, k: u64,
                                     out_dist: *mut u32) -> i32 {
    if a.is_null() || b.is_null() || out_dist.is_null() || k == 0 {
        return ERR_ARG;
    }
    guarded(|| {
        let wa = match query_words(a, (k + 7) / 8, k as usize) {
            Ok(w) => w,
            Err(s) => return s,
        };
        let wb = match query_words(b, (k + 7) / 8, k as usize) {
            Ok(w) => w,
            Err(s) => return s,
        };
        *out_dist = crate::packed_distance(&wa, &wb);
        OK
    })
}

/// Rank a DHC1 database against one packed query code (ceil(K/8) bytes).
/// Writes the full ranking into `out_indices` (capacity `out_cap` >= N).
///
/// # Safety
/// Pointer arguments must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn dh_rank(db: *const u8, db_len: u64, query: *const u8,
                                 query_len: u64, out_indices: *mut u32,
                                 out_cap: u64) -> i32 {
    guarded(|| {
        let parsed = match parse(db, db_len) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let q = match query_words(query, query_len, parsed.k) {
            Ok(q) => q,
            Err(s) => return s,
        };
        let order = match parsed.rank(&q) {
            Ok(o) => o,
            Err(e) => return status_of(&e),
        };
        if out_indices.is_null() || (out_cap as usize) < order.len() {
            return ERR_BUFFER;
        }
        slice::from_raw_parts_mut(out_indices, order.len()).copy_from_slice(&order);
        OK
    })
}

/// Top-k variant of `dh_rank`; writes exactly min(k_top, N) indices.
///
/// # Safety
/// Pointer arguments must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn dh_topk(db: *const u8, db_len: u64, query: *const u8,
                                 query_len: u64, k_top: u64, out_indices: *mut u32,
                                 out_cap: u64) -> i32 {
    guarded(|| {
        let parsed = match parse(db, db_len) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let q = match query_words(query, query_len, parsed.k) {
            Ok(q) => q,
            Err(s) => return s,
        };
        let top = match parsed.topk(&q, k_top as usize) {
            Ok(o) => o,
            Err(e) => return status_of(&e),
        };
        if out_indices.is_null() || (out_cap as usize) < top.len() {
            return ERR_BUFFER;
        }
        slice::from_raw_parts_mut(out_indices, top.len()).copy_from_slice(&top);
        OK
    })
}

/// mAP (or t-mAP when `target` >= 0) of a DHC1 query set against a DHC1
/// database; the result lands in `out_map`.
///
/// # Safety
/// Pointer arguments must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn dh_map(queries: *const u8, queries_len: u64, db: *const u8,
                                db_len: u64, target: i64, out_map: *mut f64) -> i32 {
    guarded(|| {
        if out_map.is_null() {
            return ERR_ARG;
        }
        let q = match parse(queries, queries_len) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let d = match parse(db, db_len) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let target = if target < 0 { None } else { Some(target as u32) };
        match map_score(&q, &d, target) {
            Ok(v) => {
                *out_map = v;
                OK
            }
            Err(e) => status_of(&e),
        }
    })
}
