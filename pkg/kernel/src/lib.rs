//! Bit-packed Hamming retrieval over `DHC1` code databases.
//!
//! File layout: magic `DHC1`, little-endian u32 fields N, K, L, then N
//! records of ceil(K/8) code bytes followed by ceil(L/8) label bytes.
//! Bit j of byte floor(k/8) is code position k (LSB first); +1 maps to
//! bit 1 and -1 to bit 0, padding bits past K (or L) are zero.
//!
//! Distances are popcounts of XORed 64-bit words, which equals
//! (K - <a, b>) / 2 for the +-1 codes the bytes encode. Rankings sort by
//! (distance, index) so ties resolve exactly like the reference
//! evaluator; without that, mAP parity fails on equal-distance items.

pub mod ffi;

pub const MAGIC: &[u8; 4] = b"DHC1";
const HEADER_LEN: usize = 16;

#[derive(Debug, PartialEq, Eq)]
pub enum KernelError {
    BadMagic,
    Truncated,
    ZeroWidth,
    DimensionMismatch,
    BadArgument,
}

impl std::fmt::Display for KernelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let msg = match self {
            KernelError::BadMagic => "not a DHC1 image (bad magic)",
            KernelError::Truncated => "truncated DHC1 image",
            KernelError::ZeroWidth => "code width K must be positive",
            KernelError::DimensionMismatch => "operand dimensions do not match",
            KernelError::BadArgument => "invalid argument",
        };
        f.write_str(msg)
    }
}

impl std::error::Error for KernelError {}

fn words_for_bits(bits: usize) -> usize {
    bits.div_ceil(64)
}

fn pack_bits_row(get: impl Fn(usize) -> bool, bits: usize, out: &mut [u64]) {
    for w in out.iter_mut() {
        *w = 0;
    }
    for k in 0..bits {
        if get(k) {
            out[k / 64] |= 1u64 << (k % 64);
        }
    }
}

/// Word-aligned bit matrices for codes and labels of one database.
#[derive(Debug)]
pub struct PackedCodeDb {
    pub n: usize,
    pub k: usize,
    pub l: usize,
    words_per_code: usize,
    words_per_label: usize,
    code_words: Vec<u64>,
    label_words: Vec<u64>,
}

impl PackedCodeDb {
    /// Pack unpacked +-1 codes (row-major, n x k) and 0/1 labels (n x l).
    pub fn pack(codes: &[i8], labels: &[u8], n: usize, k: usize, l: usize)
                -> Result<Self, KernelError> {
        if k == 0 {
            return Err(KernelError::ZeroWidth);
        }
        if codes.len() != n * k || labels.len() != n * l {
            return Err(KernelError::DimensionMismatch);
        }
        let wpc = words_for_bits(k);
        let wpl = words_for_bits(l);
        let mut db = PackedCodeDb {
            n,
            k,
            l,
            words_per_code: wpc,
            words_per_label: wpl,
            code_words: vec![0; n * wpc],
            label_words: vec![0; n * wpl],
        };
        for i in 0..n {
            pack_bits_row(|b| codes[i * k + b] > 0, k,
                          &mut db.code_words[i * wpc..(i + 1) * wpc]);
            pack_bits_row(|b| labels[i * l + b] != 0, l,
                          &mut db.label_words[i * wpl..(i + 1) * wpl]);
        }
        Ok(db)
    }

    /// Lossless inverse of `pack`.
    pub fn unpack(&self) -> (Vec<i8>, Vec<u8>) {
        let mut codes = vec![0i8; self.n * self.k];
        let mut labels = vec![0u8; self.n * self.l];
        for i in 0..self.n {
            let cw = self.code_row(i);
            for b in 0..self.k {
                codes[i * self.k + b] =
                    if cw[b / 64] >> (b % 64) & 1 == 1 { 1 } else { -1 };
            }
            let lw = self.label_row(i);
            for b in 0..self.l {
                labels[i * self.l + b] = (lw[b / 64] >> (b % 64) & 1) as u8;
            }
        }
        (codes, labels)
    }

    pub fn from_dhc1(blob: &[u8]) -> Result<Self, KernelError> {
        if blob.len() < HEADER_LEN {
            return Err(KernelError::Truncated);
        }
        if &blob[..4] != MAGIC {
            return Err(KernelError::BadMagic);
        }
        let rd = |o: usize| u32::from_le_bytes(blob[o..o + 4].try_into().unwrap()) as usize;
        let (n, k, l) = (rd(4), rd(8), rd(12));
        if k == 0 {
            return Err(KernelError::ZeroWidth);
        }
        let cb = k.div_ceil(8);
        let lb = l.div_ceil(8);
        let record = cb + lb;
        if blob.len() != HEADER_LEN + n * record {
            return Err(KernelError::Truncated);
        }
        let wpc = words_for_bits(k);
        let wpl = words_for_bits(l);
        let mut db = PackedCodeDb {
            n,
            k,
            l,
            words_per_code: wpc,
            words_per_label: wpl,
            code_words: vec![0; n * wpc],
            label_words: vec![0; n * wpl],
        };
        // LSB-first byte order composes into little-endian words directly;
        // padding bits are masked defensively so distances stay exact even
        // on a nonconforming producer
        let code_mask = tail_mask(k);
        let label_mask = tail_mask(l);
        for i in 0..n {
            let rec = &blob[HEADER_LEN + i * record..];
            fill_words(&rec[..cb], &mut db.code_words[i * wpc..(i + 1) * wpc]);
            fill_words(&rec[cb..record], &mut db.label_words[i * wpl..(i + 1) * wpl]);
            if let Some(last) = db.code_words[i * wpc..(i + 1) * wpc].last_mut() {
                *last &= code_mask;
            }
            if let Some(last) = db.label_words[i * wpl..(i + 1) * wpl].last_mut() {
                *last &= label_mask;
            }
        }
        Ok(db)
    }

    pub fn to_dhc1(&self) -> Vec<u8> {
        let cb = self.k.div_ceil(8);
        let lb = self.l.div_ceil(8);
        let mut out = Vec::with_capacity(HEADER_LEN + self.n * (cb + lb));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.l as u32).to_le_bytes());
        for i in 0..self.n {
            push_bytes(self.code_row(i), cb, &mut out);
            push_bytes(self.label_row(i), lb, &mut out);
        }
        out
    }

    #[inline]
    pub fn code_row(&self, i: usize) -> &[u64] {
        &self.code_words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    #[inline]
    fn label_row(&self, i: usize) -> &[u64] {
        &self.label_words[i * self.words_per_label..(i + 1) * self.words_per_label]
    }

    #[inline]
    pub fn distance(&self, i: usize, query: &[u64]) -> u32 {
        packed_distance(self.code_row(i), query)
    }

    /// All indices by ascending (distance, index).
    pub fn rank(&self, query: &[u64]) -> Result<Vec<u32>, KernelError> {
        if query.len() != self.words_per_code {
            return Err(KernelError::DimensionMismatch);
        }
        let mut order: Vec<(u32, u32)> = (0..self.n as u32)
            .map(|i| (self.distance(i as usize, query), i))
            .collect();
        order.sort_unstable();
        Ok(order.into_iter().map(|(_, i)| i).collect())
    }

    /// First k of the full ranking (same tie rule).
    pub fn topk(&self, query: &[u64], k_top: usize) -> Result<Vec<u32>, KernelError> {
        let mut full = self.rank(query)?;
        full.truncate(k_top.min(self.n));
        Ok(full)
    }

    fn relevant(&self, q_label: &[u64], i: usize) -> bool {
        self.label_row(i)
            .iter()
            .zip(q_label)
            .any(|(a, b)| a & b != 0)
    }
}

fn tail_mask(bits: usize) -> u64 {
    match bits % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

fn fill_words(bytes: &[u8], words: &mut [u64]) {
    for w in words.iter_mut() {
        *w = 0;
    }
    for (bi, &b) in bytes.iter().enumerate() {
        words[bi / 8] |= (b as u64) << (8 * (bi % 8));
    }
}

fn push_bytes(words: &[u64], n_bytes: usize, out: &mut Vec<u8>) {
    for bi in 0..n_bytes {
        out.push((words[bi / 8] >> (8 * (bi % 8))) as u8);
    }
}

#[inline]
pub fn packed_distance(a: &[u64], b: &[u64]) -> u32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x ^ y).count_ones())
        .sum()
}

/// Average precision of one ranked relevance sequence; 0 when nothing is
/// relevant. Accumulates in f64.
fn average_precision(rel: impl Iterator<Item = bool>) -> f64 {
    let mut hits = 0u64;
    let mut total = 0.0f64;
    let mut seen = 0u64;
    for r in rel {
        seen += 1;
        if r {
            hits += 1;
            total += hits as f64 / seen as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        total / hits as f64
    }
}

/// mAP of `queries` against `db`. Relevance is shared-label overlap, or
/// membership in `target` when given (the t-mAP branch, where every
/// query's label is replaced by the one-hot target label).
pub fn map_score(queries: &PackedCodeDb, db: &PackedCodeDb, target: Option<u32>)
                 -> Result<f64, KernelError> {
    if queries.k != db.k {
        return Err(KernelError::DimensionMismatch);
    }
    if queries.n == 0 || db.n == 0 {
        return Err(KernelError::BadArgument);
    }
    if let Some(t) = target {
        if t as usize >= db.l {
            return Err(KernelError::BadArgument);
        }
    }
    let mut sum = 0.0f64;
    for qi in 0..queries.n {
        let order = db.rank(queries.code_row(qi))?;
        let ap = match target {
            Some(t) => {
                let (tw, tb) = ((t / 64) as usize, t % 64);
                average_precision(order.iter().map(|&i| {
                    db.label_row(i as usize)[tw] >> tb & 1 == 1
                }))
            }
            None => {
                let q_label = queries.label_row(qi);
                if queries.l != db.l {
                    return Err(KernelError::DimensionMismatch);
                }
                average_precision(order.iter().map(|&i| db.relevant(q_label, i as usize)))
            }
        };
        sum += ap;
    }
    Ok(sum / queries.n as f64)
}
