//! Low-density parity-check code: systematic encoding via GF(2) elimination
//! and sum-product belief-propagation decoding.

use std::path::Path;

use super::ClassicalError;

/// Message clamp in LLR domain; also the clip applied to "noiseless"
/// infinities handed to the decoder.
pub const LLR_CLAMP: f64 = 30.0;

/// A binary LDPC code given by its sparse parity-check matrix.
///
/// `rows[c]` holds the sorted variable indices of check `c`. The encoder is
/// derived once, by Gaussian elimination preferring pivots in the last
/// `n - k` columns; for codes whose right block is invertible (the bundled
/// one) the message occupies the first `k` codeword positions.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    pub n: usize,
    pub k: usize,
    pub rows: Vec<Vec<usize>>,
    /// Codeword positions holding message bits, ascending.
    info_cols: Vec<usize>,
    /// `(pivot_col, info-col mask row)` pairs: each parity bit is the XOR of
    /// the masked message bits.
    parity_rows: Vec<(usize, BitRow)>,
    /// Edges grouped by check: variable index per edge.
    edge_var: Vec<usize>,
    /// Edge range of check `c` is `check_start[c]..check_start[c+1]`.
    check_start: Vec<usize>,
}

/// Dense bit row in 64-bit words.
#[derive(Debug, Clone)]
struct BitRow {
    words: Vec<u64>,
}

impl BitRow {
    fn zeros(bits: usize) -> Self {
        BitRow {
            words: vec![0; bits.div_ceil(64)],
        }
    }

    fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn xor_assign(&mut self, other: &BitRow) {
        for (a, b) in self.words.iter_mut().zip(other.words.iter()) {
            *a ^= b;
        }
    }

    fn and_parity(&self, other: &BitRow) -> bool {
        let mut acc = 0u64;
        for (a, b) in self.words.iter().zip(other.words.iter()) {
            acc ^= a & b;
        }
        acc.count_ones() % 2 == 1
    }
}

impl LdpcCode {
    /// Builds a code from explicit check rows.
    pub fn from_rows(n: usize, rows: Vec<Vec<usize>>) -> Result<LdpcCode, ClassicalError> {
        let m = rows.len();
        if m == 0 || m >= n {
            return Err(ClassicalError::BadCode(format!(
                "need 0 < checks < n, got {m} checks for n={n}"
            )));
        }
        for (ci, cols) in rows.iter().enumerate() {
            for &v in cols {
                if v >= n {
                    return Err(ClassicalError::BadCode(format!(
                        "check {ci} references column {v} >= n={n}"
                    )));
                }
            }
        }
        let k = n - m;

        // Dense elimination. Column order prefers the right block so a
        // dual-diagonal code ends up message-first systematic.
        let mut dense: Vec<BitRow> = rows
            .iter()
            .map(|cols| {
                let mut r = BitRow::zeros(n);
                for &c in cols {
                    r.set(c);
                }
                r
            })
            .collect();
        let order: Vec<usize> = (k..n).chain(0..k).collect();
        let mut pivots: Vec<usize> = Vec::with_capacity(m);
        let mut rank = 0usize;
        for &col in &order {
            let Some(sel) = (rank..m).find(|&r| dense[r].get(col)) else {
                continue;
            };
            dense.swap(rank, sel);
            let pivot_row = dense[rank].clone();
            for (r, row) in dense.iter_mut().enumerate() {
                if r != rank && row.get(col) {
                    row.xor_assign(&pivot_row);
                }
            }
            pivots.push(col);
            rank += 1;
            if rank == m {
                break;
            }
        }
        if rank != m {
            return Err(ClassicalError::BadCode(format!(
                "parity-check matrix is rank deficient ({rank} < {m})"
            )));
        }

        let pivot_set: std::collections::BTreeSet<usize> = pivots.iter().copied().collect();
        let info_cols: Vec<usize> = (0..n).filter(|c| !pivot_set.contains(c)).collect();
        let parity_rows: Vec<(usize, BitRow)> = pivots
            .iter()
            .zip(dense.iter())
            .map(|(&p, row)| {
                let mut mask = BitRow::zeros(n);
                for &c in &info_cols {
                    if row.get(c) {
                        mask.set(c);
                    }
                }
                (p, mask)
            })
            .collect();

        let mut edge_var = Vec::new();
        let mut check_start = Vec::with_capacity(rows.len() + 1);
        check_start.push(0usize);
        for cols in &rows {
            edge_var.extend_from_slice(cols);
            check_start.push(edge_var.len());
        }

        Ok(LdpcCode {
            n,
            k,
            rows,
            info_cols,
            parity_rows,
            edge_var,
            check_start,
        })
    }

    /// Parses the bundled sparse text format: a `n k` header line, then one
    /// line of space-separated column indices per check row.
    pub fn from_text(text: &str) -> Result<LdpcCode, ClassicalError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| ClassicalError::BadCode("empty matrix file".into()))?;
        let mut it = header.split_whitespace();
        let (Some(n), Some(k)) = (it.next(), it.next()) else {
            return Err(ClassicalError::BadCode("header must be `n k`".into()));
        };
        let n: usize = n
            .parse()
            .map_err(|_| ClassicalError::BadCode("bad n in header".into()))?;
        let k: usize = k
            .parse()
            .map_err(|_| ClassicalError::BadCode("bad k in header".into()))?;
        let mut rows = Vec::new();
        for line in lines {
            let cols: Result<Vec<usize>, _> =
                line.split_whitespace().map(str::parse::<usize>).collect();
            rows.push(cols.map_err(|_| ClassicalError::BadCode(format!("bad row: {line}")))?);
        }
        if rows.len() != n - k {
            return Err(ClassicalError::BadCode(format!(
                "expected {} rows, found {}",
                n - k,
                rows.len()
            )));
        }
        LdpcCode::from_rows(n, rows)
    }

    pub fn from_file(path: &Path) -> Result<LdpcCode, ClassicalError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ClassicalError::BadCode(format!("cannot read {}: {e}", path.display()))
        })?;
        LdpcCode::from_text(&text)
    }

    /// The bundled 648-bit rate-1/2 quasi-cyclic code (WLAN-class block
    /// length, Z=27 circulants, dual-diagonal parity part).
    pub fn builtin_n648_r12() -> LdpcCode {
        LdpcCode::from_text(include_str!("../../data/ldpc_n648_r12.txt"))
            .expect("bundled matrix is valid")
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    /// True when the message occupies codeword positions `0..k`.
    pub fn is_message_first(&self) -> bool {
        self.info_cols.iter().copied().eq(0..self.k)
    }

    /// Whether `c` satisfies every parity check.
    pub fn parity_ok(&self, c: &[u8]) -> bool {
        self.rows
            .iter()
            .all(|cols| cols.iter().fold(0u8, |acc, &v| acc ^ c[v]) == 0)
    }

    /// Systematic encoding: message bits land on the information positions,
    /// parity bits are solved so that every check passes.
    pub fn encode(&self, message: &[u8]) -> Result<Vec<u8>, ClassicalError> {
        if message.len() != self.k {
            return Err(ClassicalError::LengthMismatch {
                expected: self.k,
                got: message.len(),
            });
        }
        let mut msg_mask = BitRow::zeros(self.n);
        let mut c = vec![0u8; self.n];
        for (&col, &bit) in self.info_cols.iter().zip(message.iter()) {
            c[col] = bit & 1;
            if bit & 1 == 1 {
                msg_mask.set(col);
            }
        }
        for (pivot, mask) in &self.parity_rows {
            c[*pivot] = u8::from(mask.and_parity(&msg_mask));
        }
        Ok(c)
    }

    /// Extracts the message bits from a codeword.
    pub fn extract_message(&self, c: &[u8]) -> Vec<u8> {
        self.info_cols.iter().map(|&col| c[col]).collect()
    }

    /// Sum-product decoding from per-bit LLRs (positive favors bit 0).
    ///
    /// Stops as soon as the hard decision satisfies all checks; the initial
    /// hard decision counts as iteration 0. Non-convergence is a returned
    /// status, not an error.
    pub fn decode(&self, llrs: &[f64], max_iters: usize) -> Result<BpResult, ClassicalError> {
        if llrs.len() != self.n {
            return Err(ClassicalError::LengthMismatch {
                expected: self.n,
                got: llrs.len(),
            });
        }
        let llrs: Vec<f64> = llrs.iter().map(|&l| l.clamp(-LLR_CLAMP, LLR_CLAMP)).collect();

        // A bit with an exactly-zero posterior is undecided; convergence
        // requires every bit decided and every check satisfied.
        let decided = |post: &[f64]| post.iter().all(|&p| p != 0.0);

        let hard0: Vec<u8> = llrs.iter().map(|&l| u8::from(l < 0.0)).collect();
        if decided(&llrs) && self.parity_ok(&hard0) {
            return Ok(BpResult {
                message: self.extract_message(&hard0),
                codeword: hard0,
                converged: true,
                iterations: 0,
            });
        }

        let mut v2c: Vec<f64> = self.edge_var.iter().map(|&v| llrs[v]).collect();
        let mut c2v = vec![0.0f64; self.edge_var.len()];
        let mut tanhs = Vec::new();
        let mut prefix = Vec::new();
        let mut hard = hard0;

        for iter in 1..=max_iters {
            // Check update with leave-one-out tanh products (prefix/suffix,
            // no division so zero messages stay stable).
            for ci in 0..self.rows.len() {
                let (s, e) = (self.check_start[ci], self.check_start[ci + 1]);
                let deg = e - s;
                tanhs.clear();
                tanhs.extend((0..deg).map(|j| (v2c[s + j] / 2.0).tanh()));
                prefix.clear();
                prefix.push(1.0);
                for j in 0..deg {
                    let p: f64 = prefix[j];
                    prefix.push(p * tanhs[j]);
                }
                let mut suffix = 1.0;
                for j in (0..deg).rev() {
                    let loo: f64 =
                        (prefix[j] * suffix).clamp(-0.999_999_999_999, 0.999_999_999_999);
                    c2v[s + j] = (2.0 * loo.atanh()).clamp(-LLR_CLAMP, LLR_CLAMP);
                    suffix *= tanhs[j];
                }
            }

            // Variable update and hard decision.
            let mut posterior = llrs.clone();
            for (e, &v) in self.edge_var.iter().enumerate() {
                posterior[v] += c2v[e];
            }
            for (e, &v) in self.edge_var.iter().enumerate() {
                v2c[e] = (posterior[v] - c2v[e]).clamp(-LLR_CLAMP, LLR_CLAMP);
            }
            for (h, &p) in hard.iter_mut().zip(posterior.iter()) {
                *h = u8::from(p < 0.0);
            }
            if decided(&posterior) && self.parity_ok(&hard) {
                return Ok(BpResult {
                    message: self.extract_message(&hard),
                    codeword: hard,
                    converged: true,
                    iterations: iter,
                });
            }
        }
        Ok(BpResult {
            message: self.extract_message(&hard),
            codeword: hard,
            converged: false,
            iterations: max_iters,
        })
    }
}

/// Belief-propagation outcome.
#[derive(Debug, Clone)]
pub struct BpResult {
    pub message: Vec<u8>,
    pub codeword: Vec<u8>,
    pub converged: bool,
    pub iterations: usize,
}
