//! Square Gray-coded QAM with exact soft demodulation.

use super::ClassicalError;

/// A unit-average-energy square QAM constellation (order 4, 16 or 64).
///
/// Each symbol carries `bits_per_symbol` bits: the first half Gray-codes the
/// in-phase level, the second half the quadrature level. `points[s]` is the
/// complex point for the big-endian bit tuple `s`.
#[derive(Debug, Clone)]
pub struct QamConstellation {
    pub order: usize,
    pub bits_per_symbol: usize,
    pub points: Vec<(f64, f64)>,
}

fn gray_decode(mut g: u32) -> u32 {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

impl QamConstellation {
    pub fn new(order: usize) -> Result<QamConstellation, ClassicalError> {
        if !matches!(order, 4 | 16 | 64) {
            return Err(ClassicalError::BadConstellation(order));
        }
        let bits_per_symbol = order.trailing_zeros() as usize;
        let half = bits_per_symbol / 2;
        let levels = 1usize << half;
        // Unit average energy: E[|s|^2] = 2*(L^2-1)/3 before scaling.
        let norm = (2.0 * (levels as f64 * levels as f64 - 1.0) / 3.0).sqrt();

        let level_of = |bits: u32| -> f64 {
            let idx = gray_decode(bits) as f64;
            (2.0 * idx - (levels as f64 - 1.0)) / norm
        };

        let points = (0..order)
            .map(|s| {
                let i_bits = (s >> half) as u32;
                let q_bits = (s & (levels - 1)) as u32;
                (level_of(i_bits), level_of(q_bits))
            })
            .collect();
        Ok(QamConstellation {
            order,
            bits_per_symbol,
            points,
        })
    }

    /// Mean symbol energy (1.0 up to rounding).
    pub fn mean_energy(&self) -> f64 {
        self.points
            .iter()
            .map(|(re, im)| re * re + im * im)
            .sum::<f64>()
            / self.order as f64
    }

    /// Maps bits (big-endian within each symbol) to constellation points.
    pub fn modulate(&self, bits: &[u8]) -> Result<Vec<(f64, f64)>, ClassicalError> {
        if bits.len() % self.bits_per_symbol != 0 {
            return Err(ClassicalError::BitCount {
                bits: bits.len(),
                per_symbol: self.bits_per_symbol,
            });
        }
        Ok(bits
            .chunks(self.bits_per_symbol)
            .map(|chunk| {
                let mut s = 0usize;
                for &b in chunk {
                    s = s << 1 | (b & 1) as usize;
                }
                self.points[s]
            })
            .collect())
    }

    /// Exact full-sum per-bit LLRs (positive favors bit 0) given complex
    /// AWGN of total variance `sigma2` per symbol.
    pub fn demodulate(&self, symbols: &[(f64, f64)], sigma2: f64) -> Vec<f64> {
        let sigma2 = sigma2.max(1e-12);
        let m = self.bits_per_symbol;
        let mut llrs = Vec::with_capacity(symbols.len() * m);
        let mut metric = vec![0.0f64; self.order];
        for &(yr, yi) in symbols {
            for (s, &(re, im)) in self.points.iter().enumerate() {
                let d2 = (yr - re) * (yr - re) + (yi - im) * (yi - im);
                metric[s] = -d2 / sigma2;
            }
            for bit in 0..m {
                let shift = m - 1 - bit;
                let lse = |want: usize| {
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..self.order {
                        if s >> shift & 1 == want {
                            max = max.max(metric[s]);
                        }
                    }
                    let mut sum = 0.0;
                    for s in 0..self.order {
                        if s >> shift & 1 == want {
                            sum += (metric[s] - max).exp();
                        }
                    }
                    max + sum.ln()
                };
                llrs.push(lse(0) - lse(1));
            }
        }
        llrs
    }
}
