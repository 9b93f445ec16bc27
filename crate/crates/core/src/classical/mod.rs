//! The traditional transmission baseline: PNG source coding, LDPC channel
//! coding, QAM modulation over AWGN, and segmentation of the reconstructed
//! image at the receiver.
//!
//! A PNG byte stream is not error tolerant, so the pipeline frames it with
//! CRC32 checksums and a single corrupt frame fails the whole image. The
//! resulting all-or-nothing behavior is what produces the cliff in the
//! mIoU-vs-SNR curve.

mod ldpc;
mod qam;

pub use ldpc::{BpResult, LdpcCode, LLR_CLAMP};
pub use qam::QamConstellation;

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{snr_to_sigma2, transmit_symbols};
use crate::codec::{CodecState, FeatureTensor};
use crate::data::{derive_seed, DatasetSplit};
use crate::metrics::{argmax_labels, MetricsError, SegmentationEval};

#[derive(Debug, Error)]
pub enum ClassicalError {
    #[error("expected {expected} bits, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{bits} bits do not divide into {per_symbol}-bit symbols")]
    BitCount { bits: usize, per_symbol: usize },
    #[error("unsupported QAM order {0} (use 4, 16 or 64)")]
    BadConstellation(usize),
    #[error("bad parity-check matrix: {0}")]
    BadCode(String),
    #[error("png: {0}")]
    Png(String),
    #[error("payload needs {0} frames, framing supports 65535")]
    FrameOverflow(usize),
    #[error("frame payload capacity is not positive (codeword too short)")]
    TinyFrame,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
}

const FRAME_HEADER_BYTES: usize = 10;

/// One framed slice of the source byte stream. The CRC covers the header
/// fields and the payload, so corruption anywhere in the frame is detected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitFrame {
    pub index: u16,
    pub total: u16,
    pub payload: Vec<u8>,
    pub crc32: u32,
}

impl BitFrame {
    fn new(index: u16, total: u16, payload: Vec<u8>) -> Self {
        let crc32 = Self::crc_of(index, total, &payload);
        BitFrame {
            index,
            total,
            payload,
            crc32,
        }
    }

    fn crc_of(index: u16, total: u16, payload: &[u8]) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&index.to_le_bytes());
        hasher.update(&total.to_le_bytes());
        hasher.update(&(payload.len() as u16).to_le_bytes());
        hasher.update(payload);
        hasher.finalize()
    }

    /// True iff the stored checksum matches the frame content.
    pub fn verify(&self) -> bool {
        self.crc32 == Self::crc_of(self.index, self.total, &self.payload)
    }
}

/// Splits a byte stream into CRC-protected frames of at most
/// `payload_capacity` bytes.
pub fn frames_from_bytes(data: &[u8], payload_capacity: usize) -> Result<Vec<BitFrame>, ClassicalError> {
    let total = data.len().div_ceil(payload_capacity).max(1);
    if total > u16::MAX as usize {
        return Err(ClassicalError::FrameOverflow(total));
    }
    Ok((0..total)
        .map(|i| {
            let chunk = &data[i * payload_capacity..((i + 1) * payload_capacity).min(data.len())];
            BitFrame::new(i as u16, total as u16, chunk.to_vec())
        })
        .collect())
}

/// Message payload bytes that fit one codeword of `k` message bits.
pub fn frame_payload_capacity(k: usize) -> Result<usize, ClassicalError> {
    let bytes = k / 8;
    if bytes <= FRAME_HEADER_BYTES {
        return Err(ClassicalError::TinyFrame);
    }
    Ok(bytes - FRAME_HEADER_BYTES)
}

/// Serializes a frame into exactly `k` bits (MSB-first per byte, zero pad).
pub fn frame_to_bits(frame: &BitFrame, k: usize) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(k / 8);
    bytes.extend_from_slice(&frame.index.to_le_bytes());
    bytes.extend_from_slice(&frame.total.to_le_bytes());
    bytes.extend_from_slice(&(frame.payload.len() as u16).to_le_bytes());
    bytes.extend_from_slice(&frame.crc32.to_le_bytes());
    bytes.extend_from_slice(&frame.payload);
    let mut bits = Vec::with_capacity(k);
    for byte in bytes {
        for i in (0..8).rev() {
            bits.push(byte >> i & 1);
        }
    }
    bits.resize(k, 0);
    bits
}

/// Parses a frame back from message bits. Returns `None` when the declared
/// payload length cannot fit.
pub fn frame_from_bits(bits: &[u8]) -> Option<BitFrame> {
    if bits.len() < FRAME_HEADER_BYTES * 8 {
        return None;
    }
    let mut bytes = Vec::with_capacity(bits.len() / 8);
    for chunk in bits.chunks_exact(8) {
        let mut b = 0u8;
        for &bit in chunk {
            b = b << 1 | (bit & 1);
        }
        bytes.push(b);
    }
    let index = u16::from_le_bytes([bytes[0], bytes[1]]);
    let total = u16::from_le_bytes([bytes[2], bytes[3]]);
    let payload_len = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let crc32 = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]);
    if FRAME_HEADER_BYTES + payload_len > bytes.len() {
        return None;
    }
    Some(BitFrame {
        index,
        total,
        payload: bytes[FRAME_HEADER_BYTES..FRAME_HEADER_BYTES + payload_len].to_vec(),
        crc32,
    })
}

/// Per-image transmission diagnostics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassicalDiagnostics {
    pub frames: usize,
    pub corrupt_frames: usize,
    pub converged_frames: usize,
    /// Post-decoding bit error rate over message bits.
    pub message_ber: f64,
    pub symbols_sent: usize,
    pub png_bytes: usize,
}

/// Outcome of one image transmission.
#[derive(Debug, Clone)]
pub enum ClassicalOutcome {
    Reconstructed { image: Array3<f64>, png: Vec<u8> },
    Failed { reason: String },
}

impl ClassicalOutcome {
    pub fn is_reconstructed(&self) -> bool {
        matches!(self, ClassicalOutcome::Reconstructed { .. })
    }
}

/// Encodes a `[3, H, W]` image in [0, 1] to PNG bytes.
pub fn image_to_png(image: &Array3<f64>) -> Result<Vec<u8>, ClassicalError> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(ClassicalError::Png(format!("expected 3 channels, got {c}")));
    }
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for py in 0..h {
        for px in 0..w {
            let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
            rgb.put_pixel(
                px as u32,
                py as u32,
                image::Rgb([
                    to_u8(image[[0, py, px]]),
                    to_u8(image[[1, py, px]]),
                    to_u8(image[[2, py, px]]),
                ]),
            );
        }
    }
    let mut png = Vec::new();
    image::DynamicImage::ImageRgb8(rgb)
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| ClassicalError::Png(e.to_string()))?;
    Ok(png)
}

fn png_to_image(png: &[u8]) -> Result<Array3<f64>, ClassicalError> {
    let img = image::load_from_memory_with_format(png, image::ImageFormat::Png)
        .map_err(|e| ClassicalError::Png(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for py in 0..h {
        for px in 0..w {
            let p = img.get_pixel(px, py);
            for c in 0..3 {
                out[[c, py as usize, px as usize]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Runs one image through the full classical chain at the given symbol SNR.
///
/// PNG-encode, frame with CRC32, LDPC-encode per frame, QAM-modulate,
/// add channel noise (gain 1), soft-demodulate, BP-decode, reassemble.
/// Any frame failing its CRC fails the image; an unparseable PNG fails the
/// image. Failure is a value, not an error.
pub fn classical_pipeline(
    image: &Array3<f64>,
    snr_db: f64,
    code: &LdpcCode,
    constellation: &QamConstellation,
    max_bp_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ClassicalOutcome, ClassicalDiagnostics), ClassicalError> {
    let png = image_to_png(image)?;
    let capacity = frame_payload_capacity(code.k)?;
    let frames = frames_from_bytes(&png, capacity)?;

    let sigma2 = snr_to_sigma2(snr_db, 1.0).expect("unit symbol energy");
    let mut diag = ClassicalDiagnostics {
        frames: frames.len(),
        png_bytes: png.len(),
        ..ClassicalDiagnostics::default()
    };

    let mut bit_errors = 0usize;
    let mut bit_total = 0usize;
    let mut recovered: Vec<Option<BitFrame>> = vec![None; frames.len()];
    for frame in &frames {
        let msg_bits = frame_to_bits(frame, code.k);
        let codeword = code.encode(&msg_bits)?;
        let symbols = constellation.modulate(&codeword)?;
        let received = transmit_symbols(&symbols, sigma2, 1.0, rng);
        diag.symbols_sent += symbols.len();
        let llrs = constellation.demodulate(&received, sigma2);
        let decoded = code.decode(&llrs, max_bp_iters)?;
        if decoded.converged {
            diag.converged_frames += 1;
        }
        bit_errors += decoded
            .message
            .iter()
            .zip(msg_bits.iter())
            .filter(|(a, b)| a != b)
            .count();
        bit_total += msg_bits.len();

        match frame_from_bits(&decoded.message) {
            Some(f) if f.verify() && (f.index as usize) < recovered.len() => {
                let slot = f.index as usize;
                recovered[slot] = Some(f);
            }
            _ => diag.corrupt_frames += 1,
        }
    }
    diag.message_ber = bit_errors as f64 / bit_total.max(1) as f64;

    if diag.corrupt_frames > 0 || recovered.iter().any(|f| f.is_none()) {
        return Ok((
            ClassicalOutcome::Failed {
                reason: format!(
                    "{} of {} frames corrupt",
                    diag.corrupt_frames.max(
                        recovered.iter().filter(|f| f.is_none()).count()
                    ),
                    diag.frames
                ),
            },
            diag,
        ));
    }

    let mut payload = Vec::with_capacity(png.len());
    for f in recovered.into_iter().flatten() {
        payload.extend_from_slice(&f.payload);
    }
    match png_to_image(&payload) {
        Ok(img) => Ok((
            ClassicalOutcome::Reconstructed {
                image: img,
                png: payload,
            },
            diag,
        )),
        Err(e) => Ok((
            ClassicalOutcome::Failed {
                reason: format!("png parse: {e}"),
            },
            diag,
        )),
    }
}

/// One point of the classical mIoU-vs-SNR curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub snr_db: f64,
    pub miou: f64,
    pub failed_images: usize,
    pub total_images: usize,
    pub mean_message_ber: f64,
}

/// Transmits every test image through the classical chain at each SNR and
/// segments the reconstructions with a clean-trained model (inference over an
/// ideal link). Failed reconstructions score as an all-background prediction
/// so the metric stays comparable across SNR.
///
/// Images run in parallel; each one owns an rng stream derived from its
/// index, so the result does not depend on scheduling.
pub fn baseline_miou(
    split: &DatasetSplit,
    snrs_db: &[f64],
    model: &CodecState,
    code: &LdpcCode,
    constellation: &QamConstellation,
    max_bp_iters: usize,
    seed: u64,
) -> Result<Vec<BaselinePoint>, ClassicalError> {
    use rayon::prelude::*;
    let n_classes = model.config.num_classes;
    let mut out = Vec::with_capacity(snrs_db.len());
    for (si, &snr) in snrs_db.iter().enumerate() {
        let per_image: Vec<Result<(ndarray::Array2<usize>, bool, f64), ClassicalError>> = split
            .samples
            .par_iter()
            .enumerate()
            .map(|(ii, sample)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    (si as u64) << 32 | ii as u64,
                ));
                let (outcome, diag) = classical_pipeline(
                    &sample.image,
                    snr,
                    code,
                    constellation,
                    max_bp_iters,
                    &mut rng,
                )?;
                let (pred, failed) = match outcome {
                    ClassicalOutcome::Reconstructed { image, .. } => {
                        let tensor = FeatureTensor::image(image.insert_axis(Axis(0)));
                        let tx = model.encode(&tensor)?;
                        let logits = model.decode(&tx)?;
                        (
                            argmax_labels(&logits.data).index_axis(Axis(0), 0).to_owned(),
                            false,
                        )
                    }
                    ClassicalOutcome::Failed { .. } => {
                        (ndarray::Array2::zeros(sample.mask.dim()), true)
                    }
                };
                Ok((pred, failed, diag.message_ber))
            })
            .collect();

        let mut eval = SegmentationEval::new(n_classes);
        let mut failed = 0usize;
        let mut ber_sum = 0.0;
        for (result, sample) in per_image.into_iter().zip(split.samples.iter()) {
            let (pred, was_failed, ber) = result?;
            if was_failed {
                failed += 1;
            }
            ber_sum += ber;
            eval.update(&pred, &sample.mask)?;
        }
        out.push(BaselinePoint {
            snr_db: snr,
            miou: eval.miou()?,
            failed_images: failed,
            total_images: split.len(),
            mean_message_ber: ber_sum / split.len().max(1) as f64,
        });
    }
    Ok(out)
}

/// Measures post-decoding message BER at one SNR over at least
/// `min_message_bits` random message bits.
pub fn measure_post_decoding_ber(
    code: &LdpcCode,
    constellation: &QamConstellation,
    snr_db: f64,
    min_message_bits: usize,
    max_bp_iters: usize,
    seed: u64,
) -> Result<f64, ClassicalError> {
    use rand::Rng;
    let sigma2 = snr_to_sigma2(snr_db, 1.0).expect("unit symbol energy");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = 0usize;
    let mut total = 0usize;
    while total < min_message_bits {
        let msg: Vec<u8> = (0..code.k).map(|_| rng.gen_range(0..2u8)).collect();
        let codeword = code.encode(&msg)?;
        let symbols = constellation.modulate(&codeword)?;
        let received = transmit_symbols(&symbols, sigma2, 1.0, &mut rng);
        let llrs = constellation.demodulate(&received, sigma2);
        let decoded = code.decode(&llrs, max_bp_iters)?;
        errors += decoded
            .message
            .iter()
            .zip(msg.iter())
            .filter(|(a, b)| a != b)
            .count();
        total += code.k;
    }
    Ok(errors as f64 / total as f64)
}
