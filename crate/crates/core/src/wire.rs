//! Bit-exact wire format for boundary traffic (`.tsfa` messages).
//!
//! Every message starts with the same 30-byte little-endian header:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "TSFA"
//!      4     2  version (currently 1)
//!      6     4  round
//!     10     2  client
//!     12     2  B    batch size
//!     14     2  K    kept tokens
//!     16     2  D    embedding width
//!     18     2  M    patch tokens of the uncompressed sequence
//!     20     1  q    quantizer bits (2/4/8/16/32)
//!     21     1  merged_present (0/1)
//!     22     4  a_min  f32 grid anchor
//!     26     4  a_max  f32 grid anchor
//! ```
//!
//! Activation body: `B*K` u16 patch indices, then a sign bitmap of
//! `ceil(B(K+2)D / 8)` bytes, then codes of `ceil(B(K+2)D q / 8)` bytes,
//! both packed LSB-first in row-major entry order. Gradient messages reuse
//! the header (q = 32, anchors zero) and carry `B(K+2)D` f32 values.
//! Adapter messages reuse the header with B := block count, K := LoRA rank,
//! M = 0, and carry each block's U then V as f32.
//!
//! Decoding validates structure exhaustively (magic, version, exact length,
//! index ordering, canonical pad bits, anchor sanity) and returns typed
//! errors; any accepted buffer re-encodes to the identical bytes.

use thiserror::Error;

use crate::compress::{entry_count, packed_len, BitWidth, CompressError, QuantizedActivations};
use crate::model::LoraAdapter;
use crate::tensor::Tensor;

/// Message magic.
pub const WIRE_MAGIC: [u8; 4] = *b"TSFA";
/// Format version.
pub const WIRE_VERSION: u16 = 1;
/// Fixed header size in bytes.
pub const HEADER_BYTES: usize = 30;

/// Errors from encoding or decoding wire messages.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("buffer of {0} bytes is shorter than the {HEADER_BYTES}-byte header")]
    TooShort(usize),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("message is {got} bytes, layout requires {want}")]
    Length { got: usize, want: usize },
    #[error("merged_present byte is {0}, must be 0 or 1")]
    BadFlag(u8),
    #[error("K = {k} exceeds M = {m}")]
    KExceedsM { k: usize, m: usize },
    #[error("merged_present = {flag} inconsistent with K = {k}, M = {m}")]
    MergedFlag { flag: bool, k: usize, m: usize },
    #[error("indices of sample {sample} not strictly increasing in [1, M]: {detail}")]
    BadIndices { sample: usize, detail: String },
    #[error("field {field} = {value} does not fit in the wire format")]
    FieldRange { field: &'static str, value: usize },
    #[error(transparent)]
    Payload(#[from] CompressError),
}

/// Per-message routing metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireMeta {
    pub round: u32,
    pub client: u16,
}

/// Exact payload size of an activation message in bits: B(K+2)Dq.
pub fn payload_bits(b: usize, k: usize, d: usize, q: u32) -> u64 {
    b as u64 * (k as u64 + 2) * d as u64 * q as u64
}

/// Header + indices + sign bitmap, in bits, with the bitmap byte-rounded as
/// stored: 8*30 + 16*B*K + 8*ceil(B(K+2)D / 8).
pub fn metadata_bits(b: usize, k: usize, d: usize) -> u64 {
    8 * HEADER_BYTES as u64
        + 16 * b as u64 * k as u64
        + 8 * (entry_count(b, k, d).div_ceil(8)) as u64
}

/// Uplink compression ratio of the refined+quantized message against the
/// 32-bit uncompressed sequence: q(K+2) / (32(M+1)). Payload-only by
/// definition; metadata is excluded.
pub fn compression_ratio(k: usize, q: u32, m: usize) -> f64 {
    (q as f64 * (k as f64 + 2.0)) / (32.0 * (m as f64 + 1.0))
}

fn header_fields(buf: &mut Vec<u8>, meta: WireMeta, b: usize, k: usize, d: usize, m: usize) -> Result<(), WireError> {
    let as16 = |field: &'static str, v: usize| -> Result<u16, WireError> {
        u16::try_from(v).map_err(|_| WireError::FieldRange { field, value: v })
    };
    buf.extend_from_slice(&WIRE_MAGIC);
    buf.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    buf.extend_from_slice(&meta.round.to_le_bytes());
    buf.extend_from_slice(&meta.client.to_le_bytes());
    buf.extend_from_slice(&as16("B", b)?.to_le_bytes());
    buf.extend_from_slice(&as16("K", k)?.to_le_bytes());
    buf.extend_from_slice(&as16("D", d)?.to_le_bytes());
    buf.extend_from_slice(&as16("M", m)?.to_le_bytes());
    Ok(())
}

/// Encode an activation message. `indices` is the flat [B x K] 1-based
/// selection; `m` is the uncompressed patch-token count.
pub fn encode_activations(
    qa: &QuantizedActivations,
    indices: &[u16],
    m: usize,
    merged_present: bool,
    meta: WireMeta,
) -> Result<Vec<u8>, WireError> {
    qa.validate()?;
    if qa.k > m {
        return Err(WireError::KExceedsM { k: qa.k, m });
    }
    if merged_present != (qa.k < m) {
        return Err(WireError::MergedFlag {
            flag: merged_present,
            k: qa.k,
            m,
        });
    }
    if indices.len() != qa.b * qa.k {
        return Err(WireError::FieldRange {
            field: "indices",
            value: indices.len(),
        });
    }
    validate_indices(indices, qa.b, qa.k, m)?;
    let mut buf = Vec::with_capacity(
        HEADER_BYTES + 2 * indices.len() + qa.signs.len() + qa.codes.len(),
    );
    header_fields(&mut buf, meta, qa.b, qa.k, qa.d, m)?;
    buf.push(qa.bit_width.bits() as u8);
    buf.push(merged_present as u8);
    buf.extend_from_slice(&qa.a_min.to_le_bytes());
    buf.extend_from_slice(&qa.a_max.to_le_bytes());
    for &i in indices {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    buf.extend_from_slice(&qa.signs);
    buf.extend_from_slice(&qa.codes);
    debug_assert_eq!(
        buf.len() as u64 * 8,
        metadata_bits(qa.b, qa.k, qa.d)
            + 8 * payload_bits(qa.b, qa.k, qa.d, qa.bit_width.bits()).div_ceil(8)
    );
    Ok(buf)
}

fn validate_indices(indices: &[u16], b: usize, k: usize, m: usize) -> Result<(), WireError> {
    for sample in 0..b {
        let row = &indices[sample * k..(sample + 1) * k];
        let mut prev = 0u16;
        for &i in row {
            if i == 0 || i as usize > m || i <= prev {
                return Err(WireError::BadIndices {
                    sample,
                    detail: format!("{row:?} (M = {m})"),
                });
            }
            prev = i;
        }
    }
    Ok(())
}

/// Decoded activation message.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPacket {
    pub qa: QuantizedActivations,
    /// Flat [B x K] 1-based patch indices.
    pub indices: Vec<u16>,
    /// Uncompressed patch-token count.
    pub m: usize,
    pub merged_present: bool,
    pub meta: WireMeta,
}

struct Header {
    meta: WireMeta,
    b: usize,
    k: usize,
    d: usize,
    m: usize,
    q: u8,
    flag: u8,
    a_min: f32,
    a_max: f32,
}

fn decode_header(bytes: &[u8]) -> Result<Header, WireError> {
    if bytes.len() < HEADER_BYTES {
        return Err(WireError::TooShort(bytes.len()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != WIRE_MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let u16at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let version = u16at(4);
    if version != WIRE_VERSION {
        return Err(WireError::BadVersion(version));
    }
    Ok(Header {
        meta: WireMeta {
            round: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
            client: u16at(10),
        },
        b: u16at(12) as usize,
        k: u16at(14) as usize,
        d: u16at(16) as usize,
        m: u16at(18) as usize,
        q: bytes[20],
        flag: bytes[21],
        a_min: f32::from_le_bytes(bytes[22..26].try_into().unwrap()),
        a_max: f32::from_le_bytes(bytes[26..30].try_into().unwrap()),
    })
}

/// Gradient and adapter messages write the unused range anchors as +0.0;
/// any other bit pattern cannot re-encode canonically and is rejected.
fn check_zero_anchors(h: &Header, field: &'static str) -> Result<(), WireError> {
    if h.a_min.to_bits() != 0 || h.a_max.to_bits() != 0 {
        return Err(WireError::FieldRange {
            field,
            value: (h.a_min.to_bits() | h.a_max.to_bits()) as usize,
        });
    }
    Ok(())
}

fn check_flag(h: &Header) -> Result<bool, WireError> {
    if h.flag > 1 {
        return Err(WireError::BadFlag(h.flag));
    }
    if h.k > h.m {
        return Err(WireError::KExceedsM { k: h.k, m: h.m });
    }
    let merged = h.flag == 1;
    if merged != (h.k < h.m) {
        return Err(WireError::MergedFlag {
            flag: merged,
            k: h.k,
            m: h.m,
        });
    }
    Ok(merged)
}

/// Decode and validate an activation message. Accepted buffers re-encode
/// bit-identically.
pub fn decode_activations(bytes: &[u8]) -> Result<ActivationPacket, WireError> {
    let h = decode_header(bytes)?;
    let merged_present = check_flag(&h)?;
    let bit_width = BitWidth::from_bits(h.q).map_err(WireError::Payload)?;
    let n = entry_count(h.b, h.k, h.d);
    let idx_bytes = 2 * h.b * h.k;
    let sign_bytes = n.div_ceil(8);
    let code_bytes = packed_len(n, bit_width.bits());
    let want = HEADER_BYTES + idx_bytes + sign_bytes + code_bytes;
    if bytes.len() != want {
        return Err(WireError::Length {
            got: bytes.len(),
            want,
        });
    }
    let mut indices = Vec::with_capacity(h.b * h.k);
    for c in bytes[HEADER_BYTES..HEADER_BYTES + idx_bytes].chunks_exact(2) {
        indices.push(u16::from_le_bytes([c[0], c[1]]));
    }
    validate_indices(&indices, h.b, h.k, h.m)?;
    let signs = bytes[HEADER_BYTES + idx_bytes..HEADER_BYTES + idx_bytes + sign_bytes].to_vec();
    let codes = bytes[HEADER_BYTES + idx_bytes + sign_bytes..].to_vec();
    let qa = QuantizedActivations {
        codes,
        signs,
        a_min: h.a_min,
        a_max: h.a_max,
        bit_width,
        b: h.b,
        k: h.k,
        d: h.d,
    };
    qa.validate()?;
    Ok(ActivationPacket {
        qa,
        indices,
        m: h.m,
        merged_present,
        meta: h.meta,
    })
}

/// Encode a gradient message: shared header (q = 32, anchors 0) plus
/// B(K+2)D f32 values. `grad` is [B x (K+2) x D].
pub fn encode_gradient(
    grad: &Tensor,
    m: usize,
    merged_present: bool,
    meta: WireMeta,
) -> Result<Vec<u8>, WireError> {
    if grad.rank() != 3 || grad.shape()[1] < 2 {
        return Err(WireError::FieldRange {
            field: "gradient rank/tokens",
            value: grad.rank(),
        });
    }
    let (b, k, d) = (grad.shape()[0], grad.shape()[1] - 2, grad.shape()[2]);
    if k > m {
        return Err(WireError::KExceedsM { k, m });
    }
    if merged_present != (k < m) {
        return Err(WireError::MergedFlag {
            flag: merged_present,
            k,
            m,
        });
    }
    let mut buf = Vec::with_capacity(HEADER_BYTES + 4 * grad.numel());
    header_fields(&mut buf, meta, b, k, d, m)?;
    buf.push(32);
    buf.push(merged_present as u8);
    buf.extend_from_slice(&0f32.to_le_bytes());
    buf.extend_from_slice(&0f32.to_le_bytes());
    for &v in grad.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

/// Decoded gradient message (values widened back to f64).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPacket {
    /// [B x (K+2) x D].
    pub values: Tensor,
    pub m: usize,
    pub merged_present: bool,
    pub meta: WireMeta,
}

/// Decode a gradient message.
pub fn decode_gradient(bytes: &[u8]) -> Result<GradientPacket, WireError> {
    let h = decode_header(bytes)?;
    let merged_present = check_flag(&h)?;
    if h.q != 32 {
        return Err(WireError::Payload(CompressError::BadBitWidth(h.q)));
    }
    check_zero_anchors(&h, "gradient anchors")?;
    let n = entry_count(h.b, h.k, h.d);
    let want = HEADER_BYTES + 4 * n;
    if bytes.len() != want {
        return Err(WireError::Length {
            got: bytes.len(),
            want,
        });
    }
    if h.b == 0 || h.d == 0 {
        return Err(WireError::FieldRange {
            field: "gradient B/D",
            value: 0,
        });
    }
    let mut data = Vec::with_capacity(n);
    for c in bytes[HEADER_BYTES..].chunks_exact(4) {
        data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    }
    Ok(GradientPacket {
        values: Tensor::new(&[h.b, h.k + 2, h.d], data).expect("dims validated"),
        m: h.m,
        merged_present,
        meta: h.meta,
    })
}

/// Encode an adapter message: shared header with B := block count,
/// K := rank, D := width, M := 0; payload per block is U then V as f32.
pub fn encode_adapters(adapters: &[LoraAdapter], meta: WireMeta) -> Result<Vec<u8>, WireError> {
    if adapters.is_empty() {
        return Err(WireError::FieldRange {
            field: "adapter blocks",
            value: 0,
        });
    }
    let d = adapters[0].u.shape()[0];
    let r = adapters[0].u.shape()[1];
    for a in adapters {
        if a.u.shape() != [d, r] || a.v.shape() != [r, d] {
            return Err(WireError::FieldRange {
                field: "adapter shape",
                value: a.u.numel(),
            });
        }
    }
    let mut buf = Vec::with_capacity(HEADER_BYTES + adapters.len() * 8 * d * r);
    header_fields(&mut buf, meta, adapters.len(), r, d, 0)?;
    buf.push(32);
    buf.push(0);
    buf.extend_from_slice(&0f32.to_le_bytes());
    buf.extend_from_slice(&0f32.to_le_bytes());
    for a in adapters {
        for &v in a.u.data().iter().chain(a.v.data()) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

/// Decode an adapter message back into f32-precision adapters.
pub fn decode_adapters(bytes: &[u8]) -> Result<(Vec<LoraAdapter>, WireMeta), WireError> {
    let h = decode_header(bytes)?;
    // Adapter headers carry block count in B and rank in K, M = 0.
    let (nblk, r, d) = (h.b, h.k, h.d);
    if nblk == 0 || r == 0 || d == 0 || h.m != 0 || h.q != 32 || h.flag != 0 {
        return Err(WireError::FieldRange {
            field: "adapter header",
            value: h.m,
        });
    }
    check_zero_anchors(&h, "adapter anchors")?;
    let per_block = 2 * d * r;
    let want = HEADER_BYTES + 4 * nblk * per_block;
    if bytes.len() != want {
        return Err(WireError::Length {
            got: bytes.len(),
            want,
        });
    }
    let mut vals = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut out = Vec::with_capacity(nblk);
    for _ in 0..nblk {
        let u: Vec<f64> = (&mut vals).take(d * r).collect();
        let v: Vec<f64> = (&mut vals).take(r * d).collect();
        out.push(LoraAdapter {
            u: Tensor::new(&[d, r], u).expect("validated length"),
            v: Tensor::new(&[r, d], v).expect("validated length"),
        });
    }
    Ok((out, h.meta))
}

// ---------------------------------------------------------------------------
// Golden vectors: canonical messages regenerated from pure-IEEE arithmetic
// (no libm), so the bytes are identical on every platform.

/// Deterministically build the canonical golden messages shipped in the
/// repository, as (file name, bytes) pairs.
pub fn golden_vectors() -> Vec<(&'static str, Vec<u8>)> {
    use crate::compress::{quantize, refine};
    use crate::rng::Rng;

    let seed = 0xC0DEu64;
    let build = |tag: u64, b: usize, m: usize, d: usize, k: usize, q: BitWidth, round: u32| {
        let mut vrng = Rng::derive(seed, &[tag, 1]);
        let acts = Tensor::from_fn(&[b, m + 1, d], || vrng.uniform() * 2.0 - 1.0);
        let mut srng = Rng::derive(seed, &[tag, 2]);
        let scores = Tensor::from_fn(&[b, m], || srng.uniform() + 0.01);
        let refined = refine(&acts, &scores, k).expect("golden refine");
        let mut qrng = Rng::derive(seed, &[tag, 3]);
        let qa = quantize(&refined.tokens, q, &mut qrng).expect("golden quantize");
        encode_activations(
            &qa,
            &refined.indices,
            m,
            refined.merged_present,
            WireMeta {
                round,
                client: tag as u16,
            },
        )
        .expect("golden encode")
    };

    let mut out = vec![
        ("act_q4_b2.tsfa", build(1, 2, 6, 4, 3, BitWidth::Q4, 3)),
        ("act_q8_identity.tsfa", build(2, 1, 4, 5, 4, BitWidth::Q8, 1)),
        ("act_q32_b1.tsfa", build(3, 1, 5, 8, 2, BitWidth::Q32, 12)),
    ];
    // Degenerate but legal: an empty batch is a bare header + empty sections.
    let empty = QuantizedActivations {
        codes: vec![],
        signs: vec![],
        a_min: 0.0,
        a_max: 0.0,
        bit_width: BitWidth::Q8,
        b: 0,
        k: 2,
        d: 3,
    };
    out.push((
        "act_q8_empty.tsfa",
        encode_activations(&empty, &[], 5, true, WireMeta { round: 0, client: 9 })
            .expect("golden empty encode"),
    ));
    out
}
