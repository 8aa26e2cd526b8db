//! Unpacked bit vectors (`Vec<u8>` of 0/1) and byte packing.
//!
//! Key material moves through the pipeline one bit at a time (sifting,
//! syndrome decoding, Toeplitz products), so the working form is unpacked;
//! packing is for wire frames and files. MSB-first within each byte.

/// Pack 0/1 bits MSB-first; the last byte is zero-padded.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        debug_assert!(b <= 1);
        out[i / 8] |= (b & 1) << (7 - (i % 8));
    }
    out
}

/// Unpack `n` bits packed by [`pack_bits`].
pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    assert!(n <= bytes.len() * 8, "not enough bytes for {n} bits");
    (0..n).map(|i| (bytes[i / 8] >> (7 - (i % 8))) & 1).collect()
}

/// In-place XOR of equal-length byte strings.
pub fn xor_into(dst: &mut [u8], src: &[u8]) {
    assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

pub fn bytes_to_bits(bytes: &[u8]) -> Vec<u8> {
    unpack_bits(bytes, bytes.len() * 8)
}

pub fn bits_to_bytes(bits: &[u8]) -> Vec<u8> {
    assert_eq!(bits.len() % 8, 0, "bit length must be a byte multiple");
    pack_bits(bits)
}
