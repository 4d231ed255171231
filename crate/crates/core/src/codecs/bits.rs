//! Little-endian bit packing: code `i` of width `w` occupies bits
//! `[i*w, (i+1)*w)` of the stream, bit 0 being the LSB of byte 0.

pub fn packed_len(count: usize, width: u32) -> usize {
    (count * width as usize).div_ceil(8)
}

/// Packs `codes` into `out`, which must hold `packed_len(codes.len(), width)`
/// bytes. Bits above `width` in a code are ignored.
pub fn pack_bits(codes: &[u32], width: u32, out: &mut [u8]) {
    debug_assert!((1..=16).contains(&width));
    debug_assert!(out.len() >= packed_len(codes.len(), width));
    let mask = (1u64 << width) - 1;
    match width {
        8 => {
            for (o, &c) in out.iter_mut().zip(codes) {
                *o = c as u8;
            }
        }
        4 => {
            for (o, pair) in out.iter_mut().zip(codes.chunks(2)) {
                let hi = pair.get(1).copied().unwrap_or(0);
                *o = (pair[0] & 0xf) as u8 | (((hi & 0xf) as u8) << 4);
            }
        }
        _ => {
            out[..packed_len(codes.len(), width)].fill(0);
            let mut acc: u64 = 0;
            let mut nbits = 0u32;
            let mut pos = 0usize;
            for &c in codes {
                acc |= (c as u64 & mask) << nbits;
                nbits += width;
                while nbits >= 8 {
                    out[pos] = acc as u8;
                    pos += 1;
                    acc >>= 8;
                    nbits -= 8;
                }
            }
            if nbits > 0 {
                out[pos] = acc as u8;
            }
        }
    }
}

/// Inverse of [`pack_bits`]; fills all of `out`.
pub fn unpack_bits(bytes: &[u8], width: u32, out: &mut [u32]) {
    debug_assert!(bytes.len() >= packed_len(out.len(), width));
    match width {
        8 => {
            for (o, &b) in out.iter_mut().zip(bytes) {
                *o = b as u32;
            }
        }
        4 => {
            for (pair, &b) in out.chunks_mut(2).zip(bytes) {
                pair[0] = (b & 0xf) as u32;
                if let Some(hi) = pair.get_mut(1) {
                    *hi = (b >> 4) as u32;
                }
            }
        }
        2 => {
            for (quad, &b) in out.chunks_mut(4).zip(bytes) {
                for (j, o) in quad.iter_mut().enumerate() {
                    *o = ((b >> (2 * j)) & 3) as u32;
                }
            }
        }
        _ => {
            let mask = (1u64 << width) - 1;
            let mut acc: u64 = 0;
            let mut nbits = 0u32;
            let mut pos = 0usize;
            for o in out.iter_mut() {
                while nbits < width {
                    acc |= (bytes[pos] as u64) << nbits;
                    pos += 1;
                    nbits += 8;
                }
                *o = (acc & mask) as u32;
                acc >>= width;
                nbits -= width;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_layout() {
        let mut out = [0u8; 2];
        pack_bits(&[1, 2, 3], 5, &mut out);
        // 00001 | 00010 << 5 | 00011 << 10
        assert_eq!(u16::from_le_bytes(out), 1 | (2 << 5) | (3 << 10));
        let mut back = [0u32; 3];
        unpack_bits(&out, 5, &mut back);
        assert_eq!(back, [1, 2, 3]);
    }

    #[test]
    fn nibbles_low_first() {
        let mut out = [0u8; 1];
        pack_bits(&[0xa, 0x5], 4, &mut out);
        assert_eq!(out[0], 0x5a);
    }

    proptest! {
        #[test]
        fn unpack_inverts_pack(width in 1u32..=8, raw in prop::collection::vec(any::<u32>(), 0..300)) {
            let mask = (1u32 << width) - 1;
            let codes: Vec<u32> = raw.iter().map(|c| c & mask).collect();
            let mut bytes = vec![0u8; packed_len(codes.len(), width)];
            pack_bits(&codes, width, &mut bytes);
            let mut back = vec![0u32; codes.len()];
            unpack_bits(&bytes, width, &mut back);
            prop_assert_eq!(back, codes);
        }
    }
}
