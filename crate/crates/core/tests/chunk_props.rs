use proptest::prelude::*;
use tricloud_core::chunkwire::{
    crc32, decode_message, encode_transfer, fragment, ReassemblySession, ReassemblyStatus,
    SessionState, TransferMessage, MIN_CHUNK_SIZE,
};

/// Reflected CRC-32 (poly 0xEDB88320), one bit at a time.
fn crc32_bitwise(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

#[test]
fn check_value() {
    assert_eq!(crc32_bitwise(b"123456789"), 0xCBF4_3926);
    assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    assert_eq!(crc32(b""), 0);
}

fn wire_total(payload: &[u8], chunk: usize) -> usize {
    let (meta, chunks) = fragment(payload, "img-1", chunk, (160, 320), "png").unwrap();
    encode_transfer(&meta, &chunks).iter().map(Vec::len).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn crc_matches_bitwise_oracle(bytes in proptest::collection::vec(any::<u8>(), 0..4096)) {
        prop_assert_eq!(crc32(&bytes), crc32_bitwise(&bytes));
    }

    /// Wire frames delivered in any order, with repeats, rebuild the payload.
    #[test]
    fn wire_round_trip_shuffled_with_duplicates(
        payload in proptest::collection::vec(any::<u8>(), 1..6000),
        chunk in MIN_CHUNK_SIZE..1500,
        order in proptest::collection::vec(any::<u16>(), 0..200),
    ) {
        let (meta, chunks) = fragment(&payload, "seed107500", chunk, (160, 320), "png").unwrap();
        prop_assert_eq!(meta.total_chunks as usize, payload.len().div_ceil(chunk));
        prop_assert_eq!(meta.crc32_full, crc32_bitwise(&payload));
        let frames = encode_transfer(&meta, &chunks);

        let TransferMessage::Meta(decoded_meta) = decode_message(&frames[0]).unwrap() else {
            panic!("first frame must be meta");
        };
        prop_assert_eq!(&decoded_meta, &meta);

        let mut delivery: Vec<usize> = (1..frames.len()).collect();
        for (i, r) in order.iter().enumerate() {
            let n = delivery.len();
            if i % 3 == 0 {
                delivery.push(1 + *r as usize % (frames.len() - 1));
            } else {
                delivery.swap(i % n, *r as usize % n);
            }
        }

        let mut session = ReassemblySession::new(decoded_meta).unwrap();
        let mut done = None;
        for idx in delivery {
            let TransferMessage::Chunk(env) = decode_message(&frames[idx]).unwrap() else {
                panic!("chunk frame expected");
            };
            prop_assert!(env.payload.len() <= chunk);
            match session.accept(&env).unwrap() {
                ReassemblyStatus::Complete(bytes) => {
                    prop_assert!(done.is_none());
                    done = Some(bytes);
                }
                ReassemblyStatus::Duplicate | ReassemblyStatus::Incomplete { .. } => {}
            }
        }
        prop_assert_eq!(session.state(), SessionState::Complete);
        prop_assert_eq!(done.as_deref(), Some(payload.as_slice()));
        prop_assert_eq!(session.payload(), Some(payload.as_slice()));
    }

    #[test]
    fn corrupted_chunk_never_completes_silently(
        payload in proptest::collection::vec(any::<u8>(), 1..3000),
        chunk in MIN_CHUNK_SIZE..512,
        victim in any::<usize>(),
        flip in 1u8..=255,
    ) {
        let (meta, mut chunks) = fragment(&payload, "x", chunk, (1, 1), "png").unwrap();
        let v = victim % chunks.len();
        let b = victim % chunks[v].payload.len();
        chunks[v].payload[b] ^= flip;
        let mut session = ReassemblySession::new(meta).unwrap();
        let mut rejected = false;
        for env in &chunks {
            match session.accept(env) {
                Ok(ReassemblyStatus::Complete(bytes)) => prop_assert_eq!(&bytes, &payload),
                Ok(_) => {}
                Err(_) => rejected = true,
            }
        }
        prop_assert!(rejected);
        prop_assert_ne!(session.state(), SessionState::Complete);
    }

    /// Fewer envelopes never cost more bytes. With an equal envelope count
    /// only base64 padding and decimal widths differ.
    #[test]
    fn overhead_exceeds_one_and_amortizes_with_chunk_size(
        len in 1usize..20_000,
        seed in any::<u8>(),
        a in MIN_CHUNK_SIZE..4096,
        b in MIN_CHUNK_SIZE..4096,
    ) {
        let payload: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(seed | 1)).collect();
        let (small, large) = (a.min(b), a.max(b));
        let ws = wire_total(&payload, small);
        let wl = wire_total(&payload, large);
        prop_assert!(ws > len && wl > len);
        let (ks, kl) = (len.div_ceil(small), len.div_ceil(large));
        if kl < ks {
            prop_assert!(wl <= ws, "chunk {} -> {} bytes, chunk {} -> {} bytes", small, ws, large, wl);
        } else {
            // padding ≤ 2 and CRC digits ≤ 9 per chunk, chunk size digits ≤ 3
            prop_assert!(wl <= ws + 11 * kl + 3);
        }
    }

    #[test]
    fn overhead_non_increasing_along_doubling_ladder(len in 8192usize..200_000) {
        let payload: Vec<u8> = (0..len).map(|i| (i * 7 % 253) as u8).collect();
        let sizes = [64, 128, 256, 512, 1024, 2048, 4096];
        let wires: Vec<usize> = sizes.iter().map(|&c| wire_total(&payload, c)).collect();
        for w in wires.windows(2) {
            prop_assert!(w[1] <= w[0], "{:?}", wires);
        }
    }
}
