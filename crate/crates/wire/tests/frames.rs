use proptest::prelude::*;
use splitinfer_wire::frame::{decode_frame, encode_frame, Decoder, Frame, MsgType};

fn msg_type() -> impl Strategy<Value = MsgType> {
    prop::sample::select(MsgType::ALL.to_vec())
}

fn frame() -> impl Strategy<Value = Frame> {
    (msg_type(), any::<u64>(), prop::collection::vec(any::<u8>(), 0..512))
        .prop_map(|(t, s, p)| Frame::new(t, s, p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn frames_round_trip_bit_exactly(f in frame()) {
        let bytes = encode_frame(&f).unwrap();
        prop_assert_eq!(bytes.len(), f.wire_len());
        let back = decode_frame(&bytes).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(encode_frame(&back).unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn decoder_handles_arbitrary_chunking(
        frames in prop::collection::vec(frame(), 1..8),
        cuts in prop::collection::vec(1usize..64, 1..50),
    ) {
        let stream: Vec<u8> = frames.iter().flat_map(|f| encode_frame(f).unwrap()).collect();
        let mut d = Decoder::new();
        let mut out = Vec::new();
        let mut pos = 0;
        let mut i = 0;
        while pos < stream.len() {
            let n = cuts[i % cuts.len()].min(stream.len() - pos);
            d.feed(&stream[pos..pos + n]);
            pos += n;
            i += 1;
            while let Some(f) = d.next_frame().unwrap() {
                out.push(f);
            }
        }
        prop_assert_eq!(out, frames);
    }

    #[test]
    fn decoder_never_panics_on_noise(noise in prop::collection::vec(any::<u8>(), 0..2048)) {
        let mut d = Decoder::new();
        d.feed(&noise);
        for _ in 0..4096 {
            match d.next_frame() {
                Ok(None) => break,
                Ok(Some(_)) | Err(_) => {}
            }
        }
        prop_assert!(d.buffered() <= noise.len());
    }

    #[test]
    fn corrupted_byte_is_detected(f in frame(), at in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut bytes = encode_frame(&f).unwrap();
        let i = at.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(decode_frame(&bytes).is_err());
    }
}
