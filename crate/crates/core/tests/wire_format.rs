use std::io::Cursor;

use proptest::prelude::*;

use intsgd::aggregation::{
    clip_bound, clip_for_width, decode_frame, encode_frame, read_frame, sum_int_vectors, write_frame, Frame,
    FrameError, HEADER_LEN,
};
use intsgd::rounding::{IntVector, IntWidth};

fn width() -> impl Strategy<Value = IntWidth> {
    prop_oneof![Just(IntWidth::W8), Just(IntWidth::W32)]
}

fn int_frame() -> impl Strategy<Value = Frame> {
    (width(), any::<u64>(), any::<u32>(), 1u32..8, 0usize..200).prop_flat_map(|(w, it, id, blocks, len)| {
        prop::collection::vec(w.min_value()..=w.max_value(), len)
            .prop_map(move |v| Frame::int(it, id, blocks, IntVector::new(w, v).unwrap()))
    })
}

proptest! {
    #[test]
    fn int_frames_round_trip(f in int_frame()) {
        let bytes = encode_frame(&f);
        prop_assert_eq!(bytes.len(), HEADER_LEN + f.payload.len() * f.payload.width_code() as usize / 8);
        prop_assert_eq!(decode_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn float_frames_round_trip(it in any::<u64>(), id in any::<u32>(), v in prop::collection::vec(any::<f64>(), 0..50)) {
        let f = Frame::float(it, id, v.clone());
        let back = decode_frame(&encode_frame(&f)).unwrap();
        // Compare bits so NaN payloads count as equal.
        let bits = |f: &Frame| match &f.payload {
            intsgd::aggregation::Payload::Float(v) => v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            _ => unreachable!(),
        };
        prop_assert_eq!(bits(&back), bits(&f));
    }

    #[test]
    fn truncation_never_panics(f in int_frame(), cut in 0usize..64) {
        let bytes = encode_frame(&f);
        let cut = cut.min(bytes.len());
        if cut < bytes.len() {
            let truncated = decode_frame(&bytes[..bytes.len() - cut.max(1)]);
            prop_assert!(matches!(truncated, Err(FrameError::Truncated { .. })), "{:?}", truncated);
        }
    }

    #[test]
    fn clipped_sums_never_overflow(w in width(), n in 1usize..40, raw in prop::collection::vec(any::<i64>(), 1..30)) {
        let b = clip_bound(w, n);
        let vectors: Vec<IntVector> = (0..n)
            .map(|i| {
                let v: Vec<i64> = raw.iter().map(|x| x.wrapping_mul(i as i64 + 1)).collect();
                clip_for_width(&v, w, n).unwrap().0
            })
            .collect();
        for v in &vectors {
            prop_assert!(v.values().iter().all(|&x| (x as i64).abs() <= b));
        }
        let refs: Vec<&IntVector> = vectors.iter().collect();
        let sum = sum_int_vectors(&refs, w).unwrap();
        prop_assert_eq!(sum.len(), raw.len());
    }
}

#[test]
fn stream_of_frames_then_clean_eof() {
    let frames: Vec<Frame> = (0..5)
        .map(|k| Frame::int(k, 3, 1, IntVector::new(IntWidth::W8, vec![k as i64, -(k as i64)]).unwrap()))
        .collect();
    let mut buf = Vec::new();
    for f in &frames {
        write_frame(&mut buf, f).unwrap();
    }
    let mut r = Cursor::new(buf);
    for f in &frames {
        assert_eq!(read_frame(&mut r).unwrap().as_ref(), Some(f));
    }
    assert!(read_frame(&mut r).unwrap().is_none());
}

#[test]
fn clip_bound_examples() {
    assert_eq!(clip_bound(IntWidth::W8, 4), 31);
    assert_eq!(clip_bound(IntWidth::W32, 16), 134_217_727);
    let (v, clipped) = clip_for_width(&[100, -20, -500], IntWidth::W8, 4).unwrap();
    assert_eq!(v.values(), &[31, -20, -31]);
    assert_eq!(clipped, 2);
}

#[test]
fn sum_examples() {
    let v = |x: &[i64]| IntVector::new(IntWidth::W32, x.to_vec()).unwrap();
    let s = sum_int_vectors(&[&v(&[1, -2]), &v(&[0, 0]), &v(&[4, 2])], IntWidth::W32).unwrap();
    assert_eq!(s.values(), &[5, 0]);
    assert_eq!(sum_int_vectors(&[&v(&[7, 8])], IntWidth::W32).unwrap().values(), &[7, 8]);
}
