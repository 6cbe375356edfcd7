use proptest::prelude::*;
use text2freq::diffcore::{read_params, write_params, ParamStore, Tape};
use text2freq::freqvae::LatentCode;
use text2freq::textrep::{embed_hashed_bow, EmbeddingFile};

const WORDS: [&str; 12] = [
    "series", "moves", "up", "down", "steep", "mild", "peak", "dip", "calm", "choppy", "pace",
    "window",
];

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::new();
        let v = t.constant(x, &[3, 4]).unwrap();
        let s = t.softmax(v);
        for row in t.value(s).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn hashed_bow_unit_norm_and_order_free(
        idx in prop::collection::vec(0usize..WORDS.len(), 1..15),
        dim in 8usize..128,
        rot in 0usize..15,
    ) {
        let words: Vec<&str> = idx.iter().map(|&i| WORDS[i]).collect();
        let e = embed_hashed_bow(&words.join(" "), dim).unwrap();
        let norm = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        // signed buckets can cancel exactly, leaving the zero vector
        prop_assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-12);
        let mut shuffled = words.clone();
        shuffled.rotate_left(rot % words.len());
        shuffled.reverse();
        prop_assert_eq!(embed_hashed_bow(&shuffled.join(" "), dim).unwrap(), e);
    }

    #[test]
    fn t2fe_round_trip(
        rows in prop::collection::vec(prop::collection::vec(any::<f32>(), 5), 0..6),
    ) {
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("id-{i}")).collect();
        let f = EmbeddingFile::new(5, ids, rows).unwrap();
        let mut buf = Vec::new();
        f.write(&mut buf).unwrap();
        let g = EmbeddingFile::read(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&f.ids, &g.ids);
        for (a, b) in f.rows.iter().zip(&g.rows) {
            let bits = |r: &Vec<f32>| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn t2fp_round_trip(
        a in prop::collection::vec(any::<f64>(), 6),
        b in prop::collection::vec(-1e300f64..1e300, 4),
    ) {
        let mut s = ParamStore::new();
        s.insert("m.a", &[2, 3], a).unwrap();
        s.insert("m.b", &[4], b).unwrap();
        s.insert("other.c", &[1], vec![1.0]).unwrap();
        let mut buf = Vec::new();
        write_params(&s, "m.", &mut buf).unwrap();
        let r = read_params(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(r.len(), 2);
        for name in ["m.a", "m.b"] {
            let (x, y) = (s.get(name).unwrap(), r.get(name).unwrap());
            prop_assert_eq!(&x.shape, &y.shape);
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&x.values), bits(&y.values));
        }
    }

    #[test]
    fn kl_is_nonnegative(
        mu in prop::collection::vec(-5.0f64..5.0, 8),
        logvar in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let kl = LatentCode { mu, logvar }.kl();
        prop_assert!(kl >= 0.0);
    }
}
