use logpeft::sequencer::{
    build_windows, pad_and_mask, read_labeled_line, read_windows, split_dataset, write_windows, LogWindow,
};
use proptest::prelude::*;

fn stream() -> impl Strategy<Value = (Vec<usize>, Vec<bool>)> {
    prop::collection::vec((0usize..50, prop::bool::weighted(0.1)), 0..200).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn window_count_formula((keys, flags) in stream(), size in 1usize..40, stride in 1usize..40) {
        let windows = build_windows(&keys, &flags, size, stride).unwrap();
        let n = keys.len();
        let expected = if n >= size { (n - size) / stride + 1 } else { 0 };
        prop_assert_eq!(windows.len(), expected);
        for (i, w) in windows.iter().enumerate() {
            let start = i * stride;
            prop_assert_eq!(w.origin.1, start);
            prop_assert_eq!(&w.key_ids[..], &keys[start..start + size]);
            prop_assert_eq!(w.label, u8::from(flags[start..start + size].iter().any(|&f| f)));
        }
    }

    #[test]
    fn or_labeling_responds_to_one_anomalous_line((keys, flags) in stream(), pos in any::<prop::sample::Index>()) {
        prop_assume!(!keys.is_empty());
        let i = pos.index(keys.len());
        let mut forced = flags.clone();
        forced[i] = true;
        let w = build_windows(&keys, &forced, keys.len(), 1).unwrap();
        prop_assert_eq!(w[0].label, 1);
        let clean = vec![false; keys.len()];
        prop_assert_eq!(build_windows(&keys, &clean, keys.len(), 1).unwrap()[0].label, 0);
    }

    #[test]
    fn masks_are_prefixes(len in 1usize..30, extra in 0usize..10, pad in 0usize..100) {
        let w = LogWindow::new((0..len).collect(), 0, (0, 0));
        let padded = pad_and_mask(&w, len + extra, pad).unwrap();
        prop_assert_eq!(padded.key_ids.len(), len + extra);
        prop_assert_eq!(padded.real_len(), len);
        let first_zero = padded.attention_mask.iter().position(|&m| m == 0).unwrap_or(len + extra);
        prop_assert!(padded.attention_mask[first_zero..].iter().all(|&m| m == 0));
        prop_assert!(padded.attention_mask[..first_zero].iter().all(|&m| m == 1));
        prop_assert!(padded.key_ids[len..].iter().all(|&k| k == pad));
        if extra > 0 {
            prop_assert!(pad_and_mask(&w, len - 1 + usize::from(len == 0), pad).is_err() || len == 1);
        }
    }

    #[test]
    fn split_partitions_without_repeats(n in 1usize..300, train in 0.05f64..0.9, seed in any::<u64>()) {
        let val = (1.0 - train) / 2.0;
        let windows: Vec<LogWindow> = (0..n).map(|i| LogWindow::new(vec![i], 0, (0, i))).collect();
        let split = split_dataset(&windows, train, val, seed).unwrap();
        prop_assert_eq!(split.train.len(), (n as f64 * train).floor() as usize);
        let mut seen: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).map(|w| w.key_ids[0]).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_dataset(&windows, train, val, seed).unwrap(), split);
    }

    #[test]
    fn thunderbird_convention(first in "[-A-Za-z0-9_]{1,8}", rest in "[a-z0-9: ]{0,20}[a-z]") {
        let raw = format!("{first} {rest}");
        let line = read_labeled_line(&raw).unwrap();
        prop_assert_eq!(line.is_anomalous, first != "-");
        prop_assert_eq!(line.message, rest.trim_start().to_string());
    }

    #[test]
    fn window_file_round_trip((keys, flags) in stream(), size in 1usize..20) {
        let windows = build_windows(&keys, &flags, size, size).unwrap();
        let mut buf = Vec::new();
        write_windows(&windows, Some(50), &mut buf).unwrap();
        let back = read_windows(&buf[..]).unwrap();
        prop_assert_eq!(back.vocab, Some(50));
        prop_assert_eq!(back.windows.len(), windows.len());
        for (a, b) in back.windows.iter().zip(&windows) {
            prop_assert_eq!(&a.key_ids, &b.key_ids);
            prop_assert_eq!(a.label, b.label);
        }
    }
}
