use holdshift_core::labels::{
    build_context_window, consensus_with_weights, label_recording, FrameVerdict, LabelConfig, LabelError, WeightScheme,
};
use holdshift_core::vad::find_decision_points;
use holdshift_core::{Channel, Recording, TurnLabel};
use proptest::prelude::*;

/// Run-length encoded stream: alternating runs starting with `first`.
fn stream(max_run: usize, max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    (any::<bool>(), prop::collection::vec(1..=max_run, 1..64)).prop_map(move |(first, runs)| {
        let mut v = Vec::new();
        let mut on = first;
        for r in runs {
            v.extend(std::iter::repeat_n(on as u8, r));
            on = !on;
        }
        v.truncate(max_len);
        v
    })
}

fn weights() -> [Vec<f64>; 3] {
    WeightScheme::standard_set().map(|s| s.weights(50).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decision_points_are_qualifying_falling_edges(v in stream(30, 400), min in 1usize..20) {
        let got = find_decision_points(&v, min);
        let want: Vec<usize> = (1..v.len())
            .filter(|&t| {
                v[t - 1] == 1 && v[t] == 0 && v[..t].iter().rev().take_while(|&&x| x == 1).count() >= min
            })
            .collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn identical_futures_always_hold(v in stream(30, 400), w in stream(30, 400), t in 1usize..100) {
        prop_assume!(v.len() > t + 100 && w.len() > t + 100);
        let mut other = w.clone();
        other.truncate(v.len().min(w.len()));
        let mut own = v.clone();
        own.truncate(other.len());
        other[t..=t + 100].copy_from_slice(&own[t..=t + 100]);
        let fl = consensus_with_weights(&own, &other, t, Channel::Ch1, &weights()).unwrap();
        prop_assert_eq!(fl.label, FrameVerdict::Hold);
    }

    #[test]
    fn power_of_two_rescaling_keeps_the_verdict(
        v in stream(30, 300), w in stream(30, 300), t in 1usize..150, k in -6i32..6
    ) {
        let n = v.len().min(w.len());
        prop_assume!(n > t + 100);
        let base = weights();
        let scaled = base.clone().map(|ws| ws.into_iter().map(|x| x * 2f64.powi(k)).collect());
        let a = consensus_with_weights(&v[..n], &w[..n], t, Channel::Ch0, &base).unwrap();
        let b = consensus_with_weights(&v[..n], &w[..n], t, Channel::Ch0, &scaled).unwrap();
        prop_assert_eq!(a.label, b.label);
    }

    #[test]
    fn incomplete_windows_are_unlabelable(v in stream(30, 300), t in 0usize..300) {
        prop_assume!(t < v.len() && t + 100 >= v.len());
        let r = consensus_with_weights(&v, &v, t, Channel::Ch0, &weights());
        prop_assert_eq!(r.unwrap_err(), LabelError::Unlabelable { frame: t });
    }

    #[test]
    fn context_windows_are_exact(v in stream(160, 1200), d in 1usize..1200, target in 1usize..600) {
        prop_assume!(d <= v.len() && v[d - 1] == 1);
        let long = 100;
        let w = build_context_window(&v, d, long, target).unwrap();
        prop_assert_eq!(w.frames.len(), target);
        prop_assert_eq!(w.pad_frames + w.retained_frames(), target);
        prop_assert!(w.frames[..w.pad_frames].iter().all(|&x| x == 0));
        prop_assert_eq!(&w.frames[w.pad_frames..], &v[w.span_start..d]);
        if w.truncated {
            prop_assert_eq!(w.pad_frames, 0);
        } else {
            // The span begins right after a long silence or at the stream start,
            // and holds no long silence itself.
            prop_assert!(w.span_start == 0 || v[w.span_start - long..w.span_start].iter().all(|&x| x == 0));
            let longest = v[w.span_start..d]
                .split(|&x| x == 1)
                .map(<[u8]>::len)
                .max()
                .unwrap_or(0);
            prop_assert!(longest < long);
        }
    }

    #[test]
    fn labeling_is_ordered_and_consistent(a in stream(40, 600), b in stream(40, 600)) {
        let n = a.len().min(b.len());
        let rec = Recording::from_frames("p", 50, a[..n].to_vec(), b[..n].to_vec()).unwrap();
        let config = LabelConfig::default();
        let (samples, stats) = label_recording(&rec, &config);
        prop_assert_eq!(samples.len(), stats.emitted());
        prop_assert_eq!(
            stats.decision_points,
            stats.emitted() + stats.abstained + stats.unlabelable + stats.rejected_no_speech
        );
        let keys: Vec<_> = samples.iter().map(|s| (s.decision_frame, s.channel.index())).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        prop_assert_eq!(keys, sorted);
        for s in &samples {
            prop_assert!(s.decision_frame + 100 < n);
            let expected = match s.label {
                TurnLabel::Hold => FrameVerdict::Hold,
                TurnLabel::Shift => FrameVerdict::Shift,
            };
            let own = rec.channel(s.channel).frames();
            let other = rec.channel(s.channel.other()).frames();
            let fl = consensus_with_weights(own, other, s.decision_frame, s.channel, &weights()).unwrap();
            prop_assert_eq!(fl.label, expected);
        }
    }
}
