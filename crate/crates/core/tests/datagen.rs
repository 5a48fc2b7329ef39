use std::collections::BTreeSet;

use proptest::prelude::*;

use sacd_core::datagen::{batches, generate, split, ClipSample, PlantedAhi, SubjectRecord, SyntheticSpec};

const STAGES: usize = 5;

fn spec(num_subjects: usize, clips: usize) -> SyntheticSpec {
    SyntheticSpec {
        num_subjects,
        clips_per_subject: clips,
        ..SyntheticSpec::default()
    }
}

/// Fixed point of `pi P` by repeated multiplication from the uniform vector.
fn power_iteration(p: &[[f64; STAGES]; STAGES]) -> [f64; STAGES] {
    let mut pi = [1.0 / STAGES as f64; STAGES];
    for _ in 0..10_000 {
        let mut next = [0.0; STAGES];
        for a in 0..STAGES {
            for b in 0..STAGES {
                next[b] += pi[a] * p[a][b];
            }
        }
        pi = next;
    }
    pi
}

fn stage_frequencies(subjects: &[SubjectRecord]) -> [f64; STAGES] {
    let mut counts = [0usize; STAGES];
    let mut n = 0;
    for c in subjects.iter().flat_map(|s| &s.clips) {
        counts[c.stage_label as usize] += 1;
        n += 1;
    }
    counts.map(|c| c as f64 / n as f64)
}

#[test]
fn stage_frequencies_follow_the_stationary_distribution() {
    let s = spec(60, 1000);
    let pi = power_iteration(&s.transition().unwrap());
    for (p, q) in pi.iter().zip(&s.class_prior) {
        assert!((p - q).abs() < 1e-9, "{pi:?}");
    }
    let subjects = generate(&s).unwrap();
    let freq = stage_frequencies(&subjects);
    for k in 0..STAGES {
        assert!((freq[k] - pi[k]).abs() < 0.02, "stage {k}: {} vs {}", freq[k], pi[k]);
    }
}

#[test]
fn an_explicit_chain_sets_its_own_stationary_distribution() {
    // a cyclic chain biased toward the next stage
    let mut p = [[0.0; STAGES]; STAGES];
    for (a, row) in p.iter_mut().enumerate() {
        row[a] = 0.5;
        row[(a + 1) % STAGES] = 0.3 + 0.04 * a as f64;
        row[(a + 2) % STAGES] = 0.2 - 0.04 * a as f64;
    }
    let s = SyntheticSpec {
        stage_transition: Some(p),
        ..spec(60, 1000)
    };
    let pi = power_iteration(&p);
    let freq = stage_frequencies(&generate(&s).unwrap());
    for k in 0..STAGES {
        assert!((freq[k] - pi[k]).abs() < 0.02, "stage {k}: {} vs {}", freq[k], pi[k]);
    }
}

#[test]
fn self_transition_sets_the_mean_run_length() {
    // geometric runs with continuation 0.9 average 1 / (1 - 0.9) clips
    let mut p = [[0.025; STAGES]; STAGES];
    (0..STAGES).for_each(|a| p[a][a] = 0.9);
    let s = SyntheticSpec {
        stage_transition: Some(p),
        ..spec(40, 2000)
    };
    let (mut runs, mut clips) = (0usize, 0usize);
    for subject in generate(&s).unwrap() {
        // the final run is cut off by the recording end
        let labels: Vec<u8> = subject.clips.iter().map(|c| c.stage_label).collect();
        let last_start = labels
            .iter()
            .rposition(|&l| l != *labels.last().unwrap())
            .map_or(0, |i| i + 1);
        runs += labels[..last_start].windows(2).filter(|w| w[0] != w[1]).count();
        clips += last_start;
    }
    let mean = clips as f64 / runs as f64;
    assert!((mean - 10.0).abs() < 0.5, "mean run {mean}");
}

/// Held-out accuracy of a nearest-class-mean rule fitted on the first half
/// of the subjects.
fn centroid_probe(subjects: &[SubjectRecord], signal: fn(&ClipSample) -> &[f64]) -> f64 {
    let (fit, held) = subjects.split_at(subjects.len() / 2);
    let dim = signal(&fit[0].clips[0]).len();
    let mut sums = vec![vec![0.0; dim]; STAGES];
    let mut counts = [0.0; STAGES];
    for c in fit.iter().flat_map(|s| &s.clips) {
        let k = c.stage_label as usize;
        counts[k] += 1.0;
        sums[k].iter_mut().zip(signal(c)).for_each(|(a, v)| *a += v);
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(counts)
        .map(|(s, n)| s.iter().map(|v| v / n).collect())
        .collect();
    let (mut hits, mut n) = (0usize, 0usize);
    for c in held.iter().flat_map(|s| &s.clips) {
        let x = signal(c);
        let guess = (0..STAGES)
            .min_by(|&a, &b| {
                let d = |k: usize| x.iter().zip(&centroids[k]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        hits += (guess == c.stage_label as usize) as usize;
        n += 1;
    }
    hits as f64 / n as f64
}

#[test]
fn eeg_separates_stages_at_least_as_well_as_video() {
    let mut previous = f64::INFINITY;
    for gap in [0.3, 0.6, 0.9] {
        let subjects = generate(&SyntheticSpec { gap, ..spec(30, 200) }).unwrap();
        let eeg = centroid_probe(&subjects, |c| &c.eeg_signal);
        let video = centroid_probe(&subjects, |c| &c.video_signal);
        assert!(eeg >= video, "gap {gap}: eeg {eeg} video {video}");
        // a wider gap leaves less stage information in the video
        assert!(video < previous, "gap {gap}: video {video}");
        previous = video;
    }
}

#[test]
fn planted_channel_shifts_with_the_ahi_level() {
    let base = spec(40, 100);
    let planted = SyntheticSpec {
        planted_ahi: Some(PlantedAhi {
            channel: 3,
            strength: 2.0,
        }),
        ..base.clone()
    };
    let (a, b) = (generate(&base).unwrap(), generate(&planted).unwrap());
    for (sa, sb) in a.iter().zip(&b) {
        assert_eq!(sa.ahi_level, sb.ahi_level);
        for (ca, cb) in sa.clips.iter().zip(&sb.clips) {
            let shift = 2.0 * sa.ahi_level as f64;
            for (signal_a, signal_b) in [(&ca.eeg_signal, &cb.eeg_signal), (&ca.video_signal, &cb.video_signal)] {
                for (ch, (x, y)) in signal_a.iter().zip(signal_b.iter()).enumerate() {
                    // signals are stored at f32 precision
                    if ch == 3 {
                        assert!((y - x - shift).abs() < 1e-5 * (1.0 + y.abs()));
                    } else {
                        assert_eq!(x, y);
                    }
                }
            }
        }
    }
}

#[test]
fn every_full_window_appears_exactly_once_per_epoch() {
    let subjects = generate(&spec(10, 37)).unwrap();
    let refs: Vec<&SubjectRecord> = subjects.iter().collect();
    let mut expected = BTreeSet::new();
    for s in &subjects {
        for start in (0..37 / 8).map(|w| w * 8) {
            expected.insert((s.subject_id, start as u32));
        }
    }
    let epoch = batches(&refs, 8, 5).unwrap();
    let seen: Vec<(u32, u32)> = epoch.iter().map(|b| (b[0].subject_id, b[0].time_index)).collect();
    assert_eq!(seen.len(), expected.len());
    assert_eq!(seen.iter().copied().collect::<BTreeSet<_>>(), expected);
    for b in &epoch {
        assert_eq!(b.len(), 8);
        assert!(b
            .windows(2)
            .all(|w| w[0].subject_id == w[1].subject_id && w[1].time_index == w[0].time_index + 1));
    }
    let again = batches(&refs, 8, 5).unwrap();
    assert!(epoch
        .iter()
        .zip(&again)
        .all(|(x, y)| x[0].time_index == y[0].time_index && x[0].subject_id == y[0].subject_id));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splits_partition_the_subjects(seed in any::<u64>(), per_level in 10usize..14) {
        let subjects = generate(&SyntheticSpec {
            seed,
            ..spec(per_level * 5, 4)
        })
        .unwrap();
        let sp = split(&subjects, seed).unwrap();
        prop_assert!(sp.train.is_disjoint(&sp.val));
        prop_assert!(sp.train.is_disjoint(&sp.test));
        prop_assert!(sp.val.is_disjoint(&sp.test));
        let all: BTreeSet<u32> = subjects.iter().map(|s| s.subject_id).collect();
        let union: BTreeSet<u32> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        prop_assert_eq!(union, all);
        prop_assert_eq!(split(&subjects, seed).unwrap(), sp);
    }
}
