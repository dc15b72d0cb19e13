use emflow_core::imageops::{montage_tiles, MontageParams, MontageStatus, DEFAULT_FAILURE_TOLERANCE};
use emflow_core::synth::{sweep_corpus, SweepTier, SWEEP_OVERLAP};

fn failures(min: u32, max: u32, corpus: &[(SweepTier, emflow_core::synth::TilePair)]) -> Vec<SweepTier> {
    let p = MontageParams {
        min_octave_px: min,
        max_octave_px: max,
        nominal_overlap_frac: SWEEP_OVERLAP,
        search_margin_frac: 0.1,
        ncc_accept_threshold: 0.2,
    };
    corpus
        .iter()
        .filter(|(_, pair)| {
            let tiles = [pair.a.clone(), pair.b.clone()];
            let out = montage_tiles(0, &tiles, (1, 2), &p, DEFAULT_FAILURE_TOLERANCE).unwrap();
            out.report.status == MontageStatus::Fail
        })
        .map(|(t, _)| *t)
        .collect()
}

fn count(v: &[SweepTier], t: SweepTier) -> usize {
    v.iter().filter(|&&x| x == t).count()
}

#[test]
fn tiers_respond_to_the_starting_level() {
    let corpus = sweep_corpus([6, 6, 6, 3], 2024);
    let coarse = failures(32, 512, &corpus);
    let mid = failures(128, 512, &corpus);
    let fine = failures(256, 512, &corpus);
    eprintln!("coarse {coarse:?}\nmid {mid:?}\nfine {fine:?}");
    for f in [&coarse, &mid, &fine] {
        assert_eq!(count(f, SweepTier::Easy), 0);
        assert_eq!(count(f, SweepTier::Floor), 3);
    }
    assert_eq!(fine.len(), 3);
    assert!(count(&coarse, SweepTier::Moderate) > count(&mid, SweepTier::Moderate));
    assert!(count(&mid, SweepTier::Severe) > 0);
}

#[test]
fn raising_max_never_adds_failures() {
    let corpus = sweep_corpus([3, 3, 3, 2], 7);
    let mut prev = usize::MAX;
    for max in [64, 128, 256, 512] {
        let n = failures(64, max, &corpus).len();
        assert!(n <= prev, "max {max}: {n} > {prev}");
        prev = n;
    }
}
