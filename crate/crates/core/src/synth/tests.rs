use std::collections::HashMap;

use super::*;

fn small(rule: Rule) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        rule,
        len: 12,
        levels: 2,
        vocab_size: 16,
        symbols: 3,
        clip_frames: 3,
        clip_dim: 4,
        s3d_frames: 12,
        s3d_dim: 3,
        aux_frames: 12,
        aux_dim: 5,
        noise: 0.3,
        burst: 2,
        seed: 5,
    }
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn split_sizes_by_index() {
    assert_eq!(split_sizes(10), (8, 1, 1));
    assert_eq!(split_sizes(2000), (1600, 200, 200));
    let d = Dataset::generate(small(Rule::DeterministicMap), 8, 10).unwrap();
    assert_eq!((d.train.len(), d.valid.len(), d.test.len()), (8, 1, 1));
    let g = Generator::new(small(Rule::DeterministicMap), 8).unwrap();
    assert_eq!(d.valid[0], g.example(8).unwrap());
}

#[test]
fn same_seed_gives_byte_identical_dataset() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for rule in [Rule::DeterministicMap, Rule::NoisyMap, Rule::EventOnsets] {
        Dataset::generate(small(rule), 8, 20).unwrap().save(a.path()).unwrap();
        Dataset::generate(small(rule), 8, 20).unwrap().save(b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
        let back = Dataset::load(a.path()).unwrap();
        assert_eq!(back, Dataset::generate(small(rule), 8, 20).unwrap());
    }
    let other = SyntheticTaskSpec {
        seed: 6,
        ..small(Rule::DeterministicMap)
    };
    assert_ne!(
        Dataset::generate(other, 8, 20).unwrap(),
        Dataset::generate(small(Rule::DeterministicMap), 8, 20).unwrap()
    );
}

#[test]
fn deterministic_map_is_a_function_of_conditioning() {
    let g = Generator::new(small(Rule::DeterministicMap), 8).unwrap();
    let mut seen: HashMap<Vec<u64>, Codegram> = HashMap::new();
    let mut collisions = 0;
    for i in 0..200 {
        let ex = g.example(i).unwrap();
        assert_eq!(ex.codegram, ex.clean);
        let key: Vec<u64> = ex
            .bundle
            .streams
            .iter()
            .flat_map(|s| s.data.data().iter().map(|v| v.to_bits()))
            .collect();
        if let Some(prev) = seen.get(&key) {
            assert_eq!(prev, &ex.codegram);
            collisions += 1;
        }
        seen.insert(key, ex.codegram);
    }
    // 27 symbol sequences over 200 draws: collisions are guaranteed.
    assert!(collisions > 0);
}

#[test]
fn rows_follow_their_clip_frame() {
    let spec = SyntheticTaskSpec {
        rule: Rule::DeterministicMap,
        symbols: 16,
        ..SyntheticTaskSpec::default()
    };
    let g = Generator::new(spec.clone(), 8).unwrap();
    let table: Vec<Vec<u32>> = (0..spec.symbols)
        .map(|s| (0..spec.levels).map(|k| spec.token(s, k)).collect())
        .collect();
    for i in 0..20 {
        let ex = g.example(i).unwrap();
        let clip = ex.clip();
        for l in 0..spec.len {
            let f = frame_of_row(l, spec.len, spec.clip_frames);
            let sym = (0..spec.symbols)
                .find(|&s| clip.row(f) == g.tables().clip.row(s))
                .unwrap();
            assert_eq!(ex.codegram.row(l), table[sym].as_slice());
            assert!(ex.codegram.row(l).iter().all(|&t| (t as usize) < spec.vocab_size));
        }
        // The aligned resampling used by the model lands on the same frame.
        let aligned = resample_nn(clip, spec.len).unwrap();
        for l in 0..spec.len {
            assert_eq!(aligned.row(l), clip.row(frame_of_row(l, spec.len, spec.clip_frames)));
        }
    }
}

#[test]
fn noisy_map_corrupts_positions_independently() {
    let g = Generator::new(small(Rule::NoisyMap), 8).unwrap();
    let quiet = Generator::new(
        SyntheticTaskSpec {
            noise: 0.0,
            ..small(Rule::NoisyMap)
        },
        8,
    )
    .unwrap();
    let det = Generator::new(small(Rule::DeterministicMap), 8).unwrap();
    let (mut changed, mut total, mut split_cells) = (0usize, 0usize, 0usize);
    for i in 0..200 {
        let ex = g.example(i).unwrap();
        assert_eq!(ex.clean, det.example(i).unwrap().clean);
        assert_eq!(ex.bundle, det.example(i).unwrap().bundle);
        let q = quiet.example(i).unwrap();
        assert_eq!(q.codegram, q.clean);
        for (a, b) in ex.codegram.tokens().iter().zip(ex.clean.tokens()) {
            changed += usize::from(a != b);
            total += 1;
        }
        for l in 1..12 {
            let same_cell = frame_of_row(l, 12, 3) == frame_of_row(l - 1, 12, 3);
            split_cells += usize::from(same_cell && ex.codegram.get(l, 0) != ex.codegram.get(l - 1, 0));
        }
    }
    // A replacement can redraw the clean token, so the change rate is noise * (1 - 1/D).
    let rate = changed as f64 / total as f64;
    let want = 0.3 * (1.0 - 1.0 / 16.0);
    assert!((rate - want).abs() < 0.03, "{rate} vs {want}");
    assert!(split_cells > 0);
}

#[test]
fn event_bursts_start_at_onsets() {
    let spec = small(Rule::EventOnsets);
    let g = Generator::new(spec.clone(), 8).unwrap();
    let silence: Vec<u32> = (0..spec.levels).map(|k| spec.silence(k)).collect();
    let mut bursts = 0;
    for i in 0..50 {
        let ex = g.example(i).unwrap();
        let s3d = &ex.bundle.stream(S3D).unwrap().data;
        let clip = ex.clip();
        let onset = |l: usize| {
            let f = frame_of_row(l, spec.len, spec.clip_frames);
            let sym = (0..spec.symbols)
                .find(|&s| clip.row(f) == g.tables().clip.row(s))
                .unwrap();
            (s3d.get(l, 0) - g.tables().s3d.get(sym, 0) - 4.0).abs() < 1e-5
        };
        let mut since: Option<usize> = None;
        for l in 0..spec.len {
            if onset(l) {
                since = Some(0);
                bursts += 1;
            } else if let Some(s) = since.as_mut() {
                *s += 1;
            }
            let in_burst = since.is_some_and(|s| s < spec.burst);
            if !in_burst {
                assert_eq!(ex.codegram.row(l), silence.as_slice());
            }
        }
    }
    assert!(bursts > 20);
}

#[test]
fn beats_like_features() {
    let g = Generator::new(small(Rule::DeterministicMap), 8).unwrap();
    let ex = g.example(0).unwrap();
    assert_eq!((ex.aux.rows(), ex.aux.cols()), (12, 5));
    assert_eq!(ex.aux, g.beats_like(&ex.codegram).unwrap());
    let other = g.example(1).unwrap();
    assert_ne!(ex.codegram, other.codegram);
    assert_ne!(ex.aux, other.aux);
    let wrong = Codegram::new(2, CodebookSpec::new(3, 16, 8).unwrap(), vec![0; 6]).unwrap();
    assert!(g.beats_like(&wrong).is_err());
}

#[test]
fn waveform_shape() {
    let g = Generator::new(small(Rule::DeterministicMap), 8).unwrap();
    let cg = g.example(0).unwrap().codegram;
    let w = render_waveform(&cg, 44_100.0, 512);
    assert_eq!(w.len(), 12 * 512);
    assert!(w.iter().all(|v| v.is_finite() && v.abs() <= 2.0));
    assert_eq!(w, render_waveform(&cg, 44_100.0, 512));
}

#[test]
fn invalid_specs_rejected() {
    assert!(SyntheticTaskSpec {
        len: 0,
        ..small(Rule::NoisyMap)
    }
    .validate()
    .is_err());
    assert!(SyntheticTaskSpec {
        noise: 1.5,
        ..small(Rule::NoisyMap)
    }
    .validate()
    .is_err());
    assert!(SyntheticTaskSpec {
        s3d_frames: 5,
        ..small(Rule::EventOnsets)
    }
    .validate()
    .is_err());
    assert!(SyntheticTaskSpec {
        vocab_size: 1,
        ..small(Rule::NoisyMap)
    }
    .validate()
    .is_err());
    let text = "rule = \"noisy-map\"\nlen = 8\nbogus = 1\n";
    assert!(toml::from_str::<SyntheticTaskSpec>(text).is_err());
    let ok: SyntheticTaskSpec = toml::from_str("rule = \"event-onsets\"\nlen = 16\ns3d_frames = 16\n").unwrap();
    assert_eq!(ok.rule, Rule::EventOnsets);
    ok.validate().unwrap();
}
