use std::f64::consts::PI;
use std::fs;

use breathprint::audio_io::{
    load_manifest, load_recording, read_feature_cache, save_recording, write_feature_cache,
    FeatureCache, MultichannelRecording, WavEncoding,
};
use breathprint::features::{ConfigMode, FeatureMatrix, FeatureSeries};
use breathprint::labels::Posture;
use breathprint::preprocess::{
    apply_fir, design_highpass_fir, segment_breaths, SegmentationParams,
};
use breathprint::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn float_wav_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let nch = rng.gen_range(1..=4);
        let len = rng.gen_range(1..400);
        let channels: Vec<Vec<f64>> = (0..nch)
            .map(|_| {
                (0..len)
                    .map(|_| rng.gen_range(-1.0f32..1.0) as f64)
                    .collect()
            })
            .collect();
        let rec = MultichannelRecording::new(channels, 16_000).unwrap();
        save_recording(&path, &rec, WavEncoding::Float32).unwrap();
        let back = load_recording(&path).unwrap();
        assert_eq!(back, rec);
    }
}

/// Writes the manifest and touches every recording it lists.
fn write_manifest(dir: &std::path::Path, text: &str) -> std::path::PathBuf {
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        fs::write(dir.join(line.split(',').next().unwrap()), b"").unwrap();
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn manifest_rows_and_label_tables() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(
        dir.path(),
        "#speakers=a|b;postures=standing|lying\na.wav,a,standing\nb.wav,b,lying,s1\n",
    );
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.entries.len(), 2);
    assert_eq!(m.entries[1].posture, Posture::Lying);
    assert_eq!(m.entries[1].session.as_deref(), Some("s1"));
    assert_eq!(m.entries[0].recording_path, dir.path().join("a.wav"));

    let bad = write_manifest(
        dir.path(),
        "#speakers=a;postures=standing\na.wav,a,sitting_on_floor\n",
    );
    assert!(matches!(
        load_manifest(&bad),
        Err(Error::Manifest { line: 2, .. })
    ));

    let speakers: Vec<String> = (0..20).map(|s| format!("p{s:02}")).collect();
    let postures: Vec<&str> = Posture::ALL.iter().map(|p| p.as_str()).collect();
    let mut text = format!(
        "#speakers={};postures={}\n",
        speakers.join("|"),
        postures.join("|")
    );
    for s in &speakers {
        for p in &postures {
            text.push_str(&format!("{s}_{p}.wav,{s},{p}\n"));
        }
    }
    let m = load_manifest(write_manifest(dir.path(), &text)).unwrap();
    assert_eq!((m.speakers.len(), m.postures.len()), (20, 5));
    assert_eq!(m.entries.len(), 100);
}

#[test]
fn feature_cache_round_trips_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let speakers = vec!["a".to_string(), "b".to_string()];
    let series: Vec<FeatureSeries> = (0..50)
        .map(|i| {
            let n = rng.gen_range(1..60);
            FeatureSeries {
                instance_id: i,
                speaker: speakers[i as usize % 2].clone(),
                posture: Posture::ALL[i as usize % 5],
                mode: ConfigMode::AllShuffled,
                origin_channel: None,
                permutation: Some([3, 1, 0, 2]),
                matrix: FeatureMatrix::from_vec(36, n, (0..36 * n).map(|_| rng.gen()).collect())
                    .unwrap(),
            }
        })
        .collect();
    let cache = FeatureCache {
        mode: ConfigMode::AllShuffled,
        k: 9,
        speakers,
        series,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bhf");
    write_feature_cache(&cache, &path).unwrap();
    assert_eq!(&fs::read(&path).unwrap()[..4], b"BHF1");
    assert_eq!(read_feature_cache(&path).unwrap(), cache);
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[test]
fn highpass_response_and_low_tone_rejection() {
    let fs = 48_000.0;
    let fir = design_highpass_fir(4097, 70.0, fs).unwrap();
    let n = fir.len();
    assert!((0..n).all(|i| fir.taps[i] == fir.taps[n - 1 - i]));
    // direct DFT of the taps at a single frequency
    let gain = |f: f64| {
        let w = 2.0 * PI * f / fs;
        let (re, im) = fir
            .taps
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (i, h)| {
                (re + h * (w * i as f64).cos(), im - h * (w * i as f64).sin())
            });
        (re * re + im * im).sqrt()
    };
    assert!(gain(0.0) < 1e-6);
    for f in [200.0, 250.0, 1000.0, 5000.0, 23_000.0] {
        assert!((gain(f) - 1.0).abs() <= 0.01, "{f} Hz: {}", gain(f));
    }

    let tone: Vec<f64> = (0..96_000)
        .map(|t| (2.0 * PI * 10.0 * t as f64 / fs).sin())
        .collect();
    let out = apply_fir(&fir, &tone).unwrap();
    let (lo, hi) = (n, tone.len() - n);
    assert!(rms(&out[lo..hi]) < 0.01 * rms(&tone[lo..hi]));
}

#[test]
fn segmentation_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fs = 8000.0;
    let x: Vec<f64> = (0..24_000)
        .map(|t| {
            let burst = (8000..12_000).contains(&t) || (16_000..18_000).contains(&t);
            rng.gen_range(-1.0..1.0) * if burst { 1.0 } else { 0.01 }
        })
        .collect();
    let p = SegmentationParams::default();
    let a = segment_breaths(&x, fs, &p).unwrap();
    assert_eq!(a, segment_breaths(&x, fs, &p).unwrap());
    assert_eq!(a.len(), 2);
}
