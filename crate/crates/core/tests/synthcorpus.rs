mod common;

use advda_core::synthcorpus::*;
use advda_core::Tensor;
use nalgebra::{DMatrix, DVector};
use std::collections::HashSet;

fn small(seed: u64) -> CorpusSpec {
    CorpusSpec {
        frame_dim: 4,
        source_speakers: 6,
        source_utts_per_speaker: 3,
        target_speakers: 4,
        target_utts_per_speaker: 2,
        eval_speakers: 3,
        eval_utts_per_speaker: 2,
        min_frames: 5,
        max_frames: 9,
        ..CorpusSpec::reference(seed)
    }
}

#[test]
fn identity_shift_without_noise_repeats_the_speaker_mean() {
    let spec = CorpusSpec {
        channel_scale: 0.0,
        noise_scale: 0.0,
        target_noise_scale: 0.0,
        shift: ShiftSpec::Identity,
        ..small(1)
    };
    let c = generate_corpus(&spec).unwrap();
    for part in [&c.source, &c.target, &c.eval] {
        let labels = part.manifest.speaker_labels();
        let mut first: Vec<Option<Vec<f64>>> = vec![None; part.manifest.speaker_count()];
        for (r, &l) in part.records.iter().zip(&labels) {
            for i in 0..r.frames.rows() {
                let row = r.frames.row_slice(i).to_vec();
                match &first[l] {
                    None => first[l] = Some(row),
                    Some(f) => assert_eq!(&row, f),
                }
            }
        }
    }
}

#[test]
fn same_seed_gives_identical_archives() {
    let a = generate_corpus(&small(7)).unwrap();
    let b = generate_corpus(&small(7)).unwrap();
    for (x, y) in [(&a.source, &b.source), (&a.target, &b.target), (&a.eval, &b.eval)] {
        assert_eq!(encode_archive(&x.records).unwrap(), encode_archive(&y.records).unwrap());
        assert_eq!(x.manifest, y.manifest);
    }
    let c = generate_corpus(&small(8)).unwrap();
    assert_ne!(a.source.records, c.source.records);
}

fn frame_moments(records: &[FeatureRecord]) -> (DVector<f64>, DMatrix<f64>) {
    let m = records[0].frames.cols();
    let mut n = 0.0;
    let mut sum = DVector::zeros(m);
    let mut outer = DMatrix::zeros(m, m);
    for r in records {
        for i in 0..r.frames.rows() {
            let x = DVector::from_column_slice(r.frames.row_slice(i));
            sum += &x;
            outer.ger(1.0, &x, &x, 1.0);
            n += 1.0;
        }
    }
    let mean = sum / n;
    let cov = outer / n - &mean * mean.transpose();
    (mean, cov)
}

#[test]
fn frame_moments_match_the_generative_model() {
    let spec = CorpusSpec {
        frame_dim: 4,
        source_speakers: 5000,
        source_utts_per_speaker: 1,
        target_speakers: 5000,
        target_utts_per_speaker: 1,
        eval_speakers: 0,
        eval_utts_per_speaker: 0,
        min_frames: 20,
        max_frames: 20,
        speaker_scale: 0.5,
        channel_scale: 0.3,
        noise_scale: 1.5,
        target_noise_scale: 1.2,
        shift: ShiftSpec::Random {
            seed: 3,
            min_gain: 0.5,
            max_gain: 2.0,
            offset_norm: 2.0,
        },
        ..CorpusSpec::reference(11)
    };
    let c = generate_corpus(&spec).unwrap();
    let shift = spec.shift.resolve(4).unwrap();
    let within = |noise: f64| 0.5f64.powi(2) + 0.3f64.powi(2) + noise * noise;
    let cases = [
        (&c.source, DVector::zeros(4), DMatrix::identity(4, 4) * within(1.5)),
        (
            &c.target,
            shift.offset.clone(),
            &shift.matrix * shift.matrix.transpose() * within(1.2),
        ),
    ];
    for (part, mean, cov) in cases {
        let (m, s) = frame_moments(&part.records);
        let scale = cov.norm();
        assert!((&s - &cov).norm() <= 0.05 * scale, "covariance {s} vs {cov}");
        assert!((&m - &mean).norm() <= 0.05 * scale.sqrt(), "mean {m} vs {mean}");
    }
}

fn pooled_means(p: &Partition) -> Vec<DVector<f64>> {
    p.records
        .iter()
        .map(|r| {
            let t = &r.frames;
            DVector::from_fn(t.cols(), |j, _| {
                (0..t.rows()).map(|i| t.get(i, j)).sum::<f64>() / t.rows() as f64
            })
        })
        .collect()
}

#[test]
fn domains_are_linearly_separable() {
    let c = generate_corpus(&CorpusSpec::reference(5)).unwrap();
    let src = pooled_means(&c.source);
    let tgt = pooled_means(&c.target);
    let half = |v: &[DVector<f64>]| {
        (
            v.iter().step_by(2).cloned().collect::<Vec<_>>(),
            v.iter().skip(1).step_by(2).cloned().collect::<Vec<_>>(),
        )
    };
    let ((src_fit, src_test), (tgt_fit, tgt_test)) = (half(&src), half(&tgt));
    let mean = |v: &[DVector<f64>]| v.iter().fold(DVector::zeros(v[0].len()), |a, x| a + x) / v.len() as f64;
    let (ms, mt) = (mean(&src_fit), mean(&tgt_fit));
    let m = ms.len();
    let mut sw = DMatrix::identity(m, m) * 1e-6;
    for (set, mu) in [(&src_fit, &ms), (&tgt_fit, &mt)] {
        for x in set.iter() {
            let d = x - mu;
            sw.ger(1.0, &d, &d, 1.0);
        }
    }
    let w = sw.try_inverse().unwrap() * (&mt - &ms);
    let bias = -w.dot(&((&ms + &mt) * 0.5));
    let correct = src_test.iter().filter(|x| w.dot(x) + bias < 0.0).count()
        + tgt_test.iter().filter(|x| w.dot(x) + bias > 0.0).count();
    let acc = correct as f64 / (src_test.len() + tgt_test.len()) as f64;
    assert!(acc > 0.9, "held-out accuracy {acc}");
}

#[test]
fn archive_round_trip_is_bit_exact() {
    let c = generate_corpus(&small(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feats.xvf");
    write_archive(&path, &c.target.records).unwrap();
    assert_eq!(read_archive(&path).unwrap(), c.target.records);
    let empty = dir.path().join("empty.xvf");
    write_archive(&empty, &[]).unwrap();
    assert!(read_archive(&empty).unwrap().is_empty());
}

#[test]
fn truncated_archive_names_the_offset() {
    let c = generate_corpus(&small(2)).unwrap();
    let bytes = encode_archive(&c.source.records[..2]).unwrap();
    let cut = bytes.len() - 5;
    let err = decode_archive(&bytes[..cut]).unwrap_err();
    match err {
        CorpusError::Truncated { offset, .. } => assert!(offset < cut && offset > 16),
        other => panic!("unexpected {other}"),
    }
    assert!(err_text(&bytes[..cut]).contains("byte offset"));
    assert!(matches!(
        decode_archive(&bytes[..10]),
        Err(CorpusError::Truncated { offset: 8, .. })
    ));
    let mut bad = bytes.clone();
    bad[0] = b'Y';
    assert!(matches!(decode_archive(&bad), Err(CorpusError::Header(_))));
}

fn err_text(bytes: &[u8]) -> String {
    decode_archive(bytes).unwrap_err().to_string()
}

#[test]
fn duplicate_ids_are_rejected() {
    let r = FeatureRecord {
        id: "u1".into(),
        frames: Tensor::zeros(2, 3),
    };
    assert!(matches!(
        encode_archive(&[r.clone(), r.clone()]),
        Err(CorpusError::DuplicateId(_))
    ));
    let mut bytes = encode_archive(std::slice::from_ref(&r)).unwrap();
    let body = bytes[16..].to_vec();
    bytes.extend_from_slice(&body);
    bytes[8..16].copy_from_slice(&2u64.to_le_bytes());
    assert!(matches!(decode_archive(&bytes), Err(CorpusError::DuplicateId(id)) if id == "u1"));
}

#[test]
fn manifest_round_trip_and_consistency() {
    let c = generate_corpus(&small(4)).unwrap();
    let text = c.source.manifest.format();
    assert!(text.starts_with("utt_id\tspeaker_id\tdomain\tlanguage\tframes\n"));
    assert_eq!(Manifest::parse(&text).unwrap(), c.source.manifest);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("source.tsv");
    c.source.manifest.write(&path).unwrap();
    assert_eq!(Manifest::read(&path).unwrap(), c.source.manifest);
    c.source.manifest.check_archive(&c.source.records).unwrap();
    assert!(c.source.manifest.check_archive(&c.target.records).is_err());
    assert!(Manifest::parse("bad header\n").is_err());
}

#[test]
fn speaker_namespaces_are_disjoint_and_labels_preserved() {
    let spec = CorpusSpec {
        augment_copies: 2,
        augment_scale: 0.2,
        second_language: Some(SecondLanguage {
            language: "alt".into(),
            shift: ShiftSpec::Random {
                seed: 99,
                min_gain: 0.8,
                max_gain: 1.2,
                offset_norm: -1.0,
            },
        }),
        ..small(6)
    };
    let c = generate_corpus(&spec).unwrap();
    let speakers = |p: &Partition| {
        p.manifest
            .records
            .iter()
            .map(|r| r.speaker_id.clone())
            .collect::<HashSet<_>>()
    };
    let (s, t, e) = (speakers(&c.source), speakers(&c.target), speakers(&c.eval));
    assert!(s.is_disjoint(&t) && s.is_disjoint(&e) && t.is_disjoint(&e));
    for part in [&c.source, &c.target] {
        for r in &part.manifest.records {
            if let Some((orig, _)) = r.utt_id.rsplit_once("-aug") {
                let o = part.manifest.records.iter().find(|x| x.utt_id == orig).unwrap();
                assert_eq!(
                    (&o.speaker_id, o.domain, &o.language),
                    (&r.speaker_id, r.domain, &r.language)
                );
            }
        }
    }
    assert_eq!(c.eval.len(), 3 * 2);
    let langs: HashSet<&str> = c.target.manifest.records.iter().map(|r| r.language.as_str()).collect();
    assert_eq!(langs, HashSet::from(["tgt", "alt"]));
    assert!(c
        .source
        .manifest
        .records
        .iter()
        .all(|r| r.domain == Domain::Source && r.language == "src"));
}

#[test]
fn spec_round_trips_through_json_and_rejects_unknown_keys() {
    let spec = CorpusSpec::reference(3);
    let json = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<CorpusSpec>(&json).unwrap(), spec);
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["bogus"] = 1.into();
    assert!(serde_json::from_value::<CorpusSpec>(v).is_err());
}

#[test]
fn domain_set_carries_dense_labels() {
    let c = generate_corpus(&small(9)).unwrap();
    let d = c.source.domain_set(true);
    assert_eq!(d.utterances.len(), 18);
    assert_eq!(d.classes(), Some(6));
    assert!(c.target.domain_set(false).labels.is_none());
}
