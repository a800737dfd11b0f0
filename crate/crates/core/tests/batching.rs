use std::collections::{BTreeMap, BTreeSet};

use abc_core::batching::{build_finetune_batches, build_pretrain_batches};
use abc_core::corpus::{generate_world, Corpus, Split, WorldConfig};
use abc_core::mining::{MinedDataset, MinedRecord};

fn world() -> Corpus {
    generate_world(&WorldConfig {
        n_images: 48,
        n_bench_images: 8,
        n_aspects: 4,
        salient_aspects: 2,
        values_per_aspect: 10,
        value_len: 2,
        paraphrases_per_aspect: 3,
        paraphrase_len: 2,
        noise_tokens_per_image: 2,
        noise_vocab: 6,
        seed: 3,
    })
    .unwrap()
}

/// Negatives: the image's other-aspect captions plus captions of neighbours.
fn fake_mined(c: &Corpus, k: usize) -> MinedDataset {
    let train = c.train_images();
    let records = train
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut neg: Vec<String> = (1..4).map(|a| c.caption_for(&img.id, a).unwrap().id.clone()).collect();
            let mut j = 1;
            while neg.len() < k {
                let other = &train[(i + j) % train.len()].id;
                neg.push(c.caption_for(other, j % 4).unwrap().id.clone());
                j += 1;
            }
            MinedRecord {
                image_id: img.id.clone(),
                pos: c.caption_for(&img.id, 0).unwrap().id.clone(),
                neg_scores: vec![0.0; neg.len()],
                neg,
                pos_score: 1.0,
            }
        })
        .collect();
    MinedDataset { records }
}

#[test]
fn one_negative_per_query_when_m_is_twice_n() {
    let c = world();
    let mined = fake_mined(&c, 7);
    let mut s = build_pretrain_batches(&c, &mined.records, 2, 4, 1).unwrap();
    let b = s.next_batch().unwrap();
    assert_eq!(b.layout.negatives_per_query(), vec![1, 1]);
    assert_eq!(b.candidates.len(), 4);
}

#[test]
fn paper_ratio_gives_seven_negatives() {
    let c = world();
    let mined = fake_mined(&c, 7);
    let mut s = build_pretrain_batches(&c, &mined.records, 4, 32, 1).unwrap();
    let b = s.next_batch().unwrap();
    assert_eq!(b.layout.negatives_per_query(), vec![7; 4]);
    b.layout.validate_pretrain().unwrap();
}

#[test]
fn pretrain_candidates_are_positives_and_owned_negatives() {
    let c = world();
    let mined = fake_mined(&c, 7);
    let by_image: BTreeMap<&str, &MinedRecord> = mined.records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let s = build_pretrain_batches(&c, &mined.records, 4, 16, 9).unwrap();
    let mut seen = BTreeSet::new();
    let batches = s.epoch_batches(0).unwrap();
    for b in &batches {
        assert_eq!(b.candidate_ids.len(), 16);
        for (q, img) in b.image_ids.iter().enumerate() {
            assert!(seen.insert(img.clone()), "image repeated within an epoch");
            let r = by_image[img.as_str()];
            assert_eq!(b.candidate_ids[b.layout.pos_index[q]], r.pos);
            assert_eq!(b.candidate_ids.iter().filter(|c| **c == r.pos).count(), 1);
            for (j, o) in b.layout.owner.iter().enumerate() {
                if *o == Some(q) {
                    assert!(r.neg.contains(&b.candidate_ids[j]));
                }
            }
        }
    }
    // with drop-last, at most N-1 images plus deferred clashes are skipped
    assert!(seen.len() >= 40 - 4 * 2, "{}", seen.len());
}

#[test]
fn same_seed_same_stream() {
    let c = world();
    let mined = fake_mined(&c, 7);
    let mut a = build_pretrain_batches(&c, &mined.records, 4, 16, 5).unwrap();
    let mut b = build_pretrain_batches(&c, &mined.records, 4, 16, 5).unwrap();
    for _ in 0..25 {
        assert_eq!(a.next_batch().unwrap(), b.next_batch().unwrap());
    }
}

#[test]
fn bad_geometry_rejected() {
    let c = world();
    let mined = fake_mined(&c, 3);
    assert!(build_pretrain_batches(&c, &mined.records, 4, 18, 0).is_err());
    assert!(build_pretrain_batches(&c, &mined.records, 4, 32, 0).is_err());
}

#[test]
fn finetune_groups_share_an_image() {
    let c = world();
    let mut s = build_finetune_batches(&c, 2, 4, 32, 7).unwrap();
    let b = s.next_batch().unwrap();
    assert_eq!(b.queries.len(), 8);
    assert_eq!(b.candidates.len(), 8);
    assert!(b.stop_gradient);
    for (q, img) in b.image_ids.iter().enumerate() {
        let ins = c.instruction(&b.instruction_ids[q]).unwrap();
        assert_eq!(ins.split, Split::Train);
        let pos = c.caption(&b.candidate_ids[b.layout.pos_index[q]]).unwrap();
        assert_eq!((pos.image_id.as_str(), pos.aspect), (img.as_str(), ins.aspect));
        let siblings = b
            .candidate_ids
            .iter()
            .filter(|id| c.caption(id).unwrap().image_id == *img && **id != pos.id)
            .count();
        assert_eq!(siblings, 3);
    }
}

#[test]
fn finetune_aspects_within_group_are_distinct() {
    let c = world();
    let s = build_finetune_batches(&c, 4, 3, 32, 2).unwrap();
    for b in s.epoch_batches(0).unwrap() {
        for group in b.instruction_ids.chunks(3) {
            let aspects: BTreeSet<usize> = group.iter().map(|i| c.instruction(i).unwrap().aspect).collect();
            assert_eq!(aspects.len(), 3);
        }
    }
}

#[test]
fn finetune_group_size_limits() {
    let c = world();
    assert!(build_finetune_batches(&c, 2, 5, 32, 0).is_err());
    let mut s = build_finetune_batches(&c, 2, 1, 32, 0).unwrap();
    assert_eq!(s.next_batch().unwrap().queries.len(), 2);
}
