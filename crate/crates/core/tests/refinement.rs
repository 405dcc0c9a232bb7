//! Corrective generation, micro-batch construction and refinement dynamics.

use std::collections::HashSet;

use recall_forge::calibration::protocol::Verdict;
use recall_forge::calibration::{calibrate, CalibrationConfig, CorrectiveTriplet, MockOracle};
use recall_forge::miner::{MiningReport, QueryMining};
use recall_forge::numeric::LossConfig;
use recall_forge::pipeline::{evaluate, initial_params, EvalSection};
use recall_forge::trainer::{micro_groups, refine, train_base, BatchStream, Profile, TrainConfig};
use recall_forge::world::{apply_edits, Grammar, World, WorldSpec};

fn world() -> World {
    World::generate(&WorldSpec::default()).unwrap()
}

/// The first `per_query` subset distractors of each training query as mined informatives.
fn mining(world: &World, per_query: usize) -> MiningReport {
    let records = world
        .train_queries()
        .iter()
        .map(|q| QueryMining {
            query_id: q.query_id.clone(),
            gt_rank: per_query + 1,
            informative: world.subset(&q.query_id).unwrap().candidates[1..=per_query].to_vec(),
        })
        .collect();
    MiningReport { records }
}

fn correctives(world: &World) -> Vec<CorrectiveTriplet> {
    let cal = calibrate(&MockOracle::exact(world), world, &mining(world, 2), &CalibrationConfig::default()).unwrap();
    assert!(cal.rejected.is_empty() && cal.discarded.is_empty());
    cal.kept
}

fn stage_configs() -> (TrainConfig, TrainConfig) {
    Profile::Fashioniq.stages(64, 0)
}

#[test]
fn corrected_instructions_are_minimal_edits() {
    let w = world();
    let kept = correctives(&w);
    assert!(kept.len() >= 1000);
    let g = w.grammar();
    for c in &kept {
        let parent = w.queries.iter().find(|q| q.query_id == c.parent_query_id).unwrap();
        let reference = &w.item(&c.reference_id).unwrap().attributes;
        let informative = &w.item(&c.informative_id).unwrap().attributes;
        let edits = g.parse(&c.corrected_instruction).unwrap();

        // describes the informative exactly, touching only slots that change
        assert_eq!(&apply_edits(reference, &edits), informative);
        assert!(edits.iter().all(|e| reference[e.slot] != e.value));
        let slots: HashSet<usize> = edits.iter().map(|e| e.slot).collect();
        assert_eq!(slots.len(), edits.len());

        // valid intents survive verbatim, violated ones do not
        let corrected = Grammar::intents(&c.corrected_instruction);
        let original = Grammar::intents(&parent.instruction);
        assert_eq!(c.verification_trace.len(), original.len());
        for t in &c.verification_trace {
            assert_eq!(corrected.contains(&t.intent), t.verdict == Verdict::Valid, "{}", t.intent);
        }
        let valid = c.verification_trace.iter().filter(|t| t.verdict == Verdict::Valid).count();
        assert_eq!(c.edited_intents().len(), corrected.len() - valid);
    }
}

#[test]
fn calibration_order_and_partition_ignore_concurrency() {
    let w = world();
    let report = mining(&w, 3);
    let oracle = MockOracle::noisy(&w, 0.2, 3).unwrap();
    let run = |threads| {
        let cfg = CalibrationConfig { max_concurrency: threads, ..CalibrationConfig::default() };
        calibrate(&oracle, &w, &report, &cfg).unwrap()
    };
    let serial = run(1);
    let parallel = run(8);
    assert_eq!(serial, parallel);

    let s = serial.summary;
    assert_eq!(s.requested, report.mined_instance_count());
    assert_eq!(s.generated + s.discarded, s.requested);
    assert_eq!(s.kept + s.rejected, s.generated);
    assert!(s.rejected > 0 && s.kept > 0);

    // kept and rejected each follow mining order
    let position = |c: &CorrectiveTriplet| {
        report
            .records
            .iter()
            .flat_map(|r| r.informative.iter().map(move |i| (r.query_id.as_str(), i.as_str())))
            .position(|(q, i)| q == c.parent_query_id && i == c.informative_id)
            .unwrap()
    };
    for part in [&serial.kept, &serial.rejected] {
        let pos: Vec<usize> = part.iter().map(position).collect();
        assert!(pos.windows(2).all(|p| p[0] < p[1]));
    }
}

#[test]
fn micro_batches_keep_groups_contiguous() {
    let w = world();
    let kept = correctives(&w);
    let originals = w.train_queries();
    let groups = micro_groups(originals, &kept).unwrap();
    let (_, cfg) = stage_configs();
    let slots = (cfg.batch_size as f64 * cfg.micro_group_fraction).round() as usize;
    let mut stream = BatchStream::new(originals, &groups, &cfg).unwrap();
    let mut grouped = 0;
    for _ in 0..200 {
        let batch = stream.next_batch();
        assert!(batch.len() <= cfg.batch_size);
        let targets: HashSet<&str> = batch.iter().map(|e| e.triplet.target_id.as_str()).collect();
        assert_eq!(targets.len(), batch.len(), "duplicate target in batch");

        let group_part = batch.iter().take_while(|e| e.parent.is_some() || !e.negatives.is_empty()).count();
        assert!(group_part <= slots);
        for (pos, e) in batch.iter().enumerate() {
            match e.parent {
                Some(head) => {
                    assert!(head < pos);
                    assert!(batch[head].negatives.contains(&pos));
                    assert!(e.negatives.is_empty());
                    assert_eq!(e.triplet.reference_id, batch[head].triplet.reference_id);
                }
                None if !e.negatives.is_empty() => {
                    let expected: Vec<usize> = (pos + 1..pos + 1 + e.negatives.len()).collect();
                    assert_eq!(e.negatives, expected);
                    assert!(e.negatives.iter().all(|&n| batch[n].parent == Some(pos)));
                    grouped += 1;
                }
                None => {}
            }
        }
    }
    assert!(grouped > 200, "{grouped} groups over 200 batches");
}

#[test]
fn base_training_improves_retrieval() {
    let w = world();
    let (base, _) = stage_configs();
    let init = initial_params(&w, 0).unwrap();
    let eval = EvalSection::default();
    let before = evaluate(&init, &w, w.test_queries(), &eval).unwrap();
    let (trained, log) = train_base(init, &w, w.train_queries(), &base).unwrap();
    let after = evaluate(&trained, &w, w.test_queries(), &eval).unwrap();
    assert_eq!(log.records.len(), base.steps);
    assert!(after.recall_at[&1] > before.recall_at[&1], "{before:?} -> {after:?}");
    assert!(after.recall_at[&10] > before.recall_at[&10] + 0.5, "{before:?} -> {after:?}");
    let head: f64 = log.records[..20].iter().map(|r| r.loss_total).sum();
    let tail: f64 = log.records[log.records.len() - 20..].iter().map(|r| r.loss_total).sum();
    assert!(tail < head);
}

#[test]
fn refining_without_correctives_continues_base_training() {
    let w = world();
    let (base, refine_cfg) = stage_configs();
    let init = initial_params(&w, 0).unwrap();
    let (p, _) = train_base(init, &w, w.train_queries(), &TrainConfig { steps: 20, ..base }).unwrap();
    let cfg = TrainConfig { steps: 30, ..refine_cfg };
    let (refined, rlog) = refine(p.clone(), &w, w.train_queries(), &[], &cfg).unwrap();
    let (continued, clog) = train_base(p, &w, w.train_queries(), &cfg).unwrap();
    assert_eq!(refined, continued);
    assert_eq!(rlog, clog);
    assert!(rlog.records.iter().all(|r| r.loss_triplet == 0.0));
}

#[test]
fn triplet_term_changes_nothing_before_its_first_active_hinge() {
    let w = world();
    let kept = correctives(&w);
    let (base, refine_cfg) = stage_configs();
    let init = initial_params(&w, 0).unwrap();
    let (p, _) = train_base(init, &w, w.train_queries(), &TrainConfig { steps: 50, ..base }).unwrap();

    let run = |lambda: f64| {
        let cfg = TrainConfig {
            steps: 40,
            loss: LossConfig { lambda, ..refine_cfg.loss },
            ..refine_cfg
        };
        refine(p.clone(), &w, w.train_queries(), &kept, &cfg).unwrap().1
    };
    let hybrid = run(0.3);
    let infonce_only = run(0.0);
    assert_eq!(infonce_only.records.len(), 40);
    assert!(infonce_only.records.iter().all(|r| r.loss_total.to_bits() == r.loss_infonce.to_bits()));

    // identical up to and including the first step with an active hinge, then apart
    let first = hybrid.records.iter().position(|r| r.loss_triplet > 0.0).expect("hinge never active");
    for s in 0..=first {
        assert_eq!(hybrid.records[s].loss_infonce.to_bits(), infonce_only.records[s].loss_infonce.to_bits());
        assert_eq!(hybrid.records[s].loss_triplet.to_bits(), infonce_only.records[s].loss_triplet.to_bits());
    }
    assert_ne!(hybrid.records[first + 1].loss_infonce, infonce_only.records[first + 1].loss_infonce);
}
